//! On-disk datasets: `<split>/sample_XXXX/{target,y,mask}.npy` plus
//! `manifest.json`.

use std::fs;
use std::path::Path;

use convsynth::io::{read_complex, read_json, read_mask, write_complex, write_json, write_mask};
use convsynth::simulate::{make_phantom, simulate_acquisition, AcquisitionSpec, MaskKind};
use convsynth::training::Sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{SimulateSection, SPLITS};
use crate::error::{config_error, io_context, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub sigma: f64,
    pub phantom_seed: u64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub ellipses: usize,
    pub keep_fraction: f64,
    pub mask_kind: MaskKind,
    pub seed: u64,
    pub train: Vec<SampleEntry>,
    pub val: Vec<SampleEntry>,
    pub test: Vec<SampleEntry>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> CliResult<&[SampleEntry]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(config_error(format!("unknown split {name:?}"))),
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for one stream of one sample.
pub fn sample_seed(base: u64, split: usize, index: usize, stream: u64) -> u64 {
    splitmix(splitmix(splitmix(base ^ split as u64) ^ index as u64) ^ stream)
}

fn entries(s: &SimulateSection, split: usize, count: usize) -> Vec<SampleEntry> {
    (0..count)
        .map(|i| SampleEntry {
            id: format!("sample_{i:04}"),
            sigma: s.sigmas[i % s.sigmas.len()],
            phantom_seed: sample_seed(s.seed, split, i, 0),
            noise_seed: sample_seed(s.seed, split, i, 1),
        })
        .collect()
}

pub fn simulate(s: &SimulateSection, out: &Path) -> CliResult<Manifest> {
    let manifest = Manifest {
        version: 1,
        height: s.size[0],
        width: s.size[1],
        ellipses: s.ellipses,
        keep_fraction: s.keep_fraction,
        mask_kind: s.mask_kind,
        seed: s.seed,
        train: entries(s, 0, s.train),
        val: entries(s, 1, s.val),
        test: entries(s, 2, s.test),
    };
    for name in SPLITS {
        let split_dir = out.join(name);
        manifest.split(name)?.par_iter().try_for_each(|e| -> CliResult<()> {
            let dir = split_dir.join(&e.id);
            fs::create_dir_all(&dir).map_err(io_context(format!("cannot create {}", dir.display())))?;
            let target = make_phantom((s.size[0], s.size[1]), s.ellipses, e.phantom_seed)?;
            let spec = AcquisitionSpec { sigma: e.sigma, keep_fraction: s.keep_fraction, mask_kind: s.mask_kind, seed: e.noise_seed };
            let (y, mask) = simulate_acquisition(&target, &spec)?;
            write_complex(dir.join("target.npy"), &target)?;
            write_complex(dir.join("y.npy"), &y)?;
            write_mask(dir.join("mask.npy"), &mask)?;
            Ok(())
        })?;
    }
    write_json(out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dataset: &Path) -> CliResult<Manifest> {
    let path = dataset.join("manifest.json");
    if !path.exists() {
        return Err(config_error(format!("no dataset manifest at {}", path.display())));
    }
    Ok(read_json(path)?)
}

pub fn load_sample(dataset: &Path, split: &str, entry: &SampleEntry) -> CliResult<Sample> {
    let dir = dataset.join(split).join(&entry.id);
    Ok(Sample {
        target: read_complex(dir.join("target.npy"))?,
        y: read_complex(dir.join("y.npy"))?,
        mask: read_mask(dir.join("mask.npy"))?,
    })
}

pub fn load_split(dataset: &Path, manifest: &Manifest, split: &str) -> CliResult<Vec<Sample>> {
    manifest.split(split)?.par_iter().map(|e| load_sample(dataset, split, e)).collect()
}
