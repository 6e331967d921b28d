//! Array files in the `.npy` format and JSON helpers.
//!
//! Everything is stored as little-endian `f64` in C order. Complex arrays
//! carry a trailing axis of size 2 holding `(re, im)`; masks are 0/1.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use npyz::WriterBuilder;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ComplexImage, RealImage};
use crate::lambda_maps::cnn::{layer_shapes, CnnParams, ConvLayer, LAYER_NAMES};
use crate::operators::{FeatureMaps, FilterBank, SamplingMask};
use crate::solvers::LambdaMaps;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Serializes an `f64` array of the given shape.
pub fn encode(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(format_err(format!("shape {shape:?} does not hold {} values", data.len())));
    }
    let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    let mut buf = Vec::new();
    let mut w = npyz::WriteOptions::new().default_dtype().shape(&dims).writer(&mut buf).begin_nd()?;
    w.extend(data.iter().copied())?;
    w.finish()?;
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let npy = npyz::NpyFile::new(bytes)?;
    if npy.order() != npyz::Order::C {
        return Err(format_err("only C-ordered arrays are supported"));
    }
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let data: Vec<f64> = npy.into_vec().map_err(|e| format_err(e.to_string()))?;
    Ok((shape, data))
}

pub fn write_array(path: impl AsRef<Path>, shape: &[usize], data: &[f64]) -> Result<()> {
    let bytes = encode(shape, data)?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_array(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let path = path.as_ref();
    decode(&fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => format_err(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn expect_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(format_err(format!("{what} needs rank {rank}, found shape {shape:?}")));
    }
    Ok(())
}

fn interleave(x: &ComplexImage, out: &mut Vec<f64>) {
    for (re, im) in x.re().iter().zip(x.im()) {
        out.push(*re);
        out.push(*im);
    }
}

fn deinterleave(h: usize, w: usize, data: &[f64]) -> Result<ComplexImage> {
    let re = data.iter().step_by(2).copied().collect();
    let im = data.iter().skip(1).step_by(2).copied().collect();
    ComplexImage::new(h, w, re, im)
}

pub fn write_complex(path: impl AsRef<Path>, x: &ComplexImage) -> Result<()> {
    let (h, w) = x.dims();
    let mut data = Vec::with_capacity(2 * h * w);
    interleave(x, &mut data);
    write_array(path, &[h, w, 2], &data)
}

pub fn read_complex(path: impl AsRef<Path>) -> Result<ComplexImage> {
    let (shape, data) = read_array(path)?;
    expect_rank(&shape, 3, "complex image")?;
    if shape[2] != 2 {
        return Err(format_err(format!("complex image needs a trailing axis of 2, found {shape:?}")));
    }
    deinterleave(shape[0], shape[1], &data)
}

pub fn write_real(path: impl AsRef<Path>, x: &RealImage) -> Result<()> {
    let (h, w) = x.dims();
    write_array(path, &[h, w], x.values())
}

pub fn read_real(path: impl AsRef<Path>) -> Result<RealImage> {
    let (shape, data) = read_array(path)?;
    expect_rank(&shape, 2, "real image")?;
    RealImage::new(shape[0], shape[1], data)
}

pub fn write_mask(path: impl AsRef<Path>, m: &SamplingMask) -> Result<()> {
    let (h, w) = m.dims();
    let data: Vec<f64> = m.keep().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_array(path, &[h, w], &data)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<SamplingMask> {
    let (shape, data) = read_array(path)?;
    expect_rank(&shape, 2, "sampling mask")?;
    if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(format_err(format!("sampling mask has non-binary entry {v}")));
    }
    SamplingMask::new(shape[0], shape[1], data.iter().map(|&v| v == 1.0).collect())
}

/// `K x k_f x k_f`.
pub fn write_bank(path: impl AsRef<Path>, d: &FilterBank) -> Result<()> {
    let kf = d.kernel_size();
    write_array(path, &[d.len(), kf, kf], &d.to_flat())
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<FilterBank> {
    let (shape, data) = read_array(path)?;
    expect_rank(&shape, 3, "filter bank")?;
    if shape[1] != shape[2] {
        return Err(format_err(format!("filters must be square, found {shape:?}")));
    }
    let filters = data.chunks(shape[1] * shape[2]).map(<[f64]>::to_vec).collect();
    FilterBank::new(shape[1], filters)
}

/// `K x h x w`.
pub fn write_lambda(path: impl AsRef<Path>, maps: &LambdaMaps) -> Result<()> {
    write_lambda_ordered(path, maps, &(0..maps.len()).collect::<Vec<_>>())
}

/// Writes the planes in the given channel order.
pub fn write_lambda_ordered(path: impl AsRef<Path>, maps: &LambdaMaps, order: &[usize]) -> Result<()> {
    let (h, w) = maps.dims();
    let data: Vec<f64> = order.iter().flat_map(|&k| maps.map(k).values().iter().copied()).collect();
    write_array(path, &[order.len(), h, w], &data)
}

pub fn read_lambda(path: impl AsRef<Path>, bound: f64) -> Result<LambdaMaps> {
    let (shape, data) = read_array(path)?;
    expect_rank(&shape, 3, "lambda maps")?;
    let planes = data
        .chunks(shape[1] * shape[2])
        .map(|c| RealImage::new(shape[1], shape[2], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    LambdaMaps::new(planes, bound)
}

/// `K x h x w x 2`.
pub fn write_codes(path: impl AsRef<Path>, s: &FeatureMaps) -> Result<()> {
    let (h, w) = s.dims();
    let mut data = Vec::with_capacity(2 * s.len() * h * w);
    for m in s.maps() {
        interleave(m, &mut data);
    }
    write_array(path, &[s.len(), h, w, 2], &data)
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<FeatureMaps> {
    let (shape, data) = read_array(path)?;
    expect_rank(&shape, 4, "code maps")?;
    if shape[3] != 2 {
        return Err(format_err(format!("code maps need a trailing axis of 2, found {shape:?}")));
    }
    let maps = data
        .chunks(2 * shape[1] * shape[2])
        .map(|c| deinterleave(shape[1], shape[2], c))
        .collect::<Result<Vec<_>>>()?;
    FeatureMaps::new(maps)
}

/// Flat parameter or state vector.
pub fn write_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    write_array(path, &[v.len()], v)
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let (shape, data) = read_array(path)?;
    expect_rank(&shape, 1, "vector")?;
    Ok(data)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: String,
    pub bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkManifest {
    pub filters: usize,
    pub bound: f64,
    pub layers: Vec<LayerEntry>,
}

/// Writes `manifest.json` plus one weight (`out x in x 3 x 3`) and one bias
/// file per layer into `dir`.
pub fn write_network(dir: impl AsRef<Path>, p: &CnnParams) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (name, l) in LAYER_NAMES.iter().zip(p.layers()) {
        let entry = LayerEntry {
            name: name.to_string(),
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            weights: format!("{name}_weight.npy"),
            bias: format!("{name}_bias.npy"),
        };
        write_array(dir.join(&entry.weights), &[l.out_channels, l.in_channels, 3, 3], &l.weights)?;
        write_vector(dir.join(&entry.bias), &l.bias)?;
        layers.push(entry);
    }
    write_json(dir.join("manifest.json"), &NetworkManifest { filters: p.filters(), bound: p.bound(), layers })
}

pub fn read_network(dir: impl AsRef<Path>) -> Result<CnnParams> {
    let dir = dir.as_ref();
    let manifest: NetworkManifest = read_json(dir.join("manifest.json"))?;
    let expected = layer_shapes(manifest.filters);
    if manifest.layers.len() != expected.len() {
        return Err(format_err(format!("network manifest lists {} layers, expected 5", manifest.layers.len())));
    }
    let mut layers = Vec::with_capacity(5);
    for (entry, (cin, cout)) in manifest.layers.iter().zip(expected) {
        let (shape, weights) = read_array(dir.join(&entry.weights))?;
        if shape != [cout, cin, 3, 3] || entry.in_channels != cin || entry.out_channels != cout {
            return Err(format_err(format!("layer {} has shape {shape:?}, expected [{cout}, {cin}, 3, 3]", entry.name)));
        }
        let bias = read_vector(dir.join(&entry.bias))?;
        layers.push(ConvLayer { in_channels: cin, out_channels: cout, weights, bias });
    }
    CnnParams::new(manifest.filters, manifest.bound, layers)
}
