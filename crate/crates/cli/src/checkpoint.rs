//! Training checkpoints: model, optimizer state, loss history and the
//! training section that produced them.

use std::fs;
use std::path::Path;

use convsynth::io::{read_json, write_json, write_network};
use convsynth::lambda_maps::MapSource;
use convsynth::operators::FilterBank;
use convsynth::training::{AdamState, LossRecord, Model};
use serde::{Deserialize, Serialize};

use crate::config::TrainSection;
use crate::error::{config_error, io_context, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct State {
    pub version: u32,
    pub epoch: usize,
    pub filters: usize,
    pub kernel_size: usize,
    pub best_val_loss: Option<f64>,
    pub val_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: State,
    pub model: Model,
    pub adam: AdamState,
    pub history: Vec<LossRecord>,
    pub train: TrainSection,
}

impl Checkpoint {
    /// Rejects a checkpoint whose filter count or kernel differs from `bank`.
    pub fn check_bank(&self, bank: &FilterBank) -> CliResult<()> {
        let net = match &self.model.source {
            MapSource::Network(p) => Some(p.filters()),
            _ => None,
        };
        if self.state.filters != bank.len() || net.is_some_and(|k| k != bank.len()) || self.state.kernel_size != bank.kernel_size() {
            return Err(convsynth::Error::DimensionMismatch(format!(
                "checkpoint was trained with {} filters of size {}, dictionary has {} of size {}",
                self.state.filters,
                self.state.kernel_size,
                bank.len(),
                bank.kernel_size()
            ))
            .into());
        }
        Ok(())
    }
}

pub fn save(dir: &Path, c: &Checkpoint) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_context(format!("cannot create {}", dir.display())))?;
    write_json(dir.join("state.json"), &c.state)?;
    write_json(dir.join("model.json"), &c.model)?;
    write_json(dir.join("adam.json"), &c.adam)?;
    write_json(dir.join("history.json"), &c.history)?;
    write_json(dir.join("train.json"), &c.train)?;
    if let MapSource::Network(p) = &c.model.source {
        write_network(dir.join("network"), p)?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> CliResult<Checkpoint> {
    if !dir.join("state.json").exists() {
        return Err(config_error(format!("no checkpoint at {}", dir.display())));
    }
    let c = Checkpoint {
        state: read_json(dir.join("state.json"))?,
        model: read_json(dir.join("model.json"))?,
        adam: read_json(dir.join("adam.json"))?,
        history: read_json(dir.join("history.json"))?,
        train: read_json(dir.join("train.json"))?,
    };
    c.model.source.validate()?;
    if c.adam.m.len() != c.model.to_flat().len() {
        return Err(config_error(format!("optimizer state in {} does not match the model", dir.display())));
    }
    Ok(c)
}
