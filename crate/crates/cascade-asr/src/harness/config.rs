//! Run configuration: one JSON file describing the model, the block
//! geometry, the training recipe, the synthetic corpus, and decoding.
//! Parse errors carry file/line/column; semantic errors name the field.

use crate::blocking::BlockSpec;
use crate::distill::DistillMode;
use crate::harness::corpus::CorpusConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::Config("decode.beam must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub blocking: BlockSpec,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub decode: DecodeConfig,
}

impl RunConfig {
    /// Read and parse a config file.  JSON problems (including missing
    /// fields) are reported as `<path>:<line>:<column>: <cause>`.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.blocking.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        self.decode.validate()?;
        self.corpus.check_model(&self.model)
    }

    /// Stable fingerprint of the effective configuration (after CLI
    /// overrides), used to stamp summaries and reports.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canonical.as_bytes()))
    }
}

/// 64-bit FNV-1a over a byte string.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Command-line overrides layered on top of the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    /// Replaces train.seed (gen-data re-targets it at corpus.seed).
    pub seed: Option<u64>,
    pub distill: Option<DistillMode>,
    /// Replaces blocking.block.
    pub block: Option<usize>,
    pub beam: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(mode) = self.distill {
            cfg.train.distill_mode = mode;
        }
        if let Some(block) = self.block {
            cfg.blocking.block = block;
        }
        if let Some(beam) = self.beam {
            cfg.decode.beam = beam;
        }
    }
}

/// Parse a distillation mode name as spelled on the command line.
pub fn parse_distill(s: &str) -> std::result::Result<DistillMode, String> {
    match s {
        "none" => Ok(DistillMode::None),
        "mse-ED" => Ok(DistillMode::MseEd),
        "sp-ED" => Ok(DistillMode::SpEd),
        "sp-DD" => Ok(DistillMode::SpDd),
        other => Err(format!(
            "unknown distillation mode {other:?} (expected none, mse-ED, sp-ED, or sp-DD)"
        )),
    }
}
