//! Checkpoint container: line-delimited JSON, self-describing, atomic writes.
//!
//! Layout (one JSON document per line):
//!   1. header — format tag, stage label, config fingerprint, training seed
//!   2. vocabulary
//!   3. parameters (with their `LmConfig`)
//!   4. trainer state — optimizer moments and RNG snapshot, possibly null
//!
//! Loading re-validates tensor shapes against the embedded config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::RngState;

use super::adam::AdamState;
use super::model::LmParams;
use super::vocab::Vocab;
use super::LmError;

const FORMAT: &str = "biaslab-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    stage: String,
    config_fingerprint: String,
    train_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerState {
    adam: Option<AdamState>,
    rng: Option<RngState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: LmParams,
    pub vocab: Vocab,
    pub adam: Option<AdamState>,
    pub rng: Option<RngState>,
    pub stage: String,
    pub config_fingerprint: String,
    pub train_seed: u64,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> LmError {
    LmError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let header = Header {
            format: FORMAT.to_string(),
            stage: self.stage.clone(),
            config_fingerprint: self.config_fingerprint.clone(),
            train_seed: self.train_seed,
        };
        let trainer = TrainerState {
            adam: self.adam.clone(),
            rng: self.rng.clone(),
        };
        let mut out = String::new();
        for line in [
            serde_json::to_string(&header),
            serde_json::to_string(&self.vocab),
            serde_json::to_string(&self.params),
            serde_json::to_string(&trainer),
        ] {
            out.push_str(&line.map_err(|e| ckpt_err(path, e.to_string()))?);
            out.push('\n');
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, out).map_err(|e| ckpt_err(path, e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| ckpt_err(path, e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let text = fs::read_to_string(path).map_err(|e| ckpt_err(path, e.to_string()))?;
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| ckpt_err(path, format!("missing {what} line")))
        };
        let header: Header = serde_json::from_str(next("header")?)
            .map_err(|e| ckpt_err(path, format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(ckpt_err(path, format!("unknown format {:?}", header.format)));
        }
        let mut vocab: Vocab = serde_json::from_str(next("vocab")?)
            .map_err(|e| ckpt_err(path, format!("vocab: {e}")))?;
        vocab.rebuild_index();
        vocab.validate()?;
        let params: LmParams = serde_json::from_str(next("params")?)
            .map_err(|e| ckpt_err(path, format!("params: {e}")))?;
        params.validate_shapes()?;
        if params.config.vocab_size != vocab.len() {
            return Err(ckpt_err(
                path,
                format!(
                    "config vocab_size {} != vocabulary size {}",
                    params.config.vocab_size,
                    vocab.len()
                ),
            ));
        }
        if !params.is_finite() {
            return Err(ckpt_err(path, "non-finite parameter tensor"));
        }
        let trainer: TrainerState = serde_json::from_str(next("trainer state")?)
            .map_err(|e| ckpt_err(path, format!("trainer state: {e}")))?;
        Ok(Checkpoint {
            params,
            vocab,
            adam: trainer.adam,
            rng: trainer.rng,
            stage: header.stage,
            config_fingerprint: header.config_fingerprint,
            train_seed: header.train_seed,
        })
    }
}
