//! Checkpoint JSON and per-epoch history CSV.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use super::{Architecture, EpochRecord, History, ModelParams, TrainConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub best_epoch: usize,
    pub history: History,
}

/// Floats written with 17 significant digits.
struct Sig17<'a>(&'a [f64]);

impl Serialize for Sig17<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for v in self.0 {
            let raw = RawValue::from_string(format!("{v:.16e}")).map_err(serde::ser::Error::custom)?;
            seq.serialize_element(&raw)?;
        }
        seq.end()
    }
}

#[derive(Serialize)]
struct TensorOut<'a> {
    shape: [usize; 2],
    values: Sig17<'a>,
}

#[derive(Serialize)]
struct FileOut<'a> {
    format_version: u64,
    config: &'a TrainConfig,
    arch: &'a Architecture,
    best_epoch: usize,
    params: BTreeMap<&'a str, TensorOut<'a>>,
    history: &'a [EpochRecord],
}

#[derive(Deserialize)]
struct TensorIn {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct FileIn {
    format_version: u64,
    config: TrainConfig,
    arch: Architecture,
    best_epoch: usize,
    params: BTreeMap<String, TensorIn>,
    history: History,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let out = FileOut {
            format_version: CHECKPOINT_VERSION,
            config: &self.config,
            arch: &self.params.arch,
            best_epoch: self.best_epoch,
            params: self
                .params
                .store
                .iter()
                .map(|(k, t)| {
                    (
                        k.as_str(),
                        TensorOut {
                            shape: t.shape(),
                            values: Sig17(t.data()),
                        },
                    )
                })
                .collect(),
            history: &self.history,
        };
        serde_json::to_string(&out).map_err(|e| Error::Config(format!("checkpoint serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: FileIn = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            field: "checkpoint".into(),
            message: e.to_string(),
        })?;
        if parsed.format_version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint version {}",
                parsed.format_version
            )));
        }
        let mut store = ParamStore::new();
        for (name, t) in parsed.params {
            let [r, c] = t.shape;
            let tensor = Tensor::new(r, c, t.values)
                .map_err(|e| Error::Validation(format!("parameter `{name}`: {e}")))?;
            store.insert(name, tensor);
        }
        Ok(Self {
            config: parsed.config,
            params: ModelParams {
                arch: parsed.arch,
                store,
            },
            best_epoch: parsed.best_epoch,
            history: parsed.history,
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ck.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns: epoch, stage, loss_vae, loss_causal, loss_ce, val_accuracy,
/// hsic_alpha_beta. Inactive terms are left empty.
pub fn write_history_csv(history: &[EpochRecord], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,stage,loss_vae,loss_causal,loss_ce,val_accuracy,hsic_alpha_beta")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.stage,
            opt(r.loss_vae),
            opt(r.loss_causal),
            opt(r.loss_ce),
            r.val_accuracy,
            opt(r.hsic_alpha_beta)
        )?;
    }
    Ok(())
}
