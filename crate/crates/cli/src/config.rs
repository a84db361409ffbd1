//! `key = value` run configuration shared by config files, flags, and
//! manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cignn_core::eval::MU_GRID;
use cignn_core::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Dataset graphs an `eval` or `explain` run looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
    All,
}

impl FromStr for SplitPart {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "train" => Ok(Self::Train),
            "validation" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            _ => Err(CliError::Usage(format!(
                "unknown split `{s}`; expected train, validation, test or all"
            ))),
        }
    }
}

impl std::fmt::Display for SplitPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
            Self::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Dataset file; when absent a BA-2Motif set is generated from
    /// `count` and `data_seed`.
    pub dataset: Option<PathBuf>,
    pub count: usize,
    pub data_seed: u64,
    pub mu_grid: Vec<f64>,
    /// `K / (K + L)` values visited by `sweep`.
    pub ratios: Vec<f64>,
    pub split: SplitPart,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset: None,
            count: 1000,
            data_seed: 0,
            mu_grid: MU_GRID.to_vec(),
            ratios: (1..=9).map(|i| f64::from(i) / 10.0).collect(),
            split: SplitPart::Test,
        }
    }
}

pub const KEYS: [&str; 20] = [
    "epochs",
    "gc_epochs",
    "lambda",
    "lr",
    "weight_decay",
    "batch_size",
    "delta",
    "k",
    "l",
    "dropout",
    "readout",
    "classifier",
    "variant",
    "seed",
    "dataset",
    "count",
    "data_seed",
    "mu_grid",
    "ratios",
    "split",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, CliError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match key {
            "epochs" => t.epochs = parse(key, value)?,
            "gc_epochs" => t.gc_epochs = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "delta" => t.delta = parse(key, value)?,
            "k" => t.k = parse(key, value)?,
            "l" => t.l = parse(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "readout" => t.readout = value.parse()?,
            "classifier" => t.classifier = value.parse()?,
            "variant" => t.variant = value.parse()?,
            "seed" => t.seed = parse(key, value)?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "count" => self.count = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "mu_grid" => self.mu_grid = parse_list(key, value)?,
            "ratios" => self.ratios = parse_list(key, value)?,
            "split" => self.split = value.parse()?,
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown config key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a config text: one `key = value` per line, `#` comments and
    /// blank lines ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Path {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.mu_grid.is_empty() || self.mu_grid.iter().any(|m| !(*m > 0.0 && *m <= 1.0)) {
            return Err(CliError::Usage("mu_grid values must lie in (0, 1]".into()));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(CliError::Usage("ratios must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Canonical text: every key in [`KEYS`] order. Feeding it back through
    /// [`RunConfig::apply_text`] reproduces the configuration.
    pub fn render(&self) -> String {
        let t = &self.train;
        let values = [
            t.epochs.to_string(),
            t.gc_epochs.to_string(),
            t.lambda.to_string(),
            t.lr.to_string(),
            t.weight_decay.to_string(),
            t.batch_size.to_string(),
            t.delta.to_string(),
            t.k.to_string(),
            t.l.to_string(),
            t.dropout.to_string(),
            t.readout.to_string(),
            t.classifier.to_string(),
            t.variant.to_string(),
            t.seed.to_string(),
            self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.count.to_string(),
            self.data_seed.to_string(),
            join(&self.mu_grid),
            join(&self.ratios),
            self.split.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cignn_core::model::{ClassifierKind, Readout, Variant};

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        let t = &c.train;
        assert_eq!((t.epochs, t.gc_epochs, t.batch_size, t.k, t.l), (450, 150, 32, 56, 8));
        assert_eq!((t.lambda, t.lr, t.weight_decay, t.delta, t.dropout), (0.001, 0.001, 0.0005, 1.01, 0.5));
        assert_eq!(c.ratios.len(), 9);
        assert_eq!(c.mu_grid.len(), 10);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\n\nepochs = 12\nreadout = max # trailing\nclassifier=gcn\nvariant = non-mi\n\
             dataset = /tmp/x.jsonl\nratios = 0.25, 0.5\nsplit = all\n",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 12);
        assert_eq!(c.train.readout, Readout::Max);
        assert_eq!(c.train.classifier, ClassifierKind::Gcn);
        assert_eq!(c.train.variant, Variant::NonMi);
        assert_eq!(c.ratios, vec![0.25, 0.5]);
        assert_eq!(c.split, SplitPart::All);

        let mut back = RunConfig::default();
        back.apply_text(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::default().apply_text("epoch = 3").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        assert!(err.contains("`epoch`") && err.contains("gc_epochs") && err.contains("mu_grid"), "{err}");
    }

    #[test]
    fn malformed_values() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("epochs = many").is_err());
        assert!(c.apply_text("just words").is_err());
        assert!(c.apply_text("variant = bogus").is_err());
        assert!(c.apply_text("split = middle").is_err());
        c.apply_text("ratios = 1.0").unwrap();
        assert!(c.validate().is_err());
    }
}
