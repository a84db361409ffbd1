//! The interpretable graph classifier: a variational graph autoencoder whose
//! latent code splits into causal (`α`) and non-causal (`β`) factors, an
//! explainer that turns `α` into edge weights, and a GNN classifier that
//! reads the graph through those weights.

mod checkpoint;
pub mod forward;
mod train;

#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, write_history_csv, Checkpoint, CHECKPOINT_VERSION};
pub use forward::{Batch, Prepared};
pub use train::{evaluate_split, initial_params, predict, train, train_on_split, EpochRecord, History, TrainOutcome};

use crate::autodiff::{Segments, Tape};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const ENCODER_HIDDEN: [usize; 2] = [128, 64];
pub const DECODER_HIDDEN: usize = 16;
pub const GNN_HIDDEN: [usize; 3] = [128, 128, 128];
pub const HEAD_HIDDEN: [usize; 2] = [64, 32];

/// Graph-level pooling before the classification head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Sum,
    Average,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Gcn,
    Gin,
}

/// Which parts of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Causal loss removed from both stages.
    NoCausal,
    /// Keeps `−I(α;Y|β)` but drops the `I(α;β)` penalty.
    NonMi,
    /// No autoencoder or explainer; the classifier reads the raw graph.
    PlainClassifier,
}

macro_rules! keyword_enum {
    ($ty:ident, $what:literal, $($name:literal => $v:ident),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$v),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        s,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$v => $name,)+ })
            }
        }
    };
}

keyword_enum!(Readout, "readout", "sum" => Sum, "average" => Average, "max" => Max);
keyword_enum!(ClassifierKind, "classifier", "gcn" => Gcn, "gin" => Gin);
keyword_enum!(
    Variant, "variant",
    "full" => Full, "no-causal" => NoCausal, "non-mi" => NonMi, "plain-classifier" => PlainClassifier,
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total epochs `E`.
    pub epochs: usize,
    /// Last epoch of the autoencoder stage, `E_GC`.
    pub gc_epochs: usize,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub delta: f64,
    pub k: usize,
    pub l: usize,
    pub dropout: f64,
    pub readout: Readout,
    pub classifier: ClassifierKind,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 450,
            gc_epochs: 150,
            lambda: 0.001,
            lr: 0.001,
            weight_decay: 0.0005,
            batch_size: 32,
            delta: 1.01,
            k: 56,
            l: 8,
            dropout: 0.5,
            readout: Readout::Sum,
            classifier: ClassifierKind::Gin,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.gc_epochs > self.epochs {
            return bad(format!(
                "need 0 < epochs and gc_epochs <= epochs, got {} and {}",
                self.epochs, self.gc_epochs
            ));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!("invalid optimizer settings lr={} weight_decay={}", self.lr, self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.delta > 0.0) || self.delta == 1.0 {
            return bad(format!("delta must be positive and not 1, got {}", self.delta));
        }
        if self.k == 0 || self.l == 0 {
            return bad(format!("k and l must be positive, got {} and {}", self.k, self.l));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Whether the causal loss term is computed at all.
    pub fn causal_active(&self) -> bool {
        self.lambda > 0.0 && matches!(self.variant, Variant::Full | Variant::NonMi)
    }

    pub fn uses_autoencoder(&self) -> bool {
        self.variant != Variant::PlainClassifier
    }

    /// First epoch of the classifier stage.
    pub fn classifier_start(&self) -> usize {
        if self.uses_autoencoder() {
            self.gc_epochs + 1
        } else {
            1
        }
    }
}

/// Shapes and choices fixed at initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub k: usize,
    pub l: usize,
    pub classifier: ClassifierKind,
    pub readout: Readout,
    pub dropout: f64,
    pub explainer: bool,
}

impl Architecture {
    pub fn from_config(cfg: &TrainConfig, feature_dim: usize, n_classes: usize) -> Self {
        Self {
            feature_dim,
            n_classes,
            k: cfg.k,
            l: cfg.l,
            classifier: cfg.classifier,
            readout: cfg.readout,
            dropout: cfg.dropout,
            explainer: cfg.uses_autoencoder(),
        }
    }

    pub fn latent(&self) -> usize {
        self.k + self.l
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub store: ParamStore,
}

/// Names of parameters trained in the autoencoder stage.
pub fn is_autoencoder_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("dec.")
}

/// Names of parameters trained in the classifier stage.
pub fn is_classifier_param(name: &str) -> bool {
    name.starts_with("sub.") || name.starts_with("cls.")
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, identity explainer projection.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Self {
        fn dense(s: &mut ParamStore, name: &str, i: usize, o: usize, bias: bool, rng: &mut impl Rng) {
            s.insert(format!("{name}.w"), glorot(i, o, rng));
            if bias {
                s.insert(format!("{name}.b"), Tensor::zeros(1, o));
            }
        }
        let mut s = ParamStore::new();
        let (d, z) = (arch.feature_dim, arch.latent());
        let [h0, h1] = ENCODER_HIDDEN;
        dense(&mut s, "enc.gcn0", d, h0, false, rng);
        dense(&mut s, "enc.gcn1", h0, h1, false, rng);
        dense(&mut s, "enc.mu", h1, z, true, rng);
        dense(&mut s, "enc.logvar", h1, z, true, rng);
        dense(&mut s, "dec.x0", z, DECODER_HIDDEN, true, rng);
        dense(&mut s, "dec.x1", DECODER_HIDDEN, d, true, rng);
        s.insert("sub.w", Tensor::eye(arch.k));

        let mut prev = d;
        for (i, &w) in GNN_HIDDEN.iter().enumerate() {
            dense(&mut s, &format!("cls.gnn{i}"), prev, w, true, rng);
            s.insert(format!("cls.gnn{i}.gamma"), Tensor::ones(1, w));
            s.insert(format!("norm.gnn{i}.mean"), Tensor::zeros(1, w));
            s.insert(format!("norm.gnn{i}.var"), Tensor::ones(1, w));
            prev = w;
        }
        for (i, &w) in HEAD_HIDDEN.iter().enumerate() {
            dense(&mut s, &format!("cls.head{i}"), prev, w, true, rng);
            prev = w;
        }
        dense(&mut s, "cls.out", prev, arch.n_classes, true, rng);
        Self { arch, store: s }
    }

    fn frozen(&self, tape: &mut Tape) -> Result<Bound> {
        Bound::bind(tape, &self.store, |_| false)
    }

    /// Posterior and one reparameterized sample for a single graph.
    pub fn encode(&self, graph: &Graph, rng: &mut impl Rng) -> Result<LatentFactors> {
        let p = Prepared::new(graph)?;
        let batch = Batch::new(&[&p])?;
        let mut tape = Tape::new();
        let b = self.frozen(&mut tape)?;
        let eps = Tensor::from_fn(p.num_nodes(), self.arch.latent(), |_, _| rng.sample(StandardNormal));
        let enc = forward::encode(&mut tape, &b, &self.arch, &batch, Some(eps))?;
        let z = tape.value(enc.z).clone();
        let k = self.arch.k;
        Ok(LatentFactors {
            alpha: z.slice_cols(0, k),
            beta: z.slice_cols(k, z.cols()),
            mean: tape.value(enc.mu).clone(),
            logvar: tape.value(enc.logvar).clone(),
        })
    }

    /// Reconstructed adjacency and features from a latent matrix.
    pub fn decode(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let b = self.frozen(&mut tape)?;
        let zv = tape.constant(z.clone())?;
        let seg = Segments::uniform(1, z.rows());
        let (a, x) = forward::decode(&mut tape, &b, zv, &seg)?;
        Ok((tape.value(a).clone(), tape.value(x).clone()))
    }

    /// Deterministic explanation from the posterior mean of `α`.
    pub fn explain(&self, graph: &Graph, graph_id: usize) -> Result<Explanation> {
        if !self.arch.explainer {
            return Err(Error::Config("this model was trained without an explainer".into()));
        }
        let p = Prepared::new(graph)?;
        let batch = Batch::new(&[&p])?;
        let mut tape = Tape::new();
        let b = self.frozen(&mut tape)?;
        let enc = forward::encode(&mut tape, &b, &self.arch, &batch, None)?;
        let alpha = tape.slice_cols(enc.mu, 0, self.arch.k)?;
        let w = b.var("sub.w")?;
        let proj = tape.matmul(alpha, w)?;
        let g = forward::subgraph(&mut tape, proj, &batch.segments)?;
        Ok(Explanation {
            weights: tape.value(g).clone(),
            graph_id,
        })
    }

    /// Class logits for one graph (inference mode).
    pub fn logits(&self, graph: &Graph) -> Result<Tensor> {
        let p = Prepared::new(graph)?;
        let batch = Batch::new(&[&p])?;
        let mut tape = Tape::new();
        let b = self.frozen(&mut tape)?;
        let out = forward::classify_batch(&mut tape, &b, &self.arch, &batch, &self.store, None)?;
        Ok(tape.value(out).clone())
    }
}

/// Encoder output for one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFactors {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub logvar: Tensor,
}

/// Edge weights `sigmoid(P·Pᵀ)` for one graph, `P` the projected causal
/// factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub weights: Tensor,
    pub graph_id: usize,
}

/// `sigmoid(α·αᵀ)` evaluated directly.
pub fn subgraph(alpha: &Tensor) -> Result<Explanation> {
    let mut tape = Tape::new();
    let a = tape.constant(alpha.clone())?;
    let g = forward::subgraph(&mut tape, a, &Segments::uniform(1, alpha.rows()))?;
    Ok(Explanation {
        weights: tape.value(g).clone(),
        graph_id: 0,
    })
}
