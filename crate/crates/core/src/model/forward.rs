//! Batched forward passes recorded on a [`Tape`].
//!
//! Graphs in a batch are stacked: node rows are concatenated and every
//! per-graph `n×n` matrix lives in the block layout of [`Segments`], so the
//! weight products run as one large matrix multiply per layer.

use rand::{Rng, RngCore};

use super::{Architecture, ClassifierKind, Readout, GNN_HIDDEN, HEAD_HIDDEN};
use crate::autodiff::{Segments, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph};
use crate::kernel::{conditional_mi, gram_for, mutual_information, EntropyConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Per-graph matrices derived once from the raw data.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub features: Tensor,
    /// `D^{-1/2}(A'+I)D^{-1/2}` of the rescaled adjacency `A'`.
    pub norm_adj: Tensor,
    /// Reconstruction target `A' + I`.
    pub recon_target: Tensor,
    /// 0/1 indicator of the observed edges.
    pub support: Tensor,
    pub label: usize,
}

/// Maps edge weights into `[0, 1]` when any lies outside it, by the affine
/// map that sends the smallest observed edge weight to 0 and the largest to
/// 1. Graphs already inside the range pass through untouched.
pub fn rescale_weights(a: &Tensor) -> Tensor {
    let n = a.rows();
    let weights: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| a.get(i, j))
        .filter(|&w| w != 0.0)
        .collect();
    if weights.iter().all(|w| (0.0..=1.0).contains(w)) {
        return a.clone();
    }
    let lo = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    a.map(|w| {
        if w == 0.0 {
            0.0
        } else if span > 0.0 {
            (w - lo) / span
        } else {
            1.0
        }
    })
}

impl Prepared {
    pub fn new(g: &Graph) -> Result<Self> {
        let n = g.num_nodes();
        let scaled = rescale_weights(&g.adjacency);
        let mut recon_target = scaled.clone();
        for i in 0..n {
            recon_target.set(i, i, 1.0);
        }
        Ok(Self {
            features: g.features.clone(),
            norm_adj: normalize_adjacency(&scaled)?,
            recon_target,
            support: g.adjacency.map(|w| if w != 0.0 { 1.0 } else { 0.0 }),
            label: g.label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

/// Several prepared graphs stacked for one forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    pub segments: Segments,
    pub features: Tensor,
    pub norm_adj: Tensor,
    pub recon_target: Tensor,
    pub support: Tensor,
    /// 1 inside every block, 0 in padding; absent when sizes are uniform.
    pub block_mask: Option<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(graphs: &[&Prepared]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let sizes: Vec<usize> = graphs.iter().map(|p| p.num_nodes()).collect();
        let seg = Segments::from_sizes(&sizes);
        let d = graphs[0].features.cols();
        let mut feats = Vec::with_capacity(seg.total() * d);
        for p in graphs {
            if p.features.cols() != d {
                return Err(Error::dim("Batch::new", "feature widths differ"));
            }
            feats.extend_from_slice(p.features.data());
        }
        let stack = |f: fn(&Prepared) -> &Tensor| {
            seg.stack_blocks(&graphs.iter().map(|p| f(p)).collect::<Vec<_>>())
        };
        let block_mask = match seg.uniform_size() {
            Some(_) => None,
            None => {
                let ones: Vec<Tensor> = sizes.iter().map(|&n| Tensor::ones(n, n)).collect();
                Some(seg.stack_blocks(&ones.iter().collect::<Vec<_>>())?)
            }
        };
        Ok(Self {
            features: Tensor::new(seg.total(), d, feats)?,
            norm_adj: stack(|p| &p.norm_adj)?,
            recon_target: stack(|p| &p.recon_target)?,
            support: stack(|p| &p.support)?,
            block_mask,
            labels: graphs.iter().map(|p| p.label).collect(),
            segments: seg,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Posterior statistics and the latent sample.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub mu: Var,
    pub logvar: Var,
    /// `mu + exp(logvar/2)·ε`, or `mu` itself without noise.
    pub z: Var,
}

fn linear(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let h = tape.matmul(x, w)?;
    let bias = b.var(&format!("{name}.b"))?;
    tape.add_row(h, bias)
}

/// Two sigmoid GCN layers followed by linear mean and log-variance heads.
pub fn encode(
    tape: &mut Tape,
    b: &Bound,
    arch: &Architecture,
    batch: &Batch,
    eps: Option<Tensor>,
) -> Result<Encoded> {
    let seg = &batch.segments;
    let adj = tape.constant(batch.norm_adj.clone())?;
    let mut h = tape.constant(batch.features.clone())?;
    for layer in ["enc.gcn0", "enc.gcn1"] {
        let w = b.var(&format!("{layer}.w"))?;
        let hw = tape.matmul(h, w)?;
        let agg = tape.block_matmul(adj, hw, seg)?;
        h = tape.sigmoid(agg)?;
    }
    let mu = linear(tape, b, "enc.mu", h)?;
    let logvar = linear(tape, b, "enc.logvar", h)?;
    let z = match eps {
        None => mu,
        Some(e) => {
            if e.shape() != [seg.total(), arch.latent()] {
                return Err(Error::dim("encode", format!("noise is {:?}", e.shape())));
            }
            let half = tape.scale(logvar, 0.5)?;
            let std = tape.exp(half)?;
            let e = tape.constant(e)?;
            let noise = tape.mul(std, e)?;
            tape.add(mu, noise)?
        }
    };
    Ok(Encoded { mu, logvar, z })
}

/// Standard-normal noise for the reparameterized sample.
pub fn sample_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(rand_distr::StandardNormal))
}

/// `A_c = sigmoid(Z·Zᵀ)` per graph and `X_c` from a one-hidden-layer MLP.
pub fn decode(tape: &mut Tape, b: &Bound, z: Var, seg: &Segments) -> Result<(Var, Var)> {
    let gram = tape.block_gram(z, seg)?;
    let a = tape.sigmoid(gram)?;
    let h = linear(tape, b, "dec.x0", z)?;
    let h = tape.relu(h)?;
    let x = linear(tape, b, "dec.x1", h)?;
    Ok((a, x))
}

/// Per-graph `sqrt(Σ rows of m)` over stacked rows, as `B×1`.
fn segment_norm(tape: &mut Tape, diff: Var, seg: &Segments) -> Result<Var> {
    let sq = tape.square(diff)?;
    let rows = tape.sum_cols(sq)?;
    let per = tape.segment_sum(rows, seg, false)?;
    tape.sqrt(per)
}

/// Batch mean of `‖X−X_c‖_F + ‖A−A_c‖_F + KL(q(Z|G) ‖ N(0, I))`.
pub fn graphvae_loss(
    tape: &mut Tape,
    batch: &Batch,
    a_c: Var,
    x_c: Var,
    mu: Var,
    logvar: Var,
) -> Result<Var> {
    let seg = &batch.segments;
    let x = tape.constant(batch.features.clone())?;
    let dx = tape.sub(x, x_c)?;
    let fx = segment_norm(tape, dx, seg)?;

    let a = tape.constant(batch.recon_target.clone())?;
    let mut da = tape.sub(a, a_c)?;
    if let Some(mask) = &batch.block_mask {
        let m = tape.constant(mask.clone())?;
        da = tape.mul(da, m)?;
    }
    let fa = segment_norm(tape, da, seg)?;

    // KL per entry: (μ² + e^{logvar} − logvar − 1) / 2
    let mu2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, logvar)?;
    let t = tape.add_const(t, -1.0)?;
    let t = tape.scale(t, 0.5)?;
    let rows = tape.sum_cols(t)?;
    let kl = tape.segment_sum(rows, seg, false)?;

    let per = tape.add(fx, fa)?;
    let per = tape.add(per, kl)?;
    tape.mean(per)
}

/// One vector per graph: row-major flattening when every graph has the same
/// node count, the mean over nodes otherwise.
pub fn vectorize(tape: &mut Tape, v: Var, seg: &Segments) -> Result<Var> {
    match seg.uniform_size() {
        Some(n) => {
            let cols = tape.value(v).cols();
            tape.reshape(v, seg.count(), n * cols)
        }
        None => tape.segment_sum(v, seg, true),
    }
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Tensor {
    Tensor::from_fn(labels.len(), n_classes, |i, j| if labels[i] == j { 1.0 } else { 0.0 })
}

/// Components of the causal objective.
#[derive(Clone, Copy, Debug)]
pub struct CausalTerms {
    /// `I(α;β) − I(α;Y|β)`, or `−I(α;Y|β)` when the MI penalty is off.
    pub loss: Var,
    pub cmi: Var,
    pub mi: Option<Var>,
}

/// Causal-effect loss over per-graph vectors `alpha` (`B×·`) and `beta`.
pub fn causal_loss(
    tape: &mut Tape,
    alpha: Var,
    beta: Var,
    labels: &[usize],
    n_classes: usize,
    cfg: &EntropyConfig,
    with_mi: bool,
) -> Result<CausalTerms> {
    let b = tape.value(alpha).rows();
    if b < 2 || tape.value(beta).rows() != b || labels.len() != b {
        return Err(Error::contract(format!(
            "causal loss needs matching batches of at least 2, got {b}, {}, {}",
            tape.value(beta).rows(),
            labels.len()
        )));
    }
    let delta = cfg.delta;
    let y = tape.constant(one_hot(labels, n_classes))?;
    let ka = gram_for(tape, alpha, cfg)?;
    let kb = gram_for(tape, beta, cfg)?;
    let ky = gram_for(tape, y, cfg)?;
    let cmi = conditional_mi(tape, &ka, &ky, &kb, delta)?;
    let neg = tape.scale(cmi, -1.0)?;
    if !with_mi {
        return Ok(CausalTerms { loss: neg, cmi, mi: None });
    }
    let mi = mutual_information(tape, &ka, &kb, delta)?;
    let loss = tape.add(mi, neg)?;
    Ok(CausalTerms {
        loss,
        cmi,
        mi: Some(mi),
    })
}

/// `sigmoid(P·Pᵀ)` per graph in the stacked block layout.
pub fn subgraph(tape: &mut Tape, p: Var, seg: &Segments) -> Result<Var> {
    let g = tape.block_gram(p, seg)?;
    tape.sigmoid(g)
}

/// Weighted adjacency seen by the classifier: explanation weights restricted
/// to the observed edges, or the bare support without an explainer.
///
/// `alpha` is the stacked causal factor; when `None` it is taken from the
/// encoder's posterior mean. Returns the adjacency and the projected factor.
pub fn classifier_adjacency(
    tape: &mut Tape,
    b: &Bound,
    arch: &Architecture,
    batch: &Batch,
    alpha: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    let support = tape.constant(batch.support.clone())?;
    if !arch.explainer {
        return Ok((support, None));
    }
    let alpha = match alpha {
        Some(a) => a,
        None => {
            let enc = encode(tape, b, arch, batch, None)?;
            tape.slice_cols(enc.mu, 0, arch.k)?
        }
    };
    let w = b.var("sub.w")?;
    let p = tape.matmul(alpha, w)?;
    let g = subgraph(tape, p, &batch.segments)?;
    Ok((tape.mul(g, support)?, Some(p)))
}

fn dropout<'b>(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut (dyn RngCore + 'b)>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let [r, c] = tape.value(x).shape();
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(r, c, |_, _| if rng.random::<f64>() < p { 0.0 } else { keep });
    let m = tape.constant(mask)?;
    tape.mul(x, m)
}

const NORM_EPS: f64 = 1e-5;
const NORM_MOMENTUM: f64 = 0.1;

/// Training-mode state for [`classify`]: the dropout stream, and the node
/// statistics each normalization layer saw (`(layer, mean, variance)`).
pub struct TrainPass<'a> {
    pub rng: &'a mut dyn RngCore,
    pub norm_stats: Vec<(String, Tensor, Tensor)>,
}

impl<'a> TrainPass<'a> {
    pub fn new(rng: &'a mut dyn RngCore) -> Self {
        Self { rng, norm_stats: Vec::new() }
    }
}

/// Folds batch statistics into the running estimates used at inference.
/// Variance is stored unbiased.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, Tensor, Tensor)], rows: usize) -> Result<()> {
    let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
    for (layer, mean, var) in stats {
        for (suffix, fresh, k) in [("mean", mean, 1.0), ("var", var, unbias)] {
            let name = format!("{layer}.{suffix}");
            let slot = store
                .get_mut(&name)
                .ok_or_else(|| Error::contract(format!("missing running statistic `{name}`")))?;
            for (r, f) in slot.data_mut().iter_mut().zip(fresh.data()) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * k * f;
            }
        }
    }
    Ok(())
}

/// Per-feature normalization over every node row in the batch, then the
/// learned scale and shift. Batch statistics in training, running ones
/// otherwise.
fn batch_norm(
    tape: &mut Tape,
    b: &Bound,
    store: &ParamStore,
    i: usize,
    x: Var,
    train: Option<&mut TrainPass<'_>>,
) -> Result<Var> {
    let layer = format!("norm.gnn{i}");
    let gamma = b.var(&format!("cls.gnn{i}.gamma"))?;
    let beta = b.var(&format!("cls.gnn{i}.b"))?;
    let normed = match train {
        Some(pass) => {
            let rows = tape.value(x).rows() as f64;
            let total = tape.sum_rows(x)?;
            let mean = tape.scale(total, 1.0 / rows)?;
            let neg = tape.scale(mean, -1.0)?;
            let centred = tape.add_row(x, neg)?;
            let sq = tape.square(centred)?;
            let ss = tape.sum_rows(sq)?;
            let var = tape.scale(ss, 1.0 / rows)?;
            pass.norm_stats
                .push((layer, tape.value(mean).clone(), tape.value(var).clone()));
            let shifted = tape.add_const(var, NORM_EPS)?;
            let inv = tape.powf(shifted, -0.5)?;
            tape.mul_row(centred, inv)?
        }
        None => {
            let mean = store.get(&format!("{layer}.mean"))?;
            let var = store.get(&format!("{layer}.var"))?;
            let neg = tape.constant(mean.map(|m| -m))?;
            let inv = tape.constant(var.map(|v| 1.0 / (v + NORM_EPS).sqrt()))?;
            let centred = tape.add_row(x, neg)?;
            tape.mul_row(centred, inv)?
        }
    };
    let scaled = tape.mul_row(normed, gamma)?;
    tape.add_row(scaled, beta)
}

/// Message passing over `adj` with per-layer normalization, readout, and the
/// MLP head. `train` switches on batch statistics and head dropout.
#[allow(clippy::too_many_arguments)]
pub fn classify(
    tape: &mut Tape,
    b: &Bound,
    store: &ParamStore,
    arch: &Architecture,
    batch: &Batch,
    adj: Var,
    mut train: Option<&mut TrainPass<'_>>,
) -> Result<Var> {
    let seg = &batch.segments;
    let mut h = tape.constant(batch.features.clone())?;
    let gcn_scale = match arch.classifier {
        ClassifierKind::Gin => None,
        ClassifierKind::Gcn => {
            let eyes: Vec<Tensor> = (0..seg.count()).map(|g| Tensor::eye(seg.size(g))).collect();
            let eye = tape.constant(seg.stack_blocks(&eyes.iter().collect::<Vec<_>>())?)?;
            let hat = tape.add(adj, eye)?;
            let deg = tape.sum_cols(hat)?;
            let s = tape.powf(deg, -0.5)?;
            Some((hat, s))
        }
    };
    for i in 0..GNN_HIDDEN.len() {
        let w = b.var(&format!("cls.gnn{i}.w"))?;
        let u = tape.matmul(h, w)?;
        let agg = match gcn_scale {
            // (I + A)·H·W with unit self weight
            None => {
                let m = tape.block_matmul(adj, u, seg)?;
                tape.add(m, u)?
            }
            Some((hat, s)) => {
                let us = tape.scale_rows(u, s)?;
                let m = tape.block_matmul(hat, us, seg)?;
                tape.scale_rows(m, s)?
            }
        };
        let normed = batch_norm(tape, b, store, i, agg, train.as_deref_mut())?;
        h = tape.relu(normed)?;
    }
    let mut r = match arch.readout {
        Readout::Sum => tape.segment_sum(h, seg, false)?,
        Readout::Average => tape.segment_sum(h, seg, true)?,
        Readout::Max => tape.segment_max(h, seg)?,
    };
    for i in 0..HEAD_HIDDEN.len() {
        let z = linear(tape, b, &format!("cls.head{i}"), r)?;
        let z = tape.relu(z)?;
        r = dropout(tape, z, arch.dropout, train.as_mut().map(|p| &mut *p.rng))?;
    }
    linear(tape, b, "cls.out", r)
}

/// [`classifier_adjacency`] followed by [`classify`].
pub fn classify_batch(
    tape: &mut Tape,
    b: &Bound,
    arch: &Architecture,
    batch: &Batch,
    store: &ParamStore,
    alpha: Option<Var>,
) -> Result<Var> {
    let (adj, _) = classifier_adjacency(tape, b, arch, batch, alpha)?;
    classify(tape, b, store, arch, batch, adj, None)
}
