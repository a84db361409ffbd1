//! Kernel Gram matrices and matrix-based Rényi entropy estimators.
//!
//! Entropies are functionals of the eigenspectrum of a trace-normalized
//! Gram matrix, so no density estimate is ever formed. Every estimator here
//! records its computation on a [`Tape`] and is differentiable with respect
//! to the samples that produced the Gram matrices.

use crate::autodiff::{pairwise_sq_dist, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rényi order used throughout training.
pub const DEFAULT_DELTA: f64 = 1.01;
/// Eigenvalues at or below this are treated as exact zeros.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Bandwidth returned when all samples coincide.
pub const SIGMA_FLOOR: f64 = 1e-6;
const NEIGHBOURS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Recomputed from every batch with [`adaptive_sigma`].
    Adaptive,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyConfig {
    pub delta: f64,
    pub bandwidth: Bandwidth,
    pub eigen_floor: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            bandwidth: Bandwidth::Adaptive,
            eigen_floor: EIGEN_FLOOR,
        }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || self.delta == 1.0 || !self.delta.is_finite() {
            return Err(Error::contract(format!(
                "Renyi order must be positive and not 1, got {}",
                self.delta
            )));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0) {
                return Err(Error::contract(format!("bandwidth must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn sigma_for(&self, samples: &Tensor) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Adaptive => adaptive_sigma(samples),
            Bandwidth::Fixed(s) => Ok(s),
        }
    }
}

/// Bandwidth heuristic: mean over samples of the mean distance to the ten
/// nearest other samples (all others when there are ten or fewer).
///
/// Rows of `samples` are the samples.
pub fn adaptive_sigma(samples: &Tensor) -> Result<f64> {
    let b = samples.rows();
    if b < 2 {
        return Err(Error::contract(format!("adaptive_sigma needs >= 2 samples, got {b}")));
    }
    let d2 = pairwise_sq_dist(samples);
    let k = NEIGHBOURS.min(b - 1);
    let mut total = 0.0;
    let mut row = Vec::with_capacity(b - 1);
    for i in 0..b {
        row.clear();
        row.extend((0..b).filter(|&j| j != i).map(|j| d2.get(i, j).sqrt()));
        row.sort_by(f64::total_cmp);
        total += row[..k].iter().sum::<f64>() / k as f64;
    }
    Ok((total / b as f64).max(SIGMA_FLOOR))
}

/// Unnormalized Gaussian kernel `exp(-‖xᵢ−xⱼ‖²/σ²)` as a plain matrix.
pub fn gaussian_kernel(samples: &Tensor, sigma: f64) -> Result<Tensor> {
    check_sigma(sigma)?;
    let s2 = sigma * sigma;
    Ok(pairwise_sq_dist(samples).map(|d| (-d / s2).exp()))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::contract(format!("kernel width must be positive, got {sigma}")));
    }
    Ok(())
}

/// A trace-normalized, symmetric Gram matrix living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GramMatrix {
    var: Var,
    size: usize,
}

impl GramMatrix {
    pub fn var(&self) -> Var {
        self.var
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Normalizes a symmetric positive semi-definite kernel matrix by its
    /// trace.
    pub fn normalize(tape: &mut Tape, kernel: Var) -> Result<Self> {
        let k = tape.value(kernel);
        if !k.is_square() {
            return Err(Error::dim("GramMatrix", format!("{:?}", k.shape())));
        }
        if !k.is_symmetric(1e-10) {
            return Err(Error::contract("Gram matrix must be symmetric"));
        }
        let size = k.rows();
        let tr = tape.trace(kernel)?;
        let var = tape.div_scalar(kernel, tr)?;
        Ok(Self { var, size })
    }

    /// Wraps a matrix that is already symmetric with unit trace.
    pub fn from_normalized(tape: &mut Tape, a: Tensor) -> Result<Self> {
        if !a.is_square() || !a.is_symmetric(1e-10) {
            return Err(Error::contract("normalized Gram must be square and symmetric"));
        }
        if (a.trace() - 1.0).abs() > 1e-10 {
            return Err(Error::contract(format!("trace is {}, expected 1", a.trace())));
        }
        let size = a.rows();
        let var = tape.constant(a)?;
        Ok(Self { var, size })
    }
}

/// Gaussian Gram over the rows of `samples` with a fixed width, normalized to
/// unit trace. The width is a constant of the backward pass.
pub fn gram_gaussian(tape: &mut Tape, samples: Var, sigma: f64) -> Result<GramMatrix> {
    check_sigma(sigma)?;
    let d = tape.pairwise_sq_dist(samples)?;
    let scaled = tape.scale(d, -1.0 / (sigma * sigma))?;
    let k = tape.exp(scaled)?;
    GramMatrix::normalize(tape, k)
}

/// [`gram_gaussian`] with the width chosen by `cfg` from the current values.
pub fn gram_for(tape: &mut Tape, samples: Var, cfg: &EntropyConfig) -> Result<GramMatrix> {
    let sigma = cfg.sigma_for(tape.value(samples))?;
    gram_gaussian(tape, samples, sigma)
}

fn check_delta(delta: f64) -> Result<()> {
    EntropyConfig {
        delta,
        ..EntropyConfig::default()
    }
    .validate()
}

/// `H_δ(A) = log₂(Σ λᵢ^δ) / (1−δ)` in bits.
pub fn renyi_entropy(tape: &mut Tape, a: &GramMatrix, delta: f64) -> Result<Var> {
    check_delta(delta)?;
    spectral_entropy(tape, a.var, delta)
}

fn spectral_entropy(tape: &mut Tape, a: Var, delta: f64) -> Result<Var> {
    let lambda = tape.eigvalsh(a)?;
    // clamp first so that powf stays defined, then drop the clamped entries
    let mask = tape.value(lambda).map(|l| if l > EIGEN_FLOOR { 1.0 } else { 0.0 });
    let clamped = tape.clamp_min(lambda, EIGEN_FLOOR)?;
    let powered = tape.powf(clamped, delta)?;
    let mask = tape.constant(mask)?;
    let kept = tape.mul(powered, mask)?;
    let total = tape.sum(kept)?;
    let log = tape.log2(total)?;
    tape.scale(log, 1.0 / (1.0 - delta))
}

/// Joint entropy of two or three variables: the entropy of the
/// trace-renormalized Hadamard product of their Gram matrices.
pub fn joint_entropy(tape: &mut Tape, grams: &[&GramMatrix], delta: f64) -> Result<Var> {
    check_delta(delta)?;
    let first = match grams {
        [] => return Err(Error::contract("joint_entropy needs at least one Gram matrix")),
        [g, ..] => g,
    };
    if let Some(bad) = grams.iter().find(|g| g.size != first.size) {
        return Err(Error::contract(format!(
            "Gram sizes differ: {} vs {}",
            first.size, bad.size
        )));
    }
    let mut prod = first.var;
    for g in &grams[1..] {
        prod = tape.mul(prod, g.var)?;
    }
    let tr = tape.trace(prod)?;
    let normalized = tape.div_scalar(prod, tr)?;
    spectral_entropy(tape, normalized, delta)
}

/// `I(a;b) = H(a) + H(b) − H(a,b)`.
pub fn mutual_information(
    tape: &mut Tape,
    ka: &GramMatrix,
    kb: &GramMatrix,
    delta: f64,
) -> Result<Var> {
    let ha = renyi_entropy(tape, ka, delta)?;
    let hb = renyi_entropy(tape, kb, delta)?;
    let hab = joint_entropy(tape, &[ka, kb], delta)?;
    let s = tape.add(ha, hb)?;
    tape.sub(s, hab)
}

/// `I(a;y|b) = H(a,b) + H(y,b) − H(b) − H(a,y,b)`.
pub fn conditional_mi(
    tape: &mut Tape,
    ka: &GramMatrix,
    ky: &GramMatrix,
    kb: &GramMatrix,
    delta: f64,
) -> Result<Var> {
    let hab = joint_entropy(tape, &[ka, kb], delta)?;
    let hyb = joint_entropy(tape, &[ky, kb], delta)?;
    let hb = renyi_entropy(tape, kb, delta)?;
    let hayb = joint_entropy(tape, &[ka, ky, kb], delta)?;
    let pos = tape.add(hab, hyb)?;
    let neg = tape.add(hb, hayb)?;
    tape.sub(pos, neg)
}

/// Biased HSIC estimate `tr(K·H·L·H)/(B−1)²` from unnormalized kernels.
pub fn hsic(k: &Tensor, l: &Tensor) -> Result<f64> {
    let b = k.rows();
    if !k.is_square() || k.shape() != l.shape() {
        return Err(Error::contract(format!(
            "hsic needs equal square kernels, got {:?} and {:?}",
            k.shape(),
            l.shape()
        )));
    }
    if b < 3 {
        return Err(Error::contract(format!("hsic needs >= 3 samples, got {b}")));
    }
    let kc = double_center(k);
    let dot: f64 = kc.data().iter().zip(l.data()).map(|(x, y)| x * y).sum();
    Ok(dot / ((b - 1) * (b - 1)) as f64)
}

fn double_center(k: &Tensor) -> Tensor {
    let b = k.rows();
    let row_means: Vec<f64> = (0..b).map(|i| k.row(i).iter().sum::<f64>() / b as f64).collect();
    let col_means: Vec<f64> = (0..b)
        .map(|j| (0..b).map(|i| k.get(i, j)).sum::<f64>() / b as f64)
        .collect();
    let grand = row_means.iter().sum::<f64>() / b as f64;
    Tensor::from_fn(b, b, |i, j| k.get(i, j) - row_means[i] - col_means[j] + grand)
}

/// HSIC between two sample sets using Gaussian kernels with adaptive widths.
pub fn hsic_adaptive(x: &Tensor, y: &Tensor) -> Result<f64> {
    let kx = gaussian_kernel(x, adaptive_sigma(x)?)?;
    let ky = gaussian_kernel(y, adaptive_sigma(y)?)?;
    hsic(&kx, &ky)
}
