//! Two-stage training: the autoencoder with the causal penalty first, then
//! the explainer projection and classifier on frozen latent factors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{self, Batch, Prepared};
use super::{is_autoencoder_param, is_classifier_param, Architecture, ModelParams, TrainConfig, Variant};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{batches, split, Dataset, Split};
use crate::kernel::{hsic_adaptive, EntropyConfig};
use crate::optim::AdamState;
use crate::params::Bound;
use crate::tensor::Tensor;

/// Graphs per forward pass at evaluation time.
const EVAL_CHUNK: usize = 64;

const STREAM_INIT: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub loss_vae: Option<f64>,
    pub loss_causal: Option<f64>,
    pub loss_ce: Option<f64>,
    pub val_accuracy: f64,
    pub hsic_alpha_beta: Option<f64>,
}

pub type History = Vec<EpochRecord>;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the classifier-stage epoch with the best validation
    /// accuracy (the latest such epoch on ties).
    pub params: ModelParams,
    pub final_params: ModelParams,
    pub best_epoch: usize,
    pub history: History,
    pub split: Split,
    pub config: TrainConfig,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

pub fn prepare_all(ds: &Dataset) -> Result<Vec<Prepared>> {
    ds.graphs.iter().map(Prepared::new).collect()
}

/// The parameters training starts from.
pub fn initial_params(ds: &Dataset, cfg: &TrainConfig) -> ModelParams {
    let arch = Architecture::from_config(cfg, ds.feature_dim, ds.n_classes);
    ModelParams::init(arch, &mut rng_stream(cfg.seed, STREAM_INIT))
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let s = split(ds.len(), cfg.seed)?;
    train_on_split(ds, &s, cfg)
}

/// Posterior means of every graph under a fixed encoder.
fn posterior_means(params: &ModelParams, prepared: &[Prepared], idx: &[usize]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let graphs: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
        let batch = Batch::new(&graphs)?;
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, &params.store, |_| false)?;
        let enc = forward::encode(&mut tape, &b, &params.arch, &batch, None)?;
        let mu = tape.value(enc.mu);
        for g in 0..batch.segments.count() {
            let r = batch.segments.range(g);
            out.push(mu.slice_rows(r.start, r.end));
        }
    }
    Ok(out)
}

fn stack_rows(parts: &[&Tensor], start: usize, end: usize) -> Result<Tensor> {
    let rows: usize = parts.iter().map(|t| t.rows()).sum();
    let mut data = Vec::with_capacity(rows * (end - start));
    for t in parts {
        data.extend_from_slice(t.slice_cols(start, end).data());
    }
    Tensor::new(rows, end - start, data)
}

/// Predicted classes for `idx`. Uses posterior means and no dropout.
pub fn predict(params: &ModelParams, prepared: &[Prepared], idx: &[usize]) -> Result<Vec<usize>> {
    predict_with(params, prepared, idx, None)
}

fn predict_with(
    params: &ModelParams,
    prepared: &[Prepared],
    idx: &[usize],
    cache: Option<&[Option<Tensor>]>,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    let arch = &params.arch;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let graphs: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
        let batch = Batch::new(&graphs)?;
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, &params.store, |_| false)?;
        let alpha = match cache {
            Some(c) if arch.explainer => {
                let parts: Vec<&Tensor> = chunk
                    .iter()
                    .map(|&i| c[i].as_ref().ok_or_else(|| Error::contract("missing cached latent")))
                    .collect::<Result<_>>()?;
                Some(tape.constant(stack_rows(&parts, 0, arch.k)?)?)
            }
            _ => None,
        };
        let logits = forward::classify_batch(&mut tape, &b, arch, &batch, &params.store, alpha)?;
        let l = tape.value(logits);
        for i in 0..l.rows() {
            let row = l.row(i);
            let best = (0..row.len()).fold(0, |m, j| if row[j] > row[m] { j } else { m });
            out.push(best);
        }
    }
    Ok(out)
}

/// Predicted and true labels over `idx`.
pub fn evaluate_split(params: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let prepared = prepare_all(ds)?;
    let pred = predict(params, &prepared, idx)?;
    let truth = idx.iter().map(|&i| ds.graphs[i].label).collect();
    Ok((pred, truth))
}

fn accuracy(pred: &[usize], prepared: &[Prepared], idx: &[usize]) -> f64 {
    let hits = pred.iter().zip(idx).filter(|(p, &i)| **p == prepared[i].label).count();
    hits as f64 / idx.len().max(1) as f64
}

/// HSIC between the per-graph causal and non-causal posterior means.
fn latent_hsic(arch: &Architecture, means: &[Tensor]) -> Result<Option<f64>> {
    if means.len() < 3 {
        return Ok(None);
    }
    let uniform = means.iter().all(|m| m.rows() == means[0].rows());
    let vec_of = |m: &Tensor, start: usize, end: usize| -> Vec<f64> {
        let part = m.slice_cols(start, end);
        if uniform {
            part.into_data()
        } else {
            let n = part.rows() as f64;
            (0..part.cols()).map(|j| (0..part.rows()).map(|i| part.get(i, j)).sum::<f64>() / n).collect()
        }
    };
    let build = |start: usize, end: usize| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = means.iter().map(|m| vec_of(m, start, end)).collect();
        let cols = rows[0].len();
        Tensor::new(rows.len(), cols, rows.concat())
    };
    let a = build(0, arch.k)?;
    let b = build(arch.k, arch.latent())?;
    hsic_adaptive(&a, &b).map(Some)
}

struct Running {
    vae: f64,
    causal: f64,
    ce: f64,
    batches: usize,
}

impl Running {
    fn new() -> Self {
        Self { vae: 0.0, causal: 0.0, ce: 0.0, batches: 0 }
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.batches.max(1) as f64
    }
}

pub fn train_on_split(ds: &Dataset, s: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    if s.train.is_empty() || s.validation.is_empty() || s.test.is_empty() {
        return Err(Error::contract(format!(
            "every split part must be nonempty, got {}/{}/{}",
            s.train.len(),
            s.validation.len(),
            s.test.len()
        )));
    }
    let prepared = prepare_all(ds)?;
    let mut params = initial_params(ds, cfg);
    let arch = params.arch.clone();
    let mut noise_rng = rng_stream(cfg.seed, STREAM_NOISE);
    let mut dropout_rng = rng_stream(cfg.seed, STREAM_DROPOUT);
    let mut adam_ae = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut adam_cls = AdamState::new(cfg.lr, cfg.weight_decay);
    let with_mi = cfg.variant == Variant::Full;
    let entropy = EntropyConfig {
        delta: cfg.delta,
        ..EntropyConfig::default()
    };
    let causal = cfg.causal_active();
    let start_cls = cfg.classifier_start();

    let mut history = History::with_capacity(cfg.epochs);
    let mut cache: Option<Vec<Option<Tensor>>> = None;
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let stage: u8 = if epoch < start_cls { 1 } else { 2 };
        if stage == 2 && cache.is_none() && arch.explainer {
            let all: Vec<usize> = (0..prepared.len()).collect();
            let means = posterior_means(&params, &prepared, &all)?;
            cache = Some(means.into_iter().map(Some).collect());
        }
        let mut run = Running::new();
        for idx in batches(&s.train, cfg.batch_size, epoch_seed(cfg.seed, epoch))? {
            let graphs: Vec<&Prepared> = idx.iter().map(|&i| &prepared[i]).collect();
            let batch = Batch::new(&graphs)?;
            let seg = &batch.segments;
            let mut tape = Tape::new();
            let causal_here = causal && batch.len() >= 2;
            if stage == 1 {
                let b = Bound::bind(&mut tape, &params.store, is_autoencoder_param)?;
                let eps = forward::sample_noise(seg.total(), arch.latent(), &mut noise_rng);
                let enc = forward::encode(&mut tape, &b, &arch, &batch, Some(eps))?;
                let (a_c, x_c) = forward::decode(&mut tape, &b, enc.z, seg)?;
                let vae = forward::graphvae_loss(&mut tape, &batch, a_c, x_c, enc.mu, enc.logvar)?;
                run.vae += tape.value(vae).item();
                let mut loss = vae;
                if causal_here {
                    let alpha = tape.slice_cols(enc.z, 0, arch.k)?;
                    let beta = tape.slice_cols(enc.z, arch.k, arch.latent())?;
                    let va = forward::vectorize(&mut tape, alpha, seg)?;
                    let vb = forward::vectorize(&mut tape, beta, seg)?;
                    let ct = forward::causal_loss(&mut tape, va, vb, &batch.labels, arch.n_classes, &entropy, with_mi)?;
                    run.causal += tape.value(ct.loss).item();
                    let scaled = tape.scale(ct.loss, cfg.lambda)?;
                    loss = tape.add(loss, scaled)?;
                }
                let grads = tape.backward(loss)?;
                adam_ae.step(&mut params.store, &b.collect(&tape, &grads))?;
            } else {
                let b = Bound::bind(&mut tape, &params.store, is_classifier_param)?;
                let latent = match &cache {
                    Some(c) => {
                        let parts: Vec<&Tensor> = idx.iter().map(|&i| c[i].as_ref().expect("cached")).collect();
                        Some((stack_rows(&parts, 0, arch.k)?, stack_rows(&parts, arch.k, arch.latent())?))
                    }
                    None => None,
                };
                let alpha = match &latent {
                    Some((a, _)) => Some(tape.constant(a.clone())?),
                    None => None,
                };
                let (adj, proj) = forward::classifier_adjacency(&mut tape, &b, &arch, &batch, alpha)?;
                let mut pass = forward::TrainPass::new(&mut dropout_rng);
                let logits = forward::classify(&mut tape, &b, &params.store, &arch, &batch, adj, Some(&mut pass))?;
                let ce = tape.cross_entropy(logits, &batch.labels)?;
                run.ce += tape.value(ce).item();
                let mut loss = ce;
                if let (true, Some(p), Some((_, beta))) = (causal_here, proj, &latent) {
                    let beta = tape.constant(beta.clone())?;
                    let va = forward::vectorize(&mut tape, p, seg)?;
                    let vb = forward::vectorize(&mut tape, beta, seg)?;
                    let ct = forward::causal_loss(&mut tape, va, vb, &batch.labels, arch.n_classes, &entropy, with_mi)?;
                    run.causal += tape.value(ct.loss).item();
                    let scaled = tape.scale(ct.loss, cfg.lambda)?;
                    loss = tape.add(loss, scaled)?;
                }
                let grads = tape.backward(loss)?;
                adam_cls.step(&mut params.store, &b.collect(&tape, &grads))?;
                forward::update_running_stats(&mut params.store, &pass.norm_stats, seg.total())?;
            }
            run.batches += 1;
        }

        let val_pred = predict_with(&params, &prepared, &s.validation, cache.as_deref())?;
        let val_accuracy = accuracy(&val_pred, &prepared, &s.validation);
        let hsic_alpha_beta = if arch.explainer {
            let means = posterior_means(&params, &prepared, &s.validation)?;
            latent_hsic(&arch, &means)?
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            stage,
            loss_vae: (stage == 1).then(|| run.mean(run.vae)),
            loss_causal: causal.then(|| run.mean(run.causal)),
            loss_ce: (stage == 2).then(|| run.mean(run.ce)),
            val_accuracy,
            hsic_alpha_beta,
        });
        if stage == 2 && best.as_ref().map_or(true, |(acc, _, _)| val_accuracy >= *acc) {
            best = Some((val_accuracy, epoch, params.clone()));
        }
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (cfg.epochs, params.clone()),
    };
    Ok(TrainOutcome {
        params: best_params,
        final_params: params,
        best_epoch,
        history,
        split: s.clone(),
        config: cfg.clone(),
    })
}
