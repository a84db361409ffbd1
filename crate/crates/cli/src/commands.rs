use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cignn_core::eval::{
    evaluate, explanation_score_on, mean_score, write_explanations, Confusion, ExplanationScore, Metrics,
};
use cignn_core::graph::{generate_ba2motif, load_dataset, save_dataset, split, Split};
use cignn_core::model::{initial_params, load_checkpoint, save_checkpoint, train, write_history_csv, Checkpoint};
use cignn_core::{Dataset, ModelParams};
use serde::Serialize;

use crate::config::{RunConfig, SplitPart};
use crate::error::CliError;
use crate::VERSION;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const EXPLANATIONS_FILE: &str = "explanations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Latent width held fixed while `sweep` moves the causal share.
pub const SWEEP_LATENT: usize = 64;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Path {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Path {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(format!("report: {e}")))?;
    write_file(path, format!("{text}\n").as_bytes())
}

/// A loadable config file with the run's identity in its header comments.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let text = format!(
        "# cignn {VERSION}\n# command = {command}\n# config_hash = sha256:{}\n# seed = {}\n{}",
        cfg.hash(),
        cfg.train.seed,
        cfg.render()
    );
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// The configured dataset file, or a generated BA-2Motif set.
fn dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    Ok(match &cfg.dataset {
        Some(path) => load_dataset(path)?,
        None => generate_ba2motif(cfg.count, cfg.data_seed)?,
    })
}

fn part(s: &Split, which: SplitPart, len: usize) -> Vec<usize> {
    match which {
        SplitPart::Train => s.train.clone(),
        SplitPart::Validation => s.validation.clone(),
        SplitPart::Test => s.test.clone(),
        SplitPart::All => (0..len).collect(),
    }
}

#[derive(Serialize)]
struct Scored {
    graphs: usize,
    confusion: Confusion,
    metrics: Metrics,
}

fn score(params: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<Scored, CliError> {
    let confusion = evaluate(params, ds, idx)?;
    Ok(Scored {
        graphs: idx.len(),
        confusion,
        metrics: confusion.metrics()?,
    })
}

/// Mean explanation score over the graphs in `idx` that carry a mask.
fn explain_score(params: &ModelParams, ds: &Dataset, idx: &[usize], grid: &[f64]) -> Result<Option<ExplanationScore>, CliError> {
    if !params.arch.explainer {
        return Ok(None);
    }
    let mut scores = Vec::new();
    for &i in idx {
        let g = &ds.graphs[i];
        if g.mask.as_ref().is_some_and(|m| !m.is_empty()) {
            scores.push(explanation_score_on(&params.explain(g, i)?.weights, g, grid)?);
        }
    }
    Ok(if scores.is_empty() {
        None
    } else {
        Some(mean_score(&scores)?)
    })
}

pub fn generate(count: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let ds = generate_ba2motif(count, seed)?;
    let file = if out.extension().is_some_and(|e| e == "jsonl") {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        out.to_path_buf()
    } else {
        create_dir(out)?;
        let cfg = RunConfig {
            count,
            data_seed: seed,
            ..RunConfig::default()
        };
        write_manifest(out, "generate", &cfg)?;
        out.join(DATASET_FILE)
    };
    save_dataset(&ds, &file)?;
    println!("wrote {} graphs to {}", ds.len(), file.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    command: &'static str,
    best_epoch: usize,
    split: [usize; 3],
    test: Scored,
    explanation: Option<ExplanationScore>,
    config: &'a cignn_core::TrainConfig,
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    let ds = dataset(cfg)?;
    if cfg.dataset.is_none() {
        save_dataset(&ds, out.join(DATASET_FILE))?;
    }
    let outcome = train(&ds, &cfg.train)?;
    let ck = Checkpoint {
        config: cfg.train.clone(),
        params: outcome.params,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
    };
    save_checkpoint(&ck, out.join(CHECKPOINT_FILE))?;
    let mut csv = Vec::new();
    write_history_csv(&ck.history, &mut csv).map_err(|e| CliError::Path {
        path: out.join(HISTORY_FILE),
        source: e,
    })?;
    write_file(&out.join(HISTORY_FILE), &csv)?;

    let s = &outcome.split;
    let test = score(&ck.params, &ds, &s.test)?;
    let explanation = explain_score(&ck.params, &ds, &s.test, &cfg.mu_grid)?;
    println!(
        "best epoch {}; test accuracy {:.4}, f1 {:.4}, mcc {:.4}",
        ck.best_epoch, test.metrics.accuracy, test.metrics.f1, test.metrics.mcc
    );
    if let Some(e) = &explanation {
        println!("explanation auc {:.4}", e.auc);
    }
    write_json(
        &out.join(REPORT_FILE),
        &TrainReport {
            command: "train",
            best_epoch: ck.best_epoch,
            split: [s.train.len(), s.validation.len(), s.test.len()],
            test,
            explanation,
            config: &cfg.train,
        },
    )?;
    write_manifest(out, "train", cfg)
}

/// The model to evaluate and the seed its split was drawn with.
fn model(cfg: &RunConfig, ds: &Dataset, checkpoint: Option<&Path>) -> Result<(ModelParams, u64), CliError> {
    match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let arch = &ck.params.arch;
            if arch.feature_dim != ds.feature_dim || arch.n_classes != ds.n_classes {
                return Err(cignn_core::Error::Validation(format!(
                    "checkpoint expects {} features and {} classes, dataset has {} and {}",
                    arch.feature_dim, arch.n_classes, ds.feature_dim, ds.n_classes
                ))
                .into());
            }
            Ok((ck.params, ck.config.seed))
        }
        None => Ok((initial_params(ds, &cfg.train), cfg.train.seed)),
    }
}

#[derive(Serialize)]
struct EvalReport {
    command: &'static str,
    checkpoint: Option<String>,
    split: String,
    result: Scored,
    explanation: Option<ExplanationScore>,
}

pub fn eval_cmd(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    create_dir(out)?;
    let ds = dataset(cfg)?;
    let (params, seed) = model(cfg, &ds, checkpoint)?;
    if checkpoint.is_none() {
        eprintln!("no --checkpoint given; evaluating the untrained initial model");
    }
    let idx = part(&split(ds.len(), seed)?, cfg.split, ds.len());
    let result = score(&params, &ds, &idx)?;
    let explanation = explain_score(&params, &ds, &idx, &cfg.mu_grid)?;
    println!(
        "{} graphs ({}): accuracy {:.4}, f1 {:.4}, mcc {:.4}",
        result.graphs, cfg.split, result.metrics.accuracy, result.metrics.f1, result.metrics.mcc
    );
    write_json(
        &out.join(REPORT_FILE),
        &EvalReport {
            command: "eval",
            checkpoint: checkpoint.map(|p| p.display().to_string()),
            split: cfg.split.to_string(),
            result,
            explanation,
        },
    )?;
    write_manifest(out, "eval", cfg)
}

pub fn explain_cmd(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    let ds = dataset(cfg)?;
    let (params, seed) = model(cfg, &ds, Some(checkpoint))?;
    if !params.arch.explainer {
        return Err(CliError::Usage("this checkpoint was trained without an explainer".into()));
    }
    let idx = part(&split(ds.len(), seed)?, cfg.split, ds.len());
    let explanations = idx
        .iter()
        .map(|&i| params.explain(&ds.graphs[i], i))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<_> = explanations.iter().zip(&idx).map(|(e, &i)| (e, &ds.graphs[i])).collect();
    let path = out.join(EXPLANATIONS_FILE);
    let file = File::create(&path).map_err(|e| CliError::Path {
        path: path.clone(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    write_explanations(&mut w, &pairs)?;
    w.flush().map_err(|e| CliError::Path { path, source: e })?;

    let explanation = explain_score(&params, &ds, &idx, &cfg.mu_grid)?;
    println!("wrote {} explanations", idx.len());
    if let Some(e) = &explanation {
        println!("explanation auc {:.4}, precision@k {:?}", e.auc, e.at_k);
    }
    #[derive(Serialize)]
    struct Report {
        command: &'static str,
        checkpoint: String,
        split: String,
        graphs: usize,
        explanation: Option<ExplanationScore>,
    }
    write_json(
        &out.join(REPORT_FILE),
        &Report {
            command: "explain",
            checkpoint: checkpoint.display().to_string(),
            split: cfg.split.to_string(),
            graphs: idx.len(),
            explanation,
        },
    )?;
    write_manifest(out, "explain", cfg)
}

/// `K = round(ratio · 64)`, `L = 64 − K`, kept inside `[1, 63]`.
pub fn sweep_dims(ratio: f64) -> (usize, usize) {
    let k = ((ratio * SWEEP_LATENT as f64).round() as usize).clamp(1, SWEEP_LATENT - 1);
    (k, SWEEP_LATENT - k)
}

#[derive(Serialize)]
struct SweepRow {
    ratio: f64,
    k: usize,
    l: usize,
    best_epoch: usize,
    test: Metrics,
}

pub fn sweep_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    let ds = dataset(cfg)?;
    let mut rows = Vec::with_capacity(cfg.ratios.len());
    for &ratio in &cfg.ratios {
        let (k, l) = sweep_dims(ratio);
        let tc = cignn_core::TrainConfig { k, l, ..cfg.train.clone() };
        let outcome = train(&ds, &tc)?;
        let test = evaluate(&outcome.params, &ds, &outcome.split.test)?.metrics()?;
        rows.push(SweepRow {
            ratio,
            k,
            l,
            best_epoch: outcome.best_epoch,
            test,
        });
    }
    println!("{:>6} {:>3} {:>3} {:>9} {:>7} {:>7}", "ratio", "K", "L", "accuracy", "f1", "mcc");
    for r in &rows {
        println!(
            "{:>6.2} {:>3} {:>3} {:>9.4} {:>7.4} {:>7.4}",
            r.ratio, r.k, r.l, r.test.accuracy, r.test.f1, r.test.mcc
        );
    }
    #[derive(Serialize)]
    struct Report<'a> {
        command: &'static str,
        latent: usize,
        rows: &'a [SweepRow],
    }
    write_json(
        &out.join(REPORT_FILE),
        &Report {
            command: "sweep",
            latent: SWEEP_LATENT,
            rows: &rows,
        },
    )?;
    write_manifest(out, "sweep", cfg)
}

pub fn resolve(config: Option<&PathBuf>, overrides: &[(&str, Option<&String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
