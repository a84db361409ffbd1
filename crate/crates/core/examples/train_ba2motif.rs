//! Trains on a generated BA-2Motif dataset and prints the epoch history.
//!
//! Usage: `train_ba2motif [count] [epochs] [gc_epochs] [seed] [variant] [lambda]`

use std::time::Instant;

use cignn_core::graph::generate_ba2motif;
use cignn_core::eval::{evaluate, explanation_score, mean_score};
use cignn_core::model::{train, Variant};
use cignn_core::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let count: usize = arg(0, "1000").parse()?;
    let mut cfg = TrainConfig {
        epochs: arg(1, "450").parse()?,
        gc_epochs: arg(2, "150").parse()?,
        seed: arg(3, "0").parse()?,
        variant: arg(4, "full").parse::<Variant>()?,
        lambda: arg(5, "0.001").parse()?,
        ..TrainConfig::default()
    };
    if cfg.gc_epochs > cfg.epochs {
        cfg.gc_epochs = cfg.epochs;
    }
    let ds = generate_ba2motif(count, cfg.seed)?;
    let start = Instant::now();
    let out = train(&ds, &cfg)?;
    for r in &out.history {
        println!(
            "{:4} s{} vae={:?} causal={:?} ce={:?} val={:.3} hsic={:?}",
            r.epoch, r.stage, r.loss_vae, r.loss_causal, r.loss_ce, r.val_accuracy, r.hsic_alpha_beta
        );
    }
    let m = evaluate(&out.params, &ds, &out.split.test)?.metrics()?;
    println!(
        "best epoch {} test accuracy {:.3} f1 {:.3} mcc {:.3} in {:.1}s",
        out.best_epoch,
        m.accuracy,
        m.f1,
        m.mcc,
        start.elapsed().as_secs_f64()
    );
    if out.params.arch.explainer {
        let scores = out
            .split
            .test
            .iter()
            .map(|&i| explanation_score(&out.params.explain(&ds.graphs[i], i)?.weights, &ds.graphs[i]))
            .collect::<Result<Vec<_>, _>>()?;
        let s = mean_score(&scores)?;
        println!("explanation auc {:.3} precision@k {:?} curve {:?}", s.auc, s.at_k, s.precision);
    }
    Ok(())
}
