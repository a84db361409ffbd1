use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, Graph};
use crate::model::Explanation;
use crate::tensor::Tensor;

/// Explanation sizes as a fraction of the graph's edge count.
pub const MU_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
/// Explanation sizes as absolute edge counts.
pub const EXPLANATION_K: [usize; 3] = [3, 4, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationScore {
    /// Hits over `min(selected, |mask|)`, one value per grid entry
    /// ([`MU_GRID`] unless chosen otherwise).
    pub precision: Vec<f64>,
    /// Hits over the number of selected edges.
    pub raw_precision: Vec<f64>,
    /// Mean of `precision`.
    pub auc: f64,
    /// Precision for each entry of [`EXPLANATION_K`].
    pub at_k: Vec<f64>,
}

/// Observed edges (`i < j`) ordered by descending weight; equal weights keep
/// lexicographic edge order.
pub fn ranked_edges(weights: &Tensor, graph: &Graph) -> Result<Vec<(Edge, f64)>> {
    let n = graph.num_nodes();
    if weights.shape() != [n, n] {
        return Err(Error::Scoring(format!(
            "weights are {:?} for a {n}-node graph",
            weights.shape()
        )));
    }
    let mut edges: Vec<(Edge, f64)> = graph.edges().into_iter().map(|(i, j)| ((i, j), weights.get(i, j))).collect();
    if edges.iter().any(|(_, w)| w.is_nan()) {
        return Err(Error::Scoring("NaN edge weight".into()));
    }
    edges.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(edges)
}

pub fn explanation_score(weights: &Tensor, graph: &Graph) -> Result<ExplanationScore> {
    explanation_score_on(weights, graph, &MU_GRID)
}

/// [`explanation_score`] over a caller-chosen grid of fractions in `(0, 1]`.
pub fn explanation_score_on(weights: &Tensor, graph: &Graph, grid: &[f64]) -> Result<ExplanationScore> {
    if grid.is_empty() || grid.iter().any(|mu| !(*mu > 0.0 && *mu <= 1.0)) {
        return Err(Error::Scoring(format!("explanation sizes must lie in (0, 1], got {grid:?}")));
    }
    let mask = match &graph.mask {
        Some(m) if !m.is_empty() => m,
        _ => return Err(Error::Scoring("graph has no ground-truth mask".into())),
    };
    let ranked = ranked_edges(weights, graph)?;
    let total = ranked.len();
    // Cumulative hit counts over the ranking.
    let mut hits = Vec::with_capacity(total + 1);
    hits.push(0usize);
    for ((i, j), _) in &ranked {
        let inside = mask.contains(&(*i, *j));
        hits.push(hits.last().unwrap() + usize::from(inside));
    }
    let at = |selected: usize| -> (f64, f64) {
        let selected = selected.min(total);
        if selected == 0 {
            return (0.0, 0.0);
        }
        let h = hits[selected] as f64;
        (h / selected.min(mask.len()) as f64, h / selected as f64)
    };
    let (precision, raw_precision): (Vec<f64>, Vec<f64>) = grid
        .iter()
        .map(|mu| at((mu * total as f64 - 1e-9).ceil() as usize))
        .unzip();
    let auc = precision.iter().sum::<f64>() / precision.len() as f64;
    let at_k = EXPLANATION_K.iter().map(|&k| at(k).0).collect();
    Ok(ExplanationScore {
        precision,
        raw_precision,
        auc,
        at_k,
    })
}

/// Element-wise mean over several graphs' scores.
pub fn mean_score(scores: &[ExplanationScore]) -> Result<ExplanationScore> {
    let Some(first) = scores.first() else {
        return Err(Error::Scoring("no explanation scores to average".into()));
    };
    let n = scores.len() as f64;
    let avg = |f: fn(&ExplanationScore) -> &Vec<f64>| -> Vec<f64> {
        (0..f(first).len())
            .map(|i| scores.iter().map(|s| f(s)[i]).sum::<f64>() / n)
            .collect()
    };
    Ok(ExplanationScore {
        precision: avg(|s| &s.precision),
        raw_precision: avg(|s| &s.raw_precision),
        auc: scores.iter().map(|s| s.auc).sum::<f64>() / n,
        at_k: avg(|s| &s.at_k),
    })
}

#[derive(Serialize)]
struct EdgeOut {
    i: usize,
    j: usize,
    weight: f64,
}

#[derive(Serialize)]
struct ExplanationOut {
    graph_id: usize,
    label: usize,
    edges: Vec<EdgeOut>,
}

/// One JSON object per line: the graph's id, label, and its observed edges
/// with explanation weights in ranked order.
pub fn write_explanations(w: &mut impl Write, items: &[(&Explanation, &Graph)]) -> Result<()> {
    for (ex, g) in items {
        let edges = ranked_edges(&ex.weights, g)?
            .into_iter()
            .map(|((i, j), weight)| EdgeOut { i, j, weight })
            .collect();
        let line = serde_json::to_string(&ExplanationOut {
            graph_id: ex.graph_id,
            label: g.label,
            edges,
        })
        .map_err(|e| Error::Scoring(format!("explanation serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::Scoring(format!("explanation export: {e}")))?;
    }
    Ok(())
}
