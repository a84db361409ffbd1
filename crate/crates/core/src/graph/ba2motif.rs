use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Edge, Graph, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BA_BASE_NODES: usize = 20;
pub const MOTIF_NODES: usize = 5;
pub const BA_FEATURE_DIM: usize = 10;

const HOUSE: [Edge; 6] = [(0, 1), (1, 2), (2, 3), (0, 3), (2, 4), (3, 4)];
const CYCLE: [Edge; 5] = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)];

/// Barabási–Albert trees with a house (label 0) or a 5-cycle (label 1)
/// attached by a single bridge edge. The first half of the dataset carries
/// label 0. Graph `k` is drawn from its own stream seeded with `seed + k`, so
/// every graph is reproducible in isolation.
pub fn generate_ba2motif(count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || count % 2 != 0 {
        return Err(Error::contract(format!(
            "graph count must be positive and even, got {count}"
        )));
    }
    let graphs = (0..count)
        .map(|k| {
            let label = usize::from(k >= count / 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            motif_graph(label, &mut rng)
        })
        .collect();
    Ok(Dataset {
        graphs,
        n_classes: 2,
        feature_dim: BA_FEATURE_DIM,
        provenance: Provenance::Generated { seed, count },
    })
}

fn motif_graph(label: usize, rng: &mut impl Rng) -> Graph {
    let n = BA_BASE_NODES + MOTIF_NODES;
    let mut adj = Tensor::zeros(n, n);
    let link = |adj: &mut Tensor, i: usize, j: usize| {
        adj.set(i, j, 1.0);
        adj.set(j, i, 1.0);
    };

    // Preferential attachment with one edge per new node, seeded by a single
    // edge; `targets` lists every edge endpoint so uniform picks from it are
    // degree-proportional.
    link(&mut adj, 0, 1);
    let mut targets = vec![0, 1];
    for v in 2..BA_BASE_NODES {
        let u = targets[rng.random_range(0..targets.len())];
        link(&mut adj, u, v);
        targets.extend([u, v]);
    }

    let motif: &[Edge] = if label == 0 { &HOUSE } else { &CYCLE };
    let offset = BA_BASE_NODES;
    let mut mask: Vec<Edge> = motif.iter().map(|&(i, j)| (i + offset, j + offset)).collect();
    for &(i, j) in &mask {
        link(&mut adj, i, j);
    }
    mask.sort_unstable();

    let anchor = rng.random_range(0..BA_BASE_NODES);
    link(&mut adj, anchor, offset);

    Graph {
        adjacency: adj,
        features: Tensor::ones(n, BA_FEATURE_DIM),
        label,
        mask: Some(mask),
    }
}
