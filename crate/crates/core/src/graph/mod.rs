//! Graph data model, synthetic benchmark generation, I/O and splitting.

mod ba2motif;
mod io;
mod split;

pub use ba2motif::{generate_ba2motif, BA_BASE_NODES, BA_FEATURE_DIM, MOTIF_NODES};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_VERSION};
pub use split::{batches, split, Split};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An undirected edge `(i, j)` with `i < j`.
pub type Edge = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    /// Symmetric `n×n` weights with zero diagonal.
    pub adjacency: Tensor,
    /// `n×d` node features.
    pub features: Tensor,
    pub label: usize,
    /// Ground-truth explanation edges, sorted, each with `i < j`.
    pub mask: Option<Vec<Edge>>,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    /// Edges with nonzero weight, in lexicographic order.
    pub fn edges(&self) -> Vec<Edge> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency.get(i, j) != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }

    /// Binary `n×n` matrix of the ground-truth edges, if present.
    pub fn mask_matrix(&self) -> Option<Tensor> {
        let mask = self.mask.as_ref()?;
        let n = self.num_nodes();
        let mut m = Tensor::zeros(n, n);
        for &(i, j) in mask {
            m.set(i, j, 1.0);
            m.set(j, i, 1.0);
        }
        Some(m)
    }

    /// Checks the structural invariants against the dataset's class count and
    /// feature width.
    pub fn validate(&self, n_classes: usize, feature_dim: usize) -> Result<()> {
        let n = self.num_nodes();
        let a = &self.adjacency;
        if !a.is_square() {
            return Err(Error::Validation(format!("adjacency is {:?}", a.shape())));
        }
        if self.features.rows() != n || self.features.cols() != feature_dim {
            return Err(Error::Validation(format!(
                "features are {:?}, expected [{n}, {feature_dim}]",
                self.features.shape()
            )));
        }
        if !a.all_finite() || !self.features.all_finite() {
            return Err(Error::Validation("non-finite entries".into()));
        }
        if !a.is_symmetric(0.0) {
            return Err(Error::Validation("adjacency is not symmetric".into()));
        }
        if (0..n).any(|i| a.get(i, i) != 0.0) {
            return Err(Error::Validation("adjacency has self-loops".into()));
        }
        if self.label >= n_classes {
            return Err(Error::Validation(format!(
                "label {} out of range for {n_classes} classes",
                self.label
            )));
        }
        if let Some(mask) = &self.mask {
            for &(i, j) in mask {
                if i >= j || j >= n || a.get(i, j) == 0.0 {
                    return Err(Error::Validation(format!(
                        "mask edge ({i}, {j}) is not an edge of the graph"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Generated { seed: u64, count: usize },
    File(String),
    Manual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, n_classes: usize, feature_dim: usize) -> Result<Self> {
        let ds = Self {
            graphs,
            n_classes,
            feature_dim,
            provenance: Provenance::Manual,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        for (idx, g) in self.graphs.iter().enumerate() {
            g.validate(self.n_classes, self.feature_dim)
                .map_err(|e| Error::Validation(format!("graph {idx}: {e}")))?;
        }
        Ok(())
    }

    /// Node count shared by every graph, if uniform.
    pub fn uniform_node_count(&self) -> Option<usize> {
        let n = self.graphs.first()?.num_nodes();
        self.graphs.iter().all(|g| g.num_nodes() == n).then_some(n)
    }

    pub fn mean_edge_count(&self) -> f64 {
        let total: usize = self.graphs.iter().map(Graph::num_edges).sum();
        total as f64 / self.graphs.len().max(1) as f64
    }
}

/// Symmetric normalization `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums
/// of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    if !a.is_square() {
        return Err(Error::dim("normalize_adjacency", format!("{:?}", a.shape())));
    }
    if a.data().iter().any(|&w| w < 0.0) {
        return Err(Error::contract("normalize_adjacency needs nonnegative weights"));
    }
    let n = a.rows();
    let mut hat = a.clone();
    for i in 0..n {
        hat.set(i, i, hat.get(i, i) + 1.0);
    }
    let deg: Vec<f64> = (0..n).map(|i| hat.row(i).iter().sum()).collect();
    Ok(Tensor::from_fn(n, n, |i, j| hat.get(i, j) / (deg[i] * deg[j]).sqrt()))
}
