//! Dense padded graph representation shared by every stage of the pipeline.
//!
//! A graph with at most `n_max` nodes is stored as a node-feature matrix `X`
//! (`n_max × a`) and an adjacency tensor `A` (`n_max × n_max × b`, edge
//! features live in the `b` channels). `A` is kept flattened as an
//! `(n_max²) × b` row-major matrix so that entry `(i, j, c)` sits at row
//! `i * n_max + j`, column `c`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGraph {
    node_features: Matrix,
    adjacency: Matrix,
    node_mask: Vec<bool>,
    pub label: Option<usize>,
    /// Free-form provenance tags (base kind, motif kind, lambda, ...).
    pub meta: BTreeMap<String, String>,
}

impl DenseGraph {
    /// Graph with `n_active` unconnected, featureless nodes padded to `n_max`.
    pub fn empty(n_max: usize, n_active: usize, a: usize, b: usize) -> Result<Self> {
        if n_active > n_max {
            return Err(Error::Shape(format!(
                "{n_active} active nodes exceed n_max = {n_max}"
            )));
        }
        if a == 0 || b == 0 {
            return Err(Error::Shape("feature dimensions must be positive".into()));
        }
        Ok(DenseGraph {
            node_features: Matrix::zeros(n_max, a),
            adjacency: Matrix::zeros(n_max * n_max, b),
            node_mask: (0..n_max).map(|i| i < n_active).collect(),
            label: None,
            meta: BTreeMap::new(),
        })
    }

    /// Assemble a graph from raw parts; only shapes are checked; use
    /// [`validate`] for the structural invariants.
    pub fn from_parts(
        node_features: Matrix,
        adjacency: Matrix,
        node_mask: Vec<bool>,
        label: Option<usize>,
    ) -> Result<Self> {
        let n_max = node_mask.len();
        if node_features.rows() != n_max {
            return Err(Error::Shape(format!(
                "node features have {} rows, mask has {n_max}",
                node_features.rows()
            )));
        }
        if adjacency.rows() != n_max * n_max {
            return Err(Error::Shape(format!(
                "adjacency has {} rows, expected {}",
                adjacency.rows(),
                n_max * n_max
            )));
        }
        if node_features.cols() == 0 || adjacency.cols() == 0 {
            return Err(Error::Shape("feature dimensions must be positive".into()));
        }
        Ok(DenseGraph {
            node_features,
            adjacency,
            node_mask,
            label,
            meta: BTreeMap::new(),
        })
    }

    #[inline]
    pub fn n_max(&self) -> usize {
        self.node_mask.len()
    }

    #[inline]
    pub fn node_dim(&self) -> usize {
        self.node_features.cols()
    }

    #[inline]
    pub fn edge_dim(&self) -> usize {
        self.adjacency.cols()
    }

    pub fn node_features(&self) -> &Matrix {
        &self.node_features
    }

    pub fn node_features_mut(&mut self) -> &mut Matrix {
        &mut self.node_features
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn adjacency_mut(&mut self) -> &mut Matrix {
        &mut self.adjacency
    }

    pub fn node_mask(&self) -> &[bool] {
        &self.node_mask
    }

    pub fn into_parts(self) -> (Matrix, Matrix, Vec<bool>) {
        (self.node_features, self.adjacency, self.node_mask)
    }

    pub fn num_active(&self) -> usize {
        self.node_mask.iter().filter(|&&m| m).count()
    }

    /// True when the active nodes occupy a prefix of the padded slots.
    pub fn mask_is_prefix(&self) -> bool {
        let n = self.num_active();
        self.node_mask.iter().take(n).all(|&m| m)
    }

    #[inline]
    pub fn edge(&self, i: usize, j: usize, c: usize) -> f64 {
        self.adjacency.get(i * self.n_max() + j, c)
    }

    /// Sets both `(i, j, c)` and `(j, i, c)`.
    pub fn set_edge(&mut self, i: usize, j: usize, c: usize, v: f64) {
        let n = self.n_max();
        self.adjacency.set(i * n + j, c, v);
        self.adjacency.set(j * n + i, c, v);
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        let n = self.n_max();
        self.adjacency.row(i * n + j).iter().any(|&v| v != 0.0)
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n_max())
            .filter(|&j| j != i && self.has_edge(i, j))
            .count()
    }

    /// Undirected edges `(i, j)` with `i < j` and any nonzero channel.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let n = self.n_max();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edge_list().len()
    }

    /// Breadth-first connectivity over active nodes. Graphs with zero or
    /// one active node count as connected.
    pub fn is_connected(&self) -> bool {
        let active: Vec<usize> = (0..self.n_max()).filter(|&i| self.node_mask[i]).collect();
        let Some(&start) = active.first() else {
            return true;
        };
        let mut seen = vec![false; self.n_max()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &active {
                if !seen[v] && self.has_edge(u, v) {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == active.len()
    }

    /// Relabel nodes: node `i` of `self` becomes node `perm[i]` of the result.
    pub fn permuted(&self, perm: &[usize]) -> Result<DenseGraph> {
        let n = self.n_max();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape("permutation is not a bijection on n_max".into()));
        }
        let mut out = self.clone();
        for i in 0..n {
            out.node_features
                .row_mut(perm[i])
                .copy_from_slice(self.node_features.row(i));
            out.node_mask[perm[i]] = self.node_mask[i];
            for j in 0..n {
                out.adjacency
                    .row_mut(perm[i] * n + perm[j])
                    .copy_from_slice(self.adjacency.row(i * n + j));
            }
        }
        Ok(out)
    }

    /// Same graph padded (or trimmed of trailing inactive slots) to `n_max`.
    pub fn repadded(&self, n_max: usize) -> Result<DenseGraph> {
        let n_old = self.n_max();
        if (n_max..n_old).any(|i| self.node_mask[i]) {
            return Err(Error::Shape(format!(
                "cannot shrink to {n_max}: an active node would be dropped"
            )));
        }
        let keep = n_old.min(n_max);
        let mut out = DenseGraph::empty(n_max, 0, self.node_dim(), self.edge_dim())?;
        out.label = self.label;
        out.meta = self.meta.clone();
        for i in 0..keep {
            out.node_mask[i] = self.node_mask[i];
            out.node_features
                .row_mut(i)
                .copy_from_slice(self.node_features.row(i));
            for j in 0..keep {
                out.adjacency
                    .row_mut(i * n_max + j)
                    .copy_from_slice(self.adjacency.row(i * n_old + j));
            }
        }
        Ok(out)
    }
}

/// A broken [`DenseGraph`] invariant, with the first offending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Asymmetry { i: usize, j: usize, c: usize },
    DiagonalNonzero { i: usize, c: usize },
    MaskedRowNonzero { i: usize },
    NonFinite { index: usize },
    NonDiscrete { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Asymmetry { i, j, c } => write!(f, "asymmetry at ({i},{j},{c})"),
            Violation::DiagonalNonzero { i, c } => write!(f, "diagonal nonzero at ({i},{i},{c})"),
            Violation::MaskedRowNonzero { i } => write!(f, "masked row nonzero at {i}"),
            Violation::NonFinite { index } => write!(f, "non-finite value at flat index {index}"),
            Violation::NonDiscrete { index } => {
                write!(f, "non-binary value at flat index {index}")
            }
        }
    }
}

/// Checks the structural invariants of a (possibly continuous) graph.
/// Returns an empty list iff every invariant holds; each violated invariant
/// is reported once, at its first offending index.
pub fn validate(g: &DenseGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = g.n_max();
    let b = g.edge_dim();

    let x = g.node_features().data();
    let a = g.adjacency().data();
    if let Some(index) = x.iter().chain(a).position(|v| !v.is_finite()) {
        out.push(Violation::NonFinite { index });
    }

    'sym: for i in 0..n {
        for j in i + 1..n {
            for c in 0..b {
                if g.edge(i, j, c) != g.edge(j, i, c) {
                    out.push(Violation::Asymmetry { i, j, c });
                    break 'sym;
                }
            }
        }
    }

    'diag: for i in 0..n {
        for c in 0..b {
            if g.edge(i, i, c) != 0.0 {
                out.push(Violation::DiagonalNonzero { i, c });
                break 'diag;
            }
        }
    }

    for i in 0..n {
        if g.node_mask()[i] {
            continue;
        }
        let x_nonzero = g.node_features().row(i).iter().any(|&v| v != 0.0);
        let a_nonzero = (0..n).any(|j| {
            g.adjacency().row(i * n + j).iter().any(|&v| v != 0.0)
                || g.adjacency().row(j * n + i).iter().any(|&v| v != 0.0)
        });
        if x_nonzero || a_nonzero {
            out.push(Violation::MaskedRowNonzero { i });
            break;
        }
    }
    out
}

/// [`validate`] plus the requirement that every entry is 0 or 1.
pub fn validate_discrete(g: &DenseGraph) -> Vec<Violation> {
    let mut out = validate(g);
    let x = g.node_features().data();
    let a = g.adjacency().data();
    if let Some(index) = x.iter().chain(a).position(|&v| v != 0.0 && v != 1.0) {
        out.push(Violation::NonDiscrete { index });
    }
    out
}

/// `(A + Aᵀ) / 2` per channel for a flattened `(n²) × b` adjacency.
pub fn symmetrize(adjacency: &Matrix, n: usize) -> Matrix {
    let b = adjacency.cols();
    let mut out = adjacency.clone();
    for i in 0..n {
        for j in i + 1..n {
            for c in 0..b {
                let v = 0.5 * (adjacency.get(i * n + j, c) + adjacency.get(j * n + i, c));
                out.set(i * n + j, c, v);
                out.set(j * n + i, c, v);
            }
        }
    }
    out
}

/// Zero masked rows of a node-level matrix (`n × d`).
pub fn mask_nodes(m: &mut Matrix, mask: &[bool]) {
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            m.row_mut(i).fill(0.0);
        }
    }
}

/// Zero the diagonal and every pair touching a masked node of a flattened
/// `(n²) × b` pair-level matrix.
pub fn mask_pairs(m: &mut Matrix, mask: &[bool]) {
    let n = mask.len();
    for i in 0..n {
        for j in 0..n {
            if i == j || !mask[i] || !mask[j] {
                m.row_mut(i * n + j).fill(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Augmented,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Augmented => "augmented",
        };
        f.write_str(s)
    }
}

/// Dimensions shared by every graph of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub n_max: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub num_classes: usize,
    /// Sizes of the one-hot blocks that tile the node features
    /// (e.g. `[11]` for degree only, `[11, 7]` for degree + color).
    pub feature_blocks: Vec<usize>,
}

impl Schema {
    pub fn check(&self) -> Result<()> {
        if self.n_max == 0 || self.node_dim == 0 || self.edge_dim == 0 || self.num_classes == 0 {
            return Err(Error::Shape("schema dimensions must be positive".into()));
        }
        if self.feature_blocks.iter().sum::<usize>() != self.node_dim {
            return Err(Error::Shape(format!(
                "feature blocks {:?} do not tile node_dim {}",
                self.feature_blocks, self.node_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub schema: Schema,
    pub split: SplitTag,
    pub graphs: Vec<DenseGraph>,
}

impl GraphDataset {
    pub fn new(schema: Schema, split: SplitTag) -> Result<Self> {
        schema.check()?;
        Ok(GraphDataset {
            schema,
            split,
            graphs: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Append a graph after checking it against the schema.
    pub fn push(&mut self, g: DenseGraph) -> Result<()> {
        self.check_graph(&g)?;
        self.graphs.push(g);
        Ok(())
    }

    pub fn check_graph(&self, g: &DenseGraph) -> Result<()> {
        let s = &self.schema;
        if g.n_max() != s.n_max || g.node_dim() != s.node_dim || g.edge_dim() != s.edge_dim {
            return Err(Error::Shape(format!(
                "graph dims (n_max {}, a {}, b {}) do not match dataset (n_max {}, a {}, b {})",
                g.n_max(),
                g.node_dim(),
                g.edge_dim(),
                s.n_max,
                s.node_dim,
                s.edge_dim
            )));
        }
        if let Some(y) = g.label {
            if y >= s.num_classes {
                return Err(Error::Data(format!(
                    "label {y} out of range for {} classes",
                    s.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Concatenation of two datasets sharing a schema; the split tag of
    /// `self` is kept.
    pub fn union(&self, other: &GraphDataset) -> Result<GraphDataset> {
        if self.schema != other.schema {
            return Err(Error::Shape("cannot merge datasets with different schemas".into()));
        }
        let mut out = self.clone();
        out.graphs.extend(other.graphs.iter().cloned());
        Ok(out)
    }

    /// Empirical distribution of active node counts.
    pub fn node_counts(&self) -> Vec<usize> {
        self.graphs.iter().map(DenseGraph::num_active).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.num_classes];
        for g in &self.graphs {
            if let Some(y) = g.label {
                counts[y] += 1;
            }
        }
        counts
    }
}
