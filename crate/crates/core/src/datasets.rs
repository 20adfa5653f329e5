//! Synthetic motif datasets with covariate-shifted splits.
//!
//! Every graph is a base graph (the environment) plus a five-node motif (the
//! label), joined by one connector edge between a uniformly chosen base node
//! and motif node 0. Node features are the one-hot node degree, optionally
//! followed by a graph-wide one-hot color.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DenseGraph, GraphDataset, Schema, SplitTag};

pub const MOTIF_NODES: usize = 5;
pub const NUM_COLORS: usize = 7;
pub const TRAIN_COLORS: std::ops::Range<usize> = 0..5;
pub const VAL_COLOR: usize = 5;
pub const TEST_COLOR: usize = 6;
pub const MIN_BASE_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotifKind {
    House,
    Cycle,
    Crane,
}

impl MotifKind {
    pub const ALL: [MotifKind; 3] = [MotifKind::House, MotifKind::Cycle, MotifKind::Crane];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(y: usize) -> Option<MotifKind> {
        Self::ALL.get(y).copied()
    }

    /// Edge list of the 5-node template, node 0 carries the connector.
    pub fn template(self) -> &'static [(usize, usize)] {
        match self {
            MotifKind::House => &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)],
            MotifKind::Cycle => &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)],
            MotifKind::Crane => &[(0, 1), (1, 2), (2, 0), (1, 3), (2, 4)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Wheel,
    Tree,
    Ladder,
    Star,
    Path,
}

impl BaseKind {
    pub const ALL: [BaseKind; 5] = [
        BaseKind::Wheel,
        BaseKind::Tree,
        BaseKind::Ladder,
        BaseKind::Star,
        BaseKind::Path,
    ];
}

macro_rules! name_impls {
    ($ty:ty { $($variant:ident => $name:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $name),* })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)*
                    other => Err(Error::Data(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

name_impls!(MotifKind { House => "house", Cycle => "cycle", Crane => "crane" });
name_impls!(BaseKind {
    Wheel => "wheel",
    Tree => "tree",
    Ladder => "ladder",
    Star => "star",
    Path => "path",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotifSpec {
    pub motif: MotifKind,
    pub base: BaseKind,
    pub base_size: usize,
}

/// Node-feature layout shared by all graphs of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub n_max: usize,
    pub max_degree: usize,
    pub with_color: bool,
}

impl FeatureLayout {
    pub fn degree_dim(&self) -> usize {
        self.max_degree + 1
    }

    pub fn node_dim(&self) -> usize {
        self.degree_dim() + if self.with_color { NUM_COLORS } else { 0 }
    }

    pub fn blocks(&self) -> Vec<usize> {
        if self.with_color {
            vec![self.degree_dim(), NUM_COLORS]
        } else {
            vec![self.degree_dim()]
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            n_max: self.n_max,
            node_dim: self.node_dim(),
            edge_dim: 1,
            num_classes: MotifKind::ALL.len(),
            feature_blocks: self.blocks(),
        }
    }
}

fn base_edges<R: Rng + ?Sized>(
    kind: BaseKind,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if n < MIN_BASE_SIZE {
        return Err(Error::Construction(format!(
            "{kind} base needs at least {MIN_BASE_SIZE} nodes, got {n}"
        )));
    }
    let edges = match kind {
        BaseKind::Wheel => {
            let rim = n - 1;
            let mut e: Vec<_> = (1..n).map(|i| (0, i)).collect();
            e.extend((0..rim).map(|k| (1 + k, 1 + (k + 1) % rim)));
            e
        }
        BaseKind::Tree => (1..n).map(|k| (rng.gen_range(0..k), k)).collect(),
        BaseKind::Ladder => {
            if n % 2 != 0 {
                return Err(Error::Construction(format!(
                    "ladder base needs an even node count, got {n}"
                )));
            }
            let k = n / 2;
            let mut e: Vec<_> = (0..k).map(|i| (i, k + i)).collect();
            for i in 0..k - 1 {
                e.push((i, i + 1));
                e.push((k + i, k + i + 1));
            }
            e
        }
        BaseKind::Star => (1..n).map(|i| (0, i)).collect(),
        BaseKind::Path => (0..n - 1).map(|i| (i, i + 1)).collect(),
    };
    Ok(edges)
}

/// One base-plus-motif graph with degree (and optional color) features.
pub fn gen_motif_graph<R: Rng + ?Sized>(
    spec: &MotifSpec,
    layout: &FeatureLayout,
    color: Option<usize>,
    rng: &mut R,
) -> Result<DenseGraph> {
    let total = spec.base_size + MOTIF_NODES;
    if total > layout.n_max {
        return Err(Error::Construction(format!(
            "{total} nodes exceed n_max = {}",
            layout.n_max
        )));
    }
    let mut edges = base_edges(spec.base, spec.base_size, rng)?;
    let offset = spec.base_size;
    edges.extend(
        spec.motif
            .template()
            .iter()
            .map(|&(i, j)| (offset + i, offset + j)),
    );
    let anchor = rng.gen_range(0..spec.base_size);
    edges.push((anchor, offset));

    let mut g = DenseGraph::empty(layout.n_max, total, layout.node_dim(), 1)?;
    for &(i, j) in &edges {
        g.set_edge(i, j, 0, 1.0);
    }
    for i in 0..total {
        let d = g.degree(i).min(layout.max_degree);
        g.node_features_mut().set(i, d, 1.0);
    }
    if layout.with_color {
        let c = color.ok_or_else(|| Error::Construction("color layout needs a color".into()))?;
        if c >= NUM_COLORS {
            return Err(Error::Construction(format!("color {c} out of range")));
        }
        for i in 0..total {
            g.node_features_mut().set(i, layout.degree_dim() + c, 1.0);
        }
        g.meta.insert("color".into(), c.to_string());
    }
    g.label = Some(spec.motif.label());
    g.meta.insert("base".into(), spec.base.to_string());
    g.meta.insert("motif".into(), spec.motif.to_string());
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Base,
    Size,
    Color,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub shift_kind: ShiftKind,
    /// Graphs per split: train, val, test.
    pub sizes: [usize; 3],
    /// Inclusive base-graph node range for the base and color shifts.
    pub base_size_range: (usize, usize),
    /// Inclusive total node ranges per split for the size shift.
    pub size_ranges: [(usize, usize); 3],
    pub max_degree: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            shift_kind: ShiftKind::Base,
            sizes: [300, 150, 150],
            base_size_range: (4, 12),
            size_ranges: [(6, 45), (20, 75), (68, 155)],
            max_degree: 10,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.base_size_range;
        if self.shift_kind != ShiftKind::Size && (lo < MIN_BASE_SIZE || lo > hi) {
            return Err(Error::config(
                "dataset.base_size_range",
                format!("need {MIN_BASE_SIZE} <= lo <= hi, got ({lo}, {hi})"),
            ));
        }
        if self.shift_kind == ShiftKind::Size {
            for (k, &(lo, hi)) in self.size_ranges.iter().enumerate() {
                if lo > hi || hi < MIN_BASE_SIZE + MOTIF_NODES + 1 {
                    return Err(Error::config(
                        format!("dataset.size_ranges[{k}]"),
                        format!(
                            "range ({lo}, {hi}) admits no graph with a base of at least \
                             {MIN_BASE_SIZE} nodes plus a {MOTIF_NODES}-node motif"
                        ),
                    ));
                }
            }
        }
        if self.max_degree == 0 {
            return Err(Error::config("dataset.max_degree", "must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> FeatureLayout {
        let n_max = match self.shift_kind {
            ShiftKind::Size => self.size_ranges.iter().map(|r| r.1).max().unwrap_or(0),
            _ => self.base_size_range.1 + MOTIF_NODES,
        };
        FeatureLayout {
            n_max,
            max_degree: self.max_degree,
            with_color: self.shift_kind == ShiftKind::Color,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: GraphDataset,
    pub val: GraphDataset,
    pub test: GraphDataset,
}

/// Balanced label sequence for `count` graphs, shuffled.
fn balanced_labels<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<MotifKind> {
    let mut labels: Vec<_> = (0..count).map(|k| MotifKind::ALL[k % 3]).collect();
    labels.shuffle(rng);
    labels
}

fn ladder_safe(base: BaseKind, size: usize, lo: usize, hi: usize) -> usize {
    if base != BaseKind::Ladder || size % 2 == 0 {
        return size;
    }
    if size > lo.max(MIN_BASE_SIZE) {
        size - 1
    } else if size < hi {
        size + 1
    } else {
        size
    }
}

fn gen_split(
    cfg: &SplitConfig,
    layout: &FeatureLayout,
    split: SplitTag,
    count: usize,
    master: &mut ChaCha8Rng,
) -> Result<GraphDataset> {
    let mut ds = GraphDataset::new(layout.schema(), split)?;
    let split_idx = match split {
        SplitTag::Train => 0,
        SplitTag::Val => 1,
        _ => 2,
    };
    let labels = balanced_labels(count, master);
    for motif in labels {
        let child_seed: u64 = master.gen();
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed);
        let (base, base_size) = match cfg.shift_kind {
            ShiftKind::Base => {
                let base = match split {
                    SplitTag::Train => {
                        *[BaseKind::Wheel, BaseKind::Tree, BaseKind::Ladder]
                            .choose(&mut rng)
                            .expect("nonempty")
                    }
                    SplitTag::Val => BaseKind::Star,
                    _ => BaseKind::Path,
                };
                let (lo, hi) = cfg.base_size_range;
                (base, ladder_safe(base, rng.gen_range(lo..=hi), lo, hi))
            }
            ShiftKind::Color => {
                let base = *BaseKind::ALL.choose(&mut rng).expect("nonempty");
                let (lo, hi) = cfg.base_size_range;
                (base, ladder_safe(base, rng.gen_range(lo..=hi), lo, hi))
            }
            ShiftKind::Size => {
                let base = *BaseKind::ALL.choose(&mut rng).expect("nonempty");
                let (lo, hi) = cfg.size_ranges[split_idx];
                let lo_base = lo.saturating_sub(MOTIF_NODES).max(MIN_BASE_SIZE);
                let hi_base = hi - MOTIF_NODES;
                let size = rng.gen_range(lo_base..=hi_base);
                (base, ladder_safe(base, size, lo_base, hi_base))
            }
        };
        let color = match (cfg.shift_kind, split) {
            (ShiftKind::Color, SplitTag::Train) => Some(rng.gen_range(TRAIN_COLORS)),
            (ShiftKind::Color, SplitTag::Val) => Some(VAL_COLOR),
            (ShiftKind::Color, _) => Some(TEST_COLOR),
            _ => None,
        };
        let spec = MotifSpec {
            motif,
            base,
            base_size,
        };
        let g = gen_motif_graph(&spec, layout, color, &mut rng)?;
        ds.push(g)?;
    }
    Ok(ds)
}

fn make_splits(cfg: &SplitConfig) -> Result<Splits> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [n_train, n_val, n_test] = cfg.sizes;
    Ok(Splits {
        train: gen_split(cfg, &layout, SplitTag::Train, n_train, &mut master)?,
        val: gen_split(cfg, &layout, SplitTag::Val, n_val, &mut master)?,
        test: gen_split(cfg, &layout, SplitTag::Test, n_test, &mut master)?,
    })
}

/// Base-type or size covariate-shift splits.
pub fn make_motif_splits(cfg: &SplitConfig) -> Result<Splits> {
    if cfg.shift_kind == ShiftKind::Color {
        return Err(Error::config(
            "dataset.shift_kind",
            "color shift is generated by make_color_splits",
        ));
    }
    make_splits(cfg)
}

/// Node-color feature-shift splits: train colors 0..5, val color 5, test
/// color 6, identical base/motif distribution everywhere.
pub fn make_color_splits(cfg: &SplitConfig) -> Result<Splits> {
    if cfg.shift_kind != ShiftKind::Color {
        return Err(Error::config("dataset.shift_kind", "expected `color`"));
    }
    make_splits(cfg)
}

/// Dispatch on `cfg.shift_kind`.
pub fn generate(cfg: &SplitConfig) -> Result<Splits> {
    match cfg.shift_kind {
        ShiftKind::Color => make_color_splits(cfg),
        _ => make_motif_splits(cfg),
    }
}
