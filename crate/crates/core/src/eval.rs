//! Distribution distances between graph sets (random-GIN embeddings, EMD
//! ground distance, RBF-kernel MMD), class-preservation and validity
//! fractions, and the metric report written by the pipeline.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{validate, DenseGraph, GraphDataset};
use crate::models::{softmax, GraphClassifier};
use crate::nn::glorot;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundDistance {
    /// 1-D earth mover's distance over the coordinate axis.
    Emd,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomGinConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Number of independently initialized networks averaged over.
    pub num_seeds: usize,
    /// Network `s` is initialized from `base_seed + s`.
    pub base_seed: u64,
    pub distance: GroundDistance,
}

impl Default for RandomGinConfig {
    fn default() -> Self {
        RandomGinConfig {
            layers: 3,
            hidden: 64,
            num_seeds: 10,
            base_seed: 0,
            distance: GroundDistance::Emd,
        }
    }
}

impl RandomGinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("eval.layers", "must be >= 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("eval.hidden", "must be >= 1"));
        }
        if self.num_seeds == 0 {
            return Err(Error::config("eval.num_seeds", "must be >= 1"));
        }
        Ok(())
    }
}

/// Untrained GIN with fixed random weights: per layer
/// `h' = W₂·relu(W₁·(h + Σ_neighbours h) + b₁) + b₂` (ε = 0), each layer's
/// node states sum-pooled, pooled vectors concatenated.
pub struct RandomGin {
    layers: Vec<(Matrix, Matrix, Matrix, Matrix)>,
}

impl RandomGin {
    pub fn new(input_dim: usize, cfg: &RandomGinConfig, seed_index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed.wrapping_add(seed_index as u64));
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut fan_in = input_dim;
        for _ in 0..cfg.layers {
            let w1 = glorot(fan_in, cfg.hidden, 1.0, &mut rng);
            let b1 = glorot(1, cfg.hidden, 1.0, &mut rng);
            let w2 = glorot(cfg.hidden, cfg.hidden, 1.0, &mut rng);
            let b2 = glorot(1, cfg.hidden, 1.0, &mut rng);
            layers.push((w1, b1, w2, b2));
            fan_in = cfg.hidden;
        }
        RandomGin { layers }
    }

    pub fn embed(&self, g: &DenseGraph) -> Vec<f64> {
        let n = g.n_max();
        let mask = g.node_mask();
        let active: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        let weight = |i: usize, j: usize| -> f64 { g.adjacency().row(i * n + j).iter().sum() };

        let mut h = Matrix::from_fn(active.len(), g.node_dim(), |r, c| {
            g.node_features().get(active[r], c)
        });
        let mut out = Vec::new();
        for (w1, b1, w2, b2) in &self.layers {
            let mut agg = h.clone();
            for (r, &i) in active.iter().enumerate() {
                for (s, &j) in active.iter().enumerate() {
                    let w = weight(i, j);
                    if i != j && w != 0.0 {
                        for c in 0..h.cols() {
                            let v = agg.get(r, c) + w * h.get(s, c);
                            agg.set(r, c, v);
                        }
                    }
                }
            }
            let mut z = agg.matmul(w1);
            for r in 0..z.rows() {
                for (v, &b) in z.row_mut(r).iter_mut().zip(b1.data()) {
                    *v = (*v + b).max(0.0);
                }
            }
            let mut next = z.matmul(w2);
            for r in 0..next.rows() {
                for (v, &b) in next.row_mut(r).iter_mut().zip(b2.data()) {
                    *v += b;
                }
            }
            let mut pooled = vec![0.0; next.cols()];
            for r in 0..next.rows() {
                for (p, &v) in pooled.iter_mut().zip(next.row(r)) {
                    *p += v;
                }
            }
            out.extend(pooled);
            h = next;
        }
        out
    }
}

/// One embedding row per graph, from random network `seed_index`.
pub fn random_gin_embed(
    graphs: &[DenseGraph],
    cfg: &RandomGinConfig,
    seed_index: usize,
) -> Vec<Vec<f64>> {
    let Some(first) = graphs.first() else {
        return Vec::new();
    };
    let gin = RandomGin::new(first.node_dim(), cfg, seed_index);
    graphs.iter().map(|g| gin.embed(g)).collect()
}

/// 1-D earth mover's distance between two vectors read as histograms over
/// their coordinates, after shifting both by their joint minimum.
pub fn emd_distance(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "embedding dimensions differ");
    if u.is_empty() {
        return 0.0;
    }
    let lo = u.iter().chain(v).cloned().fold(f64::INFINITY, f64::min);
    let normalize = |w: &[f64]| -> Vec<f64> {
        let shifted: Vec<f64> = w.iter().map(|x| x - lo).collect();
        let total: f64 = shifted.iter().sum();
        if total > 0.0 {
            shifted.iter().map(|x| x / total).collect()
        } else {
            vec![1.0 / w.len() as f64; w.len()]
        }
    };
    let (pu, pv) = (normalize(u), normalize(v));
    let (mut cu, mut cv, mut d) = (0.0, 0.0, 0.0);
    for (a, b) in pu.iter().zip(&pv) {
        cu += a;
        cv += b;
        d += (cu - cv).abs();
    }
    d
}

fn l2_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

fn ground(cfg: &RandomGinConfig, u: &[f64], v: &[f64]) -> f64 {
    match cfg.distance {
        GroundDistance::Emd => emd_distance(u, v),
        GroundDistance::L2 => l2_distance(u, v),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmdResult {
    pub mean: f64,
    /// Standard error across random-network seeds.
    pub stderr: f64,
    pub per_seed: Vec<f64>,
    /// True when a singleton set forced the biased estimator.
    pub biased: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// MMD between two sets of embeddings under `k = exp(−d / 2σ²)`. Unbiased
/// MMD² unless a set is a singleton; clamped at 0 before the square root.
/// `sigma = None` uses the median of all pairwise distances.
pub fn mmd_from_embeddings(
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    cfg: &RandomGinConfig,
    sigma: Option<f64>,
) -> Result<(f64, bool)> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Data("MMD needs two nonempty sets".into()));
    }
    let all: Vec<&Vec<f64>> = p.iter().chain(q).collect();
    let m = all.len();
    let mut dist = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let d = ground(cfg, all[i], all[j]);
            dist[i * m + j] = d;
            dist[j * m + i] = d;
        }
    }
    let sigma = match sigma {
        Some(s) => s,
        None => {
            let pairs = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j)));
            median(pairs.map(|(i, j)| dist[i * m + j]).collect())
        }
    };
    let denom = 2.0 * sigma * sigma;
    let k = |i: usize, j: usize| {
        let d = dist[i * m + j];
        if denom > 0.0 {
            (-d / denom).exp()
        } else if d == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let (np, nq) = (p.len(), q.len());
    let biased = np < 2 || nq < 2;
    let within = |lo: usize, hi: usize| {
        let n = hi - lo;
        let mut s = 0.0;
        for i in lo..hi {
            for j in lo..hi {
                if biased || i != j {
                    s += k(i, j);
                }
            }
        }
        let count = if biased { n * n } else { n * (n - 1) };
        s / count as f64
    };
    let mut cross = 0.0;
    for i in 0..np {
        for j in np..m {
            cross += k(i, j);
        }
    }
    cross /= (np * nq) as f64;
    let mmd2 = within(0, np) + within(np, m) - 2.0 * cross;
    Ok((mmd2.max(0.0).sqrt(), biased))
}

/// MMD-RBF between two graph sets, averaged over the random networks.
pub fn mmd_rbf(
    p: &[DenseGraph],
    q: &[DenseGraph],
    cfg: &RandomGinConfig,
    sigma: Option<f64>,
) -> Result<MmdResult> {
    cfg.validate()?;
    if p.is_empty() || q.is_empty() {
        return Err(Error::Data("MMD needs two nonempty graph sets".into()));
    }
    let mut per_seed = Vec::with_capacity(cfg.num_seeds);
    let mut biased = false;
    for s in 0..cfg.num_seeds {
        let gin = RandomGin::new(p[0].node_dim(), cfg, s);
        let ep: Vec<_> = p.iter().map(|g| gin.embed(g)).collect();
        let eq: Vec<_> = q.iter().map(|g| gin.embed(g)).collect();
        let (v, b) = mmd_from_embeddings(&ep, &eq, cfg, sigma)?;
        biased |= b;
        per_seed.push(v);
    }
    if biased {
        warn!("singleton graph set: MMD uses the biased estimator");
    }
    let (mean, stderr) = mean_stderr(&per_seed);
    Ok(MmdResult {
        mean,
        stderr,
        per_seed,
        biased,
    })
}

/// Mean and standard error of the mean (sample std / √n; 0 for n < 2).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean probability the classifier assigns to each graph's own label,
/// evaluated on the clean graph at time `t` (normally the SDE's
/// `eps_time`).
pub fn preservation_score(phi: &GraphClassifier, ds: &GraphDataset, t: f64) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("preservation of an empty dataset is undefined".into()));
    }
    let mut total = 0.0;
    for (k, g) in ds.graphs.iter().enumerate() {
        let y = g
            .label
            .ok_or_else(|| Error::Data(format!("graph {k} has no label")))?;
        let logits = phi.logits(g.node_features(), g.adjacency(), g.node_mask(), t)?;
        total += softmax(&logits)[y];
    }
    Ok(total / ds.len() as f64)
}

/// Fraction of graphs satisfying `predicate`; an empty set counts as fully
/// valid.
pub fn validity_fraction(graphs: &[DenseGraph], predicate: impl Fn(&DenseGraph) -> bool) -> f64 {
    if graphs.is_empty() {
        warn!("validity of an empty graph set is taken as 1");
        return 1.0;
    }
    graphs.iter().filter(|g| predicate(g)).count() as f64 / graphs.len() as f64
}

pub fn passes_validate(g: &DenseGraph) -> bool {
    validate(g).is_empty()
}

/// Connectivity of the graph left after dropping isolated nodes. A graph
/// without edges passes only when it has at most one active node.
pub fn is_connected(g: &DenseGraph) -> bool {
    let keep: Vec<bool> = (0..g.n_max())
        .map(|i| g.node_mask()[i] && g.degree(i) > 0)
        .collect();
    if !keep.contains(&true) {
        return g.num_active() <= 1;
    }
    let pruned = DenseGraph::from_parts(
        g.node_features().clone(),
        g.adjacency().clone(),
        keep,
        None,
    );
    pruned.map(|p| p.is_connected()).unwrap_or(false)
}

pub fn max_degree_at_most(bound: usize) -> impl Fn(&DenseGraph) -> bool {
    move |g| (0..g.n_max()).all(|i| g.degree(i) <= bound)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut e = k;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
                e += 1;
            }
            let avg = (k + e) as f64 / 2.0 + 1.0;
            for &i in &idx[k..=e] {
                r[i] = avg;
            }
            k = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub mmd_mean: f64,
    pub mmd_stderr: f64,
    pub preservation: f64,
    pub validity: f64,
    pub connected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamRow {
    pub mode: String,
    pub seed: u64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Per-λ generation metrics plus downstream accuracies. MMD error bars are
/// across random-GIN seeds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub lambda_rows: Vec<LambdaRow>,
    pub downstream_rows: Vec<DownstreamRow>,
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

impl MetricReport {
    /// Columns `lambda, mmd_mean, mmd_stderr, preservation, validity,
    /// connected`.
    pub fn write_lambda_csv(&self, path: &Path) -> Result<()> {
        write_rows(&self.lambda_rows, path)
    }

    /// Columns `mode, seed, val_acc, test_acc`.
    pub fn write_downstream_csv(&self, path: &Path) -> Result<()> {
        write_rows(&self.downstream_rows, path)
    }

    pub fn read_lambda_csv(path: &Path) -> Result<Vec<LambdaRow>> {
        read_rows(path)
    }

    pub fn read_downstream_csv(path: &Path) -> Result<Vec<DownstreamRow>> {
        read_rows(path)
    }

    /// Line plot of MMD against λ with ±stderr whiskers.
    pub fn mmd_svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 48.0);
        let rows = &self.lambda_rows;
        let y_max = rows
            .iter()
            .map(|r| r.mmd_mean + r.mmd_stderr)
            .fold(0.0f64, f64::max)
            .max(1e-9)
            * 1.1;
        let sx = |l: f64| pad + l * (w - 2.0 * pad);
        let sy = |v: f64| h - pad - v / y_max * (h - 2.0 * pad);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
            h - pad,
            w - pad
        );
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
            h - pad
        );
        for k in 0..=5 {
            let l = k as f64 / 5.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{l:.1}</text>"#,
                sx(l),
                h - pad + 16.0
            );
            let v = y_max * k as f64 / 5.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.3}</text>"#,
                pad - 6.0,
                sy(v) + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">lambda</text>"#,
            w / 2.0,
            h - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.1}" font-size="12" transform="rotate(-90 14 {:.1})" text-anchor="middle">MMD-RBF</text>"#,
            h / 2.0,
            h / 2.0
        );
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.lambda), sy(r.mmd_mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for r in rows {
            let (x, lo, hi) = (
                sx(r.lambda),
                sy((r.mmd_mean - r.mmd_stderr).max(0.0)),
                sy(r.mmd_mean + r.mmd_stderr),
            );
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{lo:.2}" x2="{x:.2}" y2="{hi:.2}" stroke="steelblue"/>"#
            );
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
                sy(r.mmd_mean)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emd_examples() {
        assert_eq!(emd_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(emd_distance(&[0.3, 2.0, 1.0], &[0.3, 2.0, 1.0]), 0.0);
        let (u, v) = ([0.1, -2.0, 3.0, 0.5], [1.0, 1.0, -1.0, 2.0]);
        assert!((emd_distance(&u, &v) - emd_distance(&v, &u)).abs() < 1e-15);
        // Equal zero vectors fall back to uniform histograms.
        assert_eq!(emd_distance(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn singleton_mmd_matches_closed_form() {
        let cfg = RandomGinConfig::default();
        let p = vec![vec![1.0, 0.0]];
        let q = vec![vec![0.0, 1.0]];
        let sigma = 0.3;
        let (m, biased) = mmd_from_embeddings(&p, &q, &cfg, Some(sigma)).unwrap();
        assert!(biased);
        let expect = (2.0 * (1.0 - (-1.0 / (2.0 * sigma * sigma)).exp())).sqrt();
        assert!((m - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_sets_have_zero_biased_and_small_unbiased_mmd() {
        let cfg = RandomGinConfig::default();
        let p: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 1.0, (i % 3) as f64]).collect();
        let (m, biased) = mmd_from_embeddings(&p, &p, &cfg, None).unwrap();
        assert!(!biased);
        assert!(m < 0.3, "{m}");
    }

    #[test]
    fn empty_graph_embeds_to_zero() {
        let g = DenseGraph::empty(4, 0, 3, 1).unwrap();
        let e = random_gin_embed(&[g], &RandomGinConfig::default(), 0);
        assert_eq!(e[0].len(), 3 * 64);
        assert!(e[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spearman_of_monotone_sequences() {
        let a = [0.0, 0.1, 0.2, 0.3];
        assert!((spearman(&a, &[1.0, 2.0, 5.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[9.0, 5.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn connectivity_ignores_isolated_nodes() {
        let mut g = DenseGraph::empty(6, 5, 1, 1).unwrap();
        assert!(!is_connected(&g));
        g.set_edge(0, 1, 0, 1.0);
        g.set_edge(1, 2, 0, 1.0);
        assert!(is_connected(&g));
        assert!(!g.is_connected());
        g.set_edge(3, 4, 0, 1.0);
        assert!(!is_connected(&g));
        assert!(is_connected(&DenseGraph::empty(6, 1, 1, 1).unwrap()));
    }

    #[test]
    fn validity_of_empty_set_is_one() {
        assert_eq!(validity_fraction(&[], passes_validate), 1.0);
    }

    #[test]
    fn svg_has_one_marker_per_row() {
        let report = MetricReport {
            lambda_rows: (0..3)
                .map(|k| LambdaRow {
                    lambda: k as f64 / 10.0,
                    mmd_mean: 0.1 * k as f64,
                    mmd_stderr: 0.01,
                    preservation: 0.9,
                    validity: 1.0,
                    connected: 0.95,
                })
                .collect(),
            downstream_rows: vec![],
        };
        let svg = report.mmd_svg();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.starts_with("<svg"));
    }
}
