//! Reverse-time integration of the coupled node/adjacency SDEs with guided
//! scores, quantization back to discrete graphs, and generation of labeled
//! augmentation sets.

use std::collections::BTreeMap;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{validate, DenseGraph, GraphDataset, SplitTag};
use crate::guidance::{guided_score, guided_score_with_alpha, node_norm, pair_norm, GuidanceConfig};
use crate::models::{ClassGuide, GraphDims, ScoreEstimate, ScoreModel};
use crate::sde::{masked_noise, DiffusionSde, SdeKind, TensorRole, TERMINAL_TIME};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    EulerMaruyama,
    EmLangevin,
    ReverseDiffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub snr: f64,
    pub scale_coeff: f64,
    pub corrector_steps: usize,
    pub num_steps: usize,
    pub seed: u64,
    /// Check graph invariants after every update and fail on the first
    /// violation.
    pub debug: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            solver: Solver::EmLangevin,
            snr: 0.2,
            scale_coeff: 0.7,
            corrector_steps: 1,
            num_steps: 1000,
            seed: 0,
            debug: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return Err(Error::config("sampler.snr", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.scale_coeff) {
            return Err(Error::config("sampler.scale_coeff", "must lie in [0, 1]"));
        }
        if self.num_steps == 0 {
            return Err(Error::config("sampler.num_steps", "must be >= 1"));
        }
        Ok(())
    }
}

/// Everything the reverse integrator needs from trained models.
#[derive(Clone, Copy)]
pub struct Networks<'a> {
    pub score: &'a dyn ScoreModel,
    pub guide: Option<&'a dyn ClassGuide>,
    pub sde_x: DiffusionSde,
    pub sde_a: DiffusionSde,
    pub dims: GraphDims,
}

/// State handed to a step observer after each update.
pub struct StepTrace<'s> {
    /// Predictor step index, counting from 0 at `t = T`.
    pub step: usize,
    pub t: f64,
    pub corrector: bool,
    pub x: &'s Matrix,
    pub a: &'s Matrix,
}

fn guided_at(
    nets: &Networks<'_>,
    gcfg: &GuidanceConfig,
    x: &Matrix,
    a: &Matrix,
    mask: &[bool],
    t: f64,
) -> Result<ScoreEstimate> {
    let se = nets.score.score(x, a, mask, t)?;
    match nets.guide {
        Some(guide) if !gcfg.classifier_free() => {
            let (gx, ga) = guide.class_logprob_grad(x, a, mask, t, gcfg.target_class)?;
            guided_score(&se, (&gx, &ga), mask, gcfg, t)
        }
        _ => {
            let zx = Matrix::zeros(x.rows(), x.cols());
            let za = Matrix::zeros(a.rows(), a.cols());
            guided_score_with_alpha(&se, (&zx, &za), gcfg.lambda, (0.0, 0.0))
        }
    }
}

/// `(mean_scale, score_coef, noise_std)` of one reverse step from `t` to
/// `t − dt`: `x ← mean_scale·x + score_coef·score + noise_std·z`.
fn step_coefs(sde: &DiffusionSde, solver: Solver, t: f64, dt: f64) -> Result<(f64, f64, f64)> {
    if solver != Solver::ReverseDiffusion {
        let (k, g) = sde.drift_diffusion_coefs(t)?;
        return Ok((1.0 - k * dt, g * g * dt, g * dt.sqrt()));
    }
    let prev = (t - dt).max(0.0);
    Ok(match sde.kind {
        SdeKind::Vp => {
            let beta = -(-(sde.integrated_beta(t) - sde.integrated_beta(prev))).exp_m1();
            let keep = (1.0 - beta).sqrt();
            (1.0 / keep, beta / keep, beta.sqrt())
        }
        SdeKind::Ve => {
            let (s2, p2) = (sde.sigma(t).powi(2), sde.sigma(prev).powi(2));
            (1.0, s2 - p2, (p2 * (s2 - p2) / s2).sqrt())
        }
    })
}

fn langevin_eps(scale: f64, snr: f64, noise_norm: f64, score_norm: f64) -> f64 {
    if score_norm < 1e-12 {
        return 0.0;
    }
    let r = snr * noise_norm / score_norm;
    2.0 * scale * r * r
}

fn check_state(
    x: &Matrix,
    a: &Matrix,
    mask: &[bool],
    step: usize,
    debug_checks: bool,
) -> Result<()> {
    if !x.is_finite() || !a.is_finite() {
        return Err(Error::SamplerDiverged {
            step,
            msg: "non-finite state".into(),
        });
    }
    if debug_checks {
        let g = DenseGraph::from_parts(x.clone(), a.clone(), mask.to_vec(), None)?;
        if let Some(v) = validate(&g).first() {
            return Err(Error::SamplerDiverged {
                step,
                msg: format!("invariant violated: {v}"),
            });
        }
    }
    Ok(())
}

/// Draw one continuous graph with `n_nodes` active nodes by integrating the
/// reverse SDEs from the prior at `T` down to `eps_time`.
pub fn reverse_sample<R: Rng + ?Sized>(
    nets: &Networks<'_>,
    gcfg: &GuidanceConfig,
    scfg: &SamplerConfig,
    n_nodes: usize,
    rng: &mut R,
) -> Result<DenseGraph> {
    reverse_sample_observed(nets, gcfg, scfg, n_nodes, rng, &mut |_| {})
}

/// [`reverse_sample`] that reports the state after every update.
pub fn reverse_sample_observed<R: Rng + ?Sized>(
    nets: &Networks<'_>,
    gcfg: &GuidanceConfig,
    scfg: &SamplerConfig,
    n_nodes: usize,
    rng: &mut R,
    observe: &mut dyn FnMut(&StepTrace<'_>),
) -> Result<DenseGraph> {
    gcfg.validate()?;
    scfg.validate()?;
    let d = nets.dims;
    if n_nodes == 0 || n_nodes > d.n_max {
        return Err(Error::Domain(format!(
            "{n_nodes} nodes requested, need 1..={}",
            d.n_max
        )));
    }
    if nets.guide.is_none() && !gcfg.classifier_free() {
        return Err(Error::config(
            "guidance",
            "r1/r2 are nonzero but no classifier was supplied",
        ));
    }
    // Integrate on the active block only; padding rows stay exactly zero and
    // are restored at the end.
    let n = n_nodes;
    let mask = vec![true; n];
    let eps_time = nets.sde_x.eps_time.max(nets.sde_a.eps_time);
    let n_steps = scfg.num_steps;
    let dt = (TERMINAL_TIME - eps_time) / n_steps as f64;

    let mut x = nets
        .sde_x
        .prior_sample(n, d.node_dim, TensorRole::Nodes, &mask, rng);
    let mut a = nets
        .sde_a
        .prior_sample(n * n, d.edge_dim, TensorRole::Adjacency, &mask, rng);

    for step in 0..n_steps {
        let t = TERMINAL_TIME - step as f64 * dt;

        if scfg.solver == Solver::EmLangevin {
            for _ in 0..scfg.corrector_steps {
                let s = guided_at(nets, gcfg, &x, &a, &mask, t)?;
                let zx = masked_noise(x.rows(), x.cols(), TensorRole::Nodes, &mask, rng);
                let za = masked_noise(a.rows(), a.cols(), TensorRole::Adjacency, &mask, rng);
                let ex = langevin_eps(
                    scfg.scale_coeff,
                    scfg.snr,
                    node_norm(&zx, &mask),
                    node_norm(&s.score_x, &mask),
                );
                let ea = langevin_eps(
                    scfg.scale_coeff,
                    scfg.snr,
                    pair_norm(&za, &mask),
                    pair_norm(&s.score_a, &mask),
                );
                x.axpy(ex, &s.score_x);
                x.axpy((2.0 * ex).sqrt(), &zx);
                a.axpy(ea, &s.score_a);
                a.axpy((2.0 * ea).sqrt(), &za);
                check_state(&x, &a, &mask, step, scfg.debug)?;
                observe(&StepTrace {
                    step,
                    t,
                    corrector: true,
                    x: &x,
                    a: &a,
                });
            }
        }

        let s = guided_at(nets, gcfg, &x, &a, &mask, t)?;
        let last = step + 1 == n_steps;
        let (mx, cx, nx) = step_coefs(&nets.sde_x, scfg.solver, t, dt)?;
        let (ma, ca, na) = step_coefs(&nets.sde_a, scfg.solver, t, dt)?;
        x.scale_in_place(mx);
        x.axpy(cx, &s.score_x);
        a.scale_in_place(ma);
        a.axpy(ca, &s.score_a);
        // The final update returns the mean, without fresh noise.
        if !last {
            let zx = masked_noise(x.rows(), x.cols(), TensorRole::Nodes, &mask, rng);
            let za = masked_noise(a.rows(), a.cols(), TensorRole::Adjacency, &mask, rng);
            x.axpy(nx, &zx);
            a.axpy(na, &za);
        }
        check_state(&x, &a, &mask, step, scfg.debug)?;
        observe(&StepTrace {
            step,
            t: t - dt,
            corrector: false,
            x: &x,
            a: &a,
        });
    }

    let mut g = DenseGraph::from_parts(x, a, mask, Some(gcfg.target_class))?.repadded(d.n_max)?;
    g.meta.insert("lambda".into(), gcfg.lambda.to_string());
    g.meta.insert("target_class".into(), gcfg.target_class.to_string());
    Ok(g)
}

/// Map a continuous graph to a discrete one: adjacency entries above 0.5
/// become edges (OR-symmetrized, no self loops), each node-feature block
/// becomes a one-hot at its argmax, padding is zeroed. Blocks that do not
/// tile the feature width are treated as a single block.
pub fn quantize(g: &DenseGraph, feature_blocks: &[usize]) -> DenseGraph {
    let n = g.n_max();
    let (a_dim, b_dim) = (g.node_dim(), g.edge_dim());
    let whole = [a_dim];
    let blocks = if feature_blocks.iter().sum::<usize>() == a_dim && !feature_blocks.is_empty() {
        feature_blocks
    } else {
        &whole[..]
    };
    let mask = g.node_mask();

    let mut x = Matrix::zeros(n, a_dim);
    for i in (0..n).filter(|&i| mask[i]) {
        let row = g.node_features().row(i);
        let mut start = 0;
        for &w in blocks {
            if w > 0 {
                let block = &row[start..start + w];
                let best = block
                    .iter()
                    .enumerate()
                    .fold(0, |best, (k, &v)| if v > block[best] { k } else { best });
                x.set(i, start + best, 1.0);
            }
            start += w;
        }
    }

    let mut a = Matrix::zeros(n * n, b_dim);
    for i in (0..n).filter(|&i| mask[i]) {
        for j in (i + 1..n).filter(|&j| mask[j]) {
            for c in 0..b_dim {
                if g.edge(i, j, c) > 0.5 || g.edge(j, i, c) > 0.5 {
                    a.set(i * n + j, c, 1.0);
                    a.set(j * n + i, c, 1.0);
                }
            }
        }
    }

    let mut out = DenseGraph::from_parts(x, a, mask.to_vec(), g.label)
        .expect("shapes copied from a valid graph");
    out.meta = g.meta.clone();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum NodeCountRule {
    /// Resample node counts of the training graphs.
    Empirical,
    /// Uniform over `lo..=hi`.
    Range { lo: usize, hi: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRequest {
    pub lambdas: Vec<f64>,
    /// Number of graphs per class, indexed by label.
    pub per_class: Vec<usize>,
    pub node_counts: NodeCountRule,
    /// Extra metadata copied onto every generated graph.
    pub provenance: BTreeMap<String, String>,
}

impl AugmentRequest {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for &l in &self.lambdas {
            if !(0.0..1.0).contains(&l) {
                return Err(Error::Domain(format!("lambda = {l} outside [0, 1)")));
            }
        }
        if self.per_class.len() != num_classes {
            return Err(Error::config(
                "sampler.per_class",
                format!(
                    "{} counts given for {num_classes} classes",
                    self.per_class.len()
                ),
            ));
        }
        if let NodeCountRule::Range { lo, hi } = self.node_counts {
            if lo == 0 || lo > hi {
                return Err(Error::config("sampler.node_counts", "need 1 <= lo <= hi"));
            }
        }
        Ok(())
    }
}

/// Per-sample generator: seeded from the sampler seed, one ChaCha stream per
/// sample index so samples are independent of generation order.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generate a labeled augmentation set: for every λ and class, the requested
/// number of guided samples, quantized.
pub fn augment_dataset(
    train: &GraphDataset,
    nets: &Networks<'_>,
    req: &AugmentRequest,
    guidance: &GuidanceConfig,
    scfg: &SamplerConfig,
) -> Result<GraphDataset> {
    let schema = train.schema.clone();
    req.validate(schema.num_classes)?;
    let counts = train.node_counts();
    if req.node_counts == NodeCountRule::Empirical && counts.is_empty() {
        return Err(Error::Data(
            "empirical node counts need a nonempty training set".into(),
        ));
    }
    if let NodeCountRule::Range { hi, .. } = req.node_counts {
        if hi > schema.n_max {
            return Err(Error::config(
                "sampler.node_counts",
                format!("hi = {hi} exceeds n_max = {}", schema.n_max),
            ));
        }
    }

    let mut out = GraphDataset::new(schema.clone(), SplitTag::Augmented)?;
    let mut stream = 0u64;
    for &lambda in &req.lambdas {
        for (y, &count) in req.per_class.iter().enumerate() {
            let gcfg = GuidanceConfig {
                lambda,
                target_class: y,
                ..*guidance
            };
            for _ in 0..count {
                let mut rng = sample_rng(scfg.seed, stream);
                let n = match req.node_counts {
                    NodeCountRule::Empirical => counts[rng.gen_range(0..counts.len())],
                    NodeCountRule::Range { lo, hi } => rng.gen_range(lo..=hi),
                };
                let cont = reverse_sample(nets, &gcfg, scfg, n, &mut rng)?;
                let mut g = quantize(&cont, &schema.feature_blocks);
                g.meta.insert("seed".into(), format!("{}:{stream}", scfg.seed));
                g.meta.insert("r1".into(), gcfg.r1.to_string());
                g.meta.insert("r2".into(), gcfg.r2.to_string());
                for (k, v) in &req.provenance {
                    g.meta.insert(k.clone(), v.clone());
                }
                out.push(g)?;
                stream += 1;
            }
            debug!("lambda {lambda}: {count} graphs for class {y}");
        }
    }
    Ok(out)
}
