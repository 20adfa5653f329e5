//! Denoising score matching for the score network and noisy-label
//! cross-entropy for the classifier.

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::networks::{GraphClassifier, ScoreNetwork};
use super::transformer::{ArchConfig, GraphDims};
use crate::error::{Error, Result};
use crate::graph::{DenseGraph, GraphDataset};
use crate::nn::{Adam, AdamConfig, Ema, Tape, Var};
use crate::sde::{DiffusionSde, TensorRole, TERMINAL_TIME};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            weight_decay: 1e-12,
            batch_size: 128,
            epochs: 100,
            ema_decay: 0.999,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config("train.ema_decay", "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::config("train", "weight_decay and grad_clip must be >= 0"));
        }
        Ok(())
    }

    pub fn steps_for(&self, dataset_len: usize) -> usize {
        self.epochs * dataset_len.div_ceil(self.batch_size)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            grad_clip: self.grad_clip,
            ..AdamConfig::adamw(self.lr, self.weight_decay)
        }
    }
}

/// Per-step mean training loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the first and last `window` losses.
    pub fn head_tail(&self, window: usize) -> Option<(f64, f64)> {
        if self.losses.is_empty() {
            return None;
        }
        let w = window.clamp(1, self.losses.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((
            mean(&self.losses[..w]),
            mean(&self.losses[self.losses.len() - w..]),
        ))
    }
}

fn dims_of(ds: &GraphDataset) -> GraphDims {
    GraphDims {
        n_max: ds.schema.n_max,
        node_dim: ds.schema.node_dim,
        edge_dim: ds.schema.edge_dim,
    }
}

/// EMA decay with the usual warm-up so early averages are not dominated by
/// the random initialization.
fn ema_decay_at(decay: f64, step: usize) -> f64 {
    decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

fn sample_time<R: Rng + ?Sized>(eps: f64, rng: &mut R) -> f64 {
    rng.gen_range(eps..TERMINAL_TIME)
}

/// Weighted DSM loss of one graph, normalized by its number of active
/// entries: `std_x²·‖s_x + z_x/std_x‖² + std_a²·‖s_a + z_a/std_a‖²`.
fn dsm_graph_loss<R: Rng + ?Sized>(
    net: &ScoreNetwork,
    tape: &mut Tape,
    p: &[Var],
    g: &DenseGraph,
    rng: &mut R,
) -> Result<Var> {
    let g = &compact(g)?;
    let mask = g.node_mask();
    let eps = net.sde_x.eps_time.max(net.sde_a.eps_time);
    let t = sample_time(eps, rng);
    let (xn, zx) = net
        .sde_x
        .perturb(g.node_features(), TensorRole::Nodes, mask, t, rng)?;
    let (an, za) = net
        .sde_a
        .perturb(g.adjacency(), TensorRole::Adjacency, mask, t, rng)?;
    let (_, std_x) = net.sde_x.marginal_params(t)?;
    let (_, std_a) = net.sde_a.marginal_params(t)?;

    let xv = tape.constant(xn);
    let av = tape.constant(an);
    let (sx, sa) = net.forward_on_tape(tape, p, xv, av, mask, t)?;
    let tx = tape.constant(zx.scaled(-1.0 / std_x));
    let ta = tape.constant(za.scaled(-1.0 / std_a));
    let dx = tape.sub(sx, tx);
    let lx = tape.sum_sq(dx);
    let lx = tape.scale(lx, std_x * std_x);
    let da = tape.sub(sa, ta);
    let la = tape.sum_sq(da);
    let la = tape.scale(la, std_a * std_a);
    let l = tape.add(lx, la);
    let n = g.num_active();
    let entries = (n * g.node_dim() + n * n.saturating_sub(1) * g.edge_dim()).max(1);
    Ok(tape.scale(l, 1.0 / entries as f64))
}

/// Train a score network on unlabeled graphs by denoising score matching.
pub fn train_score(
    ds: &GraphDataset,
    sde_x: DiffusionSde,
    sde_a: DiffusionSde,
    arch: ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ScoreNetwork, TrainReport)> {
    cfg.validate()?;
    sde_x.validate()?;
    sde_a.validate()?;
    if ds.is_empty() {
        return Err(Error::Data("cannot train a score network on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ScoreNetwork::new(arch, dims_of(ds), sde_x, sde_a, &mut rng)?;
    let mut opt = Adam::new(cfg.adam(), &net.params);
    let mut ema = Ema::new(cfg.ema_decay, &net.params);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = net.params.register(&mut tape, true);
            let mut total: Option<Var> = None;
            for &i in batch {
                let l = dsm_graph_loss(&net, &mut tape, &p, &ds.graphs[i], &mut rng)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, l),
                    None => l,
                });
            }
            let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    msg: format!("score loss is {value}"),
                });
            }
            let mut grads = tape.backward(loss);
            let g = net.params.collect_grads(&p, &mut grads);
            opt.step(&mut net.params, g);
            ema.update_with_decay(&net.params, ema_decay_at(cfg.ema_decay, step));
            report.losses.push(value);
            step += 1;
        }
        if epoch % 25 == 0 {
            debug!("score epoch {epoch}: loss {:.4}", report.losses.last().unwrap_or(&f64::NAN));
        }
    }
    net.params = ema.into_params();
    Ok((net, report))
}

/// Drop trailing padding; the networks give identical outputs on the active
/// block either way.
fn compact(g: &DenseGraph) -> Result<DenseGraph> {
    if g.mask_is_prefix() {
        g.repadded(g.num_active())
    } else {
        Ok(g.clone())
    }
}

/// Perturb a labeled graph to a uniform time and return `(x_t, a_t, t)`.
fn perturb_graph<R: Rng + ?Sized>(
    g: &DenseGraph,
    sde_x: &DiffusionSde,
    sde_a: &DiffusionSde,
    rng: &mut R,
) -> Result<(Matrix, Matrix, f64)> {
    let eps = sde_x.eps_time.max(sde_a.eps_time);
    let t = sample_time(eps, rng);
    let mask = g.node_mask();
    let (xn, _) = sde_x.perturb(g.node_features(), TensorRole::Nodes, mask, t, rng)?;
    let (an, _) = sde_a.perturb(g.adjacency(), TensorRole::Adjacency, mask, t, rng)?;
    Ok((xn, an, t))
}

/// Train the noise-aware classifier `φ_t` with cross-entropy on graphs
/// perturbed to uniformly drawn times.
pub fn train_classifier(
    ds: &GraphDataset,
    sde_x: DiffusionSde,
    sde_a: DiffusionSde,
    arch: ArchConfig,
    cfg: &TrainConfig,
) -> Result<(GraphClassifier, TrainReport)> {
    cfg.validate()?;
    sde_x.validate()?;
    sde_a.validate()?;
    if ds.is_empty() {
        return Err(Error::Data("cannot train a classifier on an empty dataset".into()));
    }
    if let Some(k) = ds.graphs.iter().position(|g| g.label.is_none()) {
        return Err(Error::Data(format!("graph {k} has no label")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut phi = GraphClassifier::new(arch, dims_of(ds), ds.schema.num_classes, &mut rng)?;
    let mut opt = Adam::new(cfg.adam(), &phi.params);
    let mut ema = Ema::new(cfg.ema_decay, &phi.params);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = phi.params.register(&mut tape, true);
            let mut total: Option<Var> = None;
            for &i in batch {
                let g = &compact(&ds.graphs[i])?;
                let y = g.label.expect("checked above");
                let (xn, an, t) = perturb_graph(g, &sde_x, &sde_a, &mut rng)?;
                let xv = tape.constant(xn);
                let av = tape.constant(an);
                let logits = phi.forward_on_tape(&mut tape, &p, xv, av, g.node_mask(), t);
                let logp = tape.log_softmax_rows(logits);
                let picked = tape.pick(logp, 0, y);
                total = Some(match total {
                    Some(acc) => tape.sub(acc, picked),
                    None => tape.scale(picked, -1.0),
                });
            }
            let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    msg: format!("classifier loss is {value}"),
                });
            }
            let mut grads = tape.backward(loss);
            let g = phi.params.collect_grads(&p, &mut grads);
            opt.step(&mut phi.params, g);
            ema.update_with_decay(&phi.params, ema_decay_at(cfg.ema_decay, step));
            report.losses.push(value);
            step += 1;
        }
    }
    phi.params = ema.into_params();
    Ok((phi, report))
}

/// Accuracy of `phi` on graphs perturbed to time `t` (`t = eps_time` is the
/// clean-graph regime). Uses a fixed seed so repeated calls agree.
pub fn classifier_accuracy(
    phi: &GraphClassifier,
    ds: &GraphDataset,
    sde_x: &DiffusionSde,
    sde_a: &DiffusionSde,
    t: f64,
    seed: u64,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset is undefined".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    for (k, g) in ds.graphs.iter().enumerate() {
        let y = g
            .label
            .ok_or_else(|| Error::Data(format!("graph {k} has no label")))?;
        let mask = g.node_mask();
        let (xn, _) = sde_x.perturb(g.node_features(), TensorRole::Nodes, mask, t, &mut rng)?;
        let (an, _) = sde_a.perturb(g.adjacency(), TensorRole::Adjacency, mask, t, &mut rng)?;
        let logits = phi.logits(&xn, &an, mask, t)?;
        if argmax(&logits) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
