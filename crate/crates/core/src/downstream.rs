//! GIN graph classifier trained with or without augmentation, evaluated on
//! the shifted test split, and the comparison grid over augmentation modes.

use std::fmt;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Splits;
use crate::error::{Error, Result};
use crate::eval::DownstreamRow;
use crate::graph::{DenseGraph, GraphDataset};
use crate::models::argmax;
use crate::nn::{Adam, AdamConfig, Linear, ParamStore, Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            layers: 3,
            hidden: 64,
            dropout: 0.5,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::config("downstream", "layers and hidden must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("downstream.dropout", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("downstream.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("downstream.lr", "lr must be > 0, weight_decay >= 0"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("downstream.seeds", "need at least one seed"));
        }
        Ok(())
    }
}

/// GIN with sum neighbourhood aggregation (ε = 0), two-layer MLPs, mean
/// pooling over active nodes and a linear read-out.
#[derive(Debug, Clone)]
pub struct GinClassifier {
    layers: Vec<(Linear, Linear)>,
    readout: Linear,
    pub params: ParamStore,
    dropout: f64,
    num_classes: usize,
}

fn active_parts(g: &DenseGraph) -> (Matrix, Matrix) {
    let idx: Vec<usize> = (0..g.n_max()).filter(|&i| g.node_mask()[i]).collect();
    let n = g.n_max();
    let x = Matrix::from_fn(idx.len(), g.node_dim(), |r, c| g.node_features().get(idx[r], c));
    // Self term plus summed neighbour weights (all edge channels).
    let adj = Matrix::from_fn(idx.len(), idx.len(), |r, s| {
        if r == s {
            1.0
        } else {
            g.adjacency().row(idx[r] * n + idx[s]).iter().sum()
        }
    });
    (x, adj)
}

impl GinClassifier {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        num_classes: usize,
        cfg: &ClassifierConfig,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut fan_in = input_dim;
        for l in 0..cfg.layers {
            let a = Linear::new(&mut params, &format!("gin{l}.a"), fan_in, cfg.hidden, true, rng);
            let b = Linear::new(&mut params, &format!("gin{l}.b"), cfg.hidden, cfg.hidden, true, rng);
            layers.push((a, b));
            fan_in = cfg.hidden;
        }
        let readout = Linear::new(&mut params, "readout", cfg.hidden, num_classes, true, rng);
        GinClassifier {
            layers,
            readout,
            params,
            dropout: cfg.dropout,
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `1 × M` logits; dropout is applied when `rng` is given.
    fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        g: &DenseGraph,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let (x, adj) = active_parts(g);
        let n = x.rows();
        let adj = tape.constant(adj);
        let mut h = tape.constant(x);
        for (a, b) in &self.layers {
            let agg = tape.matmul(adj, h);
            let z = a.forward(tape, p, agg);
            let z = tape.relu(z);
            let z = b.forward(tape, p, z);
            h = tape.relu(z);
            if let Some(r) = rng.as_deref_mut() {
                if self.dropout > 0.0 {
                    let keep = 1.0 - self.dropout;
                    let cols = tape.value(h).cols();
                    let m = Matrix::from_fn(n, cols, |_, _| {
                        if r.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let m = tape.constant(m);
                    h = tape.mul(h, m);
                }
            }
        }
        let pool = tape.constant(Matrix::filled(1, n, 1.0 / n.max(1) as f64));
        let pooled = tape.matmul(pool, h);
        self.readout.forward(tape, p, pooled)
    }

    pub fn logits(&self, g: &DenseGraph) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false);
        let out = self.forward(&mut tape, &p, g, None);
        tape.value(out).data().to_vec()
    }

    pub fn predict(&self, g: &DenseGraph) -> usize {
        argmax(&self.logits(g))
    }
}

#[derive(Debug, Clone)]
pub struct TrainedGin {
    pub model: GinClassifier,
    /// Validation accuracy of the selected checkpoint (`None` without a
    /// validation set, in which case the final epoch is kept).
    pub val_acc: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

fn check_labeled(ds: &GraphDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if let Some(k) = ds.graphs.iter().position(|g| g.label.is_none()) {
        return Err(Error::Data(format!("graph {k} has no label")));
    }
    Ok(())
}

/// Minimize cross-entropy on `train`; keeps the parameters with the best
/// accuracy on `val` (first best wins).
pub fn train_gnn(
    train: &GraphDataset,
    val: Option<&GraphDataset>,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<TrainedGin> {
    cfg.validate()?;
    check_labeled(train)?;
    if let Some(v) = val {
        check_labeled(v)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GinClassifier::new(
        train.schema.node_dim,
        train.schema.num_classes,
        cfg,
        &mut rng,
    );
    let mut opt = Adam::new(AdamConfig::adam(cfg.lr, cfg.weight_decay), &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, f64, ParamStore)> = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = model.params.register(&mut tape, true);
            let mut total: Option<Var> = None;
            for &i in batch {
                let g = &train.graphs[i];
                let logits = model.forward(&mut tape, &p, g, Some(&mut rng));
                let logp = tape.log_softmax_rows(logits);
                let picked = tape.pick(logp, 0, g.label.expect("checked"));
                total = Some(match total {
                    Some(acc) => tape.sub(acc, picked),
                    None => tape.scale(picked, -1.0),
                });
            }
            let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: epoch,
                    msg: format!("classifier loss is {value}"),
                });
            }
            epoch_loss += value * batch.len() as f64;
            let mut grads = tape.backward(loss);
            let g = model.params.collect_grads(&p, &mut grads);
            opt.step(&mut model.params, g);
        }
        epoch_losses.push(epoch_loss / train.len() as f64);
        if let Some(v) = val {
            let acc = evaluate(&model, v)?;
            let loss = mean_nll(&model, v);
            let better = best
                .as_ref()
                .map_or(true, |(b, l, _)| acc > *b || (acc == *b && loss < *l));
            if better {
                best = Some((acc, loss, model.params.clone()));
            }
        }
    }
    let val_acc = match best {
        Some((acc, _, params)) => {
            model.params = params;
            Some(acc)
        }
        None => None,
    };
    Ok(TrainedGin {
        model,
        val_acc,
        epoch_losses,
    })
}

fn mean_nll(model: &GinClassifier, ds: &GraphDataset) -> f64 {
    let total: f64 = ds
        .graphs
        .iter()
        .map(|g| {
            let l = model.logits(g);
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - l[g.label.expect("checked")]
        })
        .sum();
    total / ds.len() as f64
}

/// Fraction of graphs whose argmax prediction equals the label.
pub fn evaluate(model: &GinClassifier, ds: &GraphDataset) -> Result<f64> {
    check_labeled(ds)?;
    let correct = ds
        .graphs
        .iter()
        .filter(|g| Some(model.predict(g)) == g.label)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Which training set a downstream run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Training split only.
    Erm,
    /// Augmentation with λ > 0 and classifier guidance.
    Ooda,
    /// Augmentation with λ > 0, no classifier guidance.
    LambdaOnly,
    /// Augmentation with λ = 0 and classifier guidance.
    AlphaOnly,
    /// Augmentation with λ = 0, no classifier guidance.
    Unconditional,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Erm,
        Mode::Unconditional,
        Mode::LambdaOnly,
        Mode::AlphaOnly,
        Mode::Ooda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Erm => "erm",
            Mode::Ooda => "ooda",
            Mode::LambdaOnly => "lambda_only",
            Mode::AlphaOnly => "alpha_only",
            Mode::Unconditional => "unconditional",
        }
    }

    /// `(λ > 0, classifier guidance on)` expected of the augmentation.
    pub fn wiring(self) -> Option<(bool, bool)> {
        match self {
            Mode::Erm => None,
            Mode::Ooda => Some((true, true)),
            Mode::LambdaOnly => Some((true, false)),
            Mode::AlphaOnly => Some((false, true)),
            Mode::Unconditional => Some((false, false)),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("downstream.mode", format!("unknown mode `{s}`")))
    }
}

fn meta_f64(g: &DenseGraph, key: &str, k: usize) -> Result<f64> {
    g.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::config("augmented", format!("graph {k} lacks numeric `{key}` metadata")))
}

/// Check that every augmented graph was generated with the settings `mode`
/// calls for, according to its provenance metadata.
pub fn check_mode_wiring(mode: Mode, augmented: &GraphDataset) -> Result<()> {
    let Some((explore, guided)) = mode.wiring() else {
        return Ok(());
    };
    for (k, g) in augmented.graphs.iter().enumerate() {
        let lambda = meta_f64(g, "lambda", k)?;
        let r = meta_f64(g, "r1", k)? + meta_f64(g, "r2", k)?;
        if (lambda > 0.0) != explore || (r > 0.0) != guided {
            return Err(Error::config(
                "downstream.mode",
                format!("graph {k} (lambda {lambda}, r1 + r2 = {r}) does not fit mode {mode}"),
            ));
        }
    }
    Ok(())
}

/// Train one classifier per seed for `mode` and report validation and test
/// accuracy of each.
pub fn run_comparison(
    splits: &Splits,
    augmented: Option<&GraphDataset>,
    cfg: &ClassifierConfig,
    mode: Mode,
) -> Result<Vec<DownstreamRow>> {
    let train = match (mode, augmented) {
        (Mode::Erm, None) => splits.train.clone(),
        (Mode::Erm, Some(_)) => {
            return Err(Error::config("downstream.mode", "erm takes no augmentation"))
        }
        (_, None) => {
            return Err(Error::config(
                "downstream.mode",
                format!("mode {mode} needs an augmented dataset"),
            ))
        }
        (_, Some(aug)) => {
            check_mode_wiring(mode, aug)?;
            splits.train.union(aug)?
        }
    };
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let trained = train_gnn(&train, Some(&splits.val), cfg, seed)?;
        let test_acc = evaluate(&trained.model, &splits.test)?;
        let val_acc = trained.val_acc.unwrap_or(f64::NAN);
        info!("{mode} seed {seed}: val {val_acc:.3} test {test_acc:.3} on {} graphs", train.len());
        rows.push(DownstreamRow {
            mode: mode.name().to_string(),
            seed,
            val_acc,
            test_acc,
        });
    }
    Ok(rows)
}

/// Mean and population standard deviation of the test accuracies.
pub fn summarize(rows: &[DownstreamRow]) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.test_acc).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.test_acc - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
