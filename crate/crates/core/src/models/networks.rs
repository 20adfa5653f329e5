use rand::Rng;

use super::transformer::{ArchConfig, Backbone, GraphDims};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore, Tape, Var};
use crate::sde::DiffusionSde;
use crate::tensor::Matrix;

/// Estimated score (gradient of the log-density) for node features and
/// adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEstimate {
    pub score_x: Matrix,
    pub score_a: Matrix,
}

/// Anything that can estimate `∇ log p_t` of a noisy graph.
pub trait ScoreModel {
    fn score(&self, x: &Matrix, a: &Matrix, mask: &[bool], t: f64) -> Result<ScoreEstimate>;
}

/// Anything that can supply `∇ log p_t(y | G_t)` for guidance.
pub trait ClassGuide {
    fn num_classes(&self) -> usize;

    fn class_logprob_grad(
        &self,
        x: &Matrix,
        a: &Matrix,
        mask: &[bool],
        t: f64,
        y: usize,
    ) -> Result<(Matrix, Matrix)>;
}

fn check_inputs(dims: &GraphDims, x: &Matrix, a: &Matrix, mask: &[bool]) -> Result<usize> {
    let n = mask.len();
    if x.shape() != (n, dims.node_dim) {
        return Err(Error::Shape(format!(
            "node features {:?}, expected ({n}, {})",
            x.shape(),
            dims.node_dim
        )));
    }
    if a.shape() != (n * n, dims.edge_dim) {
        return Err(Error::Shape(format!(
            "adjacency {:?}, expected ({}, {})",
            a.shape(),
            n * n,
            dims.edge_dim
        )));
    }
    Ok(n)
}

/// Score network `s_θ(X_t, A_t, t)`. Raw outputs are divided by the
/// perturbation std of the matching SDE so the network itself regresses the
/// (negated) unit-variance noise.
#[derive(Debug, Clone)]
pub struct ScoreNetwork {
    pub(crate) backbone: Backbone,
    out_x: Linear,
    out_a: Linear,
    pub params: ParamStore,
    pub sde_x: DiffusionSde,
    pub sde_a: DiffusionSde,
}

impl ScoreNetwork {
    pub fn new<R: Rng + ?Sized>(
        arch: ArchConfig,
        dims: GraphDims,
        sde_x: DiffusionSde,
        sde_a: DiffusionSde,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let backbone = Backbone::new(arch, dims, &mut params, rng);
        let out_x = Linear::new(&mut params, "out_x", arch.hidden_x, dims.node_dim, true, rng);
        let out_a = Linear::new(&mut params, "out_a", arch.hidden_a, dims.edge_dim, true, rng);
        Ok(ScoreNetwork {
            backbone,
            out_x,
            out_a,
            params,
            sde_x,
            sde_a,
        })
    }

    pub fn arch(&self) -> ArchConfig {
        self.backbone.arch
    }

    pub fn dims(&self) -> GraphDims {
        self.backbone.dims
    }

    /// Build the forward pass on `tape`; returns `(score_x, score_a)` vars.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        a: Var,
        mask: &[bool],
        t: f64,
    ) -> Result<(Var, Var)> {
        let (_, std_x) = self.sde_x.marginal_params(t)?;
        let (_, std_a) = self.sde_a.marginal_params(t)?;
        if std_x <= 0.0 || std_a <= 0.0 {
            return Err(Error::Domain(format!(
                "score evaluated at t = {t} where the perturbation std vanishes"
            )));
        }
        let (h, e) = self.backbone.forward(tape, p, x, a, mask, t);
        let sx = self.out_x.forward(tape, p, h);
        let sx = tape.mask_rows(sx, mask);
        let sx = tape.scale(sx, 1.0 / std_x);
        let sa = self.out_a.forward(tape, p, e);
        let sa = tape.sym_pairs(sa, mask);
        let sa = tape.scale(sa, 1.0 / std_a);
        Ok((sx, sa))
    }
}

impl ScoreNetwork {
    /// `⟨score_x, cot.score_x⟩ + ⟨score_a, cot.score_a⟩` and its gradient
    /// with respect to every parameter, in declaration order.
    pub fn param_vjp(
        &self,
        x: &Matrix,
        a: &Matrix,
        mask: &[bool],
        t: f64,
        cot: &ScoreEstimate,
    ) -> Result<(f64, Vec<Matrix>)> {
        check_inputs(&self.dims(), x, a, mask)?;
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, true);
        let xv = tape.constant(x.clone());
        let av = tape.constant(a.clone());
        let (sx, sa) = self.forward_on_tape(&mut tape, &p, xv, av, mask, t)?;
        let cx = tape.constant(cot.score_x.clone());
        let ca = tape.constant(cot.score_a.clone());
        let px = tape.mul(sx, cx);
        let px = tape.sum_all(px);
        let pa = tape.mul(sa, ca);
        let pa = tape.sum_all(pa);
        let total = tape.add(px, pa);
        let value = tape.value(total).item();
        let mut grads = tape.backward(total);
        Ok((value, self.params.collect_grads(&p, &mut grads)))
    }
}

impl ScoreModel for ScoreNetwork {
    fn score(&self, x: &Matrix, a: &Matrix, mask: &[bool], t: f64) -> Result<ScoreEstimate> {
        check_inputs(&self.dims(), x, a, mask)?;
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let av = tape.constant(a.clone());
        let (sx, sa) = self.forward_on_tape(&mut tape, &p, xv, av, mask, t)?;
        Ok(ScoreEstimate {
            score_x: tape.value(sx).clone(),
            score_a: tape.value(sa).clone(),
        })
    }
}

/// Noise-aware graph classifier `φ_t`: same backbone as the score network,
/// masked mean pooling of node and pair states, then an MLP head.
#[derive(Debug, Clone)]
pub struct GraphClassifier {
    pub(crate) backbone: Backbone,
    head1: Linear,
    head2: Linear,
    pub params: ParamStore,
    num_classes: usize,
}

impl GraphClassifier {
    pub fn new<R: Rng + ?Sized>(
        arch: ArchConfig,
        dims: GraphDims,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        if num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be positive"));
        }
        let mut params = ParamStore::new();
        let backbone = Backbone::new(arch, dims, &mut params, rng);
        let pooled = arch.hidden_x + arch.hidden_a;
        let head1 = Linear::new(&mut params, "head1", pooled, arch.hidden_x, true, rng);
        let head2 = Linear::new(&mut params, "head2", arch.hidden_x, num_classes, true, rng);
        Ok(GraphClassifier {
            backbone,
            head1,
            head2,
            params,
            num_classes,
        })
    }

    pub fn arch(&self) -> ArchConfig {
        self.backbone.arch
    }

    pub fn dims(&self) -> GraphDims {
        self.backbone.dims
    }

    /// Logits as a `1 × M` var.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        a: Var,
        mask: &[bool],
        t: f64,
    ) -> Var {
        let n = mask.len();
        let (h, e) = self.backbone.forward(tape, p, x, a, mask, t);
        let active = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let node_w = Matrix::from_fn(1, n, |_, i| if mask[i] { 1.0 / active } else { 0.0 });
        let pair_w = Matrix::from_fn(1, n * n, |_, k| {
            if mask[k / n] && mask[k % n] {
                1.0 / (active * active)
            } else {
                0.0
            }
        });
        let node_w = tape.constant(node_w);
        let pair_w = tape.constant(pair_w);
        let hp = tape.matmul(node_w, h);
        let ep = tape.matmul(pair_w, e);
        let pooled = tape.concat_cols(&[hp, ep]);
        let z = self.head1.forward(tape, p, pooled);
        let z = tape.silu(z);
        self.head2.forward(tape, p, z)
    }

    /// Class logits for a noisy graph.
    pub fn logits(&self, x: &Matrix, a: &Matrix, mask: &[bool], t: f64) -> Result<Vec<f64>> {
        check_inputs(&self.dims(), x, a, mask)?;
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let av = tape.constant(a.clone());
        let out = self.forward_on_tape(&mut tape, &p, xv, av, mask, t);
        Ok(tape.value(out).data().to_vec())
    }

    pub fn probabilities(&self, x: &Matrix, a: &Matrix, mask: &[bool], t: f64) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x, a, mask, t)?))
    }

    /// `log p_t(y | G_t)`.
    pub fn class_logprob(&self, x: &Matrix, a: &Matrix, mask: &[bool], t: f64, y: usize) -> Result<f64> {
        let p = self.probabilities(x, a, mask, t)?;
        p.get(y)
            .map(|v| v.ln())
            .ok_or_else(|| Error::Domain(format!("class {y} out of range")))
    }

    /// `log p_t(y | G_t)` and its gradient with respect to every parameter.
    pub fn logprob_param_grad(
        &self,
        x: &Matrix,
        a: &Matrix,
        mask: &[bool],
        t: f64,
        y: usize,
    ) -> Result<(f64, Vec<Matrix>)> {
        check_inputs(&self.dims(), x, a, mask)?;
        if y >= self.num_classes {
            return Err(Error::Domain(format!("class {y} out of range")));
        }
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, true);
        let xv = tape.constant(x.clone());
        let av = tape.constant(a.clone());
        let logits = self.forward_on_tape(&mut tape, &p, xv, av, mask, t);
        let logp = tape.log_softmax_rows(logits);
        let target = tape.pick(logp, 0, y);
        let value = tape.value(target).item();
        let mut grads = tape.backward(target);
        Ok((value, self.params.collect_grads(&p, &mut grads)))
    }
}

impl ClassGuide for GraphClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `∇ log softmax(φ_t)_y` with respect to the node features and the
    /// adjacency. The adjacency gradient is projected onto symmetric,
    /// zero-diagonal, mask-respecting tensors: entry `(i, j)` is half of the
    /// directional derivative along the symmetric pair perturbation.
    fn class_logprob_grad(
        &self,
        x: &Matrix,
        a: &Matrix,
        mask: &[bool],
        t: f64,
        y: usize,
    ) -> Result<(Matrix, Matrix)> {
        check_inputs(&self.dims(), x, a, mask)?;
        if y >= self.num_classes {
            return Err(Error::Domain(format!(
                "class {y} out of range for {} classes",
                self.num_classes
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false);
        let xv = tape.leaf(x.clone(), true);
        let av = tape.leaf(a.clone(), true);
        let logits = self.forward_on_tape(&mut tape, &p, xv, av, mask, t);
        let logp = tape.log_softmax_rows(logits);
        let target = tape.pick(logp, 0, y);
        let mut grads = tape.backward(target);
        let n = mask.len();
        let mut gx = grads.take(xv).unwrap_or_else(|| Matrix::zeros(n, x.cols()));
        crate::graph::mask_nodes(&mut gx, mask);
        let ga_raw = grads
            .take(av)
            .unwrap_or_else(|| Matrix::zeros(a.rows(), a.cols()));
        let mut ga = crate::graph::symmetrize(&ga_raw, n);
        crate::graph::mask_pairs(&mut ga, mask);
        if !gx.is_finite() || !ga.is_finite() {
            return Err(Error::Numeric("non-finite classifier gradient".into()));
        }
        Ok((gx, ga))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
