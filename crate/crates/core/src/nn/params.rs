//! Parameter storage, dense layers and optimizers.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::{Gradients, Tape, Var};
use crate::tensor::Matrix;

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, idx: usize) -> &Matrix {
        &self.values[idx]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Put every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| tape.leaf(v.clone(), requires_grad))
            .collect()
    }

    /// Gradients for the registered leaves, zero where a parameter did not
    /// influence the loss.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients) -> Vec<Matrix> {
        vars.iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect()
    }

    /// Flat copy of every scalar in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

/// Xavier/Glorot-uniform initialized weight matrix.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Matrix {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// `y = x W (+ b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, fan_in, fan_out, bias, 1.0, rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), glorot(fan_in, fan_out, gain, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out)));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, p[self.w]);
        match self.b {
            Some(b) => tape.add_row(y, p[b]),
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled (AdamW) weight decay when true, L2 penalty otherwise.
    pub decoupled: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl AdamConfig {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decoupled: true,
            grad_clip: 1.0,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            decoupled: false,
            grad_clip: 0.0,
            ..Self::adamw(lr, weight_decay)
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .values()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, mut grads: Vec<Matrix>) {
        let c = self.cfg;
        if c.grad_clip > 0.0 {
            let norm = grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
            if norm > c.grad_clip {
                let s = c.grad_clip / norm;
                grads.iter_mut().for_each(|g| g.scale_in_place(s));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let pd = p.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                let gk = if c.decoupled {
                    gk
                } else {
                    gk + c.weight_decay * pd[k]
                };
                let mk = &mut m.data_mut()[k];
                *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                if c.decoupled {
                    pd[k] -= c.lr * c.weight_decay * pd[k];
                }
                pd[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Exponential moving average of parameters.
pub struct Ema {
    decay: f64,
    shadow: ParamStore,
}

impl Ema {
    pub fn new(decay: f64, store: &ParamStore) -> Self {
        Ema {
            decay,
            shadow: store.clone(),
        }
    }

    pub fn update(&mut self, store: &ParamStore) {
        self.update_with_decay(store, self.decay);
    }

    pub fn update_with_decay(&mut self, store: &ParamStore, d: f64) {
        for (s, p) in self.shadow.values_mut().iter_mut().zip(store.values()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }

    pub fn into_params(self) -> ParamStore {
        self.shadow
    }

    pub fn params(&self) -> &ParamStore {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Matrix::from_vec(1, 3, vec![3.0, -2.0, 1.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::adam(0.05, 0.0), &store);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let vars = store.register(&mut tape, true);
            let l = tape.sum_sq(vars[0]);
            let mut g = tape.backward(l);
            let grads = store.collect_grads(&vars, &mut g);
            opt.step(&mut store, grads);
        }
        assert!(store.get(0).max_abs() < 1e-3);
    }

    #[test]
    fn ema_tracks_slowly() {
        let mut store = ParamStore::new();
        store.add("x", Matrix::scalar(0.0));
        let mut ema = Ema::new(0.9, &store);
        store.values_mut()[0] = Matrix::scalar(1.0);
        ema.update(&store);
        assert!((ema.params().get(0).item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 4, 3, true, &mut rng);
        let mut tape = Tape::new();
        let p = store.register(&mut tape, false);
        let x = tape.constant(Matrix::filled(5, 4, 1.0));
        let y = lin.forward(&mut tape, &p, x);
        assert_eq!(tape.value(y).shape(), (5, 3));
        assert_eq!(store.names(), &["l.weight".to_string(), "l.bias".to_string()]);
    }
}
