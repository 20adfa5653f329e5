//! Permutation-equivariant graph transformer shared by the score network and
//! the noisy-graph classifier.
//!
//! Node states attend over unmasked nodes with a per-head bias read from the
//! pair (edge) states; pair states are updated from symmetric functions of
//! their endpoint node states, so symmetric inputs stay symmetric. Diffusion
//! time enters once, as a global feature added to every node and pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore, Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_x: usize,
    pub hidden_a: usize,
    pub time_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            num_layers: 3,
            num_heads: 4,
            hidden_x: 64,
            hidden_a: 16,
            time_dim: 16,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_a == 0 {
            return Err(Error::config("model.arch", "layer, head and width counts must be positive"));
        }
        if self.hidden_x == 0 || self.hidden_x % self.num_heads != 0 {
            return Err(Error::config(
                "model.arch.hidden_x",
                format!("must be a positive multiple of num_heads ({})", self.num_heads),
            ));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::config("model.arch.time_dim", "must be even and >= 2"));
        }
        Ok(())
    }
}

/// Dataset-level tensor dimensions a network is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDims {
    pub n_max: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
}

#[derive(Debug, Clone)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    edge_bias: Linear,
    ff1: Linear,
    ff2: Linear,
    pair_prod: Linear,
    pair_sum: Linear,
    edge_in: Linear,
    edge_out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Backbone {
    pub arch: ArchConfig,
    pub dims: GraphDims,
    in_x: Linear,
    in_a: Linear,
    time_hidden: Linear,
    time_x: Linear,
    time_a: Linear,
    blocks: Vec<Block>,
}

/// Sinusoidal embedding of normalized time `t ∈ [0, 1]`.
pub fn time_features(t: f64, dim: usize) -> Matrix {
    let half = dim / 2;
    let scaled = t * 1000.0;
    let mut out = Matrix::zeros(1, dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.set(0, k, (scaled * freq).sin());
        out.set(0, half + k, (scaled * freq).cos());
    }
    out
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        arch: ArchConfig,
        dims: GraphDims,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let (hx, ha) = (arch.hidden_x, arch.hidden_a);
        let in_x = Linear::new(store, "in_x", dims.node_dim, hx, true, rng);
        let in_a = Linear::new(store, "in_a", dims.edge_dim, ha, true, rng);
        let time_hidden = Linear::new(store, "time.hidden", arch.time_dim, hx, true, rng);
        let time_x = Linear::new(store, "time.x", hx, hx, false, rng);
        let time_a = Linear::new(store, "time.a", hx, ha, false, rng);
        let blocks = (0..arch.num_layers)
            .map(|l| {
                let name = |s: &str| format!("block{l}.{s}");
                Block {
                    q: Linear::new(store, &name("q"), hx, hx, false, rng),
                    k: Linear::new(store, &name("k"), hx, hx, false, rng),
                    v: Linear::new(store, &name("v"), hx, hx, false, rng),
                    o: Linear::new(store, &name("o"), hx, hx, true, rng),
                    edge_bias: Linear::new(store, &name("edge_bias"), ha, arch.num_heads, false, rng),
                    ff1: Linear::new(store, &name("ff1"), hx, 2 * hx, true, rng),
                    ff2: Linear::new(store, &name("ff2"), 2 * hx, hx, true, rng),
                    pair_prod: Linear::new(store, &name("pair_prod"), hx, ha, false, rng),
                    pair_sum: Linear::new(store, &name("pair_sum"), hx, ha, true, rng),
                    edge_in: Linear::new(store, &name("edge_in"), ha, ha, false, rng),
                    edge_out: Linear::new(store, &name("edge_out"), ha, ha, true, rng),
                }
            })
            .collect();
        Backbone {
            arch,
            dims,
            in_x,
            in_a,
            time_hidden,
            time_x,
            time_a,
            blocks,
        }
    }

    /// Returns node states `(n × hidden_x)` and pair states `(n² × hidden_a)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        a: Var,
        mask: &[bool],
        t: f64,
    ) -> (Var, Var) {
        let n = mask.len();
        let heads = self.arch.num_heads;
        let dh = self.arch.hidden_x / heads;
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

        let tf = tape.constant(time_features(t, self.arch.time_dim));
        let te = self.time_hidden.forward(tape, p, tf);
        let te = tape.silu(te);
        let tx = self.time_x.forward(tape, p, te);
        let ta = self.time_a.forward(tape, p, te);

        let h = self.in_x.forward(tape, p, x);
        let h = tape.add_row(h, tx);
        let mut h = tape.mask_rows(h, mask);
        let e = self.in_a.forward(tape, p, a);
        let e = tape.add_row(e, ta);
        let mut e = tape.mask_pairs(e, mask);

        for blk in &self.blocks {
            // Node attention with edge bias.
            let q = blk.q.forward(tape, p, h);
            let k = blk.k.forward(tape, p, h);
            let v = blk.v.forward(tape, p, h);
            let bias = blk.edge_bias.forward(tape, p, e);
            let mut heads_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, inv_sqrt_dh);
                let bh = tape.slice_cols(bias, hd, 1);
                let bh = tape.reshape(bh, n, n);
                let scores = tape.add(scores, bh);
                let attn = tape.softmax_rows_masked(scores, mask);
                heads_out.push(tape.matmul(attn, vh));
            }
            let cat = tape.concat_cols(&heads_out);
            let att = blk.o.forward(tape, p, cat);
            let h1 = tape.add(h, att);
            let h1 = tape.layer_norm(h1);
            let h1 = tape.mask_rows(h1, mask);

            let f = blk.ff1.forward(tape, p, h1);
            let f = tape.silu(f);
            let f = blk.ff2.forward(tape, p, f);
            let h2 = tape.add(h1, f);
            let h2 = tape.layer_norm(h2);
            h = tape.mask_rows(h2, mask);

            // Pair update from symmetric endpoint features.
            let pp = blk.pair_prod.forward(tape, p, h);
            let pp = tape.pair_product(pp);
            let ps = blk.pair_sum.forward(tape, p, h);
            let ps = tape.pair_sum(ps);
            let ei = blk.edge_in.forward(tape, p, e);
            let u = tape.add(ei, pp);
            let u = tape.add(u, ps);
            let u = tape.silu(u);
            let u = blk.edge_out.forward(tape, p, u);
            let e1 = tape.add(e, u);
            let e1 = tape.layer_norm(e1);
            e = tape.mask_pairs(e1, mask);
        }
        (h, e)
    }
}
