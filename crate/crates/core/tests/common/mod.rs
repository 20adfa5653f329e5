#![allow(dead_code)]

use ooda::datasets::{generate, SplitConfig, Splits};
use ooda::graph::DenseGraph;
use ooda::models::{
    ArchConfig, GraphClassifier, GraphDims, ScoreEstimate, ScoreModel, ScoreNetwork,
};
use ooda::sde::DiffusionSde;
use ooda::tensor::Matrix;
use ooda::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_x: 8,
        hidden_a: 4,
        time_dim: 4,
    }
}

pub fn small_splits(seed: u64) -> Splits {
    generate(&SplitConfig {
        sizes: [30, 12, 12],
        base_size_range: (4, 6),
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn dims_of(g: &DenseGraph) -> GraphDims {
    GraphDims {
        n_max: g.n_max(),
        node_dim: g.node_dim(),
        edge_dim: g.edge_dim(),
    }
}

pub fn vp() -> DiffusionSde {
    DiffusionSde::vp(0.1, 1.0, 1000)
}

pub fn random_score_net(dims: GraphDims, seed: u64) -> ScoreNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScoreNetwork::new(tiny_arch(), dims, vp(), vp(), &mut rng).unwrap()
}

pub fn random_classifier(dims: GraphDims, seed: u64) -> GraphClassifier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GraphClassifier::new(tiny_arch(), dims, 3, &mut rng).unwrap()
}

/// Noisy continuous version of a graph (symmetric, masked).
pub fn noisy_copy(g: &DenseGraph, t: f64, seed: u64) -> (Matrix, Matrix) {
    use ooda::sde::TensorRole;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sde = vp();
    let (x, _) = sde
        .perturb(g.node_features(), TensorRole::Nodes, g.node_mask(), t, &mut rng)
        .unwrap();
    let (a, _) = sde
        .perturb(g.adjacency(), TensorRole::Adjacency, g.node_mask(), t, &mut rng)
        .unwrap();
    (x, a)
}

/// Exact score when every node feature is drawn i.i.d. from N(mu, sigma²)
/// and the adjacency is identically zero, diffused by VP SDEs.
pub struct GaussianScore {
    pub mu: f64,
    pub sigma: f64,
    pub sde_x: DiffusionSde,
    pub sde_a: DiffusionSde,
}

impl ScoreModel for GaussianScore {
    fn score(&self, x: &Matrix, a: &Matrix, mask: &[bool], t: f64) -> Result<ScoreEstimate> {
        let (m, s) = self.sde_x.marginal_params(t)?;
        let var = m * m * self.sigma * self.sigma + s * s;
        let mut sx = x.map(|v| -(v - m * self.mu) / var);
        ooda::graph::mask_nodes(&mut sx, mask);
        let (_, sa_std) = self.sde_a.marginal_params(t)?;
        let mut sa = a.map(|v| -v / (sa_std * sa_std));
        ooda::graph::mask_pairs(&mut sa, mask);
        Ok(ScoreEstimate {
            score_x: sx,
            score_a: sa,
        })
    }
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
