mod common;

use common::*;
use ooda::graph::DenseGraph;
use ooda::models::checkpoint::{load_classifier, load_score, save_classifier, save_score};
use ooda::models::{train_classifier, train_score, ClassGuide, ScoreEstimate, ScoreModel, TrainConfig};
use ooda::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permute_nodes(m: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).copy_from_slice(m.row(i));
    }
    out
}

fn permute_pairs(m: &Matrix, perm: &[usize]) -> Matrix {
    let n = perm.len();
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..n {
        for j in 0..n {
            out.row_mut(perm[i] * n + perm[j])
                .copy_from_slice(m.row(i * n + j));
        }
    }
    out
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn permuted_input(g: &DenseGraph, seed: u64) -> (Vec<usize>, DenseGraph, Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..g.n_max()).collect();
    perm.shuffle(&mut rng);
    let (x, a) = noisy_copy(g, 0.4, seed);
    let noisy = DenseGraph::from_parts(x, a, g.node_mask().to_vec(), None).unwrap();
    let moved = noisy.permuted(&perm).unwrap();
    (perm, noisy, moved.node_features().clone(), moved.adjacency().clone())
}

#[test]
fn score_network_is_permutation_equivariant() {
    let s = small_splits(1);
    let g = &s.train.graphs[0];
    let net = random_score_net(dims_of(g), 3);
    for seed in 0..3 {
        let (perm, noisy, px, pa) = permuted_input(g, seed);
        let pmask = noisy.permuted(&perm).unwrap().node_mask().to_vec();
        let base = net
            .score(noisy.node_features(), noisy.adjacency(), noisy.node_mask(), 0.4)
            .unwrap();
        let moved = net.score(&px, &pa, &pmask, 0.4).unwrap();
        assert!(max_diff(&permute_nodes(&base.score_x, &perm), &moved.score_x) < 1e-9);
        assert!(max_diff(&permute_pairs(&base.score_a, &perm), &moved.score_a) < 1e-9);
    }
}

#[test]
fn classifier_is_permutation_invariant_and_gradient_equivariant() {
    let s = small_splits(2);
    let g = &s.train.graphs[1];
    let phi = random_classifier(dims_of(g), 4);
    let (perm, noisy, px, pa) = permuted_input(g, 7);
    let pmask = noisy.permuted(&perm).unwrap().node_mask().to_vec();
    let l0 = phi
        .logits(noisy.node_features(), noisy.adjacency(), noisy.node_mask(), 0.3)
        .unwrap();
    let l1 = phi.logits(&px, &pa, &pmask, 0.3).unwrap();
    for (a, b) in l0.iter().zip(&l1) {
        assert!((a - b).abs() < 1e-9);
    }
    let (gx0, ga0) = phi
        .class_logprob_grad(noisy.node_features(), noisy.adjacency(), noisy.node_mask(), 0.3, 2)
        .unwrap();
    let (gx1, ga1) = phi.class_logprob_grad(&px, &pa, &pmask, 0.3, 2).unwrap();
    assert!(max_diff(&permute_nodes(&gx0, &perm), &gx1) < 1e-9);
    assert!(max_diff(&permute_pairs(&ga0, &perm), &ga1) < 1e-9);
}

#[test]
fn padding_does_not_change_active_outputs() {
    let s = small_splits(3);
    let g = &s.train.graphs[2];
    let net = random_score_net(dims_of(g), 5);
    let (x, a) = noisy_copy(g, 0.5, 1);
    let noisy = DenseGraph::from_parts(x, a, g.node_mask().to_vec(), None).unwrap();
    let compact = noisy.repadded(noisy.num_active()).unwrap();
    let full = net
        .score(noisy.node_features(), noisy.adjacency(), noisy.node_mask(), 0.5)
        .unwrap();
    let small = net
        .score(compact.node_features(), compact.adjacency(), compact.node_mask(), 0.5)
        .unwrap();
    let n = compact.n_max();
    let big = noisy.n_max();
    for i in 0..n {
        for c in 0..g.node_dim() {
            assert!((full.score_x.get(i, c) - small.score_x.get(i, c)).abs() < 1e-9);
        }
        for j in 0..n {
            assert!((full.score_a.get(i * big + j, 0) - small.score_a.get(i * n + j, 0)).abs() < 1e-9);
        }
    }
    for i in n..big {
        assert!(full.score_x.row(i).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn score_output_respects_graph_invariants() {
    let s = small_splits(4);
    let g = &s.train.graphs[0];
    let net = random_score_net(dims_of(g), 6);
    let (x, a) = noisy_copy(g, 0.7, 2);
    let se = net.score(&x, &a, g.node_mask(), 0.7).unwrap();
    let out = DenseGraph::from_parts(se.score_x, se.score_a, g.node_mask().to_vec(), None).unwrap();
    assert!(ooda::graph::validate(&out).is_empty());
}

#[test]
fn classifier_input_gradient_matches_finite_differences() {
    let s = small_splits(5);
    let g = &s.train.graphs[3];
    let phi = random_classifier(dims_of(g), 8);
    let (x, a) = noisy_copy(g, 0.2, 3);
    let mask = g.node_mask();
    let y = 1;
    let (gx, ga) = phi.class_logprob_grad(&x, &a, mask, 0.2, y).unwrap();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let active: Vec<usize> = (0..g.n_max()).filter(|&i| mask[i]).collect();
    let n = g.n_max();
    for _ in 0..10 {
        let i = active[rng.gen_range(0..active.len())];
        let c = rng.gen_range(0..x.cols());
        let f = |d: f64| {
            let mut xp = x.clone();
            xp.set(i, c, x.get(i, c) + d);
            phi.class_logprob(&xp, &a, mask, 0.2, y).unwrap()
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!(rel_err(fd, gx.get(i, c)) < 1e-3, "x[{i},{c}]: {fd} vs {}", gx.get(i, c));
    }
    for _ in 0..10 {
        let i = active[rng.gen_range(0..active.len())];
        let mut j = active[rng.gen_range(0..active.len())];
        if i == j {
            j = active[(active.iter().position(|&v| v == i).unwrap() + 1) % active.len()];
        }
        let f = |d: f64| {
            let mut ap = a.clone();
            ap.set(i * n + j, 0, a.get(i * n + j, 0) + d);
            ap.set(j * n + i, 0, a.get(j * n + i, 0) + d);
            phi.class_logprob(&x, &ap, mask, 0.2, y).unwrap()
        };
        // Symmetric perturbation moves both entries: derivative is 2·sym grad.
        let fd = (f(h) - f(-h)) / (4.0 * h);
        let an = ga.get(i * n + j, 0);
        assert!(rel_err(fd, an) < 1e-3, "a[{i},{j}]: {fd} vs {an}");
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let s = small_splits(6);
    let g = &s.train.graphs[4];
    let mut net = random_score_net(dims_of(g), 9);
    let (x, a) = noisy_copy(g, 0.6, 4);
    let mask = g.node_mask().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cot = ScoreEstimate {
        score_x: Matrix::randn(x.rows(), x.cols(), &mut rng),
        score_a: Matrix::randn(a.rows(), a.cols(), &mut rng),
    };
    let (_, grads) = net.param_vjp(&x, &a, &mask, 0.6, &cot).unwrap();
    let h = 1e-5;
    for _ in 0..20 {
        let k = rng.gen_range(0..grads.len());
        let e = rng.gen_range(0..grads[k].len());
        let orig = net.params.values()[k].data()[e];
        let mut eval = |v: f64| {
            net.params.values_mut()[k].data_mut()[e] = v;
            net.param_vjp(&x, &a, &mask, 0.6, &cot).unwrap().0
        };
        let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        eval(orig);
        let an = grads[k].data()[e];
        if fd.abs().max(an.abs()) > 1e-7 {
            assert!(rel_err(fd, an) < 1e-3, "param {k}[{e}]: {fd} vs {an}");
        }
    }
}

#[test]
fn classifier_parameter_gradients_match_finite_differences() {
    let s = small_splits(9);
    let g = &s.train.graphs[5];
    let mut phi = random_classifier(dims_of(g), 10);
    let (x, a) = noisy_copy(g, 0.3, 5);
    let mask = g.node_mask().to_vec();
    let (lp, grads) = phi.logprob_param_grad(&x, &a, &mask, 0.3, 0).unwrap();
    assert!((lp - phi.class_logprob(&x, &a, &mask, 0.3, 0).unwrap()).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-5;
    for _ in 0..20 {
        let k = rng.gen_range(0..grads.len());
        let e = rng.gen_range(0..grads[k].len());
        let orig = phi.params.values()[k].data()[e];
        let mut eval = |v: f64| {
            phi.params.values_mut()[k].data_mut()[e] = v;
            phi.class_logprob(&x, &a, &mask, 0.3, 0).unwrap()
        };
        let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        eval(orig);
        let an = grads[k].data()[e];
        if fd.abs().max(an.abs()) > 1e-7 {
            assert!(rel_err(fd, an) < 1e-3, "param {k}[{e}]: {fd} vs {an}");
        }
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let s = small_splits(7);
    let cfg = TrainConfig {
        batch_size: 10,
        epochs: 8,
        lr: 3e-3,
        ..Default::default()
    };
    let (net_a, rep) = train_score(&s.train, vp(), vp(), tiny_arch(), &cfg).unwrap();
    let (net_b, _) = train_score(&s.train, vp(), vp(), tiny_arch(), &cfg).unwrap();
    assert_eq!(net_a.params.flatten(), net_b.params.flatten());
    let (head, tail) = rep.head_tail(5).unwrap();
    assert!(tail < head, "loss {head} -> {tail}");

    let (phi, rep) = train_classifier(&s.train, vp(), vp(), tiny_arch(), &cfg).unwrap();
    assert_eq!(rep.losses.len(), cfg.steps_for(s.train.len()));
    assert_eq!(phi.num_classes(), 3);
}

#[test]
fn checkpoints_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_splits(8);
    let g = &s.train.graphs[0];
    let net = random_score_net(dims_of(g), 1);
    let phi = random_classifier(dims_of(g), 2);
    let sp = dir.path().join("score.ckpt");
    let cp = dir.path().join("phi.ckpt");
    save_score(&net, &sp).unwrap();
    save_classifier(&phi, &cp).unwrap();
    let net2 = load_score(&sp, None).unwrap();
    let phi2 = load_classifier(&cp, None).unwrap();
    let (x, a) = noisy_copy(g, 0.5, 0);
    let s1 = net.score(&x, &a, g.node_mask(), 0.5).unwrap();
    let s2 = net2.score(&x, &a, g.node_mask(), 0.5).unwrap();
    // f32 storage: outputs agree to single precision.
    assert!(max_diff(&s1.score_x, &s2.score_x) < 1e-3 * s1.score_x.max_abs().max(1.0));
    let l1 = phi.logits(&x, &a, g.node_mask(), 0.5).unwrap();
    let l2 = phi2.logits(&x, &a, g.node_mask(), 0.5).unwrap();
    for (p, q) in l1.iter().zip(&l2) {
        assert!((p - q).abs() < 1e-4);
    }
    assert!(load_score(&cp, None).is_err());
}
