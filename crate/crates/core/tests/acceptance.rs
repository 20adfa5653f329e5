//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain binary
//! (`harness = false`) so the desk-scale run is shared by criteria 5-8 and the
//! report prints in order.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use ooda::datasets::{generate, SplitConfig};
use ooda::downstream::{summarize, Mode};
use ooda::eval::{spearman, MetricReport, RandomGin, RandomGinConfig};
use ooda::graph::{validate, DenseGraph};
use ooda::guidance::{alpha_weights, guided_score, guided_score_three_term, GuidanceConfig};
use ooda::io::{read_dataset_from, write_dataset_to};
use ooda::models::{ClassGuide, GraphDims, ScoreEstimate, ScoreModel};
use ooda::pipeline::{PipelineConfig, Run, MANIFEST};
use ooda::sampler::{reverse_sample, reverse_sample_observed, sample_rng, Networks, SamplerConfig, Solver};
use ooda::sde::{DiffusionSde, TensorRole};
use ooda::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: &str, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if let Some(b) = budget {
        if took > b {
            o.pass = false;
            o.detail.push_str(&format!("; over the {:.0}s budget", b.as_secs_f64()));
        }
    }
    println!(
        "criterion {id:<2} {}  {name}: {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64()
    );
    o.pass
}

// 1. SDE kernel against quadrature and Monte Carlo.

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn sde_kernel() -> Outcome {
    let sde = DiffusionSde::vp(0.1, 1.0, 1000);
    let (m, s) = sde.marginal_params(1.0).unwrap();
    let integral = simpson(|u| 0.1 + u * 0.9, 0.0, 1.0, 1000);
    let (qm, qs) = ((-0.5 * integral).exp(), (1.0 - (-integral).exp()).sqrt());
    let quad_err = (m - qm).abs().max((s - qs).abs());
    // Closed form exp(-0.275), sqrt(1 - exp(-0.55)). The commonly quoted decimal
    // 0.650482 for the std is off by 6e-5 from that expression (m² + s² would
    // be 1.000077), so it is only reported.
    let closed_err = (m - (-0.275f64).exp())
        .abs()
        .max((s - (1.0 - (-0.55f64).exp()).sqrt()).abs());
    let quoted_gap = (s - 0.650482).abs();

    let n = 100_000;
    let clean = Matrix::filled(n, 1, 2.0);
    let mask = vec![true; n];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for t in [0.1, 0.5, 1.0] {
        let (mt, st) = sde.marginal_params(t).unwrap();
        let (noisy, _) = sde.perturb(&clean, TensorRole::Nodes, &mask, t, &mut rng).unwrap();
        let v = noisy.data();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = st / (n as f64).sqrt();
        let se_var = st * st * (2.0 / (n - 1) as f64).sqrt();
        worst = worst
            .max((mean - 2.0 * mt).abs() / se_mean)
            .max((var - st * st).abs() / se_var);
    }
    outcome(
        quad_err < 1e-5 && closed_err < 1e-5 && (m - 0.759572).abs() < 1e-5 && worst < 3.0,
        format!(
            "marginal (1.0) = ({m:.6}, {s:.6}), quadrature gap {quad_err:.1e}, closed-form gap {closed_err:.1e} (tol 1e-5), \
             gap to quoted 0.650482 {quoted_gap:.1e}; \
             Monte Carlo worst deviation {worst:.2} SE (tol 3)"
        ),
    )
}

// 2. Solvers on an analytic Gaussian score.

fn gaussian_solvers() -> Outcome {
    let sde = DiffusionSde::vp(0.1, 20.0, 1000);
    let target = GaussianScore {
        mu: 1.5,
        sigma: 0.5,
        sde_x: sde,
        sde_a: sde,
    };
    let nets = Networks {
        score: &target,
        guide: None,
        sde_x: sde,
        sde_a: sde,
        dims: GraphDims {
            n_max: 8,
            node_dim: 4,
            edge_dim: 1,
        },
    };
    let off = GuidanceConfig {
        r1: 0.0,
        r2: 0.0,
        ..Default::default()
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for solver in [Solver::EulerMaruyama, Solver::EmLangevin] {
        let scfg = SamplerConfig {
            solver,
            num_steps: 500,
            snr: 0.05,
            ..Default::default()
        };
        let vals: Vec<f64> = (0..2000)
            .flat_map(|i| {
                let g = reverse_sample(&nets, &off, &scfg, 8, &mut sample_rng(5, i)).unwrap();
                g.node_features().data().to_vec()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        let (em, es) = ((mean - 1.5).abs() / 1.5, (std - 0.5).abs() / 0.5);
        pass &= em < 0.05 && es < 0.05;
        parts.push(format!(
            "{solver:?} mean {mean:.4} ({:.1}%), std {std:.4} ({:.1}%)",
            100.0 * em,
            100.0 * es
        ));
    }
    outcome(pass, format!("{} (tol 5%, 2000 samples)", parts.join("; ")))
}

// 3. Two constructions of the guided score.

fn guidance_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n: usize = rng.gen_range(1..8);
        let mask = vec![true; n];
        let se = ScoreEstimate {
            score_x: Matrix::randn(n, 5, &mut rng),
            score_a: Matrix::randn(n * n, 2, &mut rng),
        };
        let gx = Matrix::randn(n, 5, &mut rng);
        let ga = Matrix::randn(n * n, 2, &mut rng);
        let t = rng.gen_range(0.0..1.0);
        for k in 0..10 {
            let cfg = GuidanceConfig {
                lambda: k as f64 / 10.0,
                ..Default::default()
            };
            let a = guided_score(&se, (&gx, &ga), &mask, &cfg, t).unwrap();
            let alphas = alpha_weights(&se, (&gx, &ga), &mask, cfg.r1, cfg.r2, t, cfg.alpha_cap);
            let b = guided_score_three_term(&se, (&gx, &ga), cfg.lambda, alphas).unwrap();
            for (p, q) in [(&a.score_x, &b.score_x), (&a.score_a, &b.score_a)] {
                for (u, v) in p.data().iter().zip(q.data()) {
                    worst = worst.max((u - v).abs());
                }
            }
        }
    }
    outcome(
        worst <= 1e-12,
        format!("max gap {worst:.2e} over 100 inputs x 10 lambdas (tol 1e-12)"),
    )
}

// 4. Finite-difference gradient checks.

fn gradient_checks() -> Outcome {
    let s = small_splits(4);
    let g = &s.train.graphs[0];
    let dims = dims_of(g);
    let mask = g.node_mask().to_vec();
    let n = g.n_max();
    let active: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let (x, a) = noisy_copy(g, 0.3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst_input: f64 = 0.0;
    let mut worst_param: f64 = 0.0;

    let mut phi = random_classifier(dims, 5);
    let (gx, ga) = phi.class_logprob_grad(&x, &a, &mask, 0.3, 1).unwrap();
    for k in 0..20 {
        let i = active[rng.gen_range(0..active.len())];
        let (fd, an) = if k % 2 == 0 {
            let c = rng.gen_range(0..x.cols());
            let f = |d: f64| {
                let mut xp = x.clone();
                xp.set(i, c, x.get(i, c) + d);
                phi.class_logprob(&xp, &a, &mask, 0.3, 1).unwrap()
            };
            ((f(h) - f(-h)) / (2.0 * h), gx.get(i, c))
        } else {
            let j = active[(active.iter().position(|&v| v == i).unwrap() + 1 + rng.gen_range(0..active.len() - 1)) % active.len()];
            let f = |d: f64| {
                let mut ap = a.clone();
                ap.set(i * n + j, 0, a.get(i * n + j, 0) + d);
                ap.set(j * n + i, 0, a.get(j * n + i, 0) + d);
                phi.class_logprob(&x, &ap, &mask, 0.3, 1).unwrap()
            };
            ((f(h) - f(-h)) / (4.0 * h), ga.get(i * n + j, 0))
        };
        worst_input = worst_input.max(rel_err(fd, an));
    }

    let (_, grads) = phi.logprob_param_grad(&x, &a, &mask, 0.3, 1).unwrap();
    let mut checked = 0;
    while checked < 20 {
        let k = rng.gen_range(0..grads.len());
        let e = rng.gen_range(0..grads[k].len());
        let an = grads[k].data()[e];
        let orig = phi.params.values()[k].data()[e];
        let mut f = |v: f64| {
            phi.params.values_mut()[k].data_mut()[e] = v;
            phi.class_logprob(&x, &a, &mask, 0.3, 1).unwrap()
        };
        let fd = (f(orig + h) - f(orig - h)) / (2.0 * h);
        f(orig);
        if fd.abs().max(an.abs()) > 1e-7 {
            worst_param = worst_param.max(rel_err(fd, an));
            checked += 1;
        }
    }

    let mut net = random_score_net(dims, 6);
    let cot = ScoreEstimate {
        score_x: Matrix::randn(x.rows(), x.cols(), &mut rng),
        score_a: Matrix::randn(a.rows(), a.cols(), &mut rng),
    };
    let (_, grads) = net.param_vjp(&x, &a, &mask, 0.3, &cot).unwrap();
    let mut checked = 0;
    while checked < 20 {
        let k = rng.gen_range(0..grads.len());
        let e = rng.gen_range(0..grads[k].len());
        let an = grads[k].data()[e];
        let orig = net.params.values()[k].data()[e];
        let mut f = |v: f64| {
            net.params.values_mut()[k].data_mut()[e] = v;
            net.param_vjp(&x, &a, &mask, 0.3, &cot).unwrap().0
        };
        let fd = (f(orig + h) - f(orig - h)) / (2.0 * h);
        f(orig);
        if fd.abs().max(an.abs()) > 1e-7 {
            worst_param = worst_param.max(rel_err(fd, an));
            checked += 1;
        }
    }
    outcome(
        worst_input < 1e-3 && worst_param < 1e-3,
        format!(
            "input-gradient max rel err {worst_input:.1e} (20 coords), parameter max rel err {worst_param:.1e} \
             (20 classifier + 20 score coords) (tol 1e-3)"
        ),
    )
}

// 5-8. Desk-scale run.

fn desk_config() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/motif-base.toml");
    PipelineConfig::load(&path).expect("desk config loads")
}

fn desk_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-motif-base")
}

fn lambda_trend(r: &MetricReport) -> Outcome {
    let l: Vec<f64> = r.lambda_rows.iter().map(|x| x.lambda).collect();
    let m: Vec<f64> = r.lambda_rows.iter().map(|x| x.mmd_mean).collect();
    let rho = spearman(&l, &m);
    let first = r.lambda_rows.iter().find(|x| x.lambda == 0.0);
    let last = r.lambda_rows.iter().find(|x| (x.lambda - 0.9).abs() < 1e-9);
    let ratio = match (first, last) {
        (Some(a), Some(b)) if a.mmd_mean > 0.0 => b.mmd_mean / a.mmd_mean,
        _ => f64::NAN,
    };
    let series: Vec<String> = m.iter().map(|v| format!("{v:.3}")).collect();
    outcome(
        rho >= 0.8 && ratio >= 1.2,
        format!(
            "Spearman {rho:.3} (tol >= 0.8), MMD(0.9)/MMD(0.0) = {ratio:.2} (tol >= 1.2); MMD [{}]",
            series.join(", ")
        ),
    )
}

fn preservation(r: &MetricReport) -> Outcome {
    let rows: Vec<_> = r.lambda_rows.iter().filter(|x| x.lambda <= 0.3 + 1e-9).collect();
    let worst = rows.iter().map(|x| x.preservation).fold(f64::INFINITY, f64::min);
    let series: Vec<String> = rows
        .iter()
        .map(|x| format!("{:.1}: {:.3}", x.lambda, x.preservation))
        .collect();
    outcome(
        !rows.is_empty() && worst >= 0.85,
        format!("min over lambda <= 0.3 is {worst:.3} (tol >= 0.85); [{}]", series.join(", ")),
    )
}

fn validity(r: &MetricReport) -> Outcome {
    let valid = r.lambda_rows.iter().map(|x| x.validity).fold(1.0, f64::min);
    let conn = r.lambda_rows.iter().map(|x| x.connected).fold(1.0, f64::min);
    outcome(
        valid == 1.0 && conn >= 0.9,
        format!("min valid fraction {valid:.3} (tol 1.0), min connected fraction {conn:.3} (tol >= 0.9)"),
    )
}

fn downstream(r: &MetricReport) -> Outcome {
    let mean_of = |mode: Mode| {
        let rows: Vec<_> = r
            .downstream_rows
            .iter()
            .filter(|x| x.mode == mode.name())
            .cloned()
            .collect();
        (rows.len(), summarize(&rows))
    };
    let mut parts = Vec::new();
    let mut means = std::collections::BTreeMap::new();
    for mode in Mode::ALL {
        let (count, (mean, std)) = mean_of(mode);
        if count > 0 {
            parts.push(format!("{mode} {mean:.4} ± {std:.4} (n={count})"));
            means.insert(mode.name(), mean);
        }
    }
    let (n_erm, (erm, _)) = mean_of(Mode::Erm);
    let (n_ooda, (ooda, _)) = mean_of(Mode::Ooda);
    let ordering = match (
        means.get("ooda"),
        means.get("alpha_only"),
        means.get("unconditional"),
        means.get("lambda_only"),
    ) {
        (Some(o), Some(a), Some(u), Some(l)) => {
            let best = means.values().cloned().fold(f64::MIN, f64::max);
            format!(
                "ablation ooda >= alpha_only >= unconditional: {}; lambda_only not best: {}",
                o >= a && a >= u,
                *l < best || means.values().filter(|&&v| v == best).count() > 1
            )
        }
        _ => "ablation ordering not available".into(),
    };
    outcome(
        n_erm >= 5 && n_ooda >= 5 && ooda >= erm,
        format!("{}; {ordering} (strict: ooda >= erm over >= 5 seeds)", parts.join(", ")),
    )
}

// 9. Invariant suites.

fn permutation(m: &Matrix, perm: &[usize], pairs: bool) -> Matrix {
    let n = perm.len();
    let mut out = Matrix::zeros(m.rows(), m.cols());
    if pairs {
        for i in 0..n {
            for j in 0..n {
                out.row_mut(perm[i] * n + perm[j]).copy_from_slice(m.row(i * n + j));
            }
        }
    } else {
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(p).copy_from_slice(m.row(i));
        }
    }
    out
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn invariants() -> Outcome {
    let s = small_splits(9);
    let dims = dims_of(&s.train.graphs[0]);
    let net = random_score_net(dims, 1);
    let phi = random_classifier(dims, 2);
    let gin = RandomGin::new(dims.node_dim, &RandomGinConfig::default(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut eq_score, mut inv_phi, mut inv_gin): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for g in s.train.graphs.iter().take(5) {
        let mut perm: Vec<usize> = (0..g.n_max()).collect();
        perm.shuffle(&mut rng);
        let (x, a) = noisy_copy(g, 0.5, 2);
        let noisy = DenseGraph::from_parts(x, a, g.node_mask().to_vec(), None).unwrap();
        let moved = noisy.permuted(&perm).unwrap();
        let (xm, am, mm) = (moved.node_features(), moved.adjacency(), moved.node_mask());
        let s0 = net.score(noisy.node_features(), noisy.adjacency(), noisy.node_mask(), 0.5).unwrap();
        let s1 = net.score(xm, am, mm, 0.5).unwrap();
        eq_score = eq_score
            .max(max_gap(permutation(&s0.score_x, &perm, false).data(), s1.score_x.data()))
            .max(max_gap(permutation(&s0.score_a, &perm, true).data(), s1.score_a.data()));
        let l0 = phi.logits(noisy.node_features(), noisy.adjacency(), noisy.node_mask(), 0.5).unwrap();
        let l1 = phi.logits(xm, am, mm, 0.5).unwrap();
        inv_phi = inv_phi.max(max_gap(&l0, &l1));
        inv_gin = inv_gin.max(max_gap(&gin.embed(g), &gin.embed(&g.permuted(&perm).unwrap())));
    }

    let nets = Networks {
        score: &net,
        guide: Some(&phi as &dyn ClassGuide),
        sde_x: vp(),
        sde_a: vp(),
        dims,
    };
    let scfg = SamplerConfig {
        num_steps: 25,
        debug: true,
        ..Default::default()
    };
    let gcfg = GuidanceConfig {
        lambda: 0.3,
        target_class: 2,
        ..Default::default()
    };
    let mut steps = 0;
    let mut step_violations = 0;
    let out = reverse_sample_observed(&nets, &gcfg, &scfg, 6, &mut sample_rng(1, 1), &mut |tr| {
        steps += 1;
        let mask = vec![true; tr.x.rows()];
        let g = DenseGraph::from_parts(tr.x.clone(), tr.a.clone(), mask, None).unwrap();
        step_violations += validate(&g).len();
    });
    let sampler_ok = out.is_ok() && step_violations == 0 && validate(&out.unwrap()).is_empty();

    let splits = generate(&SplitConfig {
        sizes: [30, 10, 10],
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let mut bytes = Vec::new();
    write_dataset_to(&splits.train, &mut bytes).unwrap();
    let back = read_dataset_from(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    write_dataset_to(&back, &mut again).unwrap();
    let round_trip = back == splits.train && bytes == again;

    let smoke = PipelineConfig::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml"),
    )
    .unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = Run::new(smoke.clone(), Some(d1.path().into())).unwrap().pipeline().unwrap();
    let r2 = Run::new(smoke, Some(d2.path().into())).unwrap().pipeline().unwrap();
    let deterministic = r1 == r2
        && std::fs::read(d1.path().join(MANIFEST)).unwrap()
            == std::fs::read(d2.path().join(MANIFEST)).unwrap();

    let tol = 1e-5;
    outcome(
        eq_score <= tol && inv_phi <= tol && inv_gin <= tol && sampler_ok && round_trip && deterministic,
        format!(
            "permutation gaps: score {eq_score:.1e}, classifier {inv_phi:.1e}, random GIN {inv_gin:.1e} (tol 1e-5); \
             debug sampler {steps} checked states, {step_violations} violations; dataset round trip byte-equal: {round_trip}; \
             pipeline manifests identical: {deterministic}"
        ),
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("ooda::pipeline=info"))
        .init();
    let mut all = true;
    all &= report("1", "SDE kernel", Some(Duration::from_secs(10)), sde_kernel);
    all &= report("2", "solver correctness", Some(Duration::from_secs(120)), gaussian_solvers);
    all &= report("3", "guidance identity", Some(Duration::from_secs(5)), guidance_identity);
    all &= report("4", "gradient checks", Some(Duration::from_secs(30)), gradient_checks);

    let start = Instant::now();
    let dir = desk_dir();
    println!("desk-scale run in {} (artifacts from an identical earlier run are reused)", dir.display());
    let desk = Run::new(desk_config(), Some(dir)).and_then(|mut run| run.pipeline());
    let took = start.elapsed();
    println!("desk-scale run finished in {:.1} min", took.as_secs_f64() / 60.0);
    match desk {
        Ok(r) => {
            let budget = Duration::from_secs(2 * 3600);
            all &= report("5", "MMD grows with lambda", None, || {
                let mut o = lambda_trend(&r);
                if took > budget {
                    o.pass = false;
                    o.detail.push_str("; desk run over the 2 h budget");
                }
                o
            });
            all &= report("6", "stable-pattern preservation", None, || preservation(&r));
            all &= report("7", "validity and connectivity", None, || validity(&r));
            all &= report("8", "downstream benefit", None, || downstream(&r));
        }
        Err(e) => {
            for (id, name) in [
                ("5", "MMD grows with lambda"),
                ("6", "stable-pattern preservation"),
                ("7", "validity and connectivity"),
                ("8", "downstream benefit"),
            ] {
                all &= report(id, name, None, || outcome(false, format!("desk run failed: {e}")));
            }
        }
    }
    all &= report("9", "invariant suites", None, invariants);

    println!("acceptance: {}", if all { "all criteria pass" } else { "some criteria FAIL" });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
