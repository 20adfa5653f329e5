//! Conditional score for out-of-distribution sampling: the unconditional
//! score and the classifier gradient are combined, weighted by adaptive α,
//! and the whole sum is tilted by `1 − √λ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ScoreEstimate;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Exploration level in `[0, 1)`.
    pub lambda: f64,
    pub target_class: usize,
    pub r1: f64,
    pub r2: f64,
    pub alpha_cap: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda: 0.0,
            target_class: 0,
            r1: 0.5,
            r2: 0.5,
            alpha_cap: 10.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.r1 >= 0.0 && self.r1.is_finite()) {
            return Err(Error::config("guidance.r1", "must be finite and >= 0"));
        }
        if !(self.r2 >= 0.0 && self.r2.is_finite()) {
            return Err(Error::config("guidance.r2", "must be finite and >= 0"));
        }
        if !(self.alpha_cap > 0.0 && self.alpha_cap.is_finite()) {
            return Err(Error::config("guidance.alpha_cap", "must be finite and > 0"));
        }
        Ok(())
    }

    /// True when the classifier term contributes nothing, so the classifier
    /// gradient need not be computed.
    pub fn classifier_free(&self) -> bool {
        self.r1 == 0.0 && self.r2 == 0.0
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda = {lambda} outside [0, 1)")));
    }
    Ok(())
}

/// `1 − √λ`.
pub fn ood_tilt(lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(1.0 - lambda.sqrt())
}

/// Frobenius norm over active node rows.
pub fn node_norm(m: &Matrix, mask: &[bool]) -> f64 {
    let mut acc = 0.0;
    for (i, &on) in mask.iter().enumerate() {
        if on {
            acc += m.row(i).iter().map(|v| v * v).sum::<f64>();
        }
    }
    acc.sqrt()
}

/// Frobenius norm over pairs of active nodes.
pub fn pair_norm(m: &Matrix, mask: &[bool]) -> f64 {
    let n = mask.len();
    let mut acc = 0.0;
    for i in (0..n).filter(|&i| mask[i]) {
        for j in (0..n).filter(|&j| mask[j]) {
            acc += m.row(i * n + j).iter().map(|v| v * v).sum::<f64>();
        }
    }
    acc.sqrt()
}

fn alpha(r: f64, score_norm: f64, grad_norm: f64, t: f64, cap: f64) -> f64 {
    if grad_norm < 1e-12 {
        return cap;
    }
    (0.1f64.powf(t) * r * score_norm / grad_norm).min(cap)
}

/// Time-decayed weights balancing the classifier gradient against the score:
/// `α = 0.1^t · r · ‖score‖ / ‖grad‖`, capped at `alpha_cap`.
pub fn alpha_weights(
    se: &ScoreEstimate,
    grads: (&Matrix, &Matrix),
    mask: &[bool],
    r1: f64,
    r2: f64,
    t: f64,
    alpha_cap: f64,
) -> (f64, f64) {
    let a1 = alpha(
        r1,
        node_norm(&se.score_x, mask),
        node_norm(grads.0, mask),
        t,
        alpha_cap,
    );
    let a2 = alpha(
        r2,
        pair_norm(&se.score_a, mask),
        pair_norm(grads.1, mask),
        t,
        alpha_cap,
    );
    (a1, a2)
}

fn check_finite(se: &ScoreEstimate, grads: (&Matrix, &Matrix)) -> Result<()> {
    if !(se.score_x.is_finite() && se.score_a.is_finite()) {
        return Err(Error::Numeric("non-finite score estimate".into()));
    }
    if !(grads.0.is_finite() && grads.1.is_finite()) {
        return Err(Error::Numeric("non-finite classifier gradient".into()));
    }
    Ok(())
}

fn check_shapes(se: &ScoreEstimate, grads: (&Matrix, &Matrix)) -> Result<()> {
    if se.score_x.shape() != grads.0.shape() || se.score_a.shape() != grads.1.shape() {
        return Err(Error::Shape(format!(
            "score shapes {:?}/{:?} vs gradient shapes {:?}/{:?}",
            se.score_x.shape(),
            se.score_a.shape(),
            grads.0.shape(),
            grads.1.shape()
        )));
    }
    Ok(())
}

/// `(1 − √λ)(score + α·grad)` per component, with explicit α.
pub fn guided_score_with_alpha(
    se: &ScoreEstimate,
    grads: (&Matrix, &Matrix),
    lambda: f64,
    alphas: (f64, f64),
) -> Result<ScoreEstimate> {
    check_shapes(se, grads)?;
    check_finite(se, grads)?;
    let tilt = ood_tilt(lambda)?;
    let combine = |s: &Matrix, g: &Matrix, a: f64| s.zip_map(g, |s, g| tilt * (s + a * g));
    Ok(ScoreEstimate {
        score_x: combine(&se.score_x, grads.0, alphas.0),
        score_a: combine(&se.score_a, grads.1, alphas.1),
    })
}

/// Guided score with adaptive α from [`alpha_weights`].
pub fn guided_score(
    se: &ScoreEstimate,
    grads: (&Matrix, &Matrix),
    mask: &[bool],
    cfg: &GuidanceConfig,
    t: f64,
) -> Result<ScoreEstimate> {
    cfg.validate()?;
    check_shapes(se, grads)?;
    let alphas = alpha_weights(se, grads, mask, cfg.r1, cfg.r2, t, cfg.alpha_cap);
    guided_score_with_alpha(se, grads, cfg.lambda, alphas)
}

/// Same quantity assembled term by term from the joint decomposition:
/// unconditional score, class term, and the OOD term `−√λ(score + α·grad)`.
/// Kept separate from [`guided_score_with_alpha`] so the two can be
/// compared.
pub fn guided_score_three_term(
    se: &ScoreEstimate,
    grads: (&Matrix, &Matrix),
    lambda: f64,
    alphas: (f64, f64),
) -> Result<ScoreEstimate> {
    check_shapes(se, grads)?;
    check_finite(se, grads)?;
    check_lambda(lambda)?;
    let root = lambda.sqrt();
    let build = |s: &Matrix, g: &Matrix, a: f64| {
        let class_term = g.scaled(a);
        let mut conditional = s.clone();
        conditional.add_assign(&class_term);
        let ood_term = conditional.scaled(-root);
        let mut out = s.clone();
        out.add_assign(&class_term);
        out.add_assign(&ood_term);
        out
    };
    Ok(ScoreEstimate {
        score_x: build(&se.score_x, grads.0, alphas.0),
        score_a: build(&se.score_a, grads.1, alphas.1),
    })
}
