//! Variance-preserving and variance-exploding forward SDEs on normalized
//! time `t ∈ [0, 1]`, with closed-form Gaussian perturbation kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{mask_nodes, mask_pairs};
use crate::tensor::Matrix;

pub const TERMINAL_TIME: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdeKind {
    Vp,
    Ve,
}

/// Which part of a graph a tensor belongs to; adjacency noise is
/// symmetrized and masked pairwise, node noise is masked per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Nodes,
    Adjacency,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSde {
    pub kind: SdeKind,
    /// β_min for VP, σ_min for VE.
    pub beta_min: f64,
    /// β_max for VP, σ_max for VE.
    pub beta_max: f64,
    pub num_steps: usize,
    pub eps_time: f64,
}

impl Default for DiffusionSde {
    fn default() -> Self {
        DiffusionSde::vp(0.1, 1.0, 1000)
    }
}

impl DiffusionSde {
    pub fn vp(beta_min: f64, beta_max: f64, num_steps: usize) -> Self {
        DiffusionSde {
            kind: SdeKind::Vp,
            beta_min,
            beta_max,
            num_steps,
            eps_time: 1e-3,
        }
    }

    pub fn ve(sigma_min: f64, sigma_max: f64, num_steps: usize) -> Self {
        DiffusionSde {
            kind: SdeKind::Ve,
            beta_min: sigma_min,
            beta_max: sigma_max,
            num_steps,
            eps_time: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max) {
            return Err(Error::Domain(format!(
                "need 0 < beta_min <= beta_max, got ({}, {})",
                self.beta_min, self.beta_max
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::Domain("num_steps must be at least 1".into()));
        }
        if !(self.eps_time > 0.0 && self.eps_time < TERMINAL_TIME) {
            return Err(Error::Domain(format!(
                "eps_time must lie in (0, 1), got {}",
                self.eps_time
            )));
        }
        Ok(())
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..=TERMINAL_TIME).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// β(t) for VP.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// ∫₀ᵗ β(s) ds for VP.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// σ(t) for VE.
    pub fn sigma(&self, t: f64) -> f64 {
        self.beta_min * (self.beta_max / self.beta_min).powf(t)
    }

    /// Scalar drift factor `k` with `f(x, t) = k·x`, and the diffusion `g(t)`.
    pub fn drift_diffusion_coefs(&self, t: f64) -> Result<(f64, f64)> {
        Self::check_time(t)?;
        Ok(match self.kind {
            SdeKind::Vp => {
                let b = self.beta(t);
                (-0.5 * b, b.sqrt())
            }
            SdeKind::Ve => {
                let log_ratio = (self.beta_max / self.beta_min).ln();
                (0.0, self.sigma(t) * (2.0 * log_ratio).sqrt())
            }
        })
    }

    /// Drift tensor `f(state, t)` and scalar diffusion `g(t)`.
    pub fn drift_diffusion(&self, state: &Matrix, t: f64) -> Result<(Matrix, f64)> {
        let (k, g) = self.drift_diffusion_coefs(t)?;
        Ok((state.scaled(k), g))
    }

    /// `(mean_coef, std)` of the perturbation kernel
    /// `x_t | x_0 ~ N(mean_coef · x_0, std² I)`.
    pub fn marginal_params(&self, t: f64) -> Result<(f64, f64)> {
        Self::check_time(t)?;
        Ok(match self.kind {
            SdeKind::Vp => {
                let ib = self.integrated_beta(t);
                ((-0.5 * ib).exp(), (-(-ib).exp_m1()).sqrt())
            }
            SdeKind::Ve => {
                let s = self.sigma(t);
                (1.0, (s * s - self.beta_min * self.beta_min).max(0.0).sqrt())
            }
        })
    }

    /// Standard deviation of the prior at `t = T`.
    pub fn prior_std(&self) -> f64 {
        match self.kind {
            SdeKind::Vp => 1.0,
            SdeKind::Ve => (self.beta_max * self.beta_max - self.beta_min * self.beta_min).sqrt(),
        }
    }

    /// Forward-perturb `clean` to time `t`. Returns the noisy tensor and the
    /// (masked, and for adjacency symmetrized) standard-normal draw used.
    pub fn perturb<R: Rng + ?Sized>(
        &self,
        clean: &Matrix,
        role: TensorRole,
        mask: &[bool],
        t: f64,
        rng: &mut R,
    ) -> Result<(Matrix, Matrix)> {
        let (mean_coef, std) = self.marginal_params(t)?;
        let z = masked_noise(clean.rows(), clean.cols(), role, mask, rng);
        let mut noisy = clean.scaled(mean_coef);
        noisy.axpy(std, &z);
        Ok((noisy, z))
    }

    pub fn prior_sample<R: Rng + ?Sized>(
        &self,
        rows: usize,
        cols: usize,
        role: TensorRole,
        mask: &[bool],
        rng: &mut R,
    ) -> Matrix {
        let mut z = masked_noise(rows, cols, role, mask, rng);
        z.scale_in_place(self.prior_std());
        z
    }
}

/// Standard-normal tensor respecting graph structure: node noise is zeroed on
/// masked rows; adjacency noise is `(Z + Zᵀ)/√2` off the diagonal (unit
/// per-entry variance), zero on the diagonal and on masked pairs.
pub fn masked_noise<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    role: TensorRole,
    mask: &[bool],
    rng: &mut R,
) -> Matrix {
    match role {
        TensorRole::Nodes => {
            let mut z = Matrix::randn(rows, cols, rng);
            mask_nodes(&mut z, mask);
            z
        }
        TensorRole::Adjacency => {
            let n = mask.len();
            assert_eq!(rows, n * n, "adjacency rows must be n_max²");
            let raw = Matrix::randn(rows, cols, rng);
            let mut z = Matrix::zeros(rows, cols);
            let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
            for i in 0..n {
                for j in i + 1..n {
                    for c in 0..cols {
                        let v = (raw.get(i * n + j, c) + raw.get(j * n + i, c)) * inv_sqrt2;
                        z.set(i * n + j, c, v);
                        z.set(j * n + i, c, v);
                    }
                }
            }
            mask_pairs(&mut z, mask);
            z
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vp_drift_and_diffusion_at_zero() {
        let sde = DiffusionSde::vp(0.1, 1.0, 1000);
        let v = Matrix::from_fn(2, 3, |r, c| r as f64 - c as f64 + 0.5);
        let (f, g) = sde.drift_diffusion(&v, 0.0).unwrap();
        assert_eq!(f, v.scaled(-0.05));
        assert_abs_diff_eq!(g, 0.1f64.sqrt(), epsilon = 1e-15);
        let (f0, _) = sde.drift_diffusion(&Matrix::zeros(2, 2), 0.7).unwrap();
        assert_eq!(f0, Matrix::zeros(2, 2));
    }

    #[test]
    fn ve_diffusion_at_zero() {
        let sde = DiffusionSde::ve(0.2, 1.0, 1000);
        let (f, g) = sde.drift_diffusion(&Matrix::filled(1, 2, 3.0), 0.0).unwrap();
        assert_eq!(f, Matrix::zeros(1, 2));
        assert_abs_diff_eq!(g, 0.2 * (2.0 * 5f64.ln()).sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn time_outside_range_is_domain_error() {
        let sde = DiffusionSde::default();
        assert!(matches!(sde.marginal_params(1.5), Err(Error::Domain(_))));
        assert!(matches!(sde.drift_diffusion_coefs(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn marginals_at_endpoints() {
        let sde = DiffusionSde::vp(0.1, 1.0, 1000);
        assert_eq!(sde.marginal_params(0.0).unwrap(), (1.0, 0.0));
        let ve = DiffusionSde::ve(0.2, 1.0, 1000);
        let (m, s) = ve.marginal_params(1.0).unwrap();
        assert_eq!(m, 1.0);
        assert_abs_diff_eq!(s, ve.prior_std(), epsilon = 1e-12);
    }

    #[test]
    fn monotone_schedules() {
        for sde in [DiffusionSde::vp(0.1, 1.0, 10), DiffusionSde::ve(0.2, 1.0, 10)] {
            let mut prev = sde.marginal_params(0.0).unwrap();
            for k in 1..=100 {
                let cur = sde.marginal_params(k as f64 / 100.0).unwrap();
                assert!(cur.0 <= prev.0 && cur.1 >= prev.1);
                prev = cur;
            }
        }
    }

    #[test]
    fn perturb_at_zero_is_identity() {
        let sde = DiffusionSde::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clean = Matrix::from_fn(4, 2, |r, c| (r + c) as f64);
        let (noisy, _) = sde
            .perturb(&clean, TensorRole::Nodes, &[true; 4], 0.0, &mut rng)
            .unwrap();
        assert_eq!(noisy, clean);
    }

    #[test]
    fn adjacency_noise_is_symmetric_and_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = [true, true, true, false];
        let z = masked_noise(16, 2, TensorRole::Adjacency, &mask, &mut rng);
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..2 {
                    assert_eq!(z.get(i * 4 + j, c), z.get(j * 4 + i, c));
                    if i == j || i == 3 || j == 3 {
                        assert_eq!(z.get(i * 4 + j, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn validate_rejects_bad_schedules() {
        assert!(DiffusionSde::vp(0.0, 1.0, 10).validate().is_err());
        assert!(DiffusionSde::vp(2.0, 1.0, 10).validate().is_err());
        assert!(DiffusionSde::vp(0.1, 1.0, 0).validate().is_err());
        assert!(DiffusionSde::default().validate().is_ok());
    }
}
