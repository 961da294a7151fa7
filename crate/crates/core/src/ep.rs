//! Expectation propagation machinery shared by the classical EP detector and
//! GEPNet: the Gaussian observation stage with its cavity marginals, and the
//! moment-matching update with fallback and damping.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to variances before taking reciprocals.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Guard on the cavity denominator `1 - Σ_kk λ_k`.
pub const CAVITY_GUARD: f64 = 1e-10;

/// How a non-positive precision from moment matching is handled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackMode {
    /// Revert only the offending components.
    #[default]
    PerElement,
    /// Revert every component when any one is non-positive.
    WholeVector,
}

/// Per-iteration EP quantities over the `K` real symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct EpState {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma_diag: Vec<f64>,
    pub mu: Vec<f64>,
    pub x_obs: Vec<f64>,
    pub v_obs: Vec<f64>,
    pub t: usize,
    /// Cavity denominators that hit [`CAVITY_GUARD`] so far.
    pub cavity_clamps: usize,
    /// Components reverted by the precision fallback so far.
    pub reverts: usize,
}

impl EpState {
    /// `λ⁰ = 1`, `γ⁰ = 0`.
    pub fn initial(k: usize) -> Self {
        Self {
            lambda: vec![1.0; k],
            gamma: vec![0.0; k],
            sigma_diag: vec![0.0; k],
            mu: vec![0.0; k],
            x_obs: vec![0.0; k],
            v_obs: vec![0.0; k],
            t: 0,
            cavity_clamps: 0,
            reverts: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.lambda.len()
    }
}

/// Sufficient statistics of `y = Hx + n` for the observation stage:
/// `σ⁻² HᵀH` and `σ⁻² Hᵀy`.
#[derive(Debug, Clone)]
pub struct Observation {
    scaled_gram: DMatrix<f64>,
    scaled_hty: DVector<f64>,
}

impl Observation {
    pub fn new(h: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64) -> Result<Self> {
        if h.nrows() != y.len() {
            return Err(Error::Shape(format!(
                "received vector length {} does not match channel with N = {}",
                y.len(),
                h.nrows()
            )));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Config(format!(
                "noise variance must be positive, got {sigma2}"
            )));
        }
        let inv = sigma2.recip();
        Ok(Self {
            scaled_gram: h.tr_mul(h) * inv,
            scaled_hty: h.tr_mul(y) * inv,
        })
    }

    pub fn k(&self) -> usize {
        self.scaled_hty.len()
    }
}

/// `Σ = (σ⁻²HᵀH + diag λ)⁻¹`, `μ = Σ(σ⁻²Hᵀy + γ)`, then the cavity marginals
/// `v_obs = Σ_kk / (1 - Σ_kk λ_k)` and `x_obs = v_obs (μ_k / Σ_kk - γ_k)`.
pub fn observation_update(state: &mut EpState, obs: &Observation) -> Result<()> {
    let k = obs.k();
    if state.k() != k {
        return Err(Error::Shape(format!(
            "EP state has {} components, observation has {k}",
            state.k()
        )));
    }
    if let Some(bad) = state.lambda.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Numeric(format!("non-positive prior precision {bad}")));
    }
    let mut a = obs.scaled_gram.clone();
    for i in 0..k {
        a[(i, i)] += state.lambda[i];
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numeric("observation matrix is not positive definite".into()))?;
    let rhs = &obs.scaled_hty + DVector::from_column_slice(&state.gamma);
    let mu = chol.solve(&rhs);
    let sigma = chol.inverse();

    for i in 0..k {
        let s = sigma[(i, i)];
        state.sigma_diag[i] = s;
        state.mu[i] = mu[i];
        let denom = 1.0 - s * state.lambda[i];
        let v = if denom <= CAVITY_GUARD {
            state.cavity_clamps += 1;
            VARIANCE_FLOOR
        } else {
            (s / denom).max(VARIANCE_FLOOR)
        };
        state.v_obs[i] = v;
        state.x_obs[i] = v * (mu[i] / s - state.gamma[i]);
    }
    state.t += 1;
    Ok(())
}

/// Moment matching `λ = 1/v̂ - 1/v_obs`, `γ = x̂/v̂ - x_obs/v_obs`, revert of
/// non-positive precisions, then damping `θ ← (1-η) θ_new + η θ_prev`.
pub fn moment_match_and_damp(
    state: &mut EpState,
    x_hat: &[f64],
    v_hat: &[f64],
    eta: f64,
    mode: FallbackMode,
) -> Result<()> {
    let k = state.k();
    if x_hat.len() != k || v_hat.len() != k {
        return Err(Error::Shape(format!(
            "estimates of length {}/{} for {k} components",
            x_hat.len(),
            v_hat.len()
        )));
    }
    let mut lambda_new = vec![0.0; k];
    let mut gamma_new = vec![0.0; k];
    for i in 0..k {
        let v = v_hat[i].max(VARIANCE_FLOOR);
        let vo = state.v_obs[i].max(VARIANCE_FLOOR);
        lambda_new[i] = v.recip() - vo.recip();
        gamma_new[i] = x_hat[i] / v - state.x_obs[i] / vo;
    }
    let bad: Vec<bool> = (0..k)
        .map(|i| !(lambda_new[i] > 0.0 && lambda_new[i].is_finite() && gamma_new[i].is_finite()))
        .collect();
    match mode {
        FallbackMode::PerElement => {
            for i in 0..k {
                if bad[i] {
                    lambda_new[i] = state.lambda[i];
                    gamma_new[i] = state.gamma[i];
                    state.reverts += 1;
                }
            }
        }
        FallbackMode::WholeVector => {
            if bad.contains(&true) {
                lambda_new.copy_from_slice(&state.lambda);
                gamma_new.copy_from_slice(&state.gamma);
                state.reverts += k;
            }
        }
    }
    for i in 0..k {
        state.lambda[i] = (1.0 - eta) * lambda_new[i] + eta * state.lambda[i];
        state.gamma[i] = (1.0 - eta) * gamma_new[i] + eta * state.gamma[i];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_observation_is_regularised_inverse() {
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.2, 0.3, 0.7, -1.1]);
        let y = DVector::from_vec(vec![0.4, -0.1, 0.9]);
        let sigma2 = 0.3;
        let obs = Observation::new(&h, &y, sigma2).unwrap();
        let mut st = EpState::initial(2);
        observation_update(&mut st, &obs).unwrap();

        let a = h.tr_mul(&h) / sigma2 + DMatrix::identity(2, 2);
        let sigma = a.try_inverse().unwrap();
        let mu = &sigma * (h.tr_mul(&y) / sigma2);
        for i in 0..2 {
            assert!((st.sigma_diag[i] - sigma[(i, i)]).abs() < 1e-12);
            assert!((st.mu[i] - mu[i]).abs() < 1e-12);
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn identity_channel_unit_noise() {
        let h = DMatrix::identity(2, 2);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let obs = Observation::new(&h, &y, 1.0).unwrap();
        let mut st = EpState::initial(2);
        observation_update(&mut st, &obs).unwrap();
        for (got, want) in st.mu.iter().zip([0.5, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(st.sigma_diag.iter().all(|s| (s - 0.5).abs() < 1e-12));
    }

    #[test]
    fn cavity_hand_arithmetic() {
        // Σ_kk = 0.5, λ = 1, μ = 0.4, γ = 0: a 1x1 system with σ⁻²h² = 1.
        let h = DMatrix::from_element(1, 1, 1.0);
        let y = DVector::from_element(1, 0.8);
        let obs = Observation::new(&h, &y, 1.0).unwrap();
        let mut st = EpState::initial(1);
        observation_update(&mut st, &obs).unwrap();
        assert!((st.sigma_diag[0] - 0.5).abs() < 1e-12);
        assert!((st.mu[0] - 0.4).abs() < 1e-12);
        assert!((st.v_obs[0] - 1.0).abs() < 1e-12);
        assert!((st.x_obs[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn moment_match_examples() {
        let mut st = EpState::initial(1);
        st.v_obs = vec![1.0];
        st.x_obs = vec![0.0];
        st.lambda = vec![2.0];
        // v̂ = 0.5, v_obs = 1 gives λ_new = 1; damped with λ_prev = 2 at η = 0.7.
        moment_match_and_damp(&mut st, &[0.0], &[0.5], 0.0, FallbackMode::PerElement).unwrap();
        assert!((st.lambda[0] - 1.0).abs() < 1e-12);

        let mut st = EpState::initial(1);
        st.v_obs = vec![1.0];
        st.lambda = vec![2.0];
        moment_match_and_damp(&mut st, &[0.0], &[0.5], 0.7, FallbackMode::PerElement).unwrap();
        assert!((st.lambda[0] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_triggers_revert() {
        let mut st = EpState::initial(2);
        st.lambda = vec![3.0, 0.5];
        st.gamma = vec![0.2, -0.1];
        st.v_obs = vec![0.4, 0.4];
        st.x_obs = vec![0.1, 0.3];
        let before = st.clone();
        moment_match_and_damp(&mut st, &[0.1, 0.3], &[0.4, 0.4], 0.7, FallbackMode::PerElement)
            .unwrap();
        for i in 0..2 {
            assert!((st.lambda[i] - before.lambda[i]).abs() < 1e-15);
            assert!((st.gamma[i] - before.gamma[i]).abs() < 1e-15);
        }
        assert_eq!(st.reverts, 2);
    }

    #[test]
    fn fallback_modes_differ() {
        let base = || {
            let mut st = EpState::initial(2);
            st.lambda = vec![1.0, 1.0];
            st.v_obs = vec![1.0, 0.1];
            st
        };
        // component 0 gets λ_new = 1, component 1 gets 1/0.5 - 10 < 0
        let mut per = base();
        moment_match_and_damp(&mut per, &[0.0, 0.0], &[0.5, 0.5], 0.0, FallbackMode::PerElement)
            .unwrap();
        assert!((per.lambda[0] - 1.0).abs() < 1e-12 && per.lambda[1] == 1.0);
        assert_eq!(per.reverts, 1);

        let mut whole = base();
        whole.lambda = vec![4.0, 1.0];
        moment_match_and_damp(&mut whole, &[0.0, 0.0], &[0.5, 0.5], 0.0, FallbackMode::WholeVector)
            .unwrap();
        assert_eq!(whole.lambda, vec![4.0, 1.0]);
        assert_eq!(whole.reverts, 2);
    }

    #[test]
    fn rejects_non_positive_noise() {
        let h = DMatrix::identity(2, 2);
        let y = DVector::zeros(2);
        assert!(matches!(Observation::new(&h, &y, 0.0), Err(Error::Config(_))));
        assert!(Observation::new(&h, &DVector::zeros(3), 1.0).is_err());
    }
}
