//! Baseline detectors: linear MMSE, exhaustive maximum likelihood and
//! classical expectation propagation over a square QAM alphabet.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelInstance, Constellation};
use crate::ep::{self, EpState, FallbackMode, Observation};
use crate::error::{Error, Result};

/// Largest number of message tuples `ml_detect` will enumerate.
pub const ML_BUDGET: u64 = 1 << 24;

/// Detected 1-based messages, optionally with per-user probabilities over
/// the `M` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub messages: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<Vec<f64>>>,
}

fn check_dims(y: &DVector<f64>, channel: &ChannelInstance) -> Result<()> {
    if y.len() != channel.h().nrows() {
        return Err(Error::Shape(format!(
            "received vector length {} does not match N = {}",
            y.len(),
            channel.h().nrows()
        )));
    }
    Ok(())
}

/// Linear MMSE soft estimate `(HᵀH + 2σ² I)⁻¹ Hᵀy`. The `2σ²` regulariser
/// reflects the per-real-component symbol variance of 1/2.
pub fn mmse_estimate(y: &DVector<f64>, channel: &ChannelInstance) -> Result<DVector<f64>> {
    check_dims(y, channel)?;
    let sigma2 = channel.sigma2();
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Config(format!(
            "MMSE needs positive noise variance, got {sigma2}"
        )));
    }
    let h = channel.h();
    let k = h.ncols();
    let a = h.tr_mul(h) + DMatrix::identity(k, k) * (2.0 * sigma2);
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numeric("MMSE system is not positive definite".into()))?;
    Ok(chol.solve(&h.tr_mul(y)))
}

pub fn mmse_detect(
    y: &DVector<f64>,
    channel: &ChannelInstance,
    constellation: &Constellation,
) -> Result<DetectionResult> {
    let x = mmse_estimate(y, channel)?;
    Ok(DetectionResult {
        messages: crate::channel::demodulate(&x, constellation),
        probabilities: None,
    })
}

/// Exhaustive search for `argmin ‖y - Hx(s)‖²` over all `M^N_T` message
/// tuples. Ties resolve to the lexicographically smallest tuple.
pub fn ml_detect(
    y: &DVector<f64>,
    channel: &ChannelInstance,
    constellation: &Constellation,
) -> Result<DetectionResult> {
    check_dims(y, channel)?;
    let nt = channel.nt();
    let m = constellation.order();
    let hypotheses = (m as u128).checked_pow(nt as u32).unwrap_or(u128::MAX);
    if hypotheses > ML_BUDGET as u128 {
        return Err(Error::BudgetExceeded {
            hypotheses,
            budget: ML_BUDGET,
        });
    }
    let h = channel.h();
    let n = h.nrows();
    // contrib[u][s] = column contribution of user u sending label s + 1
    let contrib: Vec<Vec<Vec<f64>>> = (0..nt)
        .map(|u| {
            constellation
                .points()
                .iter()
                .map(|p| {
                    (0..n)
                        .map(|r| h[(r, u)] * p.re + h[(r, nt + u)] * p.im)
                        .collect()
                })
                .collect()
        })
        .collect();

    // residual[d] holds y minus the contributions of users 0..d
    let mut residual = vec![y.as_slice().to_vec(); nt + 1];
    let mut choice = vec![0usize; nt];
    let mut best = (f64::INFINITY, vec![0usize; nt]);
    let mut depth = 0;
    loop {
        if choice[depth] == m {
            if depth == 0 {
                break;
            }
            choice[depth] = 0;
            depth -= 1;
            choice[depth] += 1;
            continue;
        }
        let (head, tail) = residual.split_at_mut(depth + 1);
        let next = &mut tail[0];
        for ((o, r), c) in next.iter_mut().zip(&head[depth]).zip(&contrib[depth][choice[depth]]) {
            *o = r - c;
        }
        if depth + 1 == nt {
            let metric: f64 = next.iter().map(|v| v * v).sum();
            if metric < best.0 {
                best = (metric, choice.clone());
            }
            choice[depth] += 1;
        } else {
            depth += 1;
        }
    }
    Ok(DetectionResult {
        messages: best.1.into_iter().map(|i| i + 1).collect(),
        probabilities: None,
    })
}

/// Classical EP settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpConfig {
    pub iterations: usize,
    pub eta: f64,
    #[serde(default)]
    pub fallback: FallbackMode,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            eta: 0.7,
            fallback: FallbackMode::PerElement,
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("EP needs at least one iteration".into()));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::Config(format!("damping {} outside [0, 1)", self.eta)));
        }
        Ok(())
    }
}

/// Normalised discrete posterior over `alphabet` for a Gaussian cavity
/// `N(x_obs, v_obs)` and a uniform prior.
pub fn pam_posterior(x_obs: f64, v_obs: f64, alphabet: &[f64]) -> Vec<f64> {
    let v = v_obs.max(ep::VARIANCE_FLOOR);
    let exps: Vec<f64> = alphabet
        .iter()
        .map(|a| -(a - x_obs).powi(2) / (2.0 * v))
        .collect();
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = exps.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Mean and variance of a discrete distribution.
pub fn discrete_moments(probs: &[f64], values: &[f64]) -> (f64, f64) {
    let mean: f64 = probs.iter().zip(values).map(|(p, v)| p * v).sum();
    let var = probs
        .iter()
        .zip(values)
        .map(|(p, v)| p * (v - mean).powi(2))
        .sum();
    (mean, var)
}

/// Classical EP: observation stage, per-component discrete posterior over the
/// PAM alphabet, moment matching with fallback and damping.
pub fn ep_detect(
    y: &DVector<f64>,
    channel: &ChannelInstance,
    constellation: &Constellation,
    cfg: &EpConfig,
) -> Result<DetectionResult> {
    ep_detect_with_state(y, channel, constellation, cfg).map(|(r, _)| r)
}

/// [`ep_detect`] also returning the final EP state.
pub fn ep_detect_with_state(
    y: &DVector<f64>,
    channel: &ChannelInstance,
    constellation: &Constellation,
    cfg: &EpConfig,
) -> Result<(DetectionResult, EpState)> {
    cfg.validate()?;
    let alphabet = constellation.pam_alphabet().ok_or_else(|| {
        Error::UnsupportedConstellation("EP requires a square QAM grid".into())
    })?;
    let obs = Observation::new(channel.h(), y, channel.sigma2())?;
    let k = obs.k();
    let nt = k / 2;
    let mut state = EpState::initial(k);
    let mut posteriors = vec![Vec::new(); k];
    for _ in 0..cfg.iterations {
        ep::observation_update(&mut state, &obs)?;
        let mut x_hat = vec![0.0; k];
        let mut v_hat = vec![0.0; k];
        for i in 0..k {
            posteriors[i] = pam_posterior(state.x_obs[i], state.v_obs[i], &alphabet);
            (x_hat[i], v_hat[i]) = discrete_moments(&posteriors[i], &alphabet);
        }
        ep::moment_match_and_damp(&mut state, &x_hat, &v_hat, cfg.eta, cfg.fallback)?;
    }

    let level_index = |v: f64| {
        alphabet
            .iter()
            .position(|a| (a - v).abs() < 1e-9)
            .expect("grid point on alphabet")
    };
    let probabilities: Vec<Vec<f64>> = (0..nt)
        .map(|u| {
            constellation
                .points()
                .iter()
                .map(|p| posteriors[u][level_index(p.re)] * posteriors[nt + u][level_index(p.im)])
                .collect()
        })
        .collect();
    let messages = probabilities.iter().map(|p| argmax(p) + 1).collect();
    Ok((
        DetectionResult {
            messages,
            probabilities: Some(probabilities),
        },
        state,
    ))
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
