//! Monte Carlo symbol-error-rate sweeps.
//!
//! Every SNR point draws fresh messages, channel and noise per trial. Trials
//! are split across `workers` logical streams; worker `w` at SNR index `i`
//! draws from ChaCha8 stream `(i << 32) | w` of the configured seed, runs
//! `batch` trials per round, and rounds are merged in worker order. Results
//! therefore depend only on the seed and the worker count, not on thread
//! scheduling.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{snr_to_sigma2, ChannelInstance, Constellation, SimRng, TransmissionSample};
use crate::detectors::{ep_detect, ml_detect, mmse_detect, DetectionResult, EpConfig, ML_BUDGET};
use crate::error::{Error, Result};
use crate::gepnet::{gepnet_detect, GepnetWeights};

pub const CSV_HEADER: &str = "snr_db,trials,symbol_errors,ser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Mmse,
    Ml,
    Ep,
    Gepnet,
}

impl DetectorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DetectorKind::Mmse => "mmse",
            DetectorKind::Ml => "ml",
            DetectorKind::Ep => "ep",
            DetectorKind::Gepnet => "gepnet",
        }
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmse" => Ok(Self::Mmse),
            "ml" => Ok(Self::Ml),
            "ep" => Ok(Self::Ep),
            "gepnet" => Ok(Self::Gepnet),
            other => Err(Error::Config(format!("unknown detector {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub nt: usize,
    pub nr: usize,
    pub detector: DetectorKind,
    pub snr_start: f64,
    pub snr_stop: f64,
    pub snr_step: f64,
    pub min_trials: u64,
    pub min_errors: u64,
    /// Hard cap per SNR point so error-free points terminate.
    pub max_trials: u64,
    pub seed: u64,
    pub workers: usize,
    /// Trials per worker per round.
    pub batch: u64,
    pub ep: EpConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            nt: 2,
            nr: 8,
            detector: DetectorKind::Mmse,
            snr_start: 0.0,
            snr_stop: 20.0,
            snr_step: 5.0,
            min_trials: 10_000,
            min_errors: 100,
            max_trials: 2_000_000,
            seed: 0,
            workers: 4,
            batch: 250,
            ep: EpConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn snr_grid(&self) -> Vec<f64> {
        let n = ((self.snr_stop - self.snr_start) / self.snr_step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| self.snr_start + i as f64 * self.snr_step)
            .collect()
    }

    pub fn validate(&self, constellation: &Constellation, weights: Option<&GepnetWeights>) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.nt == 0 || self.nr == 0 {
            return bad("antenna counts must be positive".into());
        }
        if !(self.snr_step > 0.0 && self.snr_step.is_finite()) {
            return bad(format!("snr step must be positive, got {}", self.snr_step));
        }
        if !(self.snr_start.is_finite() && self.snr_stop.is_finite()) || self.snr_stop < self.snr_start {
            return bad(format!("invalid snr range {}..{}", self.snr_start, self.snr_stop));
        }
        if self.min_trials == 0 {
            return bad("min trials must be at least 1".into());
        }
        if self.max_trials < self.min_trials {
            return bad(format!(
                "max trials {} below min trials {}",
                self.max_trials, self.min_trials
            ));
        }
        if self.workers == 0 || self.batch == 0 {
            return bad("workers and batch must be positive".into());
        }
        match self.detector {
            DetectorKind::Ep => {
                self.ep.validate()?;
                if constellation.pam_alphabet().is_none() {
                    return bad("ep detector requires a QAM constellation".into());
                }
            }
            DetectorKind::Ml => {
                let hyp = (constellation.order() as u128).checked_pow(self.nt as u32);
                if hyp.is_none_or(|h| h > ML_BUDGET as u128) {
                    return bad(format!(
                        "ml detector over M = {} with {} users exceeds the {} hypothesis budget",
                        constellation.order(),
                        self.nt,
                        ML_BUDGET
                    ));
                }
            }
            DetectorKind::Gepnet => match weights {
                None => return bad("gepnet detector needs a weight bundle".into()),
                Some(w) if w.order() != constellation.order() => {
                    return bad(format!(
                        "weights trained for M = {} but constellation has {} points",
                        w.order(),
                        constellation.order()
                    ))
                }
                Some(_) => {}
            },
            DetectorKind::Mmse => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerPoint {
    pub snr_db: f64,
    pub trials: u64,
    pub symbol_errors: u64,
    pub ser: f64,
}

impl SerPoint {
    /// Binomial standard error of the SER estimate.
    pub fn std_error(&self, nt: usize) -> f64 {
        let n = (self.trials * nt as u64) as f64;
        (self.ser * (1.0 - self.ser) / n).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SerPoint>,
    pub csv: String,
}

/// Run one detector on one received vector.
pub fn detect(
    kind: DetectorKind,
    y: &DVector<f64>,
    ch: &ChannelInstance,
    constellation: &Constellation,
    weights: Option<&GepnetWeights>,
    ep: &EpConfig,
) -> Result<DetectionResult> {
    match kind {
        DetectorKind::Mmse => mmse_detect(y, ch, constellation),
        DetectorKind::Ml => ml_detect(y, ch, constellation),
        DetectorKind::Ep => ep_detect(y, ch, constellation, ep),
        DetectorKind::Gepnet => {
            let w = weights.ok_or_else(|| Error::Config("gepnet needs weights".into()))?;
            gepnet_detect(y, ch, constellation, w).map(|o| o.result)
        }
    }
}

pub fn run_sweep(
    cfg: &SweepConfig,
    constellation: &Constellation,
    weights: Option<&GepnetWeights>,
) -> Result<SweepResult> {
    cfg.validate(constellation, weights)?;
    let mut points = Vec::new();
    for (idx, snr_db) in cfg.snr_grid().into_iter().enumerate() {
        let started = Instant::now();
        let point = run_point(cfg, idx, snr_db, constellation, weights)?;
        tracing::info!(
            detector = cfg.detector.as_str(),
            snr_db,
            trials = point.trials,
            errors = point.symbol_errors,
            ser = point.ser,
            elapsed_ms = started.elapsed().as_millis() as u64,
            "snr point done"
        );
        points.push(point);
    }
    let csv = to_csv(cfg, &points);
    Ok(SweepResult { points, csv })
}

fn run_point(
    cfg: &SweepConfig,
    snr_index: usize,
    snr_db: f64,
    constellation: &Constellation,
    weights: Option<&GepnetWeights>,
) -> Result<SerPoint> {
    let sigma2 = snr_to_sigma2(snr_db, cfg.nt, cfg.nr);
    let mut rngs: Vec<SimRng> = (0..cfg.workers)
        .map(|w| SimRng::new(cfg.seed, ((snr_index as u64) << 32) | w as u64))
        .collect();
    let (mut trials, mut errors) = (0u64, 0u64);
    while trials < cfg.min_trials || (errors < cfg.min_errors && trials < cfg.max_trials) {
        let counts: Vec<Result<u64>> = rngs
            .par_iter_mut()
            .map(|rng| {
                let mut errs = 0;
                for _ in 0..cfg.batch {
                    let s = TransmissionSample::draw(rng, cfg.nt, cfg.nr, constellation, sigma2);
                    let r = detect(cfg.detector, &s.y, &s.channel, constellation, weights, &cfg.ep)?;
                    errs += r
                        .messages
                        .iter()
                        .zip(&s.messages)
                        .filter(|(a, b)| a != b)
                        .count() as u64;
                }
                Ok(errs)
            })
            .collect();
        for c in counts {
            errors += c?;
        }
        trials += cfg.batch * cfg.workers as u64;
    }
    Ok(SerPoint {
        snr_db,
        trials,
        symbol_errors: errors,
        ser: errors as f64 / (trials * cfg.nt as u64) as f64,
    })
}

/// Six significant digits, `%g` style.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    } else {
        let s = format!("{x:.5e}");
        let (mantissa, e) = s.split_once('e').expect("scientific format");
        format!("{}e{e}", trim(mantissa.to_string()))
    }
}

pub fn to_csv(cfg: &SweepConfig, points: &[SerPoint]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# detector={} nt={} nr={} seed={} workers={}",
        cfg.detector.as_str(),
        cfg.nt,
        cfg.nr,
        cfg.seed,
        cfg.workers
    );
    let _ = writeln!(
        out,
        "# min_trials={} min_errors={} max_trials={}",
        cfg.min_trials, cfg.min_errors, cfg.max_trials
    );
    out.push_str(CSV_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            format_g6(p.snr_db),
            p.trials,
            p.symbol_errors,
            format_g6(p.ser)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::qam_constellation;

    #[test]
    fn g6_formatting() {
        assert_eq!(format_g6(0.0), "0");
        assert_eq!(format_g6(10.0), "10");
        assert_eq!(format_g6(-2.5), "-2.5");
        assert_eq!(format_g6(0.123456789), "0.123457");
        assert_eq!(format_g6(1.5e-7), "1.5e-7");
        assert_eq!(format_g6(0.000123), "0.000123");
        assert_eq!(format_g6(1234567.0), "1.23457e6");
    }

    #[test]
    fn grid_includes_stop() {
        let cfg = SweepConfig {
            snr_start: 0.0,
            snr_stop: 1.0,
            snr_step: 0.1,
            ..Default::default()
        };
        assert_eq!(cfg.snr_grid().len(), 11);
    }

    #[test]
    fn config_errors() {
        let c = qam_constellation(16).unwrap();
        let base = SweepConfig::default();
        let cases = [
            SweepConfig { snr_step: 0.0, ..base.clone() },
            SweepConfig { min_trials: 0, ..base.clone() },
            SweepConfig { detector: DetectorKind::Gepnet, ..base.clone() },
            SweepConfig { detector: DetectorKind::Ml, nt: 8, nr: 8, ..base.clone() },
        ];
        for cfg in cases {
            assert!(matches!(run_sweep(&cfg, &c, None), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn stopping_rule_and_csv() {
        let c = qam_constellation(16).unwrap();
        let cfg = SweepConfig {
            detector: DetectorKind::Mmse,
            snr_start: 0.0,
            snr_stop: 4.0,
            snr_step: 2.0,
            min_trials: 300,
            min_errors: 50,
            workers: 3,
            batch: 40,
            ..Default::default()
        };
        let r = run_sweep(&cfg, &c, None).unwrap();
        assert_eq!(r.points.len(), 3);
        for p in &r.points {
            assert!(p.trials >= 300 && p.trials % 120 == 0);
            assert!(p.symbol_errors >= 50);
            assert!((0.0..=1.0).contains(&p.ser));
        }
        let lines: Vec<_> = r.csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(r, run_sweep(&cfg, &c, None).unwrap());
    }
}
