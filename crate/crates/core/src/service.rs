//! Wire types for the simulation service and the in-process handlers behind
//! them. The HTTP server, its client and the local command line all go
//! through these functions, so a request gives the same answer either way.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::{qam_constellation, ChannelInstance, Constellation, ConstellationJson};
use crate::complexity::{complexity_report, ComplexityReport, ReadoutSizes};
use crate::detectors::{DetectionResult, EpConfig};
use crate::error::{Error, Result};
use crate::gepnet::GepnetWeights;
use crate::sweep::{detect, run_sweep, DetectorKind, SweepConfig, SweepResult};
use crate::weights::{decode_bundle, WeightBundle};

/// Where the transmit constellation comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Modulation {
    /// Square Gray-mapped QAM of the given order.
    Qam { order: usize },
    /// Explicit points, e.g. a learned constellation exported earlier.
    Points { constellation: ConstellationJson },
    /// The constellation stored in the referenced weight bundle.
    Bundle,
}

impl Modulation {
    pub fn resolve(&self, weights: Option<&GepnetWeights>) -> Result<Constellation> {
        match self {
            Modulation::Qam { order } => qam_constellation(*order),
            Modulation::Points { constellation } => constellation.clone().try_into(),
            Modulation::Bundle => weights
                .map(|w| w.constellation.clone())
                .ok_or_else(|| Error::Config("bundle modulation needs weights".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRequest {
    pub config: SweepConfig,
    pub modulation: Modulation,
    /// Id of previously uploaded weights (service) or unused (local).
    #[serde(default)]
    pub weights: Option<String>,
}

/// One detection on a given real-valued system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub detector: DetectorKind,
    /// Real-equivalent channel, one inner vector per row (`N` rows of `K`).
    pub h: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub sigma2: f64,
    pub modulation: Modulation,
    #[serde(default)]
    pub weights: Option<String>,
    #[serde(default)]
    pub ep: EpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRequest {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    #[serde(default)]
    pub sizes: ReadoutSizes,
}

/// Summary returned after a bundle upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsInfo {
    pub id: String,
    pub order: usize,
    pub su: usize,
    pub iterations: usize,
    pub gnn_rounds: usize,
    pub node_init_inputs: usize,
    pub has_modulator: bool,
}

/// Error payload of the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    /// Exit code the command line reports for this failure.
    pub exit_code: i32,
}

/// A decoded and validated bundle.
#[derive(Debug, Clone)]
pub struct LoadedWeights {
    pub bundle: WeightBundle,
    pub weights: GepnetWeights,
}

impl LoadedWeights {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bundle = decode_bundle(bytes)?;
        let weights = GepnetWeights::from_bundle(&bundle)?;
        Ok(Self { bundle, weights })
    }

    pub fn info(&self, id: &str) -> WeightsInfo {
        let w = &self.weights;
        WeightsInfo {
            id: id.to_string(),
            order: w.order(),
            su: w.config.su,
            iterations: w.config.t_iters,
            gnn_rounds: w.config.l_rounds,
            node_init_inputs: w.node_init_inputs(),
            has_modulator: w.modulator.is_some(),
        }
    }
}

pub fn simulate(req: &SimulateRequest, weights: Option<&GepnetWeights>) -> Result<SweepResult> {
    let constellation = req.modulation.resolve(weights)?;
    run_sweep(&req.config, &constellation, weights)
}

pub fn detect_one(req: &DetectRequest, weights: Option<&GepnetWeights>) -> Result<DetectionResult> {
    let rows = req.h.len();
    let cols = req.h.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || req.h.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("channel rows must be non-empty and equal length".into()));
    }
    let h = DMatrix::from_fn(rows, cols, |r, c| req.h[r][c]);
    let channel = ChannelInstance::from_real(h, req.sigma2)?;
    let constellation = req.modulation.resolve(weights)?;
    req.ep.validate()?;
    let y = DVector::from_column_slice(&req.y);
    detect(req.detector, &y, &channel, &constellation, weights, &req.ep)
}

pub fn complexity(req: &ComplexityRequest) -> Result<ComplexityReport> {
    if req.m < 2 || req.k == 0 || req.n == 0 || !req.k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "need M >= 2 and positive even K, positive N (got M={}, K={}, N={})",
            req.m, req.k, req.n
        )));
    }
    Ok(complexity_report(req.m, req.k, req.n, req.sizes))
}
