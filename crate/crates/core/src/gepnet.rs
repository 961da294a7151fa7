//! GEPNet inference: expectation propagation whose per-iteration posterior
//! refinement is done by a graph neural network over the `K` real symbols.
//!
//! Each iteration runs the observation stage, `L` rounds of message passing
//! and GRU aggregation, a readout to per-user message probabilities over the
//! constellation labels, soft-symbol estimation, and moment matching with
//! damping. The hard decision is the argmax of the last iteration's
//! probabilities.
//!
//! Node features start from `W_0·[yᵀh_k, h_kᵀh_k, σ²] + b_0` at the start of
//! every iteration (bundles declaring five node-init inputs also get
//! `x_obs,k` and `v_obs,k`). GRU hidden states persist across iterations
//! unless `gru_reset_per_iteration` is set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelInstance, Constellation};
use crate::detectors::{argmax, DetectionResult};
use crate::ep::{self, EpState, FallbackMode, Observation, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{softmax, Activation, DenseLayer, GruCell, GruGate, Mlp, Tensor, GRU_CONVENTION};
use crate::weights::{bundle_constellation, keys, WeightBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GepnetConfig {
    pub t_iters: usize,
    pub l_rounds: usize,
    pub eta: f64,
    pub su: usize,
    pub nh1: usize,
    pub nh2: usize,
    pub nr1: usize,
    pub nr2: usize,
    pub gru_reset_per_iteration: bool,
    pub fallback: FallbackMode,
}

impl Default for GepnetConfig {
    fn default() -> Self {
        Self {
            t_iters: 10,
            l_rounds: 2,
            eta: 0.7,
            su: 8,
            nh1: 128,
            nh2: 64,
            nr1: 128,
            nr2: 64,
            gru_reset_per_iteration: false,
            fallback: FallbackMode::PerElement,
        }
    }
}

impl GepnetConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.t_iters,
            self.l_rounds,
            self.su,
            self.nh1,
            self.nh2,
            self.nr1,
            self.nr2,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(format!("GEPNet sizes must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::Config(format!("damping {} outside [0, 1)", self.eta)));
        }
        Ok(())
    }
}

/// Per-user probability vectors over the `M` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageProbabilities(pub Vec<Vec<f64>>);

impl MessageProbabilities {
    pub fn users(&self) -> usize {
        self.0.len()
    }

    /// 1-based argmax per user; ties go to the smaller label.
    pub fn decisions(&self) -> Vec<usize> {
        self.0.iter().map(|p| argmax(p) + 1).collect()
    }
}

/// Typed GEPNet parameters, validated against the bundle metadata.
#[derive(Debug, Clone)]
pub struct GepnetWeights {
    pub config: GepnetConfig,
    pub node_init: DenseLayer,
    pub message: Mlp,
    pub gru: GruCell,
    pub node_update: DenseLayer,
    pub readout: Mlp,
    pub constellation: Constellation,
    /// MLP_1 of the modulator, when the bundle carries it.
    pub modulator: Option<Mlp>,
    pub leaky_slope: f32,
}

fn meta_parse<T: std::str::FromStr>(bundle: &WeightBundle, key: &str) -> Result<T> {
    let raw = bundle
        .meta(key)
        .ok_or_else(|| Error::Validation(format!("missing metadata key {key:?}")))?;
    raw.parse()
        .map_err(|_| Error::Validation(format!("metadata {key:?} has unparsable value {raw:?}")))
}

fn required<'a>(bundle: &'a WeightBundle, name: &str) -> Result<&'a Tensor> {
    bundle
        .tensor(name)
        .ok_or_else(|| Error::IncompleteBundle(name.to_string()))
}

fn expect_dims(name: &str, t: &Tensor, dims: &[usize]) -> Result<()> {
    if t.dims() != dims {
        return Err(Error::Validation(format!(
            "tensor {name} has shape {:?}, expected {dims:?}",
            t.dims()
        )));
    }
    Ok(())
}

fn dense(
    bundle: &WeightBundle,
    prefix: &str,
    out: usize,
    inp: usize,
    act: Activation,
) -> Result<DenseLayer> {
    let wn = format!("{prefix}.weight");
    let bn = format!("{prefix}.bias");
    let w = required(bundle, &wn)?;
    let b = required(bundle, &bn)?;
    expect_dims(&wn, w, &[out, inp])?;
    expect_dims(&bn, b, &[out])?;
    DenseLayer::new(w.clone(), b.clone(), act)
}

/// Width of a layer as declared by its weight tensor.
fn declared_rows(bundle: &WeightBundle, prefix: &str) -> Result<usize> {
    let name = format!("{prefix}.weight");
    let t = required(bundle, &name)?;
    if t.dims().len() != 2 {
        return Err(Error::Validation(format!("tensor {name} must be 2-D")));
    }
    Ok(t.dims()[0])
}

impl GepnetWeights {
    pub fn from_bundle(bundle: &WeightBundle) -> Result<Self> {
        Self::from_bundle_with(bundle, GepnetConfig::default())
    }

    /// Build from a bundle; iteration counts, sizes and damping come from the
    /// bundle, the remaining switches from `base`.
    pub fn from_bundle_with(bundle: &WeightBundle, base: GepnetConfig) -> Result<Self> {
        bundle.check_format()?;
        for key in keys::REQUIRED {
            if bundle.meta(key).is_none() {
                return Err(Error::Validation(format!("missing metadata key {key:?}")));
            }
        }
        let convention = bundle.meta(keys::GRU_CONVENTION).unwrap_or_default();
        if convention != GRU_CONVENTION {
            return Err(Error::Validation(format!(
                "bundle uses GRU convention {convention:?}, engine implements {GRU_CONVENTION:?}"
            )));
        }
        let order: usize = meta_parse(bundle, keys::ORDER)?;
        let su: usize = meta_parse(bundle, keys::NODE_FEATURES)?;
        let leaky_slope: f32 = meta_parse(bundle, keys::LEAKY_SLOPE)?;
        let _: usize = meta_parse(bundle, keys::TRAINED_NT)?;
        let _: usize = meta_parse(bundle, keys::TRAINED_NR)?;

        let config = GepnetConfig {
            t_iters: meta_parse(bundle, keys::ITERATIONS)?,
            l_rounds: meta_parse(bundle, keys::GNN_ROUNDS)?,
            eta: meta_parse(bundle, keys::DAMPING)?,
            su,
            nh1: declared_rows(bundle, "mlp2.0")?,
            nh2: declared_rows(bundle, "mlp2.1")?,
            nr1: declared_rows(bundle, "mlp3.0")?,
            nr2: declared_rows(bundle, "mlp3.1")?,
            ..base
        };
        config
            .validate()
            .map_err(|e| Error::Validation(e.to_string()))?;

        let w0 = required(bundle, "node_init.weight")?;
        let init_inputs = match w0.dims() {
            [_, n @ (3 | 5)] => *n,
            dims => {
                return Err(Error::Validation(format!(
                    "node_init.weight has shape {dims:?}, expected [{su}, 3] or [{su}, 5]"
                )))
            }
        };
        let node_init = dense(bundle, "node_init", su, init_inputs, Activation::None)?;
        let message = Mlp::new(vec![
            dense(bundle, "mlp2.0", config.nh1, 2 * su + 2, Activation::Relu)?,
            dense(bundle, "mlp2.1", config.nh2, config.nh1, Activation::Relu)?,
            dense(bundle, "mlp2.2", su, config.nh2, Activation::Relu)?,
        ])?;
        let gate = |name: &str| -> Result<GruGate> {
            let (h, i) = (config.nh1, su + 2);
            let wi = format!("gru.{name}.input_weight");
            let wh = format!("gru.{name}.hidden_weight");
            let b = format!("gru.{name}.bias");
            let g = GruGate {
                input_weights: required(bundle, &wi)?.clone(),
                hidden_weights: required(bundle, &wh)?.clone(),
                bias: required(bundle, &b)?.clone(),
            };
            expect_dims(&wi, &g.input_weights, &[h, i])?;
            expect_dims(&wh, &g.hidden_weights, &[h, h])?;
            expect_dims(&b, &g.bias, &[h])?;
            Ok(g)
        };
        let gru = GruCell::new(
            su + 2,
            config.nh1,
            gate("update")?,
            gate("reset")?,
            gate("candidate")?,
        )?;
        let node_update = dense(bundle, "node_update", su, config.nh1, Activation::None)?;
        let readout = Mlp::new(vec![
            dense(bundle, "mlp3.0", config.nr1, 2 * su, Activation::Relu)?,
            dense(bundle, "mlp3.1", config.nr2, config.nr1, Activation::Relu)?,
            dense(bundle, "mlp3.2", order, config.nr2, Activation::None)?,
        ])?;
        let constellation = bundle_constellation(bundle)?;
        if constellation.order() != order {
            return Err(Error::Validation(format!(
                "constellation has {} points but M = {order}",
                constellation.order()
            )));
        }
        let modulator = if bundle.tensor("mlp1.0.weight").is_some() {
            let act = Activation::LeakyRelu(leaky_slope);
            let n1 = declared_rows(bundle, "mlp1.0")?;
            let n2 = declared_rows(bundle, "mlp1.1")?;
            let n3 = declared_rows(bundle, "mlp1.2")?;
            Some(Mlp::new(vec![
                dense(bundle, "mlp1.0", n1, order, act)?,
                dense(bundle, "mlp1.1", n2, n1, act)?,
                dense(bundle, "mlp1.2", n3, n2, act)?,
                dense(bundle, "mlp1.3", 2, n3, Activation::None)?,
            ])?)
        } else {
            None
        };
        Ok(Self {
            config,
            node_init,
            message,
            gru,
            node_update,
            readout,
            constellation,
            modulator,
            leaky_slope,
        })
    }

    pub fn order(&self) -> usize {
        self.constellation.order()
    }

    /// Number of node-init input features (3, or 5 with cavity statistics).
    pub fn node_init_inputs(&self) -> usize {
        self.node_init.in_dim()
    }
}

/// Node features, GRU states and the fixed edge data of the fully connected
/// symbol graph. Edge `j -> k` carries `[-h_jᵀh_k, σ²]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnState {
    pub u: Vec<Vec<f32>>,
    pub g: Vec<Vec<f32>>,
    gram: DMatrix<f64>,
    sigma2: f64,
}

impl GnnState {
    pub fn k(&self) -> usize {
        self.u.len()
    }

    pub fn edge(&self, j: usize, k: usize) -> [f32; 2] {
        [-self.gram[(j, k)] as f32, self.sigma2 as f32]
    }
}

/// Node-init features `[yᵀh_k, h_kᵀh_k, σ²]` (plus cavity mean and variance
/// when `cavity` is given).
fn node_init_inputs(
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma2: f64,
    k: usize,
    cavity: Option<(f64, f64)>,
) -> Vec<f32> {
    let col = h.column(k);
    let mut v = vec![col.dot(y) as f32, col.norm_squared() as f32, sigma2 as f32];
    if let Some((x, var)) = cavity {
        v.push(x as f32);
        v.push(var as f32);
    }
    v
}

/// Initial node features and zero GRU states. `cavity` supplies
/// `(x_obs, v_obs)` for bundles with five node-init inputs.
pub fn gnn_node_init(
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma2: f64,
    weights: &GepnetWeights,
    cavity: Option<(&[f64], &[f64])>,
) -> Result<GnnState> {
    let k = h.ncols();
    if y.len() != h.nrows() {
        return Err(Error::Shape(format!(
            "received vector length {} does not match N = {}",
            y.len(),
            h.nrows()
        )));
    }
    let mut u = Vec::with_capacity(k);
    for i in 0..k {
        let cav = match (weights.node_init_inputs(), cavity) {
            (3, _) => None,
            (_, Some((x, v))) => Some((x[i], v[i])),
            (n, None) => {
                return Err(Error::Shape(format!(
                    "node init expects {n} inputs but no cavity statistics were given"
                )))
            }
        };
        u.push(weights.node_init.forward(&node_init_inputs(h, y, sigma2, i, cav))?);
    }
    Ok(GnnState {
        u,
        g: vec![vec![0.0; weights.config.nh1]; k],
        gram: h.tr_mul(h),
        sigma2,
    })
}

/// One propagation and aggregation round:
/// `m_k = Σ_{j≠k} MLP_2(u_k, u_j, f_jk)`, `g_k = GRU(g_k, [m_k, x_obs,k, v_obs,k])`,
/// `u_k = W_1 g_k + b_1`.
pub fn gnn_round(
    state: &mut GnnState,
    x_obs: &[f64],
    v_obs: &[f64],
    weights: &GepnetWeights,
) -> Result<()> {
    let k = state.k();
    if x_obs.len() != k || v_obs.len() != k {
        return Err(Error::Shape(format!(
            "cavity statistics of length {}/{} for {k} nodes",
            x_obs.len(),
            v_obs.len()
        )));
    }
    let su = weights.config.su;
    let mut input = Vec::with_capacity(2 * su + 2);
    let mut aggregated = vec![vec![0.0f32; su]; k];
    for (dst, agg) in aggregated.iter_mut().enumerate() {
        for src in (0..k).filter(|&j| j != dst) {
            input.clear();
            input.extend_from_slice(&state.u[dst]);
            input.extend_from_slice(&state.u[src]);
            input.extend_from_slice(&state.edge(src, dst));
            let msg = weights.message.forward(&input)?;
            agg.iter_mut().zip(&msg).for_each(|(a, m)| *a += m);
        }
    }
    for (node, msg) in aggregated.into_iter().enumerate() {
        let mut gru_in = msg;
        gru_in.push(x_obs[node] as f32);
        gru_in.push(v_obs[node] as f32);
        state.g[node] = weights.gru.forward(&state.g[node], &gru_in)?;
        state.u[node] = weights.node_update.forward(&state.g[node])?;
    }
    Ok(())
}

/// Stack `[u_k; u_{N_T+k}]` per user, apply MLP_3 and normalise.
pub fn gnn_readout(state: &GnnState, weights: &GepnetWeights) -> Result<MessageProbabilities> {
    let k = state.k();
    if !k.is_multiple_of(2) {
        return Err(Error::Shape(format!("odd number of real nodes {k}")));
    }
    let nt = k / 2;
    let mut probs = Vec::with_capacity(nt);
    let mut stacked = Vec::with_capacity(2 * weights.config.su);
    for user in 0..nt {
        stacked.clear();
        stacked.extend_from_slice(&state.u[user]);
        stacked.extend_from_slice(&state.u[nt + user]);
        probs.push(softmax(&weights.readout.forward(&stacked)?));
    }
    Ok(MessageProbabilities(probs))
}

/// Soft symbols and variances from message probabilities, in the stacked
/// `[Re...; Im...]` layout. Variances are floored at [`VARIANCE_FLOOR`].
pub fn estimation_update(
    probs: &MessageProbabilities,
    constellation: &Constellation,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let nt = probs.users();
    let mut x = vec![0.0; 2 * nt];
    let mut v = vec![0.0; 2 * nt];
    for (user, p) in probs.0.iter().enumerate() {
        if p.len() != constellation.order() {
            return Err(Error::Shape(format!(
                "probability vector of length {} for M = {}",
                p.len(),
                constellation.order()
            )));
        }
        let pts = constellation.points();
        let re: f64 = pts.iter().zip(p).map(|(a, w)| a.re * w).sum();
        let im: f64 = pts.iter().zip(p).map(|(a, w)| a.im * w).sum();
        let vre: f64 = pts.iter().zip(p).map(|(a, w)| (a.re - re).powi(2) * w).sum();
        let vim: f64 = pts.iter().zip(p).map(|(a, w)| (a.im - im).powi(2) * w).sum();
        x[user] = re;
        x[nt + user] = im;
        v[user] = vre.max(VARIANCE_FLOOR);
        v[nt + user] = vim.max(VARIANCE_FLOOR);
    }
    Ok((x, v))
}

/// The stage of an EP iteration that turns cavity statistics into message
/// probabilities. GEPNet uses a GNN; tests plug in exact posteriors.
pub trait PosteriorRefiner {
    fn refine(&mut self, state: &EpState) -> Result<MessageProbabilities>;
}

/// GNN refiner bound to one received sample.
pub struct GnnRefiner<'a> {
    weights: &'a GepnetWeights,
    h: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    sigma2: f64,
    initial: GnnState,
    gnn: GnnState,
    iteration: usize,
}

impl<'a> GnnRefiner<'a> {
    pub fn new(
        weights: &'a GepnetWeights,
        h: &'a DMatrix<f64>,
        y: &'a DVector<f64>,
        sigma2: f64,
    ) -> Result<Self> {
        let k = h.ncols();
        let zeros = vec![0.0; k];
        let ones = vec![1.0; k];
        let initial = gnn_node_init(h, y, sigma2, weights, Some((&zeros, &ones)))?;
        Ok(Self {
            weights,
            h,
            y,
            sigma2,
            gnn: initial.clone(),
            initial,
            iteration: 0,
        })
    }
}

impl PosteriorRefiner for GnnRefiner<'_> {
    fn refine(&mut self, state: &EpState) -> Result<MessageProbabilities> {
        let w = self.weights;
        if w.node_init_inputs() == 3 {
            self.gnn.u.clone_from(&self.initial.u);
        } else {
            let fresh = gnn_node_init(
                self.h,
                self.y,
                self.sigma2,
                w,
                Some((&state.x_obs, &state.v_obs)),
            )?;
            self.gnn.u = fresh.u;
        }
        if w.config.gru_reset_per_iteration && self.iteration > 0 {
            self.gnn.g.clone_from(&self.initial.g);
        }
        self.iteration += 1;
        for _ in 0..w.config.l_rounds {
            gnn_round(&mut self.gnn, &state.x_obs, &state.v_obs, w)?;
        }
        gnn_readout(&self.gnn, w)
    }
}

/// Final probabilities, decisions and EP state of a detection run.
#[derive(Debug, Clone)]
pub struct GepnetOutput {
    pub result: DetectionResult,
    pub probabilities: MessageProbabilities,
    pub state: EpState,
}

/// Drive `iterations` EP iterations with an arbitrary refiner.
pub fn run_ep_iterations<R: PosteriorRefiner>(
    obs: &Observation,
    refiner: &mut R,
    constellation: &Constellation,
    iterations: usize,
    eta: f64,
    fallback: FallbackMode,
) -> Result<(MessageProbabilities, EpState)> {
    let mut state = EpState::initial(obs.k());
    let mut probs = MessageProbabilities(Vec::new());
    for _ in 0..iterations {
        ep::observation_update(&mut state, obs)?;
        probs = refiner.refine(&state)?;
        let (x_hat, v_hat) = estimation_update(&probs, constellation)?;
        ep::moment_match_and_damp(&mut state, &x_hat, &v_hat, eta, fallback)?;
    }
    Ok((probs, state))
}

/// Full GEPNet detection with the constellation supplied by the caller.
pub fn gepnet_detect(
    y: &DVector<f64>,
    channel: &ChannelInstance,
    constellation: &Constellation,
    weights: &GepnetWeights,
) -> Result<GepnetOutput> {
    let cfg = &weights.config;
    cfg.validate()?;
    if constellation.order() != weights.order() {
        return Err(Error::Config(format!(
            "constellation order {} does not match weights trained for M = {}",
            constellation.order(),
            weights.order()
        )));
    }
    let obs = Observation::new(channel.h(), y, channel.sigma2())?;
    let mut refiner = GnnRefiner::new(weights, channel.h(), y, channel.sigma2())?;
    let (probabilities, state) = run_ep_iterations(
        &obs,
        &mut refiner,
        constellation,
        cfg.t_iters,
        cfg.eta,
        cfg.fallback,
    )?;
    if probabilities.0.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("GEPNet produced non-finite probabilities".into()));
    }
    Ok(GepnetOutput {
        result: DetectionResult {
            messages: probabilities.decisions(),
            probabilities: Some(probabilities.0.clone()),
        },
        probabilities,
        state,
    })
}
