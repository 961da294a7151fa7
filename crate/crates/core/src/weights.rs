//! `GEPW` weight bundles: the binary contract between the training side and
//! this inference engine.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "GEPW" | version | metadata count | { key len, key, value len, value }*
//!        | tensor count | { name len, name, ndim, dims[ndim], f32 LE data }*
//! ```
//!
//! Tensor data is row-major. Strings are UTF-8 without terminator.

use std::collections::HashSet;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{Constellation, ConstellationSource};
use crate::error::{Error, Result};
use crate::gepnet::{GepnetConfig, GepnetWeights};
use crate::nn::{Tensor, DEFAULT_LEAKY_SLOPE, GRU_CONVENTION};

pub const MAGIC: &[u8; 4] = b"GEPW";
pub const FORMAT_VERSION: u32 = 1;

/// Metadata keys every GEPNet bundle carries.
pub mod keys {
    pub const ORDER: &str = "M";
    pub const TRAINED_NT: &str = "nt";
    pub const TRAINED_NR: &str = "nr";
    pub const NODE_FEATURES: &str = "su";
    pub const GNN_ROUNDS: &str = "L";
    pub const ITERATIONS: &str = "T";
    pub const DAMPING: &str = "eta";
    pub const LEAKY_SLOPE: &str = "leaky_slope";
    pub const GRU_CONVENTION: &str = "gru_convention";
    /// Optional: `qam` or `learned`; defaults to `learned`.
    pub const CONSTELLATION_SOURCE: &str = "constellation_source";

    pub const REQUIRED: [&str; 9] = [
        ORDER,
        TRAINED_NT,
        TRAINED_NR,
        NODE_FEATURES,
        GNN_ROUNDS,
        ITERATIONS,
        DAMPING,
        LEAKY_SLOPE,
        GRU_CONVENTION,
    ];
}

/// Name of the authoritative `[M, 2]` constellation tensor.
pub const CONSTELLATION_TENSOR: &str = "constellation";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered metadata and tensors. Order is preserved through encode/decode.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub version: u32,
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Default for WeightBundle {
    fn default() -> Self {
        Self {
            version: FORMAT_VERSION,
            metadata: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl WeightBundle {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.tensor)
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            tensor,
        });
    }

    /// Format-level checks: supported version, unique keys and names.
    pub fn check_format(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        let mut seen = HashSet::new();
        for (k, _) in &self.metadata {
            if !seen.insert(k.as_str()) {
                return Err(Error::Format(format!("duplicate metadata key {k:?}")));
            }
        }
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {:?}", t.name)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_format()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.version);
        put_u32(&mut out, len_u32(self.metadata.len())?);
        for (k, v) in &self.metadata {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        put_u32(&mut out, len_u32(self.tensors.len())?);
        for t in &self.tensors {
            put_str(&mut out, &t.name)?;
            put_u32(&mut out, len_u32(t.tensor.dims().len())?);
            for &d in t.tensor.dims() {
                put_u32(&mut out, len_u32(d)?);
            }
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse the byte layout without checking GEPNet completeness.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = cur.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_count = cur.u32("metadata count")?;
        let mut metadata = Vec::new();
        for _ in 0..meta_count {
            let k = cur.string("metadata key")?;
            let v = cur.string("metadata value")?;
            metadata.push((k, v));
        }
        let tensor_count = cur.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..tensor_count {
            let name = cur.string("tensor name")?;
            let ndim = cur.u32("tensor rank")? as usize;
            let mut dims = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                dims.push(cur.u32("tensor dims")? as usize);
            }
            if dims.contains(&0) {
                return Err(Error::Format(format!("tensor {name:?} has a zero dimension")));
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
            let raw = cur.take(count, &format!("data of tensor {name:?}"))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptWeights(name));
            }
            let tensor = Tensor::new(dims, data)?;
            tensors.push(NamedTensor { name, tensor });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - cur.pos
            )));
        }
        let bundle = Self {
            version,
            metadata,
            tensors,
        };
        bundle.check_format()?;
        Ok(bundle)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, len_u32(s.len())?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                offset: self.bytes.len(),
                what: format!("{what} needs {n} bytes at offset {}", self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

/// Serialise a bundle. Nothing is written if the bundle is invalid.
pub fn write_bundle<W: Write>(bundle: &WeightBundle, mut sink: W) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    sink.write_all(&bytes)?;
    Ok(())
}

/// Parse a bundle without GEPNet validation.
pub fn decode_bundle<R: Read>(mut source: R) -> Result<WeightBundle> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    WeightBundle::from_bytes(&bytes)
}

/// Parse a bundle and validate it as a complete GEPNet parameter set.
pub fn read_bundle<R: Read>(source: R) -> Result<WeightBundle> {
    let bundle = decode_bundle(source)?;
    GepnetWeights::from_bundle(&bundle)?;
    Ok(bundle)
}

/// Constellation held in the bundle's `constellation` tensor. Refuses points
/// whose average power is off by more than 1e-5 instead of rescaling them.
pub fn bundle_constellation(bundle: &WeightBundle) -> Result<Constellation> {
    let t = bundle
        .tensor(CONSTELLATION_TENSOR)
        .ok_or_else(|| Error::IncompleteBundle(CONSTELLATION_TENSOR.into()))?;
    if t.dims().len() != 2 || t.dims()[1] != 2 {
        return Err(Error::Validation(format!(
            "constellation tensor must be [M, 2], got {:?}",
            t.dims()
        )));
    }
    let source = match bundle.meta(keys::CONSTELLATION_SOURCE) {
        Some("qam") => ConstellationSource::Qam,
        _ => ConstellationSource::Learned,
    };
    let points = t
        .data()
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0] as f64, c[1] as f64))
        .collect();
    Constellation::new(points, source)
}

/// Constellation JSON for a bundle.
pub fn export_constellation(bundle: &WeightBundle) -> Result<String> {
    bundle_constellation(bundle)?.to_json()
}

/// Constellation JSON for raw learned points.
pub fn export_constellation_points(points: &[[f64; 2]]) -> Result<String> {
    let points = points.iter().map(|&[re, im]| Complex64::new(re, im)).collect();
    Constellation::new(points, ConstellationSource::Learned)?.to_json()
}

/// Labelled points as CSV, `label,re,im`.
pub fn constellation_csv(c: &Constellation) -> String {
    let mut out = String::from("label,re,im\n");
    for (i, p) in c.points().iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", i + 1, p.re, p.im));
    }
    out
}

/// Randomly initialised GEPNet bundle: every weight is drawn from
/// `U(-1/√fan_in, 1/√fan_in)` scaled by `scale`, biases likewise.
pub fn random_gepnet_bundle(
    cfg: &GepnetConfig,
    constellation: &Constellation,
    trained_nt: usize,
    trained_nr: usize,
    node_init_inputs: usize,
    scale: f32,
    seed: u64,
) -> WeightBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = WeightBundle::default();
    b.set_meta(keys::ORDER, constellation.order());
    b.set_meta(keys::TRAINED_NT, trained_nt);
    b.set_meta(keys::TRAINED_NR, trained_nr);
    b.set_meta(keys::NODE_FEATURES, cfg.su);
    b.set_meta(keys::GNN_ROUNDS, cfg.l_rounds);
    b.set_meta(keys::ITERATIONS, cfg.t_iters);
    b.set_meta(keys::DAMPING, cfg.eta);
    b.set_meta(keys::LEAKY_SLOPE, DEFAULT_LEAKY_SLOPE);
    b.set_meta(keys::GRU_CONVENTION, GRU_CONVENTION);
    let source = match constellation.source() {
        ConstellationSource::Qam => "qam",
        ConstellationSource::Learned => "learned",
    };
    b.set_meta(keys::CONSTELLATION_SOURCE, source);

    let uniform = |rng: &mut ChaCha8Rng, n: usize, fan_in: usize| -> Vec<f32> {
        let bound = scale / (fan_in as f32).sqrt();
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
    };
    let dense = |rng: &mut ChaCha8Rng, b: &mut WeightBundle, prefix: &str, out: usize, inp: usize| {
        let w = uniform(rng, out * inp, inp);
        let bias = uniform(rng, out, inp);
        b.push(&format!("{prefix}.weight"), Tensor::new(vec![out, inp], w).expect("sized"));
        b.push(&format!("{prefix}.bias"), Tensor::new(vec![out], bias).expect("sized"));
    };

    let su = cfg.su;
    let m = constellation.order();
    dense(&mut rng, &mut b, "node_init", su, node_init_inputs);
    dense(&mut rng, &mut b, "mlp2.0", cfg.nh1, 2 * su + 2);
    dense(&mut rng, &mut b, "mlp2.1", cfg.nh2, cfg.nh1);
    dense(&mut rng, &mut b, "mlp2.2", su, cfg.nh2);
    for gate in ["update", "reset", "candidate"] {
        let (h, i) = (cfg.nh1, su + 2);
        let wi = Tensor::new(vec![h, i], uniform(&mut rng, h * i, i)).expect("sized");
        let wh = Tensor::new(vec![h, h], uniform(&mut rng, h * h, h)).expect("sized");
        let bias = Tensor::new(vec![h], uniform(&mut rng, h, h)).expect("sized");
        b.push(&format!("gru.{gate}.input_weight"), wi);
        b.push(&format!("gru.{gate}.hidden_weight"), wh);
        b.push(&format!("gru.{gate}.bias"), bias);
    }
    dense(&mut rng, &mut b, "node_update", su, cfg.nh1);
    dense(&mut rng, &mut b, "mlp3.0", cfg.nr1, 2 * su);
    dense(&mut rng, &mut b, "mlp3.1", cfg.nr2, cfg.nr1);
    dense(&mut rng, &mut b, "mlp3.2", m, cfg.nr2);

    let pts: Vec<f32> = constellation
        .points()
        .iter()
        .flat_map(|p| [p.re as f32, p.im as f32])
        .collect();
    b.push(CONSTELLATION_TENSOR, Tensor::new(vec![m, 2], pts).expect("sized"));
    b
}

/// Hand-built GEPNet parameters whose GNN copies the cavity mean through the
/// GRU and whose readout slices it to the nearest constellation point, with
/// logits `gain · (Re(s̄_m x) - |s_m|²/2)`. Used as a deterministic sanity
/// fixture: at high SNR it detects as well as a nearest-point slicer on the
/// EP cavity. Needs `nr1, nr2 >= 4`.
pub fn slicer_gepnet_bundle(
    cfg: &GepnetConfig,
    constellation: &Constellation,
    trained_nt: usize,
    trained_nr: usize,
    gain: f32,
) -> Result<WeightBundle> {
    if cfg.nr1 < 4 || cfg.nr2 < 4 {
        return Err(Error::Config("slicer readout needs nr1, nr2 >= 4".into()));
    }
    // tanh is linear to ~1e-5 relative for |x| < 1e-2 · max|x_obs|
    const EPS: f32 = 1e-2;
    let mut b = random_gepnet_bundle(cfg, constellation, trained_nt, trained_nr, 3, 0.0, 0);
    let su = cfg.su;
    let mut set = |name: &str, f: &dyn Fn(usize, usize) -> f32| {
        let t = b
            .tensors
            .iter_mut()
            .find(|t| t.name == name)
            .expect("tensor present in random bundle");
        let dims = t.tensor.dims().to_vec();
        let cols = if dims.len() == 2 { dims[1] } else { 1 };
        let data = (0..t.tensor.len()).map(|i| f(i / cols, i % cols)).collect();
        t.tensor = Tensor::new(dims, data).expect("same shape");
    };
    // z ≈ 0 so the hidden state is replaced by the candidate each round
    set("gru.update.bias", &|_, _| -40.0);
    set("gru.candidate.input_weight", &|r, c| if r == 0 && c == su { EPS } else { 0.0 });
    set("node_update.weight", &|r, c| if r == 0 && c == 0 { 1.0 / EPS } else { 0.0 });
    // ±Re and ±Im of the cavity mean survive both ReLU layers
    set("mlp3.0.weight", &|r, c| match (r, c) {
        (0, 0) => 1.0,
        (1, 0) => -1.0,
        (2, c) if c == su => 1.0,
        (3, c) if c == su => -1.0,
        _ => 0.0,
    });
    set("mlp3.1.weight", &|r, c| if r == c && r < 4 { 1.0 } else { 0.0 });
    let pts: Vec<Complex64> = constellation.points().to_vec();
    set("mlp3.2.weight", &|r, c| {
        let p = pts[r];
        gain * match c {
            0 => p.re as f32,
            1 => -p.re as f32,
            2 => p.im as f32,
            3 => -p.im as f32,
            _ => 0.0,
        }
    });
    set("mlp3.2.bias", &|r, _| -gain * (pts[r].norm_sqr() / 2.0) as f32);
    Ok(b)
}
