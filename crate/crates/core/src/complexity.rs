//! Closed-form multiplication counts for inference on the real-valued system.

use serde::{Deserialize, Serialize};

/// Layer sizes entering the readout counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadoutSizes {
    pub su: u64,
    pub nr1: u64,
    pub nr2: u64,
}

impl Default for ReadoutSizes {
    fn default() -> Self {
        Self {
            su: 8,
            nr1: 128,
            nr2: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub name: String,
    pub multiplications: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub rows: Vec<ComplexityRow>,
}

impl ComplexityReport {
    pub fn get(&self, name: &str) -> Option<u128> {
        self.rows
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.multiplications)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,multiplications\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.name, r.multiplications));
        }
        out
    }
}

pub const E2E_READOUT: &str = "e2e_readout_per_iteration";
pub const GEPNET_READOUT: &str = "gepnet_readout_per_iteration";
pub const E2E_ESTIMATION: &str = "e2e_estimation";
pub const GEPNET_ESTIMATION: &str = "gepnet_estimation";
pub const ML: &str = "ml";

fn exact_sqrt(m: u64) -> Option<u64> {
    let r = (m as f64).sqrt().round() as u64;
    (r * r == m).then_some(r)
}

/// Message-probability readout: `(2 S_u N_r1 + N_r1 N_r2 + N_r2 M) K / 2`.
pub fn e2e_readout(m: u64, k: u64, s: ReadoutSizes) -> u128 {
    (2 * s.su * s.nr1 + s.nr1 * s.nr2 + s.nr2 * m) as u128 * k as u128 / 2
}

/// Per-real-symbol readout: `(S_u N_r1 + N_r1 N_r2 + N_r2 √M) K`.
pub fn gepnet_readout(m: u64, k: u64, s: ReadoutSizes) -> Option<u128> {
    let root = exact_sqrt(m)?;
    Some((s.su * s.nr1 + s.nr1 * s.nr2 + s.nr2 * root) as u128 * k as u128)
}

/// `3 M K`.
pub fn e2e_estimation(m: u64, k: u64) -> u128 {
    3 * m as u128 * k as u128
}

/// `3 √M K`.
pub fn gepnet_estimation(m: u64, k: u64) -> Option<u128> {
    exact_sqrt(m).map(|r| 3 * r as u128 * k as u128)
}

/// Exhaustive ML: `M^(K/2) (N K + N)`; `None` on overflow.
pub fn ml(m: u64, k: u64, n: u64) -> Option<u128> {
    (m as u128)
        .checked_pow((k / 2) as u32)?
        .checked_mul(n as u128 * k as u128 + n as u128)
}

pub fn complexity_report(m: u64, k: u64, n: u64, sizes: ReadoutSizes) -> ComplexityReport {
    let mut rows = vec![ComplexityRow {
        name: E2E_READOUT.into(),
        multiplications: e2e_readout(m, k, sizes),
    }];
    if let Some(v) = gepnet_readout(m, k, sizes) {
        rows.push(ComplexityRow {
            name: GEPNET_READOUT.into(),
            multiplications: v,
        });
    }
    rows.push(ComplexityRow {
        name: E2E_ESTIMATION.into(),
        multiplications: e2e_estimation(m, k),
    });
    if let Some(v) = gepnet_estimation(m, k) {
        rows.push(ComplexityRow {
            name: GEPNET_ESTIMATION.into(),
            multiplications: v,
        });
    }
    if let Some(v) = ml(m, k, n) {
        rows.push(ComplexityRow {
            name: ML.into(),
            multiplications: v,
        });
    }
    ComplexityReport { m, k, n, rows }
}
