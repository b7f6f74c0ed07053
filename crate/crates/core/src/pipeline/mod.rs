//! Per-GEMM stage times and layer completion time.
//!
//! A layer runs `n_l` GEMMs over four serial streams: CPU compute (A), kernel
//! launch (B), host-to-device copy (C) and GPU compute (D). For GEMM `i` the
//! copy waits for its launches, the GPU kernel waits for its copy, and each
//! stream is FIFO. [`evaluate_recurrence`] computes the completion timestamps
//! in closed recurrence form; [`simulate_streams`] replays the same schedule
//! as a discrete-event simulation and must agree with it.

mod export;
mod recurrence;
mod sim;
mod stages;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perf_model::Precision;

pub use export::{records_to_csv, records_to_json, Stream, TaskRecord};
pub use recurrence::{classify_case, evaluate_recurrence, finish_time, gpu_finish_closed_form, Timeline};
pub use sim::{simulate_schedule, simulate_streams, Schedule};
pub use stages::{result_transfer_time, stage_times_generation, stage_times_prompt, ACTIVATION_BYTES};

/// Rates at or below this are treated as exactly zero, so vanishing slices do
/// not pay startup or launch costs.
pub const RATE_EPS: f64 = 1e-12;

/// `sgn` restricted to nonnegative inputs: 1 for `x > RATE_EPS`, else 0.
#[inline]
pub fn active(x: f64) -> f64 {
    if x > RATE_EPS {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn effective(x: f64) -> f64 {
    if x > RATE_EPS {
        x
    } else {
        0.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("invalid slicing rates ({r_cc}, {r_cg}, {r_gg}): {reason}")]
    InvalidRates {
        r_cc: f64,
        r_cg: f64,
        r_gg: f64,
        reason: &'static str,
    },
    #[error("n_g = {n_g} outside [0, {tokens}]")]
    TokenCountOutOfRange { n_g: u64, tokens: u64 },
    #[error("invalid layer: {0}")]
    InvalidLayer(&'static str),
}

/// Shape of one MLP/MoE layer: `n_l` GEMMs with `M x H` weights each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub model_dim: u64,
    pub hidden_dim: u64,
    pub gemms: u32,
    pub precision: Precision,
}

impl LayerSpec {
    pub fn new(model_dim: u64, hidden_dim: u64, gemms: u32, precision: Precision) -> Result<Self, PipelineError> {
        if model_dim == 0 || hidden_dim == 0 {
            return Err(PipelineError::InvalidLayer("model_dim and hidden_dim must be >= 1"));
        }
        if gemms == 0 {
            return Err(PipelineError::InvalidLayer("a layer needs at least one GEMM"));
        }
        Ok(Self {
            model_dim,
            hidden_dim,
            gemms,
            precision,
        })
    }

    /// `T * M * H`.
    pub fn gemm_work(&self, tokens: u64) -> f64 {
        tokens as f64 * self.model_dim as f64 * self.hidden_dim as f64
    }

    /// Bytes of one GEMM weight tensor, `n_W`.
    pub fn weight_bytes(&self) -> f64 {
        self.model_dim as f64 * self.hidden_dim as f64 * self.precision.bytes_per_param()
    }

    /// Bytes of all sliced weights in the layer, `n_m = n_l * n_W`.
    pub fn layer_bytes(&self) -> f64 {
        self.gemms as f64 * self.weight_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prompt,
    #[serde(alias = "gen")]
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Workload {
    pub tokens: u64,
    pub phase: Phase,
}

impl Workload {
    pub fn generation(tokens: u64) -> Self {
        Self {
            tokens,
            phase: Phase::Generation,
        }
    }

    pub fn prompt(tokens: u64) -> Self {
        Self {
            tokens,
            phase: Phase::Prompt,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RatesWire {
    r_cc: f64,
    r_cg: f64,
    r_gg: f64,
}

/// A point `(r_CC, r_CG, r_GG)` on the probability simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RatesWire", into = "RatesWire")]
pub struct SlicingRates {
    cc: f64,
    cg: f64,
    gg: f64,
}

impl TryFrom<RatesWire> for SlicingRates {
    type Error = PipelineError;

    fn try_from(w: RatesWire) -> Result<Self, Self::Error> {
        SlicingRates::new(w.r_cc, w.r_cg, w.r_gg)
    }
}

impl From<SlicingRates> for RatesWire {
    fn from(r: SlicingRates) -> Self {
        RatesWire {
            r_cc: r.cc,
            r_cg: r.cg,
            r_gg: r.gg,
        }
    }
}

impl SlicingRates {
    pub const ALL_CPU: SlicingRates = SlicingRates {
        cc: 1.0,
        cg: 0.0,
        gg: 0.0,
    };
    pub const ALL_GPU: SlicingRates = SlicingRates {
        cc: 0.0,
        cg: 0.0,
        gg: 1.0,
    };

    pub fn new(r_cc: f64, r_cg: f64, r_gg: f64) -> Result<Self, PipelineError> {
        let err = |reason| PipelineError::InvalidRates {
            r_cc,
            r_cg,
            r_gg,
            reason,
        };
        for r in [r_cc, r_cg, r_gg] {
            if !r.is_finite() || !(0.0..=1.0).contains(&r) {
                return Err(err("each rate must lie in [0, 1]"));
            }
        }
        if (r_cc + r_cg + r_gg - 1.0).abs() > 1e-12 {
            return Err(err("rates must sum to 1"));
        }
        Ok(Self {
            cc: r_cc,
            cg: r_cg,
            gg: r_gg,
        })
    }

    /// Rates with `r_CC = 1 - r_CG - r_GG`. Round-off below zero is snapped
    /// to zero.
    pub fn from_cg_gg(r_cg: f64, r_gg: f64) -> Result<Self, PipelineError> {
        let mut cc = 1.0 - r_cg - r_gg;
        if cc < 0.0 && cc > -1e-12 {
            cc = 0.0;
        }
        Self::new(cc, r_cg, r_gg)
    }

    pub fn r_cc(&self) -> f64 {
        self.cc
    }

    pub fn r_cg(&self) -> f64 {
        self.cg
    }

    pub fn r_gg(&self) -> f64 {
        self.gg
    }
}

/// Duration of each stage for one GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimes {
    /// Kernel launches (stream B).
    pub launch: f64,
    /// Host-to-device weight copy (stream C).
    pub transfer: f64,
    /// GPU GEMM (stream D).
    pub gpu: f64,
    /// CPU GEMM (stream A).
    pub cpu: f64,
}

impl StageTimes {
    pub fn new(launch: f64, transfer: f64, gpu: f64, cpu: f64) -> Self {
        Self {
            launch,
            transfer,
            gpu,
            cpu,
        }
    }

    pub fn gpu_side_idle(&self) -> bool {
        self.launch == 0.0 && self.transfer == 0.0 && self.gpu == 0.0
    }
}

/// How the prompt-phase copy volume is charged when tokens are diverted to the
/// GPU-executed alias of the CC weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// The whole GEMM weight `n_W` is copied every prompt pass and the CC
    /// alias always pays its launch and startup terms.
    #[default]
    Literal,
    /// Only host-resident weights that are actually used on the GPU are
    /// copied: `(r_CG + r_CC * [n_g > 0]) * n_W`; the CC alias pays its
    /// launch and startup terms only when `n_g > 0`.
    ResidentFraction,
}

/// Schedule shape of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseLabel {
    /// Copy-dominated.
    Case1,
    /// GPU-compute-dominated.
    Case2,
    /// Launch-dominated.
    Case3,
    /// The CPU stream finishes last.
    CpuBound,
    /// No GPU-side work at all.
    Degenerate,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_validation() {
        assert!(SlicingRates::new(0.5, 0.5, 0.0).is_ok());
        assert!(SlicingRates::new(0.5, 0.6, 0.0).is_err());
        assert!(SlicingRates::new(-0.1, 0.6, 0.5).is_err());
        assert!(SlicingRates::new(f64::NAN, 0.5, 0.5).is_err());
        let r = SlicingRates::from_cg_gg(0.7, 0.3).unwrap();
        assert!(r.r_cc() >= 0.0);
        assert!((r.r_cc() + r.r_cg() + r.r_gg() - 1.0).abs() <= 1e-12);
        assert!(SlicingRates::from_cg_gg(0.8, 0.3).is_err());
    }

    #[test]
    fn rates_serde_validates() {
        let ok: SlicingRates = serde_json::from_str(r#"{"r_cc":0.25,"r_cg":0.25,"r_gg":0.5}"#).unwrap();
        assert_eq!(ok.r_gg(), 0.5);
        assert!(serde_json::from_str::<SlicingRates>(r#"{"r_cc":0.5,"r_cg":0.25,"r_gg":0.5}"#).is_err());
    }

    #[test]
    fn layer_sizes() {
        let l = LayerSpec::new(4096, 14336, 2, Precision::Fp16).unwrap();
        assert_eq!(l.weight_bytes(), 4096.0 * 14336.0 * 2.0);
        assert_eq!(l.layer_bytes(), 2.0 * l.weight_bytes());
        assert_eq!(l.gemm_work(1), 5.8720256e7);
        let q = LayerSpec::new(4096, 14336, 3, Precision::Int4).unwrap();
        assert_eq!(q.weight_bytes(), 4096.0 * 14336.0 * 0.5);
        assert!(LayerSpec::new(0, 1, 1, Precision::Fp16).is_err());
        assert!(LayerSpec::new(1, 1, 0, Precision::Fp16).is_err());
    }

    #[test]
    fn sgn_threshold() {
        assert_eq!(active(0.0), 0.0);
        assert_eq!(active(1e-13), 0.0);
        assert_eq!(active(1e-9), 1.0);
    }
}
