//! Optimal CG slicing rate for a fixed GG rate.
//!
//! With `r_GG` fixed and `r_CC = 1 - r_CG - r_GG`, every stage time is affine
//! in `r_CG` on the open interval `(0, 1 - r_GG)`, and the layer completion
//! time is the maximum of four affine functions: the three closed-form GPU
//! finishes (copy-, compute- and launch-dominated) and the CPU finish. Its
//! minimum therefore sits at a crossing of two of them or at an end of the
//! interval. The solver enumerates those points and scores each one with the
//! full recurrence, so a mislabelled case can never pick a wrong candidate.

use serde::{Deserialize, Serialize};

use crate::edge::{Affine, AffineStages, EdgeSource};
use crate::perf_model::DeviceCosts;
use crate::pipeline::{
    active, effective, evaluate_recurrence, finish_time, stage_times_generation, CaseLabel, LayerSpec, PipelineError,
    SlicingRates, Workload,
};

/// Offset used to sample the one-sided limit just above `r_CG = 0`.
pub const DEFAULT_EPSILON: f64 = 1e-9;

const DEDUP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgePoint {
    pub r_cg: f64,
    pub source: EdgeSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub r_cg: f64,
    pub t_fin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSolution {
    pub rates: SlicingRates,
    pub t_fin: f64,
    pub case_label: CaseLabel,
    pub candidates: Vec<Candidate>,
}

fn check_rgg(r_gg: f64) -> Result<f64, PipelineError> {
    if r_gg.is_finite() && (0.0..=1.0).contains(&r_gg) {
        Ok(r_gg)
    } else {
        Err(PipelineError::InvalidRates {
            r_cc: f64::NAN,
            r_cg: f64::NAN,
            r_gg,
            reason: "r_GG must lie in [0, 1]",
        })
    }
}

/// Stage times as affine functions of `r_CG` on `(0, 1 - r_GG)`.
pub fn affine_stages(costs: &DeviceCosts, layer: &LayerSpec, workload: &Workload, r_gg: f64) -> AffineStages {
    let gg = effective(r_gg);
    let s_gg = active(gg);
    let work = layer.gemm_work(workload.tokens);
    let gpu_unit = work * costs.gpu.beta;
    let cpu_unit = work * costs.cpu.beta;
    AffineStages {
        launch: Affine::constant((2.0 + s_gg) * costs.launch),
        transfer: Affine::new(costs.pcie.alpha, layer.weight_bytes() * costs.pcie.beta),
        gpu: Affine::new(costs.gpu.alpha * (1.0 + s_gg) + gg * gpu_unit, gpu_unit),
        cpu: Affine::new(costs.cpu.alpha + (1.0 - gg) * cpu_unit, -cpu_unit),
    }
}

/// Candidate `r_CG` values, sorted ascending and deduplicated.
pub fn edge_points(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    workload: &Workload,
    r_gg: f64,
) -> Result<Vec<EdgePoint>, PipelineError> {
    edge_points_with_epsilon(costs, layer, workload, r_gg, DEFAULT_EPSILON)
}

pub fn edge_points_with_epsilon(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    workload: &Workload,
    r_gg: f64,
    epsilon: f64,
) -> Result<Vec<EdgePoint>, PipelineError> {
    let r_gg = check_rgg(r_gg)?;
    let upper = (1.0 - r_gg).max(0.0);
    let mut points = vec![EdgePoint {
        r_cg: 0.0,
        source: EdgeSource::LowerBound,
    }];
    if upper <= DEDUP_TOL {
        return Ok(points);
    }
    if epsilon > 0.0 && epsilon < upper {
        points.push(EdgePoint {
            r_cg: epsilon,
            source: EdgeSource::AboveLowerBound,
        });
    }
    points.push(EdgePoint {
        r_cg: upper,
        source: EdgeSource::UpperBound,
    });

    let stages = affine_stages(costs, layer, workload, r_gg);
    for (root, source) in stages.boundary_roots(layer.gemms as usize) {
        if root > 0.0 && root < upper {
            points.push(EdgePoint { r_cg: root, source });
        }
    }
    points.sort_by(|a, b| a.r_cg.total_cmp(&b.r_cg));
    points.dedup_by(|b, a| (b.r_cg - a.r_cg).abs() <= DEDUP_TOL);
    Ok(points)
}

fn score(costs: &DeviceCosts, layer: &LayerSpec, workload: &Workload, r_cg: f64, r_gg: f64) -> (SlicingRates, f64) {
    let rates = SlicingRates::from_cg_gg(r_cg, r_gg).expect("candidate lies on the simplex");
    let stage = stage_times_generation(costs, layer, workload, &rates);
    (rates, finish_time(&stage, layer.gemms as usize))
}

fn pick_best(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    workload: &Workload,
    r_gg: f64,
    xs: impl IntoIterator<Item = f64>,
) -> RateSolution {
    let mut candidates = Vec::new();
    let mut best: Option<(SlicingRates, f64)> = None;
    for r_cg in xs {
        let (rates, t_fin) = score(costs, layer, workload, r_cg, r_gg);
        candidates.push(Candidate { r_cg, t_fin });
        // Strict comparison over ascending r_CG keeps the smallest r_CG on ties.
        if best.is_none_or(|(_, t)| t_fin < t) {
            best = Some((rates, t_fin));
        }
    }
    let (rates, t_fin) = best.expect("at least one candidate");
    let stage = stage_times_generation(costs, layer, workload, &rates);
    let case_label = evaluate_recurrence(&stage, layer.gemms as usize).case_label;
    RateSolution {
        rates,
        t_fin,
        case_label,
        candidates,
    }
}

/// Minimises `t_fin` over `r_CG` in `[0, 1 - r_GG]` by scoring every edge
/// point with the recurrence.
pub fn solve_rcg(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    workload: &Workload,
    r_gg: f64,
) -> Result<RateSolution, PipelineError> {
    solve_rcg_with_epsilon(costs, layer, workload, r_gg, DEFAULT_EPSILON)
}

pub fn solve_rcg_with_epsilon(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    workload: &Workload,
    r_gg: f64,
    epsilon: f64,
) -> Result<RateSolution, PipelineError> {
    let points = edge_points_with_epsilon(costs, layer, workload, r_gg, epsilon)?;
    Ok(pick_best(costs, layer, workload, r_gg, points.iter().map(|p| p.r_cg)))
}

/// Brute-force reference: scores `grid_n` evenly spaced `r_CG` values over
/// `[0, 1 - r_GG]`, endpoints included.
pub fn solve_rates_grid(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    workload: &Workload,
    r_gg: f64,
    grid_n: usize,
) -> Result<RateSolution, PipelineError> {
    assert!(grid_n >= 2, "grid needs both endpoints");
    let r_gg = check_rgg(r_gg)?;
    let upper = (1.0 - r_gg).max(0.0);
    let last = grid_n - 1;
    let xs = (0..grid_n).map(move |k| {
        if k == last {
            upper
        } else {
            upper * k as f64 / last as f64
        }
    });
    Ok(pick_best(costs, layer, workload, r_gg, xs))
}

/// Upper bound on `|d t_fin / d r_CG|` away from the jumps at the interval
/// ends.
pub fn lipschitz_bound(costs: &DeviceCosts, layer: &LayerSpec, workload: &Workload) -> f64 {
    let n = layer.gemms as f64;
    let work = layer.gemm_work(workload.tokens);
    n * (layer.weight_bytes() * costs.pcie.beta + work * costs.gpu.beta + work * costs.cpu.beta)
}
