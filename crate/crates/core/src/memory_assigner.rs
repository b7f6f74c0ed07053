//! Greedy per-layer choice of `r_GG` under a GPU memory budget.
//!
//! Each layer's `r_GG` moves on the grid `{i / n_steps}`. Raising layer `j`
//! from `v_prev` to `v` is scored by the completion time it saves per byte of
//! GPU memory it costs:
//!
//! ```text
//! s = (t*(v_prev) - t*(v)) / ((v - v_prev) * n_m[j])
//! ```
//!
//! where `t*(v)` is the optimal `t_fin` from [`solve_rcg`] at `r_GG = v`.
//! Every iteration takes the best-scoring move that still fits the budget and
//! stops when nothing fits or no move saves time.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perf_model::DeviceCosts;
use crate::pipeline::{LayerSpec, PipelineError, Workload};
use crate::rate_solver::solve_rcg;

pub const DEFAULT_STEPS: u32 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum AssignError {
    #[error("importance needs v_i > v_prev, got v_prev = {v_prev}, v_i = {v_i}")]
    NonIncreasingStep { v_prev: f64, v_i: f64 },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Time saved per byte of GPU memory when raising a layer's `r_GG` from
/// `v_prev` to `v_i`.
pub fn importance(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    workload: &Workload,
    v_prev: f64,
    v_i: f64,
) -> Result<f64, AssignError> {
    // Written so that NaN is rejected too.
    let increasing = v_i > v_prev;
    if !increasing {
        return Err(AssignError::NonIncreasingStep { v_prev, v_i });
    }
    let before = solve_rcg(costs, layer, workload, v_prev)?.t_fin;
    let after = solve_rcg(costs, layer, workload, v_i)?.t_fin;
    Ok((before - after) / ((v_i - v_prev) * layer.layer_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub layer: usize,
    pub v_prev: f64,
    pub v_chosen: f64,
    pub importance: f64,
    pub bytes_used: f64,
    pub total_t_fin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub per_layer_rgg: Vec<f64>,
    pub per_layer_t_fin: Vec<f64>,
    pub n_steps: u32,
    pub bytes_used: f64,
    pub budget: f64,
    pub iterations: usize,
    /// Sum of per-layer optimal `t_fin` with every `r_GG = 0`.
    pub baseline_total_t_fin: f64,
    pub total_t_fin: f64,
    pub trace: Vec<TraceEntry>,
}

/// `t*(i / n_steps)` for `i = 0..=n_steps`.
fn t_star_table(costs: &DeviceCosts, layer: &LayerSpec, workload: &Workload, n_steps: u32) -> Vec<f64> {
    (0..=n_steps)
        .map(|i| {
            solve_rcg(costs, layer, workload, step_rate(i, n_steps))
                .expect("grid rates lie in [0, 1]")
                .t_fin
        })
        .collect()
}

fn step_rate(i: u32, n_steps: u32) -> f64 {
    i as f64 / n_steps as f64
}

fn bytes_for(steps: &[u32], layers: &[LayerSpec], n_steps: u32) -> f64 {
    steps
        .iter()
        .zip(layers)
        .map(|(&s, l)| step_rate(s, n_steps) * l.layer_bytes())
        .sum()
}

/// Greedy GPU memory assignment across `layers`. Ties go to the lowest layer
/// index, then the smallest `v_i`.
pub fn greedy_assign(
    costs: &DeviceCosts,
    layers: &[LayerSpec],
    workload: &Workload,
    budget: f64,
    n_steps: u32,
) -> MemoryPlan {
    assert!(n_steps >= 1, "n_steps must be >= 1");
    let budget = budget.max(0.0);

    let mut distinct: Vec<LayerSpec> = Vec::new();
    for l in layers {
        if !distinct.contains(l) {
            distinct.push(*l);
        }
    }
    let tables: HashMap<LayerSpec, Vec<f64>> = distinct
        .par_iter()
        .map(|l| (*l, t_star_table(costs, l, workload, n_steps)))
        .collect();
    let table: Vec<&Vec<f64>> = layers.iter().map(|l| &tables[l]).collect();

    let mut steps = vec![0u32; layers.len()];
    let total = |steps: &[u32]| -> f64 { steps.iter().zip(&table).map(|(&s, t)| t[s as usize]).sum() };
    let baseline_total_t_fin = total(&steps);
    let mut bytes_used = 0.0;
    let mut trace = Vec::new();

    loop {
        let mut best: Option<(usize, u32, f64)> = None;
        for (j, layer) in layers.iter().enumerate() {
            let cur = steps[j];
            let n_m = layer.layer_bytes();
            let v_prev = step_rate(cur, n_steps);
            for i in cur + 1..=n_steps {
                let v = step_rate(i, n_steps);
                let delta = (v - v_prev) * n_m;
                if bytes_used + delta > budget * (1.0 + 1e-12) {
                    break;
                }
                let s = (table[j][cur as usize] - table[j][i as usize]) / delta;
                if s > 0.0 && best.is_none_or(|(_, _, b)| s > b) {
                    // Exact budget check on the would-be plan.
                    let mut trial = steps.clone();
                    trial[j] = i;
                    if bytes_for(&trial, layers, n_steps) <= budget {
                        best = Some((j, i, s));
                    }
                }
            }
        }
        let Some((j, i, s)) = best else { break };
        let v_prev = step_rate(steps[j], n_steps);
        steps[j] = i;
        bytes_used = bytes_for(&steps, layers, n_steps);
        trace.push(TraceEntry {
            iteration: trace.len() + 1,
            layer: j,
            v_prev,
            v_chosen: step_rate(i, n_steps),
            importance: s,
            bytes_used,
            total_t_fin: total(&steps),
        });
    }

    MemoryPlan {
        per_layer_rgg: steps.iter().map(|&s| step_rate(s, n_steps)).collect(),
        per_layer_t_fin: steps.iter().zip(&table).map(|(&s, t)| t[s as usize]).collect(),
        n_steps,
        bytes_used,
        budget,
        iterations: trace.len(),
        baseline_total_t_fin,
        total_t_fin: total(&steps),
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perf_model::{PerfCoeffs, Precision};
    use crate::presets::Testbed;

    fn layer() -> LayerSpec {
        LayerSpec::new(4096, 14336, 2, Precision::Fp16).unwrap()
    }

    fn costs_a() -> DeviceCosts {
        Testbed::A.profile().costs(Precision::Fp16).unwrap()
    }

    #[test]
    fn free_gpu_has_positive_importance() {
        let c = DeviceCosts {
            gpu: PerfCoeffs::ZERO,
            launch: 0.0,
            ..costs_a()
        };
        let s = importance(&c, &layer(), &Workload::generation(1), 0.0, 0.5).unwrap();
        assert!(s > 0.0);
    }

    #[test]
    fn non_increasing_step_is_rejected() {
        let c = costs_a();
        assert!(matches!(
            importance(&c, &layer(), &Workload::generation(1), 0.5, 0.5),
            Err(AssignError::NonIncreasingStep { .. })
        ));
        assert!(importance(&c, &layer(), &Workload::generation(1), 0.5, 0.25).is_err());
    }

    #[test]
    fn zero_when_nothing_changes() {
        // A layer with no cost at all: t* = 0 everywhere.
        let c = DeviceCosts {
            precision: Precision::Fp16,
            gpu: PerfCoeffs::ZERO,
            cpu: PerfCoeffs::ZERO,
            pcie: PerfCoeffs::ZERO,
            launch: 0.0,
        };
        assert_eq!(
            importance(&c, &layer(), &Workload::generation(1), 0.25, 0.5).unwrap(),
            0.0
        );
    }

    #[test]
    fn zero_budget_plan() {
        let plan = greedy_assign(&costs_a(), &[layer(), layer()], &Workload::generation(1), 0.0, 16);
        assert_eq!(plan.per_layer_rgg, vec![0.0, 0.0]);
        assert_eq!(plan.iterations, 0);
        assert_eq!(plan.bytes_used, 0.0);
        assert_eq!(plan.total_t_fin, plan.baseline_total_t_fin);
    }

    #[test]
    fn saturates_when_gpu_dominates() {
        let c = costs_a().with_cpu_slope_scaled(1e3);
        let c = DeviceCosts {
            pcie: PerfCoeffs::new(c.pcie.alpha, c.pcie.beta * 1e3),
            ..c
        };
        let layers = [layer(), layer(), layer()];
        let budget: f64 = layers.iter().map(|l| l.layer_bytes()).sum();
        let plan = greedy_assign(&c, &layers, &Workload::generation(1), budget, 8);
        assert_eq!(plan.per_layer_rgg, vec![1.0, 1.0, 1.0]);
        assert!(plan.bytes_used <= budget);
    }

    #[test]
    fn whole_layer_placement_with_one_step() {
        let layers = [layer(), layer(), layer()];
        let plan = greedy_assign(
            &costs_a(),
            &layers,
            &Workload::generation(1),
            1.5 * layer().layer_bytes(),
            1,
        );
        assert!(plan.per_layer_rgg.iter().all(|&r| r == 0.0 || r == 1.0));
        assert_eq!(plan.per_layer_rgg, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn trace_is_budget_safe_and_improving() {
        let layers = [layer(), LayerSpec::new(4096, 11008, 3, Precision::Fp16).unwrap()];
        let budget = 0.7 * layers[0].layer_bytes();
        let plan = greedy_assign(&costs_a(), &layers, &Workload::generation(1), budget, 16);
        let mut prev = plan.baseline_total_t_fin;
        for e in &plan.trace {
            assert!(e.bytes_used <= budget);
            assert!(e.total_t_fin < prev);
            assert!(e.importance > 0.0);
            prev = e.total_t_fin;
        }
        assert!(plan.iterations <= 16 * layers.len());
    }
}
