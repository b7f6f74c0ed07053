//! Prompt-phase token diversion.
//!
//! Slicing rates are fixed to the generation-phase optimum. During a prompt
//! pass, `n_g` of the `T` tokens can run on the GPU against the CC weights
//! (copied over PCIe) instead of on the CPU. For `0 < n_g < T` the stage times
//! are affine in `n_g`, so the best integer `n_g` sits next to a crossing of
//! the stage or finish lines, or at `0`, `1`, `T - 1`, `T`, where startup and
//! launch terms switch on or off.

use serde::{Deserialize, Serialize};

use crate::edge::{Affine, AffineStages, EdgeSource};
use crate::perf_model::DeviceCosts;
use crate::pipeline::{
    active, effective, evaluate_recurrence, finish_time, stage_times_prompt, CaseLabel, LayerSpec, PipelineError,
    SlicingRates, StageTimes, TransferMode, Workload,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenCandidate {
    pub n_g: u64,
    pub t_fin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPlan {
    pub n_g: u64,
    pub tokens: u64,
    pub rates: SlicingRates,
    pub t_fin_prompt: f64,
    /// `t_fin` with no diverted tokens.
    pub baseline_t_fin: f64,
    pub stage: StageTimes,
    pub case_label: CaseLabel,
    pub candidates: Vec<TokenCandidate>,
}

impl TokenPlan {
    pub fn speedup(&self) -> f64 {
        if self.t_fin_prompt > 0.0 {
            self.baseline_t_fin / self.t_fin_prompt
        } else {
            1.0
        }
    }
}

/// Prompt stage times as affine functions of `n_g` on `(0, T)`.
pub fn affine_prompt_stages(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    tokens: u64,
    rates: &SlicingRates,
    mode: TransferMode,
) -> AffineStages {
    let (cc, cg, gg) = (
        effective(rates.r_cc()),
        effective(rates.r_cg()),
        effective(rates.r_gg()),
    );
    let (s_cc, s_cg, s_gg) = (active(cc), active(cg), active(gg));
    let mh = layer.model_dim as f64 * layer.hidden_dim as f64;
    let t = tokens as f64;
    // For n_g > 0 both modes pay the alias launch/startup terms; they differ
    // only in how many bytes are copied.
    let bytes = match mode {
        TransferMode::Literal => layer.weight_bytes(),
        TransferMode::ResidentFraction => (cg + cc) * layer.weight_bytes(),
    };
    AffineStages {
        launch: Affine::constant((2.0 * s_cg + 2.0 * s_cc + s_gg) * costs.launch),
        transfer: Affine::constant(costs.pcie.alpha * (s_cg + s_cc) + bytes * costs.pcie.beta),
        gpu: Affine::new(
            costs.gpu.alpha * (s_cg + s_gg + s_cc) + t * (cg + gg) * mh * costs.gpu.beta,
            cc * mh * costs.gpu.beta,
        ),
        cpu: Affine::new(
            costs.cpu.alpha * s_cc + t * cc * mh * costs.cpu.beta,
            -cc * mh * costs.cpu.beta,
        ),
    }
}

/// Integer candidates for `n_g`, ascending and unique.
pub fn token_edge_points(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    tokens: u64,
    rates: &SlicingRates,
    mode: TransferMode,
) -> Vec<(u64, EdgeSource)> {
    let mut pts = vec![(0, EdgeSource::LowerBound), (tokens, EdgeSource::UpperBound)];
    if tokens >= 1 {
        pts.push((1, EdgeSource::AboveLowerBound));
        pts.push((tokens - 1, EdgeSource::BelowUpperBound));
    }
    let stages = affine_prompt_stages(costs, layer, tokens, rates, mode);
    let t = tokens as f64;
    for (root, source) in stages.boundary_roots(layer.gemms as usize) {
        if root > 0.0 && root < t {
            pts.push((root.floor() as u64, source));
            pts.push((root.ceil().min(t) as u64, source));
        }
    }
    pts.sort_by_key(|p| p.0);
    pts.dedup_by_key(|p| p.0);
    pts
}

/// Best integer `n_g` for one layer with the given (fixed) rates.
pub fn solve_ng(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    tokens: u64,
    rates: &SlicingRates,
    mode: TransferMode,
) -> Result<TokenPlan, PipelineError> {
    let workload = Workload::prompt(tokens);
    let n_l = layer.gemms as usize;
    let mut candidates = Vec::new();
    let mut best: Option<(u64, f64, StageTimes)> = None;
    for (n_g, _) in token_edge_points(costs, layer, tokens, rates, mode) {
        let stage = stage_times_prompt(costs, layer, &workload, rates, n_g, mode)?;
        let t_fin = finish_time(&stage, n_l);
        candidates.push(TokenCandidate { n_g, t_fin });
        if best.is_none_or(|(_, t, _)| t_fin < t) {
            best = Some((n_g, t_fin, stage));
        }
    }
    let (n_g, t_fin_prompt, stage) = best.expect("n_g = 0 is always a candidate");
    let baseline_t_fin = candidates[0].t_fin;
    debug_assert_eq!(candidates[0].n_g, 0);
    Ok(TokenPlan {
        n_g,
        tokens,
        rates: *rates,
        t_fin_prompt,
        baseline_t_fin,
        stage,
        case_label: evaluate_recurrence(&stage, n_l).case_label,
        candidates,
    })
}

/// `baseline_t_fin / t_fin_prompt` of [`solve_ng`]; at least 1.
pub fn prompt_speedup(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    tokens: u64,
    rates: &SlicingRates,
    mode: TransferMode,
) -> Result<f64, PipelineError> {
    Ok(solve_ng(costs, layer, tokens, rates, mode)?.speedup())
}
