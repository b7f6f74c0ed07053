use super::{active, effective, LayerSpec, PipelineError, SlicingRates, StageTimes, TransferMode, Workload};
use crate::perf_model::DeviceCosts;

/// Bytes per activation element copied back when the CC partial result is
/// moved to the GPU.
pub const ACTIVATION_BYTES: f64 = 2.0;

/// Stage times for a single-executor token batch (generation phase, or a
/// prompt with no diverted tokens).
///
/// A CG slice needs two launches (copy and kernel), a GG slice one.
pub fn stage_times_generation(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    workload: &Workload,
    rates: &SlicingRates,
) -> StageTimes {
    let (cc, cg, gg) = (
        effective(rates.r_cc()),
        effective(rates.r_cg()),
        effective(rates.r_gg()),
    );
    let (s_cc, s_cg, s_gg) = (active(cc), active(cg), active(gg));
    let work = layer.gemm_work(workload.tokens);
    StageTimes {
        launch: (2.0 * s_cg + s_gg) * costs.launch,
        transfer: s_cg * (costs.pcie.alpha + cg * layer.weight_bytes() * costs.pcie.beta),
        gpu: costs.gpu.alpha * (s_cg + s_gg) + (cg + gg) * work * costs.gpu.beta,
        cpu: costs.cpu.alpha * s_cc + cc * work * costs.cpu.beta,
    }
}

/// Prompt-phase stage times with `n_g` of the `T` tokens moved from the CC
/// slice to its GPU-executed alias.
pub fn stage_times_prompt(
    costs: &DeviceCosts,
    layer: &LayerSpec,
    workload: &Workload,
    rates: &SlicingRates,
    n_g: u64,
    mode: TransferMode,
) -> Result<StageTimes, PipelineError> {
    let tokens = workload.tokens;
    if n_g > tokens {
        return Err(PipelineError::TokenCountOutOfRange { n_g, tokens });
    }
    let (cc, cg, gg) = (
        effective(rates.r_cc()),
        effective(rates.r_cg()),
        effective(rates.r_gg()),
    );
    let (s_cc, s_cg, s_gg) = (active(cc), active(cg), active(gg));
    let mh = layer.model_dim as f64 * layer.hidden_dim as f64;
    let t = tokens as f64;
    let ng = n_g as f64;
    let cpu_tokens = (tokens - n_g) as f64;

    let (s_alias, copied_bytes) = match mode {
        TransferMode::Literal => (s_cc, layer.weight_bytes()),
        TransferMode::ResidentFraction => {
            let s_alias = if n_g > 0 { s_cc } else { 0.0 };
            (s_alias, (cg + cc * s_alias) * layer.weight_bytes())
        }
    };

    Ok(StageTimes {
        launch: (2.0 * s_cg + 2.0 * s_alias + s_gg) * costs.launch,
        transfer: costs.pcie.alpha * (s_cg + s_alias) + copied_bytes * costs.pcie.beta,
        gpu: costs.gpu.alpha * (s_cg + s_gg + s_alias) + (t * (cg + gg) + ng * cc) * mh * costs.gpu.beta,
        cpu: costs.cpu.alpha * active(cc * cpu_tokens) + cpu_tokens * cc * mh * costs.cpu.beta,
    })
}

/// Cost of copying the CC partial output (`cpu_tokens x M` activations) to
/// the GPU at layer end. Not part of `t_fin`; callers add it explicitly.
pub fn result_transfer_time(costs: &DeviceCosts, layer: &LayerSpec, cpu_tokens: u64, rates: &SlicingRates) -> f64 {
    let s = active(rates.r_cc()) * if cpu_tokens > 0 { 1.0 } else { 0.0 };
    s * (costs.pcie.alpha + cpu_tokens as f64 * layer.model_dim as f64 * ACTIVATION_BYTES * costs.pcie.beta)
}
