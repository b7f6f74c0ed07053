//! Planner and simulator for splitting MLP/MoE weight tensors of an LLM layer
//! across three partitions:
//!
//! * **CC** – stored in host memory, executed on the CPU;
//! * **CG** – stored in host memory, copied over PCIe and executed on the GPU;
//! * **GG** – resident in GPU memory and executed there.
//!
//! The crate fits linear startup/slope cost models from profiling samples
//! ([`perf_model`]), turns slicing rates into per-GEMM stage times and layer
//! completion times ([`pipeline`]), picks the CG rate by enumerating the edge
//! points of the piecewise-linear completion time ([`rate_solver`]), spends a
//! GPU memory budget greedily across layers ([`memory_assigner`]) and chooses
//! how many prompt tokens to divert from the CPU to the GPU
//! ([`token_assigner`]). [`slicing`] is a small dense reference that checks
//! the column/row split recombines to the unsliced MLP output.

pub mod edge;
pub mod memory_assigner;
pub mod perf_model;
pub mod pipeline;
pub mod presets;
pub mod rate_solver;
pub mod slicing;
pub mod token_assigner;

pub use perf_model::{DeviceCosts, HardwareProfile, OpClass, PerfCoeffs, Precision, ProfileSample};
pub use pipeline::{CaseLabel, LayerSpec, Phase, SlicingRates, StageTimes, Timeline, TransferMode, Workload};
