//! `sliceplan`: fit CPU/GPU cost profiles and plan weight slicing for
//! offloaded MLP/MoE layers.
//!
//! Exit codes: 0 success, 1 internal inconsistency (two evaluations of the
//! same schedule disagree), 2 bad input.

mod commands;
mod inputs;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sliceplan_core::{OpClass, Precision};

use commands::{Deferred, Inconsistency, ModeArg, PhaseArg, RggArg};
use output::{Format, Rendered};

#[derive(Parser)]
#[command(name = "sliceplan", version, about = "CPU/GPU weight slicing planner")]
struct Cli {
    /// Output format
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    /// Write the main output here instead of stdout
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a hardware profile from profiling samples
    Fit {
        /// CSV with header op_class,workload_n,elapsed_s
        #[arg(long)]
        samples: PathBuf,
        /// Where to write the profile JSON
        #[arg(long)]
        out: Option<PathBuf>,
        /// Precision the GEMM samples were taken at
        #[arg(long, value_parser = parse_precision, default_value = "fp16")]
        precision: Precision,
        #[arg(long, default_value = "fitted")]
        testbed: String,
    },

    /// Synthetic profiling samples drawn from a profile
    #[command(hide = true)]
    GenSamples {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, value_parser = parse_precision, default_value = "fp16")]
        precision: Precision,
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Relative uniform noise, e.g. 0.01 for +-1%
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, env = "SLICEPLAN_SEED", default_value_t = 0)]
        seed: u64,
        /// Only emit these classes (repeatable)
        #[arg(long = "class", value_parser = parse_op_class)]
        classes: Vec<OpClass>,
    },

    /// Optimal CG rate per layer for a given or budget-derived GG rate
    SolveRates {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        tokens: u64,
        #[arg(long, value_enum, default_value = "gen")]
        phase: PhaseArg,
        /// r_GG in [0, 1], or `auto` to take it from the memory assignment
        #[arg(long, default_value = "0")]
        rgg: RggArg,
        /// GPU bytes for sliced weights, used with --rgg auto
        #[arg(long)]
        budget_bytes: Option<f64>,
        #[arg(long, default_value_t = sliceplan_core::memory_assigner::DEFAULT_STEPS)]
        steps: u32,
    },

    /// Greedy per-layer r_GG under a GPU memory budget
    AssignMemory {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        budget_bytes: f64,
        #[arg(long, default_value_t = sliceplan_core::memory_assigner::DEFAULT_STEPS)]
        steps: u32,
        /// Generation batch size
        #[arg(long, default_value_t = 1)]
        tokens: u64,
    },

    /// Prompt tokens to divert from the CPU to the GPU, per layer
    AssignTokens {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokens: u64,
        /// Rates file; defaults to the generation optimum with r_GG = 0
        #[arg(long)]
        rates: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "literal")]
        transfer_mode: ModeArg,
    },

    /// Memory assignment, rates and token assignment in one report
    Plan {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        budget_bytes: f64,
        #[arg(long, default_value_t = 512)]
        prompt_tokens: u64,
        #[arg(long, default_value_t = 1)]
        gen_tokens: u64,
        #[arg(long, default_value_t = sliceplan_core::memory_assigner::DEFAULT_STEPS)]
        steps: u32,
        #[arg(long, value_enum, default_value = "literal")]
        transfer_mode: ModeArg,
        /// Also write the generation-phase Gantt records here
        #[arg(long)]
        timeline_out: Option<PathBuf>,
    },

    /// Replay layers through the recurrence and the event simulator
    Simulate {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Rates file (a plan report works too)
        #[arg(long)]
        rates: PathBuf,
        #[arg(long, default_value_t = 1)]
        tokens: u64,
        #[arg(long, value_enum, default_value = "gen")]
        phase: PhaseArg,
        /// Diverted prompt tokens; overrides n_g from the rates file
        #[arg(long)]
        n_g: Option<u64>,
        #[arg(long, value_enum, default_value = "literal")]
        transfer_mode: ModeArg,
    },

    /// Check that sliced MLP outputs recombine to the dense result
    VerifySlicing {
        #[arg(long, env = "SLICEPLAN_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        max_dim: usize,
        #[arg(long, default_value_t = 8)]
        max_tokens: usize,
    },

    /// Coefficient table for a profile, optionally with per-shape summaries
    Report {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        tokens: u64,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown precision {s:?}; expected fp16 or int4"))
}

fn parse_op_class(s: &str) -> Result<OpClass, String> {
    s.parse()
}

fn run(cli: &Cli) -> anyhow::Result<(Rendered, Format)> {
    use commands::*;
    let (rendered, default) = match &cli.command {
        Command::Fit {
            samples,
            out,
            precision,
            testbed,
        } => (
            fit(&FitArgs {
                samples: samples.clone(),
                out: out.clone(),
                precision: *precision,
                testbed: testbed.clone(),
            })?,
            Format::Text,
        ),
        Command::GenSamples {
            profile,
            precision,
            points,
            noise,
            seed,
            classes,
        } => (
            gen_samples(&GenSamplesArgs {
                profile: profile.clone(),
                precision: *precision,
                points: *points,
                noise: *noise,
                seed: *seed,
                classes: classes.clone(),
            })?,
            Format::Csv,
        ),
        Command::SolveRates {
            profile,
            model,
            tokens,
            phase,
            rgg,
            budget_bytes,
            steps,
        } => (
            solve_rates(&SolveRatesArgs {
                profile: profile.clone(),
                model: model.clone(),
                tokens: *tokens,
                phase: *phase,
                rgg: *rgg,
                budget_bytes: *budget_bytes,
                steps: *steps,
            })?,
            Format::Json,
        ),
        Command::AssignMemory {
            profile,
            model,
            budget_bytes,
            steps,
            tokens,
        } => (
            assign_memory(&AssignMemoryArgs {
                profile: profile.clone(),
                model: model.clone(),
                budget_bytes: *budget_bytes,
                steps: *steps,
                tokens: *tokens,
            })?,
            Format::Json,
        ),
        Command::AssignTokens {
            profile,
            model,
            tokens,
            rates,
            transfer_mode,
        } => (
            assign_tokens(&AssignTokensArgs {
                profile: profile.clone(),
                model: model.clone(),
                tokens: *tokens,
                rates: rates.clone(),
                mode: *transfer_mode,
            })?,
            Format::Json,
        ),
        Command::Plan {
            profile,
            model,
            budget_bytes,
            prompt_tokens,
            gen_tokens,
            steps,
            transfer_mode,
            timeline_out,
        } => (
            plan(&PlanArgs {
                profile: profile.clone(),
                model: model.clone(),
                budget_bytes: *budget_bytes,
                prompt_tokens: *prompt_tokens,
                gen_tokens: *gen_tokens,
                steps: *steps,
                mode: *transfer_mode,
                timeline_out: timeline_out.clone(),
            })?,
            Format::Json,
        ),
        Command::Simulate {
            profile,
            model,
            rates,
            tokens,
            phase,
            n_g,
            transfer_mode,
        } => (
            simulate(&SimulateArgs {
                profile: profile.clone(),
                model: model.clone(),
                rates: rates.clone(),
                tokens: *tokens,
                phase: *phase,
                n_g: *n_g,
                mode: *transfer_mode,
            })?,
            Format::Json,
        ),
        Command::VerifySlicing {
            seed,
            trials,
            max_dim,
            max_tokens,
        } => (
            verify_slicing(&VerifySlicingArgs {
                seed: *seed,
                trials: *trials,
                max_dim: *max_dim,
                max_tokens: *max_tokens,
            })?,
            Format::Text,
        ),
        Command::Report { profile, model, tokens } => (
            report(&ReportArgs {
                profile: profile.clone(),
                model: model.clone(),
                tokens: *tokens,
            })?,
            Format::Text,
        ),
    };
    Ok((rendered, cli.format.unwrap_or(default)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok((rendered, format)) => match rendered.emit(format, cli.output.as_deref()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
        Err(e) => {
            if let Some(Deferred(rendered)) = e.downcast_ref::<Deferred>() {
                let format = cli.format.unwrap_or(Format::Json);
                if let Err(write_err) = rendered.emit(format, cli.output.as_deref()) {
                    eprintln!("error: {write_err:#}");
                }
            }
            if let Some(inc) = e.downcast_ref::<Inconsistency>() {
                eprintln!("error: {inc}");
                return ExitCode::from(1);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
