use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use sliceplan_core::memory_assigner::{greedy_assign, MemoryPlan};
use sliceplan_core::perf_model::{
    generate_samples, read_samples_csv, save_profile, write_samples_csv, DeviceCosts, SampleGenConfig,
};
use sliceplan_core::pipeline::{
    evaluate_recurrence, simulate_schedule, stage_times_generation, stage_times_prompt, TaskRecord,
};
use sliceplan_core::rate_solver::{solve_rcg, Candidate};
use sliceplan_core::slicing::{mlp_forward_reference, mlp_forward_sliced, slice_weights, Activation, DenseMatrix};
use sliceplan_core::token_assigner::solve_ng;
use sliceplan_core::{
    CaseLabel, HardwareProfile, LayerSpec, OpClass, PerfCoeffs, Precision, SlicingRates, StageTimes, TransferMode,
    Workload,
};

use crate::inputs::{read_model, read_profile, read_rates, sha256_hex, LoadedProfile, Model, RateEntry};
use crate::output::{csv_line, sci, Rendered, OUTPUT_SCHEMA_VERSION};

/// Raised when two independent evaluations disagree; maps to exit code 1.
#[derive(Debug)]
pub struct Inconsistency(pub String);

impl std::fmt::Display for Inconsistency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Inconsistency {}

pub const DEVIATION_LIMIT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PhaseArg {
    #[value(alias = "generation")]
    Gen,
    Prompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Literal,
    ResidentFraction,
}

impl From<ModeArg> for TransferMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Literal => TransferMode::Literal,
            ModeArg::ResidentFraction => TransferMode::ResidentFraction,
        }
    }
}

fn case_str(c: CaseLabel) -> String {
    serde_json::to_value(c)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{c:?}"))
}

#[derive(Serialize)]
struct Provenance<'a> {
    schema_version: u32,
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    profile_sha256: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

fn provenance<'a>(command: &'a str, profile: Option<&'a LoadedProfile>, model: Option<&'a Model>) -> Provenance<'a> {
    Provenance {
        schema_version: OUTPUT_SCHEMA_VERSION,
        command,
        profile_sha256: profile.map(|p| p.sha256.as_str()),
        model: model.map(|m| m.file.name.as_str()),
    }
}

fn rates_json(r: &SlicingRates) -> RateEntry {
    RateEntry::new(r, None)
}

// ---------------------------------------------------------------- fit

pub struct FitArgs {
    pub samples: PathBuf,
    pub out: Option<PathBuf>,
    pub precision: Precision,
    pub testbed: String,
}

fn table_rows(profile: &HardwareProfile) -> Vec<(String, String, &'static str, PerfCoeffs)> {
    let mut rows = Vec::new();
    for (prec, g) in &profile.gemm {
        if let Some(c) = g.gpu {
            rows.push(("gpu_gemm".to_string(), prec.as_str().to_string(), "r2", c));
        }
        if let Some(c) = g.cpu {
            rows.push(("cpu_gemm".to_string(), prec.as_str().to_string(), "r2", c));
        }
    }
    if let Some(c) = profile.pcie {
        rows.push(("c2g".to_string(), "-".to_string(), "r2", c));
    }
    if let Some(c) = profile.launch {
        rows.push(("launch".to_string(), "-".to_string(), "sigma2", c));
    }
    rows
}

fn coefficient_table(profile: &HardwareProfile) -> (String, String) {
    let rows = table_rows(profile);
    let mut text = format!(
        "testbed {}\n{:<10} {:<9} {:>12} {:>12} {:>12}\n",
        profile.testbed, "op_class", "precision", "alpha", "beta", "r2/sigma2"
    );
    let mut csv = csv_line(&[
        "op_class".into(),
        "precision".into(),
        "alpha".into(),
        "beta".into(),
        "quality_kind".into(),
        "quality".into(),
    ]);
    for (class, prec, kind, c) in rows {
        text.push_str(&format!(
            "{class:<10} {prec:<9} {:>12} {:>12} {:>12}\n",
            sci(c.alpha),
            sci(c.beta),
            sci(c.fit_quality)
        ));
        csv.push_str(&csv_line(&[
            class,
            prec,
            format!("{:?}", c.alpha),
            format!("{:?}", c.beta),
            kind.into(),
            format!("{:?}", c.fit_quality),
        ]));
    }
    (text, csv)
}

pub fn fit(args: &FitArgs) -> Result<Rendered> {
    let file = fs::File::open(&args.samples).with_context(|| format!("opening {}", args.samples.display()))?;
    let samples = read_samples_csv(file).with_context(|| format!("samples {}", args.samples.display()))?;
    if samples.is_empty() {
        bail!("samples {}: no rows after the header", args.samples.display());
    }
    let (profile, missing) = HardwareProfile::fit(&args.testbed, args.precision, &samples)?;
    for class in &missing {
        eprintln!(
            "warning: no {} samples; the profile has no {} coefficients",
            class.as_str(),
            class.as_str()
        );
    }
    let bytes = save_profile(&profile);
    if let Some(out) = &args.out {
        fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    }
    let (text, csv) = coefficient_table(&profile);
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        head: Provenance<'a>,
        missing: Vec<&'static str>,
        profile: serde_json::Value,
    }
    let sha = sha256_hex(&bytes);
    let report = Report {
        head: Provenance {
            schema_version: OUTPUT_SCHEMA_VERSION,
            command: "fit",
            profile_sha256: Some(&sha),
            model: None,
        },
        missing: missing.iter().map(|c| c.as_str()).collect(),
        profile: serde_json::from_slice(&bytes)?,
    };
    Ok(Rendered::new(&report, csv, text))
}

// ---------------------------------------------------------------- gen-samples

pub struct GenSamplesArgs {
    pub profile: PathBuf,
    pub precision: Precision,
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
    pub classes: Vec<OpClass>,
}

pub fn gen_samples(args: &GenSamplesArgs) -> Result<Rendered> {
    let profile = read_profile(&args.profile)?;
    let costs = profile.costs(args.precision)?;
    if !(0.0..1.0).contains(&args.noise) {
        bail!("--noise must lie in [0, 1)");
    }
    let samples: Vec<_> = generate_samples(
        &costs,
        &SampleGenConfig {
            points: args.points,
            noise: args.noise,
            seed: args.seed,
        },
    )
    .into_iter()
    .filter(|s| args.classes.is_empty() || args.classes.contains(&s.op_class))
    .collect();
    let mut buf = Vec::new();
    write_samples_csv(&mut buf, &samples)?;
    let csv = String::from_utf8(buf).expect("csv is utf-8");
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        head: Provenance<'a>,
        seed: u64,
        noise: f64,
        samples: &'a [sliceplan_core::ProfileSample],
    }
    let report = Report {
        head: provenance("gen-samples", Some(&profile), None),
        seed: args.seed,
        noise: args.noise,
        samples: &samples,
    };
    Ok(Rendered::new(&report, csv.clone(), csv))
}

// ---------------------------------------------------------------- solve-rates

#[derive(Debug, Clone, Copy)]
pub enum RggArg {
    Fixed(f64),
    Auto,
}

impl std::str::FromStr for RggArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(RggArg::Auto);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| format!("expected a rate in [0, 1] or `auto`, got {s:?}"))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("r_GG must lie in [0, 1], got {v}"));
        }
        Ok(RggArg::Fixed(v))
    }
}

pub struct SolveRatesArgs {
    pub profile: PathBuf,
    pub model: PathBuf,
    pub tokens: u64,
    pub phase: PhaseArg,
    pub rgg: RggArg,
    pub budget_bytes: Option<f64>,
    pub steps: u32,
}

#[derive(Serialize)]
struct LayerRateReport {
    index: usize,
    model_dim: u64,
    hidden_dim: u64,
    gemms: u32,
    rates: RateEntry,
    t_fin: f64,
    case_label: CaseLabel,
    candidates: Vec<Candidate>,
}

fn workload(tokens: u64, phase: PhaseArg) -> Result<Workload> {
    if tokens == 0 {
        bail!("--tokens must be >= 1");
    }
    Ok(match phase {
        PhaseArg::Gen => Workload::generation(tokens),
        PhaseArg::Prompt => Workload::prompt(tokens),
    })
}

fn ensure_positive_budget(b: f64) -> Result<f64> {
    if !(b.is_finite() && b >= 0.0) {
        bail!("--budget-bytes must be a nonnegative number");
    }
    Ok(b)
}

pub fn solve_rates(args: &SolveRatesArgs) -> Result<Rendered> {
    let profile = read_profile(&args.profile)?;
    let model = read_model(&args.model)?;
    let costs = profile.costs(model.file.precision)?;
    let w = workload(args.tokens, args.phase)?;
    let rggs: Vec<f64> = match args.rgg {
        RggArg::Fixed(v) => vec![v; model.layers.len()],
        RggArg::Auto => {
            let budget = args.budget_bytes.context("--rgg auto needs --budget-bytes")?;
            greedy_assign(&costs, &model.layers, &w, ensure_positive_budget(budget)?, args.steps).per_layer_rgg
        }
    };
    let layers: Vec<LayerRateReport> = model
        .layers
        .par_iter()
        .zip(rggs.par_iter())
        .enumerate()
        .map(|(index, (l, &r_gg))| {
            let sol = solve_rcg(&costs, l, &w, r_gg)?;
            Ok(LayerRateReport {
                index,
                model_dim: l.model_dim,
                hidden_dim: l.hidden_dim,
                gemms: l.gemms,
                rates: rates_json(&sol.rates),
                t_fin: sol.t_fin,
                case_label: sol.case_label,
                candidates: sol.candidates,
            })
        })
        .collect::<Result<_>>()?;
    let total_t_fin: f64 = layers.iter().map(|l| l.t_fin).sum();

    let mut csv = csv_line(
        &[
            "index",
            "model_dim",
            "hidden_dim",
            "gemms",
            "r_cc",
            "r_cg",
            "r_gg",
            "t_fin",
            "case_label",
        ]
        .map(String::from),
    );
    let mut text = format!(
        "model {} ({}), {} tokens\n",
        model.file.name,
        model.file.precision.as_str(),
        args.tokens
    );
    for l in &layers {
        csv.push_str(&csv_line(&[
            l.index.to_string(),
            l.model_dim.to_string(),
            l.hidden_dim.to_string(),
            l.gemms.to_string(),
            format!("{:?}", l.rates.r_cc),
            format!("{:?}", l.rates.r_cg),
            format!("{:?}", l.rates.r_gg),
            format!("{:?}", l.t_fin),
            case_str(l.case_label),
        ]));
        text.push_str(&format!(
            "layer {:>3}: r_cc {:.4} r_cg {:.4} r_gg {:.4}  t_fin {}  {}\n",
            l.index,
            l.rates.r_cc,
            l.rates.r_cg,
            l.rates.r_gg,
            sci(l.t_fin),
            case_str(l.case_label)
        ));
    }
    text.push_str(&format!("total t_fin {}\n", sci(total_t_fin)));

    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        head: Provenance<'a>,
        tokens: u64,
        total_t_fin: f64,
        layers: Vec<LayerRateReport>,
        rates: Vec<RateEntry>,
    }
    let rates = layers.iter().map(|l| l.rates).collect();
    let report = Report {
        head: provenance("solve-rates", Some(&profile), Some(&model)),
        tokens: args.tokens,
        total_t_fin,
        layers,
        rates,
    };
    Ok(Rendered::new(&report, csv, text))
}

// ---------------------------------------------------------------- assign-memory

pub struct AssignMemoryArgs {
    pub profile: PathBuf,
    pub model: PathBuf,
    pub budget_bytes: f64,
    pub steps: u32,
    pub tokens: u64,
}

fn memory_text(plan: &MemoryPlan) -> String {
    let mut text = format!(
        "budget {} bytes, used {} bytes, {} iterations\nsum t_fin {} -> {}\n",
        plan.budget,
        plan.bytes_used,
        plan.iterations,
        sci(plan.baseline_total_t_fin),
        sci(plan.total_t_fin)
    );
    for (j, r) in plan.per_layer_rgg.iter().enumerate() {
        text.push_str(&format!(
            "layer {j:>3}: r_gg {r:.4}  t_fin {}\n",
            sci(plan.per_layer_t_fin[j])
        ));
    }
    text
}

pub fn assign_memory(args: &AssignMemoryArgs) -> Result<Rendered> {
    let profile = read_profile(&args.profile)?;
    let model = read_model(&args.model)?;
    let costs = profile.costs(model.file.precision)?;
    if args.steps == 0 {
        bail!("--steps must be >= 1");
    }
    let plan = greedy_assign(
        &costs,
        &model.layers,
        &workload(args.tokens, PhaseArg::Gen)?,
        ensure_positive_budget(args.budget_bytes)?,
        args.steps,
    );
    let mut csv = csv_line(
        &[
            "iteration",
            "layer",
            "v_prev",
            "v_chosen",
            "importance",
            "bytes_used",
            "total_t_fin",
        ]
        .map(String::from),
    );
    for e in &plan.trace {
        csv.push_str(&csv_line(&[
            e.iteration.to_string(),
            e.layer.to_string(),
            format!("{:?}", e.v_prev),
            format!("{:?}", e.v_chosen),
            format!("{:?}", e.importance),
            format!("{:?}", e.bytes_used),
            format!("{:?}", e.total_t_fin),
        ]));
    }
    let text = memory_text(&plan);
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        head: Provenance<'a>,
        #[serde(flatten)]
        plan: &'a MemoryPlan,
    }
    let report = Report {
        head: provenance("assign-memory", Some(&profile), Some(&model)),
        plan: &plan,
    };
    Ok(Rendered::new(&report, csv, text))
}

// ---------------------------------------------------------------- assign-tokens

pub struct AssignTokensArgs {
    pub profile: PathBuf,
    pub model: PathBuf,
    pub tokens: u64,
    pub rates: Option<PathBuf>,
    pub mode: ModeArg,
}

#[derive(Serialize, Clone)]
struct LayerTokenReport {
    index: usize,
    n_g: u64,
    rates: RateEntry,
    t_fin_prompt: f64,
    baseline_t_fin: f64,
    speedup: f64,
    case_label: CaseLabel,
}

/// `solve_ng` once per distinct (shape, rates) pair, shared across repeats.
fn token_plans(
    costs: &DeviceCosts,
    layers: &[LayerSpec],
    rates: &[SlicingRates],
    tokens: u64,
    mode: TransferMode,
) -> Result<Vec<LayerTokenReport>> {
    let mut keys: Vec<(LayerSpec, SlicingRates)> = Vec::new();
    for (l, r) in layers.iter().zip(rates) {
        if !keys.contains(&(*l, *r)) {
            keys.push((*l, *r));
        }
    }
    let solved = keys
        .par_iter()
        .map(|(l, r)| solve_ng(costs, l, tokens, r, mode))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(layers
        .iter()
        .zip(rates)
        .enumerate()
        .map(|(index, (l, r))| {
            let k = keys.iter().position(|key| key == &(*l, *r)).expect("key present");
            let p = &solved[k];
            LayerTokenReport {
                index,
                n_g: p.n_g,
                rates: RateEntry::new(r, Some(p.n_g)),
                t_fin_prompt: p.t_fin_prompt,
                baseline_t_fin: p.baseline_t_fin,
                speedup: p.speedup(),
                case_label: p.case_label,
            }
        })
        .collect())
}

fn default_rates(costs: &DeviceCosts, model: &Model) -> Result<Vec<SlicingRates>> {
    model
        .layers
        .iter()
        .map(|l| Ok(solve_rcg(costs, l, &Workload::generation(1), 0.0)?.rates))
        .collect()
}

pub fn assign_tokens(args: &AssignTokensArgs) -> Result<Rendered> {
    let profile = read_profile(&args.profile)?;
    let model = read_model(&args.model)?;
    let costs = profile.costs(model.file.precision)?;
    workload(args.tokens, PhaseArg::Prompt)?;
    let rates: Vec<SlicingRates> = match &args.rates {
        Some(p) => read_rates(p, &model)?.into_iter().map(|r| r.rates).collect(),
        None => default_rates(&costs, &model)?,
    };
    let layers = token_plans(&costs, &model.layers, &rates, args.tokens, args.mode.into())?;
    let total_prompt: f64 = layers.iter().map(|l| l.t_fin_prompt).sum();
    let total_base: f64 = layers.iter().map(|l| l.baseline_t_fin).sum();

    let mut csv = csv_line(&["index", "n_g", "t_fin_prompt", "baseline_t_fin", "speedup"].map(String::from));
    let mut text = format!("{} prompt tokens\n", args.tokens);
    for l in &layers {
        csv.push_str(&csv_line(&[
            l.index.to_string(),
            l.n_g.to_string(),
            format!("{:?}", l.t_fin_prompt),
            format!("{:?}", l.baseline_t_fin),
            format!("{:?}", l.speedup),
        ]));
        text.push_str(&format!(
            "layer {:>3}: n_g {:>6}  t_fin {} (baseline {}, x{:.3})\n",
            l.index,
            l.n_g,
            sci(l.t_fin_prompt),
            sci(l.baseline_t_fin),
            l.speedup
        ));
    }
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        head: Provenance<'a>,
        tokens: u64,
        transfer_mode: TransferMode,
        total_t_fin_prompt: f64,
        total_baseline_t_fin: f64,
        layers: Vec<LayerTokenReport>,
    }
    let report = Report {
        head: provenance("assign-tokens", Some(&profile), Some(&model)),
        tokens: args.tokens,
        transfer_mode: args.mode.into(),
        total_t_fin_prompt: total_prompt,
        total_baseline_t_fin: total_base,
        layers,
    };
    Ok(Rendered::new(&report, csv, text))
}

// ---------------------------------------------------------------- plan

pub struct PlanArgs {
    pub profile: PathBuf,
    pub model: PathBuf,
    pub budget_bytes: f64,
    pub prompt_tokens: u64,
    pub gen_tokens: u64,
    pub steps: u32,
    pub mode: ModeArg,
    pub timeline_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct PlanLayer {
    index: usize,
    model_dim: u64,
    hidden_dim: u64,
    gemms: u32,
    rates: RateEntry,
    gen_t_fin: f64,
    gen_case_label: CaseLabel,
    n_g: u64,
    prompt_t_fin: f64,
    prompt_baseline_t_fin: f64,
}

#[derive(Serialize)]
struct LayerTimeline {
    layer: usize,
    records: Vec<TaskRecord>,
}

pub fn plan(args: &PlanArgs) -> Result<Rendered> {
    let profile = read_profile(&args.profile)?;
    let model = read_model(&args.model)?;
    let costs = profile.costs(model.file.precision)?;
    if args.steps == 0 {
        bail!("--steps must be >= 1");
    }
    let gen = workload(args.gen_tokens, PhaseArg::Gen)?;
    workload(args.prompt_tokens, PhaseArg::Prompt)?;

    let memory = greedy_assign(
        &costs,
        &model.layers,
        &gen,
        ensure_positive_budget(args.budget_bytes)?,
        args.steps,
    );
    let solutions = model
        .layers
        .par_iter()
        .zip(memory.per_layer_rgg.par_iter())
        .map(|(l, &r_gg)| solve_rcg(&costs, l, &gen, r_gg))
        .collect::<Result<Vec<_>, _>>()?;
    let rates: Vec<SlicingRates> = solutions.iter().map(|s| s.rates).collect();
    let tokens = token_plans(&costs, &model.layers, &rates, args.prompt_tokens, args.mode.into())?;

    let layers: Vec<PlanLayer> = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| PlanLayer {
            index: i,
            model_dim: l.model_dim,
            hidden_dim: l.hidden_dim,
            gemms: l.gemms,
            rates: rates_json(&rates[i]),
            gen_t_fin: solutions[i].t_fin,
            gen_case_label: solutions[i].case_label,
            n_g: tokens[i].n_g,
            prompt_t_fin: tokens[i].t_fin_prompt,
            prompt_baseline_t_fin: tokens[i].baseline_t_fin,
        })
        .collect();
    let gen_total: f64 = layers.iter().map(|l| l.gen_t_fin).sum();
    let prompt_total: f64 = layers.iter().map(|l| l.prompt_t_fin).sum();
    let prompt_base: f64 = layers.iter().map(|l| l.prompt_baseline_t_fin).sum();

    let timeline_path = match &args.timeline_out {
        Some(path) => {
            let timelines: Vec<LayerTimeline> = model
                .layers
                .iter()
                .zip(&rates)
                .enumerate()
                .map(|(i, (l, r))| LayerTimeline {
                    layer: i,
                    records: evaluate_recurrence(&stage_times_generation(&costs, l, &gen, r), l.gemms as usize)
                        .records(),
                })
                .collect();
            let mut body = serde_json::to_string_pretty(&timelines)?;
            body.push('\n');
            fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
            Some(path.display().to_string())
        }
        None => None,
    };

    let mut csv = csv_line(
        &[
            "index",
            "model_dim",
            "hidden_dim",
            "gemms",
            "r_cc",
            "r_cg",
            "r_gg",
            "gen_t_fin",
            "n_g",
            "prompt_t_fin",
        ]
        .map(String::from),
    );
    let mut text = format!(
        "model {} ({}), budget {} bytes, {} of it used\n",
        model.file.name,
        model.file.precision.as_str(),
        memory.budget,
        memory.bytes_used
    );
    for l in &layers {
        csv.push_str(&csv_line(&[
            l.index.to_string(),
            l.model_dim.to_string(),
            l.hidden_dim.to_string(),
            l.gemms.to_string(),
            format!("{:?}", l.rates.r_cc),
            format!("{:?}", l.rates.r_cg),
            format!("{:?}", l.rates.r_gg),
            format!("{:?}", l.gen_t_fin),
            l.n_g.to_string(),
            format!("{:?}", l.prompt_t_fin),
        ]));
        text.push_str(&format!(
            "layer {:>3}: r_cc {:.4} r_cg {:.4} r_gg {:.4}  gen {}  n_g {:>6}  prompt {}\n",
            l.index,
            l.rates.r_cc,
            l.rates.r_cg,
            l.rates.r_gg,
            sci(l.gen_t_fin),
            l.n_g,
            sci(l.prompt_t_fin)
        ));
    }
    text.push_str(&format!(
        "generation t_fin {} per step\nprompt t_fin {} ({} without token assignment)\n",
        sci(gen_total),
        sci(prompt_total),
        sci(prompt_base)
    ));

    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        head: Provenance<'a>,
        prompt_tokens: u64,
        gen_tokens: u64,
        transfer_mode: TransferMode,
        gen_t_fin: f64,
        prompt_t_fin: f64,
        prompt_baseline_t_fin: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        timeline: Option<String>,
        layers: Vec<PlanLayer>,
        memory: MemoryPlan,
        /// Same shape as a rates file, so the report can be fed to `simulate`.
        rates: Vec<RateEntry>,
    }
    let rate_entries = layers
        .iter()
        .map(|l| RateEntry {
            n_g: Some(l.n_g),
            ..l.rates
        })
        .collect();
    let report = Report {
        head: provenance("plan", Some(&profile), Some(&model)),
        prompt_tokens: args.prompt_tokens,
        gen_tokens: args.gen_tokens,
        transfer_mode: args.mode.into(),
        gen_t_fin: gen_total,
        prompt_t_fin: prompt_total,
        prompt_baseline_t_fin: prompt_base,
        timeline: timeline_path,
        layers,
        memory,
        rates: rate_entries,
    };
    Ok(Rendered::new(&report, csv, text))
}

// ---------------------------------------------------------------- simulate

pub struct SimulateArgs {
    pub profile: PathBuf,
    pub model: PathBuf,
    pub rates: PathBuf,
    pub tokens: u64,
    pub phase: PhaseArg,
    pub n_g: Option<u64>,
    pub mode: ModeArg,
}

#[derive(Serialize)]
struct SimLayer {
    index: usize,
    stage: StageTimes,
    n_g: u64,
    t_fin: f64,
    simulated_t_fin: f64,
    case_label: CaseLabel,
    max_deviation: f64,
    recurrence: Vec<TaskRecord>,
    simulation: Vec<TaskRecord>,
}

pub fn simulate(args: &SimulateArgs) -> Result<Rendered> {
    let profile = read_profile(&args.profile)?;
    let model = read_model(&args.model)?;
    let costs = profile.costs(model.file.precision)?;
    let rates = read_rates(&args.rates, &model)?;
    let w = workload(args.tokens, args.phase)?;

    let layers: Vec<SimLayer> = model
        .layers
        .iter()
        .zip(&rates)
        .enumerate()
        .map(|(index, (l, r))| {
            let (stage, n_g) = match args.phase {
                PhaseArg::Gen => (stage_times_generation(&costs, l, &w, &r.rates), 0),
                PhaseArg::Prompt => {
                    let n_g = args.n_g.or(r.n_g).unwrap_or(0);
                    (stage_times_prompt(&costs, l, &w, &r.rates, n_g, args.mode.into())?, n_g)
                }
            };
            let n_l = l.gemms as usize;
            let rec = evaluate_recurrence(&stage, n_l);
            let sim = simulate_schedule(&stage, n_l);
            Ok(SimLayer {
                index,
                stage,
                n_g,
                t_fin: rec.t_fin,
                simulated_t_fin: sim.timeline.t_fin,
                case_label: rec.case_label,
                max_deviation: rec.max_deviation(&sim.timeline),
                recurrence: rec.records(),
                simulation: sim.records,
            })
        })
        .collect::<Result<_>>()?;
    let max_deviation = layers.iter().map(|l| l.max_deviation).fold(0.0, f64::max);
    let total: f64 = layers.iter().map(|l| l.t_fin).sum();

    let mut csv = csv_line(&["layer", "source", "gemm_index", "stream", "start_s", "end_s"].map(String::from));
    for l in &layers {
        for (source, recs) in [("recurrence", &l.recurrence), ("simulation", &l.simulation)] {
            for r in recs {
                csv.push_str(&csv_line(&[
                    l.index.to_string(),
                    source.into(),
                    r.gemm_index.to_string(),
                    r.stream.as_str().into(),
                    format!("{:?}", r.start_s),
                    format!("{:?}", r.end_s),
                ]));
            }
        }
    }
    let mut text = String::new();
    for l in &layers {
        text.push_str(&format!(
            "layer {:>3}: t_fin {} (simulated {})  {}  deviation {:.3e}\n",
            l.index,
            sci(l.t_fin),
            sci(l.simulated_t_fin),
            case_str(l.case_label),
            l.max_deviation
        ));
    }
    text.push_str(&format!(
        "total t_fin {}\nmax deviation {:.3e}\n",
        sci(total),
        max_deviation
    ));

    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        head: Provenance<'a>,
        tokens: u64,
        phase: sliceplan_core::Phase,
        total_t_fin: f64,
        max_deviation: f64,
        layers: Vec<SimLayer>,
    }
    let report = Report {
        head: provenance("simulate", Some(&profile), Some(&model)),
        tokens: args.tokens,
        phase: w.phase,
        total_t_fin: total,
        max_deviation,
        layers,
    };
    let rendered = Rendered::new(&report, csv, text);
    if max_deviation > DEVIATION_LIMIT {
        return Err(anyhow::Error::new(Inconsistency(format!(
            "recurrence and event simulation differ by {max_deviation:.3e} s"
        )))
        .context(Deferred(rendered)));
    }
    Ok(rendered)
}

/// Output that should still be written when a command fails its self-check.
pub struct Deferred(pub Rendered);

impl std::fmt::Display for Deferred {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("self-check failed")
    }
}

impl std::fmt::Debug for Deferred {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Deferred")
    }
}

// ---------------------------------------------------------------- verify-slicing

pub struct VerifySlicingArgs {
    pub seed: u64,
    pub trials: usize,
    pub max_dim: usize,
    pub max_tokens: usize,
}

pub const SLICING_TOLERANCE: f64 = 1e-10;

pub fn verify_slicing(args: &VerifySlicingArgs) -> Result<Rendered> {
    if args.max_dim == 0 || args.max_tokens == 0 {
        bail!("--max-dim and --max-tokens must be >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst: f64 = 0.0;
    let mut passes = 0usize;
    for _ in 0..args.trials {
        let t = rng.gen_range(1..=args.max_tokens);
        let m = rng.gen_range(1..=args.max_dim);
        let h = rng.gen_range(1..=args.max_dim);
        let mut mat = |r: usize, c: usize| DenseMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..=1.0));
        let (x, w1, w2) = (mat(t, m), mat(m, h), mat(h, m));
        let a: f64 = rng.gen_range(0.0..=1.0);
        let b: f64 = rng.gen_range(0.0..=1.0);
        let rates = SlicingRates::from_cg_gg(a.max(b) - a.min(b), 1.0 - a.max(b))?;
        let n_g = rng.gen_range(0..=t);
        let sw = slice_weights(&w1, &w2, &rates)?;
        for act in Activation::ALL {
            let reference = mlp_forward_reference(&x, &w1, &w2, act)?;
            let y = mlp_forward_sliced(&x, &sw, act, n_g)?.y;
            worst = worst.max(y.max_abs_diff(&reference));
            passes += 1;
        }
    }
    let pass = worst <= SLICING_TOLERANCE;
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        head: Provenance<'a>,
        seed: u64,
        trials: usize,
        passes: usize,
        max_abs_error: f64,
        tolerance: f64,
        pass: bool,
    }
    let report = Report {
        head: provenance("verify-slicing", None, None),
        seed: args.seed,
        trials: args.trials,
        passes,
        max_abs_error: worst,
        tolerance: SLICING_TOLERANCE,
        pass,
    };
    let text = format!(
        "{} sliced passes, max abs error {worst:.3e}: {}\n",
        passes,
        if pass { "PASS" } else { "FAIL" }
    );
    let csv = format!(
        "seed,trials,passes,max_abs_error,pass\n{},{},{},{:?},{}\n",
        args.seed, args.trials, passes, worst, pass
    );
    let rendered = Rendered::new(&report, csv, text);
    if !pass {
        return Err(
            anyhow::Error::new(Inconsistency(format!("sliced output deviates by {worst:.3e}")))
                .context(Deferred(rendered)),
        );
    }
    Ok(rendered)
}

// ---------------------------------------------------------------- report

pub struct ReportArgs {
    pub profile: PathBuf,
    pub model: Option<PathBuf>,
    pub tokens: u64,
}

#[derive(Serialize)]
struct ShapeSummary {
    entry: usize,
    model_dim: u64,
    hidden_dim: u64,
    gemms: u32,
    count: u32,
    weight_bytes: f64,
    layer_bytes: f64,
    all_cpu_t_fin: f64,
    all_gpu_t_fin: f64,
    best_rates_no_gg: RateEntry,
    best_t_fin_no_gg: f64,
}

pub fn report(args: &ReportArgs) -> Result<Rendered> {
    let profile = read_profile(&args.profile)?;
    let (mut text, csv) = coefficient_table(&profile.profile);
    text.push_str(&format!("sha256 {}\n", profile.sha256));
    let model = args.model.as_deref().map(read_model).transpose()?;
    let mut shapes = Vec::new();
    if let Some(model) = &model {
        let costs = profile.costs(model.file.precision)?;
        let w = workload(args.tokens, PhaseArg::Gen)?;
        for (entry, e) in model.file.layers.iter().enumerate() {
            let l = model.layers[model.entry_of.iter().position(|&k| k == entry).expect("entry expanded")];
            let n_l = l.gemms as usize;
            let t = |r: &SlicingRates| evaluate_recurrence(&stage_times_generation(&costs, &l, &w, r), n_l).t_fin;
            let best = solve_rcg(&costs, &l, &w, 0.0)?;
            shapes.push(ShapeSummary {
                entry,
                model_dim: l.model_dim,
                hidden_dim: l.hidden_dim,
                gemms: l.gemms,
                count: e.count,
                weight_bytes: l.weight_bytes(),
                layer_bytes: l.layer_bytes(),
                all_cpu_t_fin: t(&SlicingRates::ALL_CPU),
                all_gpu_t_fin: t(&SlicingRates::ALL_GPU),
                best_rates_no_gg: rates_json(&best.rates),
                best_t_fin_no_gg: best.t_fin,
            });
        }
        text.push_str(&format!(
            "model {} ({}), {} tokens\n",
            model.file.name,
            model.file.precision.as_str(),
            args.tokens
        ));
        for s in &shapes {
            text.push_str(&format!(
                "  {}x{} n_l={} x{}: {} bytes/layer; all-CPU {}, all-GPU {}, best r_cg {:.4} at r_gg=0 -> {}\n",
                s.model_dim,
                s.hidden_dim,
                s.gemms,
                s.count,
                s.layer_bytes,
                sci(s.all_cpu_t_fin),
                sci(s.all_gpu_t_fin),
                s.best_rates_no_gg.r_cg,
                sci(s.best_t_fin_no_gg)
            ));
        }
    }
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        head: Provenance<'a>,
        testbed: &'a str,
        profile: serde_json::Value,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        shapes: Vec<ShapeSummary>,
    }
    let report = Report {
        head: provenance("report", Some(&profile), model.as_ref()),
        testbed: &profile.profile.testbed,
        profile: serde_json::from_slice(&save_profile(&profile.profile))?,
        shapes,
    };
    Ok(Rendered::new(&report, csv, text))
}
