use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sliceplan"))
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn profile_a() -> PathBuf {
    repo_file("../core/fixtures/profiles/testbed_a.json")
}

fn toy_model() -> PathBuf {
    repo_file("fixtures/models/toy.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Rounds to three significant figures.
fn sig3(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let e = x.abs().log10().floor() as i32 - 2;
    (x / 10f64.powi(e)).round() * 10f64.powi(e)
}

#[test]
fn empty_csv_names_missing_header() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("empty.csv");
    fs::write(&csv, "").unwrap();
    let out = run(&["fit", "--samples", s(&csv)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("op_class,workload_n,elapsed_s"));
}

#[test]
fn malformed_model_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    fs::write(
        &model,
        r#"{"name":"x","precision":"fp16","layers":[{"model_dim":0,"hidden_dim":8,"gemms":1}]}"#,
    )
    .unwrap();
    let out = run(&["solve-rates", "--profile", s(&profile_a()), "--model", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_round_trip_matches_to_three_figures() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("a.csv");
    let fitted = dir.path().join("fitted.json");
    let gen = run(&["gen-samples", "--profile", s(&profile_a()), "-o", s(&csv)]);
    assert!(gen.status.success());
    let out = run(&["fit", "--samples", s(&csv), "--out", s(&fitted), "--testbed", "A"]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("gpu_gemm") && table.contains("launch"));

    let want: Value = serde_json::from_str(&fs::read_to_string(profile_a()).unwrap()).unwrap();
    let got: Value = serde_json::from_str(&fs::read_to_string(&fitted).unwrap()).unwrap();
    let pairs = [
        ("/gemm/fp16/gpu/alpha", "/gemm/fp16/gpu/alpha"),
        ("/gemm/fp16/gpu/beta", "/gemm/fp16/gpu/beta"),
        ("/gemm/fp16/cpu/alpha", "/gemm/fp16/cpu/alpha"),
        ("/gemm/fp16/cpu/beta", "/gemm/fp16/cpu/beta"),
        ("/pcie/alpha", "/pcie/alpha"),
        ("/pcie/beta", "/pcie/beta"),
        ("/launch/alpha", "/launch/alpha"),
    ];
    for (a, b) in pairs {
        let w = want.pointer(a).unwrap().as_f64().unwrap();
        let g = got.pointer(b).unwrap().as_f64().unwrap();
        assert_eq!(sig3(g), sig3(w), "{a}: fitted {g} vs {w}");
    }
}

#[test]
fn partial_samples_warn_and_fit_what_is_there() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pcie.csv");
    let gen = run(&[
        "gen-samples",
        "--profile",
        s(&profile_a()),
        "--class",
        "c2g",
        "-o",
        s(&csv),
    ]);
    assert!(gen.status.success());
    let out = run(&["fit", "--samples", s(&csv), "--format", "json"]);
    let report = json(&out);
    assert_eq!(report["missing"].as_array().unwrap().len(), 3);
    assert!(report["profile"]["pcie"].is_object());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn plan_is_deterministic_and_carries_provenance() {
    let (profile, model) = (profile_a(), toy_model());
    let args = [
        "plan",
        "--profile",
        s(&profile),
        "--model",
        s(&model),
        "--budget-bytes",
        "117440512",
        "--prompt-tokens",
        "128",
    ];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let report = json(&a);
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["profile_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_budget_plan_matches_solver() {
    let plan = json(&run(&[
        "plan",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
        "--prompt-tokens",
        "64",
    ]));
    let solve = json(&run(&[
        "solve-rates",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
    ]));
    assert_eq!(plan["gen_t_fin"], solve["total_t_fin"]);
    for l in plan["layers"].as_array().unwrap() {
        assert_eq!(l["rates"]["r_gg"], 0.0);
    }
}

#[test]
fn simulate_reproduces_plan() {
    let dir = tempfile::tempdir().unwrap();
    let plan_path = dir.path().join("plan.json");
    let out = run(&[
        "plan",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
        "--budget-bytes",
        "234881024",
        "--prompt-tokens",
        "256",
        "-o",
        s(&plan_path),
    ]);
    assert!(out.status.success());
    let plan: Value = serde_json::from_str(&fs::read_to_string(&plan_path).unwrap()).unwrap();

    let gen = json(&run(&[
        "simulate",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
        "--rates",
        s(&plan_path),
    ]));
    assert_eq!(gen["max_deviation"], 0.0);
    let want = plan["gen_t_fin"].as_f64().unwrap();
    assert!((gen["total_t_fin"].as_f64().unwrap() - want).abs() <= 1e-15 * want);

    let prompt = json(&run(&[
        "simulate",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
        "--rates",
        s(&plan_path),
        "--tokens",
        "256",
        "--phase",
        "prompt",
    ]));
    let want = plan["prompt_t_fin"].as_f64().unwrap();
    assert!((prompt["total_t_fin"].as_f64().unwrap() - want).abs() <= 1e-15 * want);
}

#[test]
fn simulate_csv_lists_both_timelines() {
    let dir = tempfile::tempdir().unwrap();
    let rates = dir.path().join("r.json");
    fs::write(&rates, r#"{"rates":[{"r_cc":0.5,"r_cg":0.25,"r_gg":0.25}]}"#).unwrap();
    let out = run(&[
        "simulate",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
        "--rates",
        s(&rates),
        "--format",
        "csv",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("layer,source,gemm_index,stream,start_s,end_s\n"));
    // 2 layers x 2 sources x 2 GEMMs x 4 streams.
    assert_eq!(text.lines().count(), 1 + 32);
}

#[test]
fn bad_rates_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let rates = dir.path().join("r.json");
    fs::write(&rates, r#"{"rates":[{"r_cc":0.5,"r_cg":0.6,"r_gg":0.0}]}"#).unwrap();
    let out = run(&[
        "simulate",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
        "--rates",
        s(&rates),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn auto_rgg_uses_memory_plan() {
    let report = json(&run(&[
        "solve-rates",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
        "--rgg",
        "auto",
        "--budget-bytes",
        "469762048",
    ]));
    let memory = json(&run(&[
        "assign-memory",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
        "--budget-bytes",
        "469762048",
    ]));
    for (l, r) in report["layers"]
        .as_array()
        .unwrap()
        .iter()
        .zip(memory["per_layer_rgg"].as_array().unwrap())
    {
        assert_eq!(&l["rates"]["r_gg"], r);
    }
    let missing_budget = run(&[
        "solve-rates",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
        "--rgg",
        "auto",
    ]);
    assert_eq!(missing_budget.status.code(), Some(2));
}

#[test]
fn verify_slicing_passes_and_honours_seed_env() {
    let a = bin()
        .args(["verify-slicing", "--trials", "10", "--format", "json"])
        .env("SLICEPLAN_SEED", "42")
        .output()
        .unwrap();
    let report = json(&a);
    assert_eq!(report["seed"], 42);
    assert_eq!(report["pass"], true);
}

#[test]
fn assign_tokens_never_slows_the_prompt() {
    let report = json(&run(&[
        "assign-tokens",
        "--profile",
        s(&profile_a()),
        "--model",
        s(&toy_model()),
        "--tokens",
        "512",
    ]));
    for l in report["layers"].as_array().unwrap() {
        assert!(l["t_fin_prompt"].as_f64().unwrap() <= l["baseline_t_fin"].as_f64().unwrap());
        assert!(l["speedup"].as_f64().unwrap() >= 1.0);
    }
}
