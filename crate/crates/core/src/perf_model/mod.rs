//! Linear startup/slope cost models for GPU GEMM, CPU GEMM and host-to-device
//! copies, plus a constant kernel-launch cost.
//!
//! Every model predicts `alpha + n * beta` seconds for a workload `n`, where
//! `n` is `T * M * H` for a GEMM and a byte count for a transfer. Launch cost
//! is a plain constant, fitted as the sample mean.

mod profile;
mod samples;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use profile::{load_profile, load_profile_from_path, save_profile, ProfileError};
pub use samples::{
    generate_samples, read_samples_csv, write_samples_csv, SampleGenConfig, SampleIoError, SAMPLE_CSV_HEADER,
};

/// The operation class a profiling sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    GpuGemm,
    CpuGemm,
    C2G,
    Launch,
}

impl OpClass {
    pub const ALL: [OpClass; 4] = [OpClass::GpuGemm, OpClass::CpuGemm, OpClass::C2G, OpClass::Launch];

    pub fn as_str(self) -> &'static str {
        match self {
            OpClass::GpuGemm => "gpu_gemm",
            OpClass::CpuGemm => "cpu_gemm",
            OpClass::C2G => "c2g",
            OpClass::Launch => "launch",
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown op_class `{s}` (expected gpu_gemm, cpu_gemm, c2g or launch)"))
    }
}

/// Numeric precision of the stored weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp16,
    Int4,
}

impl Precision {
    pub fn bytes_per_param(self) -> f64 {
        match self {
            Precision::Fp16 => 2.0,
            Precision::Int4 => 0.5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Fp16 => "fp16",
            Precision::Int4 => "int4",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" => Ok(Precision::Fp16),
            "int4" => Ok(Precision::Int4),
            other => Err(format!("unknown precision `{other}` (expected fp16 or int4)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("all samples share the same workload_n; slope is unidentifiable")]
    DegenerateSamples,
    #[error("samples mix op classes {first} and {other}")]
    MixedOpClass { first: OpClass, other: OpClass },
    #[error("op class {0} cannot be fitted by this routine")]
    WrongOpClass(OpClass),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
}

/// One timed measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub op_class: OpClass,
    pub workload_n: f64,
    pub elapsed_s: f64,
}

impl ProfileSample {
    pub fn new(op_class: OpClass, workload_n: f64, elapsed_s: f64) -> Result<Self, FitError> {
        let sample = Self {
            op_class,
            workload_n,
            elapsed_s,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.elapsed_s.is_finite() && self.elapsed_s > 0.0) {
            return Err(FitError::InvalidSample(format!(
                "elapsed_s must be finite and > 0, got {}",
                self.elapsed_s
            )));
        }
        if !(self.workload_n.is_finite() && self.workload_n >= 0.0) {
            return Err(FitError::InvalidSample(format!(
                "workload_n must be finite and >= 0, got {}",
                self.workload_n
            )));
        }
        if self.op_class == OpClass::Launch && self.workload_n != 1.0 {
            return Err(FitError::InvalidSample(format!(
                "launch samples must have workload_n = 1, got {}",
                self.workload_n
            )));
        }
        Ok(())
    }
}

/// Startup time `alpha` (s), per-unit cost `beta` (s/unit) and fit quality.
///
/// `fit_quality` is r² for the linear classes and the sample variance for
/// launch, which is modelled as a constant (`beta == 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfCoeffs {
    pub alpha: f64,
    pub beta: f64,
    pub fit_quality: f64,
}

impl PerfCoeffs {
    pub const ZERO: PerfCoeffs = PerfCoeffs {
        alpha: 0.0,
        beta: 0.0,
        fit_quality: 1.0,
    };

    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            fit_quality: 1.0,
        }
    }

    pub fn constant(alpha: f64) -> Self {
        Self {
            alpha,
            beta: 0.0,
            fit_quality: 0.0,
        }
    }

    /// `alpha + workload_n * beta`.
    pub fn predict(&self, workload_n: f64) -> f64 {
        self.alpha + workload_n * self.beta
    }
}

/// Free-function form of [`PerfCoeffs::predict`].
pub fn predict(coeffs: &PerfCoeffs, workload_n: f64) -> f64 {
    coeffs.predict(workload_n)
}

fn check_samples(samples: &[ProfileSample], needed: usize) -> Result<OpClass, FitError> {
    if samples.len() < needed {
        return Err(FitError::TooFewSamples {
            needed,
            got: samples.len(),
        });
    }
    let first = samples[0].op_class;
    for s in samples {
        s.validate()?;
        if s.op_class != first {
            return Err(FitError::MixedOpClass {
                first,
                other: s.op_class,
            });
        }
    }
    Ok(first)
}

/// Ordinary least squares fit of `elapsed_s = alpha + beta * workload_n`.
///
/// A negative slope is replaced by the constant model `alpha = mean(y)`; a
/// negative intercept is replaced by the least-squares line through the
/// origin. r² is always computed against the model actually returned and
/// clipped to `[0, 1]`.
pub fn fit_linear(samples: &[ProfileSample]) -> Result<PerfCoeffs, FitError> {
    let class = check_samples(samples, 3)?;
    if class == OpClass::Launch {
        return Err(FitError::WrongOpClass(class));
    }
    let x0 = samples[0].workload_n;
    if samples.iter().all(|s| s.workload_n == x0) {
        return Err(FitError::DegenerateSamples);
    }

    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|s| s.workload_n).sum::<f64>() / n;
    let mean_y = samples.iter().map(|s| s.elapsed_s).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for s in samples {
        let dx = s.workload_n - mean_x;
        sxx += dx * dx;
        sxy += dx * (s.elapsed_s - mean_y);
    }
    let mut beta = sxy / sxx;
    let mut alpha = mean_y - beta * mean_x;

    if beta < 0.0 {
        beta = 0.0;
        alpha = mean_y;
    } else if alpha < 0.0 {
        let xx: f64 = samples.iter().map(|s| s.workload_n * s.workload_n).sum();
        let xy: f64 = samples.iter().map(|s| s.workload_n * s.elapsed_s).sum();
        alpha = 0.0;
        beta = (xy / xx).max(0.0);
    }

    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for s in samples {
        let r = s.elapsed_s - (alpha + beta * s.workload_n);
        let d = s.elapsed_s - mean_y;
        ss_res += r * r;
        ss_tot += d * d;
    }
    let r2 = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(PerfCoeffs {
        alpha,
        beta,
        fit_quality: r2,
    })
}

/// Launch cost as a constant: mean of the samples, with the unbiased sample
/// variance as fit quality.
pub fn fit_launch(samples: &[ProfileSample]) -> Result<PerfCoeffs, FitError> {
    let class = check_samples(samples, 3)?;
    if class != OpClass::Launch {
        return Err(FitError::WrongOpClass(class));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.elapsed_s).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.elapsed_s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(PerfCoeffs {
        alpha: mean,
        beta: 0.0,
        fit_quality: var,
    })
}

/// GPU and CPU GEMM models for one precision.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GemmCoeffs {
    pub gpu: Option<PerfCoeffs>,
    pub cpu: Option<PerfCoeffs>,
}

/// Fitted coefficients for one testbed. Sections may be missing when the
/// profile was fitted from partial samples; [`HardwareProfile::costs`]
/// reports what is absent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HardwareProfile {
    pub testbed: String,
    pub launch: Option<PerfCoeffs>,
    pub pcie: Option<PerfCoeffs>,
    pub gemm: BTreeMap<Precision, GemmCoeffs>,
}

/// The four coefficient sets the planner needs, resolved for one precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceCosts {
    pub precision: Precision,
    pub gpu: PerfCoeffs,
    pub cpu: PerfCoeffs,
    pub pcie: PerfCoeffs,
    /// Constant cost of one kernel launch, seconds.
    pub launch: f64,
}

impl DeviceCosts {
    /// Same costs with the CPU GEMM slope multiplied by `factor`.
    pub fn with_cpu_slope_scaled(mut self, factor: f64) -> Self {
        self.cpu.beta *= factor;
        self
    }
}

impl HardwareProfile {
    pub fn costs(&self, precision: Precision) -> Result<DeviceCosts, ProfileError> {
        let missing = |what: &str| ProfileError::MissingCoefficients {
            precision,
            what: what.to_string(),
        };
        let gemm = self.gemm.get(&precision).ok_or_else(|| missing("gemm"))?;
        Ok(DeviceCosts {
            precision,
            gpu: gemm.gpu.ok_or_else(|| missing("gemm.gpu"))?,
            cpu: gemm.cpu.ok_or_else(|| missing("gemm.cpu"))?,
            pcie: self.pcie.ok_or_else(|| missing("pcie"))?,
            launch: self.launch.ok_or_else(|| missing("launch"))?.alpha,
        })
    }

    /// Fits every class present in `samples`. GEMM samples are filed under
    /// `precision`. Returns the classes that had no samples.
    pub fn fit(
        testbed: &str,
        precision: Precision,
        samples: &[ProfileSample],
    ) -> Result<(HardwareProfile, Vec<OpClass>), FitError> {
        let mut by_class: BTreeMap<OpClass, Vec<ProfileSample>> = BTreeMap::new();
        for s in samples {
            by_class.entry(s.op_class).or_default().push(*s);
        }
        let mut profile = HardwareProfile {
            testbed: testbed.to_string(),
            ..Default::default()
        };
        let mut missing = Vec::new();
        let mut gemm = GemmCoeffs::default();
        for class in OpClass::ALL {
            let Some(group) = by_class.get(&class) else {
                missing.push(class);
                continue;
            };
            match class {
                OpClass::GpuGemm => gemm.gpu = Some(fit_linear(group)?),
                OpClass::CpuGemm => gemm.cpu = Some(fit_linear(group)?),
                OpClass::C2G => profile.pcie = Some(fit_linear(group)?),
                OpClass::Launch => profile.launch = Some(fit_launch(group)?),
            }
        }
        if gemm.gpu.is_some() || gemm.cpu.is_some() {
            profile.gemm.insert(precision, gemm);
        }
        Ok((profile, missing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact(class: OpClass, a: f64, b: f64, ns: &[f64]) -> Vec<ProfileSample> {
        ns.iter()
            .map(|&n| ProfileSample::new(class, n, a + b * n).unwrap())
            .collect()
    }

    #[test]
    fn recovers_pcie_coefficients_exactly() {
        let s = exact(OpClass::C2G, 3.0e-6, 2.6e-11, &[1e6, 1e7, 1e8]);
        let c = fit_linear(&s).unwrap();
        assert!((c.alpha - 3.0e-6).abs() <= 1e-9 * 3.0e-6, "alpha {}", c.alpha);
        assert!((c.beta - 2.6e-11).abs() <= 1e-9 * 2.6e-11, "beta {}", c.beta);
        assert!((c.fit_quality - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_samples_fit_flat_line() {
        let s = exact(OpClass::CpuGemm, 2.5e-4, 0.0, &[1.0, 10.0, 100.0, 1000.0]);
        let c = fit_linear(&s).unwrap();
        assert_eq!(c.beta, 0.0);
        assert!((c.alpha - 2.5e-4).abs() < 1e-18);
        assert_eq!(c.fit_quality, 1.0);
    }

    #[test]
    fn rejects_degenerate_and_mixed_input() {
        let same = exact(OpClass::GpuGemm, 1e-6, 1e-12, &[5.0, 5.0, 5.0]);
        assert_eq!(fit_linear(&same), Err(FitError::DegenerateSamples));

        let mut mixed = exact(OpClass::GpuGemm, 1e-6, 1e-12, &[1.0, 2.0]);
        mixed.push(ProfileSample::new(OpClass::CpuGemm, 3.0, 1e-6).unwrap());
        assert!(matches!(fit_linear(&mixed), Err(FitError::MixedOpClass { .. })));

        let two = exact(OpClass::GpuGemm, 1e-6, 1e-12, &[1.0, 2.0]);
        assert_eq!(fit_linear(&two), Err(FitError::TooFewSamples { needed: 3, got: 2 }));
    }

    #[test]
    fn negative_intercept_is_clamped() {
        // y = -1e-6 + 1e-9 n: the OLS intercept is negative.
        let s = exact(OpClass::CpuGemm, -1e-6, 1e-9, &[1e4, 2e4, 3e4]);
        let c = fit_linear(&s).unwrap();
        assert_eq!(c.alpha, 0.0);
        assert!(c.beta > 0.0);
        assert!(c.fit_quality > 0.99 && c.fit_quality < 1.0);
    }

    #[test]
    fn negative_slope_falls_back_to_mean() {
        let s = exact(OpClass::GpuGemm, 1e-3, -1e-9, &[1.0, 1e3, 1e5]);
        let c = fit_linear(&s).unwrap();
        assert_eq!(c.beta, 0.0);
        let mean = s.iter().map(|s| s.elapsed_s).sum::<f64>() / 3.0;
        assert_eq!(c.alpha, mean);
    }

    #[test]
    fn launch_is_mean_and_variance() {
        let s: Vec<_> = (0..3)
            .map(|_| ProfileSample::new(OpClass::Launch, 1.0, 4.4e-5).unwrap())
            .collect();
        let c = fit_launch(&s).unwrap();
        assert!((c.alpha - 4.4e-5).abs() < 1e-18);
        assert_eq!(c.beta, 0.0);
        assert!(c.fit_quality.abs() < 1e-30);

        let two = [1e-5, 3e-5].map(|t| ProfileSample::new(OpClass::Launch, 1.0, t).unwrap());
        assert_eq!(fit_launch(&two), Err(FitError::TooFewSamples { needed: 3, got: 2 }));
        assert_eq!(fit_launch(&[]), Err(FitError::TooFewSamples { needed: 3, got: 0 }));
    }

    #[test]
    fn launch_fit_rejects_linear_classes_and_vice_versa() {
        let lin = exact(OpClass::C2G, 1e-6, 1e-11, &[1.0, 2.0, 3.0]);
        assert_eq!(fit_launch(&lin), Err(FitError::WrongOpClass(OpClass::C2G)));
        let launch: Vec<_> = (0..3)
            .map(|_| ProfileSample::new(OpClass::Launch, 1.0, 1e-5).unwrap())
            .collect();
        assert_eq!(fit_linear(&launch), Err(FitError::WrongOpClass(OpClass::Launch)));
    }

    #[test]
    fn sample_invariants() {
        assert!(ProfileSample::new(OpClass::Launch, 2.0, 1e-5).is_err());
        assert!(ProfileSample::new(OpClass::GpuGemm, 10.0, 0.0).is_err());
        assert!(ProfileSample::new(OpClass::GpuGemm, -1.0, 1e-3).is_err());
        assert!(ProfileSample::new(OpClass::C2G, 0.0, 1e-6).is_ok());
    }

    #[test]
    fn predict_examples() {
        assert_eq!(PerfCoeffs::new(0.0, 0.0).predict(123456.0), 0.0);
        assert_eq!(predict(&PerfCoeffs::new(3.0e-6, 2.6e-11), 0.0), 3.0e-6);
        let cpu = PerfCoeffs::new(7.4e-7, 1.6e-11);
        let n = 4096.0 * 14336.0;
        assert_eq!(n, 5.8720256e7);
        assert!((cpu.predict(n) - 9.40264096e-4).abs() < 1e-15, "{}", cpu.predict(n));
    }

    #[test]
    fn partial_fit_reports_missing_classes() {
        let s = exact(OpClass::C2G, 3.0e-6, 2.6e-11, &[1e6, 1e7, 1e8]);
        let (p, missing) = HardwareProfile::fit("X", Precision::Fp16, &s).unwrap();
        assert!(p.pcie.is_some());
        assert!(p.gemm.is_empty());
        assert_eq!(missing, vec![OpClass::GpuGemm, OpClass::CpuGemm, OpClass::Launch]);
        assert!(matches!(
            p.costs(Precision::Fp16),
            Err(ProfileError::MissingCoefficients { .. })
        ));
    }
}
