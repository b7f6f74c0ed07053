//! Profile-sample CSV (`op_class,workload_n,elapsed_s`) and a synthetic
//! sample generator for exercising the fitter without hardware.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DeviceCosts, FitError, OpClass, PerfCoeffs, ProfileSample};

pub const SAMPLE_CSV_HEADER: [&str; 3] = ["op_class", "workload_n", "elapsed_s"];

#[derive(Debug, Error)]
pub enum SampleIoError {
    #[error("missing CSV header `{}`", SAMPLE_CSV_HEADER.join(","))]
    MissingHeader,
    #[error("unexpected CSV header `{found}`, expected `{}`", SAMPLE_CSV_HEADER.join(","))]
    BadHeader { found: String },
    #[error("row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Deserialize, Serialize)]
struct Row {
    op_class: String,
    workload_n: f64,
    elapsed_s: f64,
}

pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<ProfileSample>, SampleIoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(SampleIoError::MissingHeader);
    }
    if headers.iter().ne(SAMPLE_CSV_HEADER) {
        return Err(SampleIoError::BadHeader {
            found: headers.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<Row>().enumerate() {
        // Row 1 is the header.
        let row = i + 2;
        let rec = rec.map_err(|e| SampleIoError::BadRow {
            row,
            reason: e.to_string(),
        })?;
        let class: OpClass = rec
            .op_class
            .parse()
            .map_err(|reason| SampleIoError::BadRow { row, reason })?;
        let sample =
            ProfileSample::new(class, rec.workload_n, rec.elapsed_s).map_err(|e: FitError| SampleIoError::BadRow {
                row,
                reason: e.to_string(),
            })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_samples_csv<W: Write>(writer: W, samples: &[ProfileSample]) -> Result<(), SampleIoError> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    for s in samples {
        wtr.serialize(Row {
            op_class: s.op_class.as_str().to_string(),
            workload_n: s.workload_n,
            elapsed_s: s.elapsed_s,
        })?;
    }
    if samples.is_empty() {
        wtr.write_record(SAMPLE_CSV_HEADER)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleGenConfig {
    /// Samples per op class.
    pub points: usize,
    /// Half-width of the uniform multiplicative noise, e.g. `0.01` for ±1%.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SampleGenConfig {
    fn default() -> Self {
        Self {
            points: 20,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Workload grid `n_k = k/K * top` for `k = 1..=K`, with `top = 10 * alpha / beta`
/// so both the startup and the per-unit term are visible in the samples.
fn workload_grid(c: &PerfCoeffs, points: usize) -> Vec<f64> {
    let top = if c.alpha > 0.0 && c.beta > 0.0 {
        10.0 * c.alpha / c.beta
    } else if c.beta > 0.0 {
        1e-3 / c.beta
    } else {
        1e6
    };
    (1..=points).map(|k| top * k as f64 / points as f64).collect()
}

/// Samples drawn from `costs` with uniform multiplicative noise, `points`
/// per class, in class order gpu_gemm, cpu_gemm, c2g, launch.
pub fn generate_samples(costs: &DeviceCosts, config: &SampleGenConfig) -> Vec<ProfileSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut jitter = |y: f64| {
        let f = if config.noise > 0.0 {
            1.0 + rng.gen_range(-config.noise..=config.noise)
        } else {
            1.0
        };
        (y * f).max(f64::MIN_POSITIVE)
    };
    let mut out = Vec::with_capacity(4 * config.points);
    for (class, coeffs) in [
        (OpClass::GpuGemm, costs.gpu),
        (OpClass::CpuGemm, costs.cpu),
        (OpClass::C2G, costs.pcie),
    ] {
        for n in workload_grid(&coeffs, config.points) {
            out.push(ProfileSample {
                op_class: class,
                workload_n: n,
                elapsed_s: jitter(coeffs.predict(n)),
            });
        }
    }
    for _ in 0..config.points {
        out.push(ProfileSample {
            op_class: OpClass::Launch,
            workload_n: 1.0,
            elapsed_s: jitter(costs.launch),
        });
    }
    out
}
