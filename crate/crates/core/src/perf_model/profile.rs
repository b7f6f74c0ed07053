//! JSON persistence for [`HardwareProfile`].
//!
//! ```json
//! { "testbed": "A",
//!   "launch": {"alpha": 4.4e-5, "sigma2": 3.4e-6},
//!   "pcie":   {"alpha": 3.0e-6, "beta": 2.6e-11, "r2": 0.985},
//!   "gemm": { "fp16": {"gpu": {...}, "cpu": {...}}, "int4": {...} } }
//! ```

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GemmCoeffs, HardwareProfile, PerfCoeffs, Precision};

pub const PROFILE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("schema violation at `{path}`: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("profile has no {what} coefficients for {precision}")]
    MissingCoefficients { precision: Precision, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearWire {
    alpha: f64,
    beta: f64,
    r2: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaunchWire {
    alpha: f64,
    sigma2: f64,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GemmWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gpu: Option<LinearWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cpu: Option<LinearWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema_version: Option<u32>,
    testbed: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    launch: Option<LaunchWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pcie: Option<LinearWire>,
    #[serde(default)]
    gemm: BTreeMap<Precision, GemmWire>,
}

fn violation(path: &str, reason: impl Into<String>) -> ProfileError {
    ProfileError::SchemaViolation {
        path: path.to_string(),
        reason: reason.into(),
    }
}

fn nonneg(path: &str, v: f64) -> Result<f64, ProfileError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(violation(path, format!("expected a finite number >= 0, got {v}")))
    }
}

impl LinearWire {
    fn into_coeffs(self, path: &str) -> Result<PerfCoeffs, ProfileError> {
        let alpha = nonneg(&format!("{path}.alpha"), self.alpha)?;
        let beta = nonneg(&format!("{path}.beta"), self.beta)?;
        let r2 = nonneg(&format!("{path}.r2"), self.r2)?;
        if r2 > 1.0 {
            return Err(violation(
                &format!("{path}.r2"),
                format!("r2 must lie in [0, 1], got {r2}"),
            ));
        }
        Ok(PerfCoeffs {
            alpha,
            beta,
            fit_quality: r2,
        })
    }

    fn from_coeffs(c: &PerfCoeffs) -> Self {
        Self {
            alpha: c.alpha,
            beta: c.beta,
            r2: c.fit_quality,
        }
    }
}

fn from_wire(wire: ProfileWire) -> Result<HardwareProfile, ProfileError> {
    if let Some(v) = wire.schema_version {
        if v != PROFILE_SCHEMA_VERSION {
            return Err(violation("schema_version", format!("unsupported version {v}")));
        }
    }
    let launch = match wire.launch {
        Some(l) => Some(PerfCoeffs {
            alpha: nonneg("launch.alpha", l.alpha)?,
            beta: 0.0,
            fit_quality: nonneg("launch.sigma2", l.sigma2)?,
        }),
        None => None,
    };
    let pcie = wire.pcie.map(|p| p.into_coeffs("pcie")).transpose()?;
    let mut gemm = BTreeMap::new();
    for (precision, g) in wire.gemm {
        let base = format!("gemm.{precision}");
        let gpu = g.gpu.map(|c| c.into_coeffs(&format!("{base}.gpu"))).transpose()?;
        let cpu = g.cpu.map(|c| c.into_coeffs(&format!("{base}.cpu"))).transpose()?;
        gemm.insert(precision, GemmCoeffs { gpu, cpu });
    }
    Ok(HardwareProfile {
        testbed: wire.testbed,
        launch,
        pcie,
        gemm,
    })
}

fn to_wire(p: &HardwareProfile) -> ProfileWire {
    ProfileWire {
        schema_version: Some(PROFILE_SCHEMA_VERSION),
        testbed: p.testbed.clone(),
        launch: p.launch.map(|l| LaunchWire {
            alpha: l.alpha,
            sigma2: l.fit_quality,
        }),
        pcie: p.pcie.as_ref().map(LinearWire::from_coeffs),
        gemm: p
            .gemm
            .iter()
            .map(|(k, g)| {
                (
                    *k,
                    GemmWire {
                        gpu: g.gpu.as_ref().map(LinearWire::from_coeffs),
                        cpu: g.cpu.as_ref().map(LinearWire::from_coeffs),
                    },
                )
            })
            .collect(),
    }
}

/// Parses a profile, reporting the JSON path of the first offending field.
pub fn load_profile<R: Read>(reader: R) -> Result<HardwareProfile, ProfileError> {
    let mut de = serde_json::Deserializer::from_reader(reader);
    let wire: ProfileWire = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        violation(&path, e.into_inner().to_string())
    })?;
    from_wire(wire)
}

pub fn load_profile_from_path(path: impl AsRef<Path>) -> Result<HardwareProfile, ProfileError> {
    let file = std::fs::File::open(path)?;
    load_profile(std::io::BufReader::new(file))
}

/// Pretty-printed JSON; floats use shortest round-trip formatting.
pub fn save_profile(profile: &HardwareProfile) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&to_wire(profile)).expect("profile serializes");
    out.push(b'\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_field_path_on_bad_values() {
        let bad = r#"{"testbed":"A","gemm":{"fp16":{"gpu":{"alpha":-1.0,"beta":1e-12,"r2":0.9}}}}"#;
        match load_profile(bad.as_bytes()) {
            Err(ProfileError::SchemaViolation { path, .. }) => assert_eq!(path, "gemm.fp16.gpu.alpha"),
            other => panic!("unexpected {other:?}"),
        }

        let typo = r#"{"testbed":"A","pcie":{"alpha":1.0,"beta":"x","r2":0.9}}"#;
        match load_profile(typo.as_bytes()) {
            Err(ProfileError::SchemaViolation { path, .. }) => assert_eq!(path, "pcie.beta"),
            other => panic!("unexpected {other:?}"),
        }

        let unknown = r#"{"testbed":"A","gemm":{"fp8":{}}}"#;
        assert!(matches!(
            load_profile(unknown.as_bytes()),
            Err(ProfileError::SchemaViolation { .. })
        ));

        let r2 = r#"{"testbed":"A","pcie":{"alpha":1.0,"beta":1.0,"r2":1.5}}"#;
        match load_profile(r2.as_bytes()) {
            Err(ProfileError::SchemaViolation { path, .. }) => assert_eq!(path, "pcie.r2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_sections_load_but_do_not_resolve() {
        let p = load_profile(r#"{"testbed":"partial"}"#.as_bytes()).unwrap();
        assert!(p.costs(Precision::Int4).is_err());
        let bytes = save_profile(&p);
        assert_eq!(load_profile(bytes.as_slice()).unwrap(), p);
    }
}
