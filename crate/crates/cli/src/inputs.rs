//! Input files: hardware profiles, model descriptions and rate lists.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sliceplan_core::perf_model::{load_profile, DeviceCosts};
use sliceplan_core::{HardwareProfile, LayerSpec, Precision, SlicingRates};

pub struct LoadedProfile {
    pub profile: HardwareProfile,
    /// Hex SHA-256 of the file bytes.
    pub sha256: String,
}

impl LoadedProfile {
    pub fn costs(&self, precision: Precision) -> Result<DeviceCosts> {
        Ok(self.profile.costs(precision)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_profile(path: &Path) -> Result<LoadedProfile> {
    let bytes = fs::read(path).with_context(|| format!("reading profile {}", path.display()))?;
    let profile = load_profile(bytes.as_slice()).with_context(|| format!("profile {}", path.display()))?;
    Ok(LoadedProfile {
        profile,
        sha256: sha256_hex(&bytes),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    #[serde(alias = "M")]
    pub model_dim: u64,
    #[serde(alias = "H")]
    pub hidden_dim: u64,
    #[serde(alias = "n_l")]
    pub gemms: u32,
    #[serde(default = "one")]
    pub count: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub name: String,
    pub precision: Precision,
    pub layers: Vec<LayerEntry>,
}

pub struct Model {
    pub file: ModelFile,
    /// Layers with every entry repeated `count` times.
    pub layers: Vec<LayerSpec>,
    /// Index into `file.layers` for each expanded layer.
    pub entry_of: Vec<usize>,
}

pub fn read_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    let file: ModelFile = serde_json::from_str(&text).with_context(|| format!("model {}", path.display()))?;
    model_from_file(file)
}

pub fn model_from_file(file: ModelFile) -> Result<Model> {
    if file.layers.is_empty() {
        bail!("model {:?} has no layers", file.name);
    }
    let mut layers = Vec::new();
    let mut entry_of = Vec::new();
    for (i, e) in file.layers.iter().enumerate() {
        if e.count == 0 {
            bail!("layers[{i}].count must be >= 1");
        }
        let spec = LayerSpec::new(e.model_dim, e.hidden_dim, e.gemms, file.precision)
            .with_context(|| format!("layers[{i}]"))?;
        for _ in 0..e.count {
            layers.push(spec);
            entry_of.push(i);
        }
    }
    Ok(Model { file, layers, entry_of })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateEntry {
    pub r_cc: f64,
    pub r_cg: f64,
    pub r_gg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_g: Option<u64>,
}

impl RateEntry {
    pub fn new(rates: &SlicingRates, n_g: Option<u64>) -> Self {
        Self {
            r_cc: rates.r_cc(),
            r_cg: rates.r_cg(),
            r_gg: rates.r_gg(),
            n_g,
        }
    }
}

/// `{"rates": [...]}`; other top-level keys are ignored, so plan reports can
/// be passed back in directly.
#[derive(Debug, Deserialize)]
struct RatesFile {
    rates: Vec<RateEntry>,
}

pub struct LayerRates {
    pub rates: SlicingRates,
    pub n_g: Option<u64>,
}

/// Rates for every expanded layer. The list may hold one entry for all
/// layers, one per model entry, or one per expanded layer.
pub fn read_rates(path: &Path, model: &Model) -> Result<Vec<LayerRates>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading rates {}", path.display()))?;
    let file: RatesFile = serde_json::from_str(&text).with_context(|| format!("rates {}", path.display()))?;
    let parsed: Vec<LayerRates> = file
        .rates
        .iter()
        .enumerate()
        .map(|(i, e)| {
            SlicingRates::new(e.r_cc, e.r_cg, e.r_gg)
                .map(|rates| LayerRates { rates, n_g: e.n_g })
                .with_context(|| format!("rates[{i}]"))
        })
        .collect::<Result<_>>()?;
    let n = model.layers.len();
    let pick = |i: usize| -> &LayerRates {
        match parsed.len() {
            1 => &parsed[0],
            k if k == n => &parsed[i],
            _ => &parsed[model.entry_of[i]],
        }
    };
    if parsed.len() != 1 && parsed.len() != n && parsed.len() != model.file.layers.len() {
        bail!(
            "rates has {} entries; expected 1, {} (model entries) or {} (layers)",
            parsed.len(),
            model.file.layers.len(),
            n
        );
    }
    Ok((0..n)
        .map(|i| LayerRates {
            rates: pick(i).rates,
            n_g: pick(i).n_g,
        })
        .collect())
}
