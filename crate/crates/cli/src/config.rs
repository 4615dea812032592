//! Run configuration: one TOML file with optional `--set key=value`
//! overrides, validated against the schema below.

use std::path::Path;

use hrvconformer::model::ConformerConfig;
use hrvconformer::qrs::DetectorConfig;
use hrvconformer::rr::CorrectionConfig;
use hrvconformer::train::TrainConfig;
use hrvconformer::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// `clean`, `artifacts`, `inverted` (ECG records) or `toy` (HR windows).
    pub preset: String,
    pub records: usize,
    pub duration_s: f64,
    pub toy_epochs: usize,
    pub toy_windows_per_epoch: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            preset: "clean".into(),
            records: 1,
            duration_s: 600.0,
            toy_epochs: 24,
            toy_windows_per_epoch: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    /// Intervals above this split the series, seconds.
    pub max_rr_s: f64,
    pub window_s: f64,
    pub overlap: f64,
    /// Windows with a larger population sd (seconds) are dropped.
    pub sd_max: f64,
    pub min_windows: usize,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            max_rr_s: 4.0,
            window_s: 300.0,
            overlap: 0.8,
            sd_max: 0.12,
            min_windows: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnSection {
    /// Windows written to the relevance table.
    pub relevance_windows: usize,
}

impl Default for AttnSection {
    fn default() -> Self {
        Self { relevance_windows: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub detector: DetectorConfig,
    pub correction: CorrectionConfig,
    pub preprocess: PreprocessSection,
    pub model: ConformerConfig,
    pub train: TrainConfig,
    pub attn: AttnSection,
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts
        .split_last()
        .filter(|(l, _)| !l.is_empty())
        .ok_or_else(|| Error::Config(format!("empty override key {key:?}")))?;
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parse `key.path=value`; the value is read as a TOML value, falling back
/// to a plain string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Parse TOML text plus overrides; schema errors name the field path.
    pub fn from_toml(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config is not valid TOML: {}", e.message())))?;
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{name}: {m}")),
                other => other,
            })
        };
        field("model", self.model.validate())?;
        field("train", self.train.validate())?;
        let p = &self.preprocess;
        if !(p.max_rr_s > 0.0 && p.window_s > 0.0 && (0.0..1.0).contains(&p.overlap) && p.sd_max > 0.0) {
            return Err(Error::Config(
                "preprocess: need max_rr_s, window_s, sd_max > 0 and overlap in [0, 1)".into(),
            ));
        }
        if (p.window_s * 4.0).round() as usize != self.model.window_samples {
            return Err(Error::Config(format!(
                "preprocess.window_s: {} s at 4 Hz does not match model.window_samples {}",
                p.window_s, self.model.window_samples
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}
