//! Experiment configuration files.
//!
//! A config is TOML with the sections `[federation]`, `[local]`, `[data]`
//! (with a nested `[data.source]`), `[partition]`, `[model]` and
//! `[analysis]`, plus an optional top-level `output_dir`. Every section and
//! key is optional; unknown keys are rejected. Overrides use dotted paths
//! such as `local.lambda_a=3` and are applied to the parsed document before
//! it is typed, so they go through the same checks as file contents.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lss_core::federation::{
    DataSetup, DataSource, Experiment, FederationConfig, ModelSetup, PartitionMode,
};
use lss_core::local::LocalConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataSetup::default();
        Self {
            source: d.source,
            val_frac: d.val_frac,
            test_frac: d.test_frac,
        }
    }
}

/// Which diagnostics `run` computes after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub zeta: bool,
    pub sigma: bool,
    pub bvcl: bool,
    pub sharpness: bool,
    pub sigma_draws: usize,
    pub hessian_iters: usize,
    pub hessian_batch_size: usize,
    /// Record measured seconds in rounds.csv; off by default so reruns are
    /// byte-identical.
    pub wall_time: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            zeta: true,
            sigma: true,
            bvcl: true,
            sharpness: true,
            sigma_draws: 16,
            hessian_iters: 20,
            hessian_batch_size: 256,
            wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub federation: FederationConfig,
    pub local: LocalConfig,
    pub data: DataSection,
    pub partition: PartitionMode,
    pub model: ModelSetup,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn experiment(&self) -> Experiment {
        Experiment {
            federation: self.federation.clone(),
            local: self.local.clone(),
            data: DataSetup {
                source: self.data.source.clone(),
                partition: self.partition,
                val_frac: self.data.val_frac,
                test_frac: self.data.test_frac,
            },
            model: self.model.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        for (key, v) in [("data.val_frac", self.data.val_frac), ("data.test_frac", self.data.test_frac)] {
            if !(0.0..1.0).contains(&v) {
                bail!("{key}: must lie in [0, 1), got {v}");
            }
        }
        if self.data.val_frac + self.data.test_frac >= 1.0 {
            bail!("data.test_frac: val_frac + test_frac must be below 1");
        }
        if self.data.test_frac == 0.0 {
            bail!("data.test_frac: a test split is required for evaluation");
        }
        let a = &self.analysis;
        if a.sigma && a.sigma_draws < 2 {
            bail!("analysis.sigma_draws: must be at least 2");
        }
        if a.sharpness && (a.hessian_iters == 0 || a.hessian_batch_size == 0) {
            bail!("analysis.hessian_iters: iterations and batch size must be positive");
        }
        Ok(())
    }

    /// Canonical TOML. The output directory is left out so the snapshot
    /// written next to results describes only the experiment.
    pub fn to_toml(&self) -> Result<String> {
        let snapshot = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        Ok(toml::to_string(&snapshot)?)
    }
}

/// Parses a `key.path=value` override. The value is read as a TOML literal
/// when possible (`3`, `0.5`, `true`, `[0.5, 0.5]`, `"x"`), otherwise as a
/// bare string.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key.path=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{spec}` has an empty key segment");
    }
    Ok((key.to_string(), parse_value(raw.trim())))
}

pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `key` in `doc`. A section the override has to create starts as a
/// copy of the same section of `defaults`, so tagged sections such as
/// `[partition]` stay complete.
pub fn apply_override(doc: &mut Table, defaults: &Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut table = doc;
    let mut fallback = Some(defaults);
    let mut path = String::new();
    for part in parts {
        if !path.is_empty() {
            path.push('.');
        }
        path.push_str(part);
        let seed = fallback.and_then(|d| d.get(part)).and_then(Value::as_table);
        fallback = seed;
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(seed.cloned().unwrap_or_default()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("{path}: is not a section, cannot set `{key}`"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses and validates config text with `overrides` applied in order.
pub fn parse_config_str(text: &str, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    let mut doc: Table = text.parse().context("config is not valid TOML")?;
    if !overrides.is_empty() {
        let defaults = Table::try_from(ExperimentConfig::default())?;
        for (k, v) in overrides {
            apply_override(&mut doc, &defaults, k, v.clone())?;
        }
    }
    let typed = doc.to_string();
    let de = toml::Deserializer::parse(&typed).context("config is not valid TOML")?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        if path == "." {
            anyhow!("{msg}")
        } else {
            anyhow!("{path}: {msg}")
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config_str(&text, overrides).with_context(|| format!("in {}", path.display()))
}
