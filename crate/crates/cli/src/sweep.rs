//! `sweep`: cartesian grids over config keys, one run directory per cell.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use toml::Value;

use crate::config::{parse_config_str, parse_override, parse_value};
use crate::run::cmd_run;

pub const SUMMARY_FILE: &str = "summary.csv";

/// One swept key and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

/// Parses `key.path=v1,v2,...`. Values are split on commas outside
/// brackets, so `federation.client_weights=[0.5,0.5],[0.2,0.8]` has two.
pub fn parse_axis(spec: &str) -> Result<Axis> {
    let (key, _) = parse_override(spec)?;
    let raw = spec.split_once('=').map(|(_, v)| v).unwrap_or_default();
    let mut values = Vec::new();
    let (mut depth, mut start) = (0i32, 0usize);
    for (i, ch) in raw.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                values.push(&raw[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    values.push(&raw[start..]);
    let values: Vec<Value> = values
        .into_iter()
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(parse_value)
        .collect();
    if values.is_empty() {
        bail!("sweep axis `{key}` has no values");
    }
    Ok(Axis { key, values })
}

/// Grid cells in row-major order, the last axis varying fastest.
pub fn cells(axes: &[Axis]) -> Vec<Vec<(String, Value)>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push((axis.key.clone(), v.clone()));
                    cell
                })
            })
            .collect()
    })
}

pub fn cell_dir_name(index: usize) -> String {
    format!("cell-{index:04}")
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], " ")
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub cells: usize,
    pub failures: usize,
}

/// Runs every cell of the grid under `out`, continuing past failures, and
/// writes `summary.csv` once all cells have finished.
pub fn cmd_sweep(
    config_text: &str,
    base_overrides: &[(String, Value)],
    axes: &[Axis],
    out: &Path,
    threads: usize,
) -> Result<SweepOutcome> {
    if axes.is_empty() {
        bail!("sweep needs at least one --grid axis");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let grid = cells(axes);
    let mut summary = String::from("cell");
    for a in axes {
        summary.push(',');
        summary.push_str(&a.key);
    }
    summary.push_str(",status,final_test_accuracy,error\n");

    let mut failures = 0;
    for (i, cell) in grid.iter().enumerate() {
        let name = cell_dir_name(i);
        let mut overrides = base_overrides.to_vec();
        overrides.extend(cell.iter().cloned());
        let result = parse_config_str(config_text, &overrides)
            .and_then(|cfg| cmd_run(&cfg, &out.join(&name), threads));
        let (status, acc, err) = match result {
            Ok(art) => ("ok", art.final_accuracy.to_string(), String::new()),
            Err(e) => {
                failures += 1;
                eprintln!("{name}: {e:#}");
                ("failed", String::new(), format!("{e:#}"))
            }
        };
        summary.push_str(&name);
        for (_, v) in cell {
            summary.push(',');
            summary.push_str(&csv_field(&value_text(v)));
        }
        summary.push_str(&format!(",{status},{acc},{}\n", csv_field(&err)));
    }
    fs::write(out.join(SUMMARY_FILE), summary).map_err(|e| anyhow!("writing summary: {e}"))?;
    Ok(SweepOutcome {
        cells: grid.len(),
        failures,
    })
}
