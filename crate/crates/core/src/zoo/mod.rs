//! Canned Patchscope configurations, metrics, the probe baseline and the
//! experiment runners that turn them into reports.

mod experiments;
pub mod methods;
pub mod metrics;
pub mod probe;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use methods::*;
pub use metrics::{lcs_len, precision_at_1, rouge, surprisal, RougeScore, RougeVariant};
pub use probe::{cross_validate, fit_probe, train_probe, ProbeConfig, ProbeModel, MIN_TASK_EXAMPLES};

use crate::error::{Error, Result};
use crate::fixtures::Fixtures;

pub const SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Registered experiment names.
pub const EXPERIMENTS: [&str; 6] = [
    "next_token_sweep",
    "attribute_extraction",
    "entity_resolution",
    "causal_trace",
    "knockout",
    "multihop",
];

/// Everything an experiment run depends on. Unset optional fields take the
/// experiment's defaults; the echo in the report keeps them as given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub fixture_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_examples: Option<usize>,
    /// Noise scale for causal tracing (default 3× embedding std).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Directory that receives `<name>.json` and one CSV per heatmap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(name: impl Into<String>, fixture_dir: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            fixture_dir: fixture_dir.into(),
            models: Vec::new(),
            layers: None,
            target_layers: None,
            seed: 0,
            n_examples: None,
            sigma: None,
            output: None,
        }
    }
}

/// A matrix indexed by two integer axes, written as long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub name: String,
    pub row_label: String,
    pub col_label: String,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn layer_grid(name: impl Into<String>, rows: Vec<usize>, cols: Vec<usize>, values: Vec<Vec<f64>>) -> Self {
        Self {
            name: name.into(),
            row_label: "source_layer".into(),
            col_label: "target_layer".into(),
            rows,
            cols,
            values,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{},value\n", self.row_label, self.col_label);
        for (r, row_key) in self.rows.iter().enumerate() {
            for (c, col_key) in self.cols.iter().enumerate() {
                let _ = writeln!(out, "{row_key},{col_key},{}", self.values[r][c]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStamp {
    pub model_id: String,
    pub checksum: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub artifact_version: String,
    pub experiment: String,
    pub seed: u64,
    pub config: ExperimentSpec,
    pub models: Vec<ModelStamp>,
    pub results: serde_json::Value,
    pub heatmaps: Vec<Heatmap>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `<dir>/<experiment>.json` and `<dir>/<heatmap>.csv` files.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let json = dir.join(format!("{}.json", self.experiment));
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        written.push(json);
        for h in &self.heatmaps {
            let csv = dir.join(format!("{}.csv", h.name));
            fs::write(&csv, h.to_csv()).map_err(|e| Error::io(&csv, e))?;
            written.push(csv);
        }
        Ok(written)
    }
}

/// Looks the experiment up, runs it on the fixture set and, if the spec
/// names an output directory, writes the report there.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    if !EXPERIMENTS.contains(&spec.name.as_str()) {
        return Err(Error::spec(
            "name",
            format!("unknown experiment {:?}; known: {}", spec.name, EXPERIMENTS.join(", ")),
        ));
    }
    let fixtures = Fixtures::load(&spec.fixture_dir)?;
    let report = run_with_fixtures(spec, &fixtures)?;
    if let Some(dir) = &spec.output {
        report.write(dir)?;
    }
    Ok(report)
}

/// [`run_experiment`] on fixtures that are already loaded (nothing is written).
pub fn run_with_fixtures(spec: &ExperimentSpec, fixtures: &Fixtures) -> Result<Report> {
    let out = match spec.name.as_str() {
        "next_token_sweep" => experiments::next_token_sweep(spec, fixtures)?,
        "attribute_extraction" => experiments::attribute_extraction(spec, fixtures)?,
        "entity_resolution" => experiments::entity_resolution(spec, fixtures)?,
        "causal_trace" => experiments::causal_trace(spec, fixtures)?,
        "knockout" => experiments::knockout(spec, fixtures)?,
        "multihop" => experiments::multihop(spec, fixtures)?,
        other => return Err(Error::spec("name", format!("unknown experiment {other:?}"))),
    };
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        artifact_version: ARTIFACT_VERSION.into(),
        experiment: spec.name.clone(),
        seed: spec.seed,
        config: spec.clone(),
        models: out
            .models
            .iter()
            .map(|m| ModelStamp {
                model_id: m.model_id().into(),
                checksum: m.checksum(),
            })
            .collect(),
        results: out.results,
        heatmaps: out.heatmaps,
    })
}
