//! The single configuration file shared by every subcommand.
//!
//! ```json
//! {
//!   "label": "delta-0.3",
//!   "scenario": "simulation",
//!   "delta": 0.3,
//!   "n": 400,
//!   "replications": 5,
//!   "estimators": ["Naive", "BCT-MSMs-ConsiderU"],
//!   "replicate_count": 25,
//!   "true_eta_m": 50000,
//!   "master_seed": 1,
//!   "estimator_settings": { "bct_truncation": null, "sampler_burnin": 1000 },
//!   "output": { "metrics": "metrics.csv", "summary": "summary.json" }
//! }
//! ```
//!
//! `scenario` is either a preset name or a full scenario object. Every field except
//! `scenario` has a default.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, EstimatorKind};
use crate::scenario::ScenarioConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSpec {
    Preset(String),
    Custom(Box<ScenarioConfig>),
}

impl ScenarioSpec {
    pub fn resolve(&self) -> Result<ScenarioConfig> {
        match self {
            ScenarioSpec::Preset(name) => ScenarioConfig::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown scenario preset '{name}'"))),
            ScenarioSpec::Custom(c) => Ok((**c).clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default = "default_metrics")]
    pub metrics: String,
    #[serde(default = "default_summary")]
    pub summary: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths { metrics: default_metrics(), summary: default_summary() }
    }
}

fn default_metrics() -> String {
    "metrics.csv".into()
}
fn default_summary() -> String {
    "summary.json".into()
}
fn default_replications() -> usize {
    300
}
fn default_replicate_count() -> usize {
    200
}
fn default_true_eta_m() -> usize {
    50_000
}
fn default_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

fn estimator_names<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<EstimatorKind>, D::Error> {
    let names = Vec::<String>::deserialize(d)?;
    names.iter().map(|n| n.parse().map_err(serde::de::Error::custom)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Scenario label written to the metrics table; defaults to `delta=<delta>`.
    #[serde(default)]
    pub label: Option<String>,
    pub scenario: ScenarioSpec,
    /// Confounding level; sets both confounder coefficients of the treatment model.
    /// When absent the scenario's own coefficients are kept.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Sample size per replication; defaults to the scenario's `n`.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_estimators", deserialize_with = "estimator_names")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "default_replicate_count")]
    pub replicate_count: usize,
    #[serde(default = "default_true_eta_m")]
    pub true_eta_m: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub estimator_settings: EstimatorConfig,
    #[serde(default)]
    pub output: OutputPaths,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: StudyConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.check()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn check(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("estimator list is empty".into()));
        }
        if self.n == Some(0) {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.true_eta_m < 1000 {
            return Err(Error::Config("true_eta_m must be at least 1000".into()));
        }
        if let Some(d) = self.delta {
            if !d.is_finite() {
                return Err(Error::Config("delta must be finite".into()));
            }
        }
        self.scenario()?;
        self.estimator_config(0).check()
    }

    /// Resolved scenario with `delta` and `n` applied.
    pub fn scenario(&self) -> Result<ScenarioConfig> {
        let mut s = self.scenario.resolve()?;
        if let Some(d) = self.delta {
            s = s.with_confounding(d);
        }
        if let Some(n) = self.n {
            s.n = n;
        }
        s.check()?;
        Ok(s)
    }

    pub fn label(&self) -> String {
        match (&self.label, self.delta) {
            (Some(l), _) => l.clone(),
            (None, Some(d)) => format!("delta={d}"),
            (None, None) => "scenario".into(),
        }
    }

    pub fn estimator_config(&self, seed: u64) -> EstimatorConfig {
        EstimatorConfig { replicate_count: self.replicate_count, seed, ..self.estimator_settings.clone() }
    }
}
