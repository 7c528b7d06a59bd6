//! Monte-Carlo replication study: simulate, estimate, aggregate.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::StudyConfig;
use crate::error::{Error, Result};
use crate::estimators::{run_estimator, true_eta, EstimateWithUncertainty, EstimatorKind, MAX_FAILURE_FRACTION};
use crate::intensity::World;
use crate::msm::MsmParams;
use crate::rng::derive_seed;
use crate::simulator::simulate_dataset;
use crate::stats::{mean, sample_sd};

pub const CSV_HEADER: &str = "scenario,estimator,parameter,bias,sd,se,cp95,lci";

/// What one replication contributes to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationEstimate {
    pub point: MsmParams,
    pub sd: [f64; 4],
    pub interval_95: [(f64, f64); 4],
    pub max_weight: Option<f64>,
}

impl From<&EstimateWithUncertainty> for ReplicationEstimate {
    fn from(e: &EstimateWithUncertainty) -> Self {
        ReplicationEstimate { point: e.point, sd: e.sd, interval_95: e.interval_95, max_weight: e.max_weight }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameter {
    #[serde(rename = "eta2")]
    Eta2,
    #[serde(rename = "eta3")]
    Eta3,
}

impl Parameter {
    pub fn name(self) -> &'static str {
        match self {
            Parameter::Eta2 => "eta2",
            Parameter::Eta3 => "eta3",
        }
    }

    fn index(self) -> usize {
        match self {
            Parameter::Eta2 => 1,
            Parameter::Eta3 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub parameter: Parameter,
    pub bias: f64,
    /// Monte-Carlo standard deviation of the point estimates.
    pub sd: f64,
    /// Mean of the per-replication standard errors.
    pub se: f64,
    /// Percentage of intervals covering the truth.
    pub cp95: f64,
    /// Mean interval length.
    pub lci: f64,
    /// `false` when fewer than two replications make `sd` undefined (reported as 0).
    pub sd_defined: bool,
    pub replications: usize,
}

/// Bias, Monte-Carlo SD, mean SE, coverage and mean interval length for `eta2` and `eta3`.
pub fn compute_metrics(
    scenario: &str,
    estimator: EstimatorKind,
    results: &[ReplicationEstimate],
    truth: &MsmParams,
) -> Result<Vec<MetricsRow>> {
    if results.is_empty() {
        return Err(Error::Input("no replication results to summarize".into()));
    }
    let t = truth.as_array();
    Ok([Parameter::Eta2, Parameter::Eta3]
        .into_iter()
        .map(|p| {
            let k = p.index();
            let points: Vec<f64> = results.iter().map(|r| r.point.as_array()[k]).collect();
            let sd = sample_sd(&points);
            let covered = results
                .iter()
                .filter(|r| r.interval_95[k].0 <= t[k] && t[k] <= r.interval_95[k].1)
                .count();
            let lengths: Vec<f64> = results.iter().map(|r| r.interval_95[k].1 - r.interval_95[k].0).collect();
            let ses: Vec<f64> = results.iter().map(|r| r.sd[k]).collect();
            MetricsRow {
                scenario: scenario.to_string(),
                estimator,
                parameter: p,
                bias: mean(&points) - t[k],
                sd: sd.unwrap_or(0.0),
                se: mean(&ses),
                cp95: 100.0 * covered as f64 / results.len() as f64,
                lci: mean(&lengths),
                sd_defined: sd.is_some(),
                replications: results.len(),
            }
        })
        .collect())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.scenario),
            r.estimator.name(),
            r.parameter.name(),
            r.bias,
            r.sd,
            r.se,
            r.cp95,
            r.lci
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    /// Replications whose estimate entered the metrics.
    pub effective_replications: usize,
    pub failed_replications: usize,
    /// Largest stabilized weight over all replications.
    pub max_weight: Option<f64>,
    /// Number of replications whose largest weight exceeded 100.
    pub replications_with_weight_over_100: usize,
    pub sd_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub scenario: String,
    pub delta: Option<f64>,
    pub n: usize,
    pub replications: usize,
    pub replicate_count: usize,
    pub master_seed: u64,
    pub true_eta: MsmParams,
    pub estimators: Vec<EstimatorSummary>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub rows: Vec<MetricsRow>,
    pub summary: StudySummary,
    /// `per_replication[e][r]` for estimator `e` in config order.
    pub per_replication: Vec<Vec<Option<ReplicationEstimate>>>,
}

/// Dataset seed of replication `r`; independent of the estimator list.
pub fn dataset_seed(master_seed: u64, r: usize) -> u64 {
    derive_seed(master_seed, &[1, r as u64])
}

pub fn estimator_seed(master_seed: u64, r: usize, kind: EstimatorKind) -> u64 {
    derive_seed(master_seed, &[2, r as u64, kind.id()])
}

pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.check()?;
    let scenario = config.scenario()?;
    let label = config.label();
    let truth = true_eta(&scenario.exp_params, &scenario, config.true_eta_m, derive_seed(config.master_seed, &[3]))?;
    log::info!("{label}: true eta = {truth:?}");
    let per_rep: Vec<Vec<Result<ReplicationEstimate>>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let data = match simulate_dataset(&scenario, World::Observational, scenario.n, dataset_seed(config.master_seed, r)) {
                Ok(d) => d,
                Err(e) => {
                    let msg = e.to_string();
                    return config.estimators.iter().map(|_| Err(Error::Input(msg.clone()))).collect();
                }
            };
            let observed: Vec<_> = data.iter().map(|t| t.without_u()).collect();
            config
                .estimators
                .iter()
                .map(|&kind| {
                    let input = if kind == EstimatorKind::IptwObservedU { &data } else { &observed };
                    let cfg = config.estimator_config(estimator_seed(config.master_seed, r, kind));
                    let res = run_estimator(kind, input, &cfg).map(|e| ReplicationEstimate::from(&e));
                    if let Err(e) = &res {
                        log::warn!("{label}: replication {r}, {kind} failed: {e}");
                    }
                    res
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut per_replication = Vec::new();
    for (e, &kind) in config.estimators.iter().enumerate() {
        let column: Vec<Option<ReplicationEstimate>> = per_rep.iter().map(|rep| rep[e].as_ref().ok().cloned()).collect();
        let ok: Vec<ReplicationEstimate> = column.iter().flatten().cloned().collect();
        let failed = column.len() - ok.len();
        if failed as f64 > MAX_FAILURE_FRACTION * config.replications as f64 || ok.is_empty() {
            let last = per_rep
                .iter()
                .filter_map(|rep| rep[e].as_ref().err())
                .last()
                .map(|e| e.to_string())
                .unwrap_or_default();
            return Err(Error::TooManyFailures {
                estimator: kind.name().into(),
                failures: failed,
                attempted: config.replications,
                last,
            });
        }
        let metrics = compute_metrics(&label, kind, &ok, &truth)?;
        summaries.push(EstimatorSummary {
            estimator: kind,
            effective_replications: ok.len(),
            failed_replications: failed,
            max_weight: ok.iter().filter_map(|r| r.max_weight).reduce(f64::max),
            replications_with_weight_over_100: ok.iter().filter(|r| r.max_weight.is_some_and(|w| w > 100.0)).count(),
            sd_defined: metrics[0].sd_defined,
        });
        rows.extend(metrics);
        per_replication.push(column);
    }
    Ok(StudyReport {
        rows,
        summary: StudySummary {
            scenario: label,
            delta: config.delta,
            n: scenario.n,
            replications: config.replications,
            replicate_count: config.replicate_count,
            master_seed: config.master_seed,
            true_eta: truth,
            estimators: summaries,
        },
        per_replication,
    })
}

/// Writes the metrics CSV and the summary JSON into `out_dir` (created if missing).
pub fn write_report(report: &StudyReport, config: &StudyConfig, out_dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    crate::io::write_atomic(&out_dir.join(&config.output.metrics), metrics_to_csv(&report.rows).as_bytes())?;
    let mut json = serde_json::to_string_pretty(&report.summary)?;
    json.push('\n');
    crate::io::write_atomic(&out_dir.join(&config.output.summary), json.as_bytes())
}
