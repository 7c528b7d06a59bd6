//! The five estimator pipelines, their replicate-based uncertainty and the true causal
//! parameter by large experimental-world simulation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::{PreparedSubject, World};
use crate::msm::{MsmData, MsmParams, DEFAULT_ETA3_MAX};
use crate::params::ExpWorldParams;
use crate::paths::Trajectory;
use crate::posterior::{self, conditional_u_prepared, Priors, SamplerConfig, SamplerDiagnostics};
use crate::rng::{derive_seed, rng_for};
use crate::scenario::ScenarioConfig;
use crate::simulator::simulate_dataset;
use crate::stats::{mean, percentile, sample_sd};
use crate::weights::{bootstrap_counts, truncation_cap, weights_prepared, UPolicy};

/// Fraction of failed replicates above which an estimator reports an error.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "Naive")]
    Naive,
    #[serde(rename = "CT-IPTW-IgnoreU")]
    IptwIgnoreU,
    #[serde(rename = "CT-IPTW-IgnoreU-trunc95")]
    IptwIgnoreUTrunc95,
    #[serde(rename = "CT-IPTW-ObservedU")]
    IptwObservedU,
    #[serde(rename = "BCT-MSMs-ConsiderU")]
    Bct,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Naive,
        EstimatorKind::IptwIgnoreU,
        EstimatorKind::IptwIgnoreUTrunc95,
        EstimatorKind::IptwObservedU,
        EstimatorKind::Bct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Naive => "Naive",
            EstimatorKind::IptwIgnoreU => "CT-IPTW-IgnoreU",
            EstimatorKind::IptwIgnoreUTrunc95 => "CT-IPTW-IgnoreU-trunc95",
            EstimatorKind::IptwObservedU => "CT-IPTW-ObservedU",
            EstimatorKind::Bct => "BCT-MSMs-ConsiderU",
        }
    }

    /// Stable key for seed derivation.
    pub fn id(self) -> u64 {
        match self {
            EstimatorKind::Naive => 1,
            EstimatorKind::IptwIgnoreU => 2,
            EstimatorKind::IptwIgnoreUTrunc95 => 3,
            EstimatorKind::IptwObservedU => 4,
            EstimatorKind::Bct => 5,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        let found = match key.as_str() {
            "naive" => Some(EstimatorKind::Naive),
            "ct-iptw-ignoreu" | "ignore-u" | "ignoreu" => Some(EstimatorKind::IptwIgnoreU),
            "ct-iptw-ignoreu-trunc95" | "ignore-u-trunc95" | "ignoreu-trunc95" => Some(EstimatorKind::IptwIgnoreUTrunc95),
            "ct-iptw-observedu" | "observed-u" | "observedu" => Some(EstimatorKind::IptwObservedU),
            "bct-msms-consideru" | "bct" => Some(EstimatorKind::Bct),
            _ => None,
        };
        found.ok_or_else(|| {
            let names: Vec<&str> = EstimatorKind::ALL.iter().map(|k| k.name()).collect();
            Error::Input(format!("unknown estimator '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

/// Treatment of the latent confounder in the BCT weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BctUPolicy {
    /// Draw `u_i` from its conditional posterior for every retained draw.
    #[default]
    Imputed,
    /// Average the weight over the conditional posterior of `u_i`.
    Marginalized,
}

fn default_replicates() -> usize {
    200
}
fn default_eta3_max() -> f64 {
    DEFAULT_ETA3_MAX
}
fn default_burnin() -> usize {
    1000
}
fn default_thin() -> usize {
    5
}
fn default_adapt_window() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Bootstrap resamples or retained posterior draws.
    #[serde(default = "default_replicates")]
    pub replicate_count: usize,
    #[serde(default = "default_eta3_max")]
    pub eta3_max: f64,
    /// Percentile at which BCT weights are capped; `None` or 100 leaves them untouched.
    #[serde(default)]
    pub bct_truncation: Option<f64>,
    #[serde(default)]
    pub bct_u_policy: BctUPolicy,
    #[serde(default = "default_burnin")]
    pub sampler_burnin: usize,
    #[serde(default = "default_thin")]
    pub sampler_thin: usize,
    #[serde(default = "default_adapt_window")]
    pub sampler_adapt_window: usize,
    #[serde(default)]
    pub priors: Priors,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig::simulation()
    }
}

impl EstimatorConfig {
    /// Untruncated BCT weights.
    pub fn simulation() -> Self {
        EstimatorConfig {
            replicate_count: default_replicates(),
            eta3_max: DEFAULT_ETA3_MAX,
            bct_truncation: None,
            bct_u_policy: BctUPolicy::Imputed,
            sampler_burnin: default_burnin(),
            sampler_thin: default_thin(),
            sampler_adapt_window: default_adapt_window(),
            priors: Priors::flat(),
            seed: 0,
        }
    }

    /// BCT weights capped at the 98th percentile.
    pub fn real_data() -> Self {
        EstimatorConfig { bct_truncation: Some(98.0), ..EstimatorConfig::simulation() }
    }

    pub fn check(&self) -> Result<()> {
        if self.replicate_count < 2 {
            return Err(Error::Config("replicate_count must be at least 2".into()));
        }
        if !(self.eta3_max > 0.0) {
            return Err(Error::Config("eta3_max must be positive".into()));
        }
        if let Some(p) = self.bct_truncation {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::Config(format!("bct_truncation must lie in (0, 100], got {p}")));
            }
        }
        if self.sampler_thin == 0 || self.sampler_adapt_window == 0 {
            return Err(Error::Config("sampler_thin and sampler_adapt_window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            adapt_window: self.sampler_adapt_window,
            ..SamplerConfig::for_draws(self.replicate_count, self.sampler_burnin, self.sampler_thin, seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithUncertainty {
    pub estimator: EstimatorKind,
    /// Mean of the replicate points.
    pub point: MsmParams,
    pub replicate_points: Vec<MsmParams>,
    /// Replicate standard deviation of `[eta1, eta2, eta3, sigma]`.
    pub sd: [f64; 4],
    /// Empirical 2.5% and 97.5% replicate percentiles of `[eta1, eta2, eta3, sigma]`.
    pub interval_95: [(f64, f64); 4],
    /// Fit on the original sample with unit resampling weights (frequentist estimators).
    pub full_sample_fit: Option<MsmParams>,
    /// Largest stabilized weight entering an MSM fit, after any truncation.
    pub max_weight: Option<f64>,
    pub failures: usize,
    pub attempted: usize,
    /// Acceptance rates and trace summaries of the posterior sampler (BCT only).
    pub sampler_diagnostics: Option<SamplerDiagnostics>,
}

fn summarize(
    kind: EstimatorKind,
    results: Vec<Result<(MsmParams, f64)>>,
    full_sample_fit: Option<MsmParams>,
    mut max_weight: Option<f64>,
) -> Result<EstimateWithUncertainty> {
    let attempted = results.len();
    let mut points = Vec::with_capacity(attempted);
    let mut failures = 0;
    let mut last = String::new();
    for r in results {
        match r {
            Ok((p, w)) => {
                points.push(p);
                if w.is_finite() {
                    max_weight = Some(max_weight.map_or(w, |m: f64| m.max(w)));
                }
            }
            Err(e) => {
                failures += 1;
                log::debug!("{kind}: replicate failed: {e}");
                last = e.to_string();
            }
        }
    }
    if failures as f64 > MAX_FAILURE_FRACTION * attempted as f64 || points.len() < 2 {
        return Err(Error::TooManyFailures { estimator: kind.name().into(), failures, attempted, last });
    }
    let mut sd = [0.0; 4];
    let mut interval_95 = [(0.0, 0.0); 4];
    let mut centre = [0.0; 4];
    for k in 0..4 {
        let xs: Vec<f64> = points.iter().map(|p| p.as_array()[k]).collect();
        centre[k] = mean(&xs);
        sd[k] = sample_sd(&xs).unwrap_or(0.0);
        interval_95[k] = (percentile(&xs, 2.5), percentile(&xs, 97.5));
    }
    Ok(EstimateWithUncertainty {
        estimator: kind,
        point: MsmParams::from_array(centre),
        replicate_points: points,
        sd,
        interval_95,
        full_sample_fit,
        max_weight,
        failures,
        attempted,
        sampler_diagnostics: None,
    })
}

/// Nuisance fits, weights and MSM fit of a frequentist pipeline under resampling counts.
fn frequentist_fit(
    kind: EstimatorKind,
    prepared: &[PreparedSubject],
    msm: &MsmData,
    counts: &[f64],
    eta3_max: f64,
) -> Result<(MsmParams, f64)> {
    if kind == EstimatorKind::Naive {
        return Ok((msm.fit(counts, eta3_max)?.params, 1.0));
    }
    let observed = kind == EstimatorKind::IptwObservedU;
    let theta = posterior::mle::fit_obs_interventional(prepared, counts, observed)?;
    let alpha = posterior::mle::fit_exp(prepared, counts)?;
    let policy = if observed { UPolicy::Observed } else { UPolicy::Ignore };
    let mut w = weights_prepared(prepared, &theta, &alpha, &policy, Some(counts))?;
    if kind == EstimatorKind::IptwIgnoreUTrunc95 {
        let cap = truncation_cap(&w, 95.0, Some(counts));
        w.iter_mut().for_each(|x| *x = x.min(cap));
    }
    let max_w = w.iter().copied().fold(0.0, f64::max);
    let exps: Vec<f64> = w.iter().zip(counts).map(|(a, b)| a * b).collect();
    Ok((msm.fit(&exps, eta3_max)?.params, max_w))
}

fn bct(prepared: &[PreparedSubject], msm: &MsmData, config: &EstimatorConfig) -> Result<EstimateWithUncertainty> {
    let seed = config.seed;
    let sampler = config.sampler_config(derive_seed(seed, &[1]));
    let theta0 = posterior::mle::em_initialize_prepared(prepared, 25)?;
    let alpha0 = posterior::mle::fit_exp(prepared, &vec![1.0; prepared.len()])?;
    let sample = posterior::sampler::run(prepared, &config.priors, &sampler, theta0, alpha0)?;
    let n = prepared.len();
    let results: Vec<Result<(MsmParams, f64)>> = sample
        .draws
        .par_iter()
        .map(|d| {
            let mut rng = rng_for(seed, &[2, d.draw_index as u64]);
            let policy = match config.bct_u_policy {
                BctUPolicy::Imputed => UPolicy::Imputed(
                    prepared
                        .iter()
                        .map(|s| u8::from(rng.random::<f64>() < conditional_u_prepared(s, &d.theta)))
                        .collect(),
                ),
                BctUPolicy::Marginalized => UPolicy::Marginalized,
            };
            let mut w = weights_prepared(prepared, &d.theta, &d.alpha, &policy, None)?;
            if let Some(p) = config.bct_truncation.filter(|p| *p < 100.0) {
                let cap = truncation_cap(&w, p, None);
                w.iter_mut().for_each(|x| *x = x.min(cap));
            }
            let max_w = w.iter().copied().fold(0.0, f64::max);
            let counts = bootstrap_counts(n, &mut rng);
            let exps: Vec<f64> = w.iter().zip(&counts).map(|(a, b)| a * b).collect();
            Ok((msm.fit(&exps, config.eta3_max)?.params, max_w))
        })
        .collect();
    let mut est = summarize(EstimatorKind::Bct, results, None, None)?;
    est.sampler_diagnostics = Some(sample.diagnostics);
    Ok(est)
}

/// Runs one estimator on a dataset. Frequentist estimators use a full-pipeline
/// nonparametric bootstrap; BCT uses posterior draws with Bayesian-bootstrap weights.
pub fn run_estimator(kind: EstimatorKind, dataset: &[Trajectory], config: &EstimatorConfig) -> Result<EstimateWithUncertainty> {
    config.check()?;
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    if kind == EstimatorKind::IptwObservedU {
        if let Some(t) = dataset.iter().find(|t| t.u.is_none()) {
            return Err(Error::Input(format!("{kind} needs recorded u; subject {} has none", t.id)));
        }
    }
    let prepared = crate::intensity::prepare(dataset);
    let msm = MsmData::new(dataset)?;
    if kind == EstimatorKind::Bct {
        return bct(&prepared, &msm, config);
    }
    let n = dataset.len();
    let (full, full_w) = frequentist_fit(kind, &prepared, &msm, &vec![1.0; n], config.eta3_max)?;
    let results: Vec<Result<(MsmParams, f64)>> = (0..config.replicate_count)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(config.seed, &[3, b as u64]);
            let counts = bootstrap_counts(n, &mut rng);
            frequentist_fit(kind, &prepared, &msm, &counts, config.eta3_max).map(|(p, _)| (p, f64::NAN))
        })
        .collect();
    let max_weight = (kind != EstimatorKind::Naive).then_some(full_w);
    summarize(kind, results, Some(full), max_weight)
}

/// MSM parameters fit with unit weights to `m` subjects simulated under the experimental
/// world with parameters `exp_params`.
pub fn true_eta(exp_params: &ExpWorldParams, config: &ScenarioConfig, m: usize, seed: u64) -> Result<MsmParams> {
    if m < 1000 {
        return Err(Error::Parameter(format!("true_eta needs m >= 1000, got {m}")));
    }
    let mut scenario = config.clone();
    scenario.exp_params = exp_params.clone();
    let data = simulate_dataset(&scenario, World::Experimental, m, seed)?;
    let msm = MsmData::new(&data)?;
    Ok(msm.fit(&vec![1.0; m], DEFAULT_ETA3_MAX)?.params)
}
