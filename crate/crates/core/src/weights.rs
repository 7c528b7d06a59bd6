//! Stabilized continuous-time inverse-probability-of-treatment weights, truncation and
//! Bayesian-bootstrap weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::{Model, PreparedSubject};
use crate::params::{ExpWorldParams, ObsWorldParams};
use crate::paths::Trajectory;
use crate::posterior::conditional_u_prepared;
use crate::stats::percentile;

/// How the confounder enters the observational-world denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UPolicy {
    /// Evaluate with `u = 0`; meant for parameters fit without confounder terms.
    Ignore,
    /// Use the recorded `u` of every subject.
    Observed,
    /// Use the supplied `u` of every subject.
    Imputed(Vec<u8>),
    /// Average the weight over `P(u | record, theta)`.
    Marginalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub weights: Vec<f64>,
    /// Bootstrap weights summing to one.
    pub pi: Vec<f64>,
    pub provenance: String,
}

impl WeightedSample {
    pub fn new(weights: Vec<f64>, provenance: impl Into<String>) -> Self {
        let n = weights.len();
        WeightedSample { weights, pi: vec![1.0 / n as f64; n], provenance: provenance.into() }
    }

    pub fn check(&self) -> Result<()> {
        if self.weights.len() != self.pi.len() {
            return Err(Error::Input("weights and pi differ in length".into()));
        }
        if self.weights.iter().chain(&self.pi).any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input("weights must be finite and non-negative".into()));
        }
        let s: f64 = self.pi.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("pi sums to {s}, not 1")));
        }
        Ok(())
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `log p_A^E + log p_T^E - log p_T^O` of one subject: everything but the `u`-dependent term.
fn log_ratio_parts(s: &PreparedSubject, theta: &ObsWorldParams, alpha: &ExpWorldParams) -> f64 {
    let e = Model::Experimental(alpha);
    s.treatment_loglik(e, 0.0) + s.termination_loglik(e) - s.termination_loglik(Model::Observational(theta))
}

fn finite_weight(id: u64, log_w: f64) -> Result<f64> {
    let w = log_w.exp();
    if w.is_finite() && w > 0.0 {
        Ok(w)
    } else {
        Err(Error::NonFiniteWeight { id, detail: format!("log weight {log_w}") })
    }
}

pub(crate) fn subject_weight(
    s: &PreparedSubject,
    theta: &ObsWorldParams,
    alpha: &ExpWorldParams,
    u: Option<f64>,
) -> Result<f64> {
    let base = log_ratio_parts(s, theta, alpha);
    let obs = Model::Observational(theta);
    match u {
        Some(u) => finite_weight(s.id, base - s.treatment_loglik(obs, u)),
        None => {
            let p1 = conditional_u_prepared(s, theta);
            let w0 = finite_weight(s.id, base - s.treatment_loglik(obs, 0.0))?;
            let w1 = finite_weight(s.id, base - s.treatment_loglik(obs, 1.0))?;
            let w = (1.0 - p1) * w0 + p1 * w1;
            if w.is_finite() && w > 0.0 {
                Ok(w)
            } else {
                Err(Error::NonFiniteWeight { id: s.id, detail: format!("marginalized weight {w}") })
            }
        }
    }
}

/// Weights of the subjects selected by `mask` (others get 0).
pub(crate) fn weights_prepared(
    prepared: &[PreparedSubject],
    theta: &ObsWorldParams,
    alpha: &ExpWorldParams,
    policy: &UPolicy,
    mask: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if let UPolicy::Imputed(u) = policy {
        if u.len() != prepared.len() {
            return Err(Error::Input(format!(
                "imputed u has {} entries for {} subjects",
                u.len(),
                prepared.len()
            )));
        }
        if u.iter().any(|&v| v > 1) {
            return Err(Error::Input("imputed u must be 0 or 1".into()));
        }
    }
    prepared
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if mask.is_some_and(|m| m[i] <= 0.0) {
                return Ok(0.0);
            }
            let u = match policy {
                UPolicy::Ignore => Some(0.0),
                UPolicy::Observed => Some(
                    s.u.ok_or_else(|| Error::Input(format!("subject {} has no recorded u", s.id)))?,
                ),
                UPolicy::Imputed(v) => Some(f64::from(v[i])),
                UPolicy::Marginalized => None,
            };
            subject_weight(s, theta, alpha, u)
        })
        .collect()
}

/// `w_i = p_A^E p_T^E / (p_A^O p_T^O)` for every subject, with `pi` uniform.
pub fn stabilized_weights(
    dataset: &[Trajectory],
    theta: &ObsWorldParams,
    alpha: &ExpWorldParams,
    policy: &UPolicy,
) -> Result<WeightedSample> {
    theta.check()?;
    alpha.check()?;
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let prepared = crate::intensity::prepare(dataset);
    let w = weights_prepared(&prepared, theta, alpha, policy, None)?;
    let label = match policy {
        UPolicy::Ignore => "ignore",
        UPolicy::Observed => "observed",
        UPolicy::Imputed(_) => "imputed",
        UPolicy::Marginalized => "marginalized",
    };
    Ok(WeightedSample::new(w, format!("stabilized:{label}")))
}

/// Caps weights at their empirical `pct`-th percentile (linear interpolation between
/// order statistics). When `multiplicity` is given, the percentile is taken over the
/// sample in which weight `i` appears `multiplicity[i]` times.
pub(crate) fn truncation_cap(weights: &[f64], pct: f64, multiplicity: Option<&[f64]>) -> f64 {
    match multiplicity {
        None => percentile(weights, pct),
        Some(m) => {
            let expanded: Vec<f64> = weights
                .iter()
                .zip(m)
                .flat_map(|(&w, &c)| std::iter::repeat_n(w, c.round().max(0.0) as usize))
                .collect();
            percentile(&expanded, pct)
        }
    }
}

pub fn truncate_weights(sample: &WeightedSample, pct: f64) -> Result<WeightedSample> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::Parameter(format!("truncation percentile must lie in (0, 100], got {pct}")));
    }
    if sample.weights.is_empty() {
        return Err(Error::Input("cannot truncate an empty sample".into()));
    }
    let cap = truncation_cap(&sample.weights, pct, None);
    Ok(WeightedSample {
        weights: sample.weights.iter().map(|&w| w.min(cap)).collect(),
        pi: sample.pi.clone(),
        provenance: format!("{}|trunc{pct}", sample.provenance),
    })
}

/// Multinomial resampling counts of size `n` over `n` subjects.
pub(crate) fn bootstrap_counts<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut counts = vec![0.0; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1.0;
    }
    counts
}

/// `pi` with `n pi ~ Multinomial(n; 1/n, ..., 1/n)`.
pub fn draw_bayesian_bootstrap<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Parameter("bootstrap size must be at least 1".into()));
    }
    let nf = n as f64;
    Ok(bootstrap_counts(n, rng).into_iter().map(|c| c / nf).collect())
}
