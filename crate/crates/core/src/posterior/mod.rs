//! Observational-world likelihood with the binary confounder summed out, the
//! conditional distribution of each subject's confounder, maximum-likelihood fits of
//! the nuisance models and a blockwise adaptive Metropolis sampler.

pub(crate) mod mle;
pub(crate) mod sampler;

pub use mle::{em_initialize, fit_mle, fit_mle_weighted, MleEstimate, MleTarget};
pub use sampler::{
    sample_posterior, sample_posterior_from, Block, BlockDiagnostics, FrozenParam, PosteriorDraw,
    PosteriorSample, SamplerConfig, SamplerDiagnostics, TraceSummary,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::{log_prior_u_unchecked, Model, PreparedSubject};
use crate::params::ObsWorldParams;
use crate::paths::Trajectory;
use crate::stats::log_sum_exp2;

/// Independent priors. Regression coefficients are flat unless `coefficient_sd` is set,
/// in which case each gets a `N(0, coefficient_sd^2)` prior. Scales are flat on the log
/// scale, the kernel decay is flat on `[0, ∞)` and `P(U = 1)` is `Uniform(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Priors {
    pub coefficient_sd: Option<f64>,
}

impl Priors {
    pub fn flat() -> Self {
        Priors { coefficient_sd: None }
    }

    pub(crate) fn coef_logpdf(&self, coefs: &[f64]) -> f64 {
        match self.coefficient_sd {
            None => 0.0,
            Some(sd) => coefs
                .iter()
                .map(|&c| crate::stats::normal_log_pdf(c, 0.0, sd))
                .sum(),
        }
    }
}

/// `g(u)` terms of one subject: outcome, treatment process and confounder prior.
pub(crate) fn mixture_terms(s: &PreparedSubject, theta: &ObsWorldParams, exposure: f64) -> [f64; 2] {
    let model = Model::Observational(theta);
    [0.0, 1.0].map(|u| {
        s.outcome_loglik(theta, u, exposure)
            + s.treatment_loglik(model, u)
            + log_prior_u_unchecked(u, theta.confounder_prob)
    })
}

pub(crate) fn subject_marginal(s: &PreparedSubject, theta: &ObsWorldParams) -> Result<f64> {
    let exposure = s.outcome_exposure(theta);
    let g = mixture_terms(s, theta, exposure);
    let v = log_sum_exp2(g[0], g[1])
        + s.covariate_loglik(theta)
        + s.termination_loglik(Model::Observational(theta));
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation { id: s.id, detail: format!("marginal log-likelihood {v}") })
    }
}

pub(crate) fn marginal_loglik_prepared(prepared: &[PreparedSubject], theta: &ObsWorldParams) -> Result<f64> {
    theta.check()?;
    prepared.iter().map(|s| subject_marginal(s, theta)).sum()
}

/// Observed-data log-likelihood with `u` summed out per subject. Stored `u` values are ignored.
pub fn marginal_loglik_obs(dataset: &[Trajectory], theta: &ObsWorldParams) -> Result<f64> {
    theta.check()?;
    dataset
        .iter()
        .map(|t| subject_marginal(&PreparedSubject::new(t), theta))
        .sum()
}

/// Regression coefficients of `theta` (every block except scales, decay and `P(U = 1)`).
pub(crate) fn regression_coefficients(theta: &ObsWorldParams) -> Vec<f64> {
    let r = &theta.treatment_rate;
    let m = &theta.dose_mark;
    let t = &theta.termination;
    let c = &theta.covariate;
    let o = &theta.outcome;
    let mut v = vec![r.intercept, r.covariate, r.dose, r.confounder];
    v.extend(&r.baseline);
    v.extend([m.intercept, m.covariate, m.dose, m.confounder]);
    v.extend(&m.baseline);
    v.extend([t.intercept, t.time, t.covariate, t.dose]);
    v.extend(&t.baseline);
    v.extend([c.intercept, c.lag, c.dose]);
    v.extend(&c.baseline);
    v.extend([o.intercept, o.exposure, o.covariate, o.confounder]);
    v.extend(&o.baseline);
    v
}

/// Log prior density of `theta` on its natural scale; `-∞` outside the support.
pub fn log_prior_obs(theta: &ObsWorldParams, priors: &Priors) -> f64 {
    if theta.check().is_err() {
        return f64::NEG_INFINITY;
    }
    priors.coef_logpdf(&regression_coefficients(theta))
        - theta.dose_mark.sigma.ln()
        - theta.covariate.sigma.ln()
        - theta.outcome.sigma.ln()
}

/// Unnormalized log posterior; `-∞` when `theta` is outside the support or a term is
/// not finite.
pub fn log_posterior_obs(dataset: &[Trajectory], theta: &ObsWorldParams, priors: &Priors) -> f64 {
    let prior = log_prior_obs(theta, priors);
    if prior == f64::NEG_INFINITY {
        return prior;
    }
    match marginal_loglik_obs(dataset, theta) {
        Ok(v) => v + prior,
        Err(_) => f64::NEG_INFINITY,
    }
}

pub(crate) fn conditional_u_prepared(s: &PreparedSubject, theta: &ObsWorldParams) -> f64 {
    let g = mixture_terms(s, theta, s.outcome_exposure(theta));
    1.0 / (1.0 + (g[0] - g[1]).exp())
}

/// `P(u = 1 | observed record, theta)`.
pub fn conditional_posterior_u(traj: &Trajectory, theta: &ObsWorldParams) -> f64 {
    conditional_u_prepared(&PreparedSubject::new(traj), theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::World;
    use crate::scenario::simulation_preset;
    use crate::simulator::simulate_dataset;

    fn small() -> (Vec<Trajectory>, ObsWorldParams) {
        let c = simulation_preset(0.3);
        (simulate_dataset(&c, World::Observational, 5, 3).unwrap(), c.obs_params)
    }

    #[test]
    fn u_drops_out_without_confounding() {
        let (data, mut theta) = small();
        theta.outcome.confounder = 0.0;
        theta.treatment_rate.confounder = 0.0;
        theta.dose_mark.confounder = 0.0;
        let marg = marginal_loglik_obs(&data, &theta).unwrap();
        let complete: f64 = data
            .iter()
            .map(|t| {
                let s = PreparedSubject::new(t);
                let e = s.outcome_exposure(&theta);
                let m = Model::Observational(&theta);
                s.outcome_loglik(&theta, 1.0, e) + s.treatment_loglik(m, 1.0) + s.covariate_loglik(&theta) + s.termination_loglik(m)
            })
            .sum();
        assert!((marg - complete).abs() < 1e-9);
        for t in &data {
            assert!((conditional_posterior_u(t, &theta) - theta.confounder_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_mixture_limit() {
        let (data, mut theta) = small();
        theta.outcome.confounder = 0.5;
        theta.confounder_prob = 1.0 - 1e-12;
        let marg = marginal_loglik_obs(&data, &theta).unwrap();
        let all_one: f64 = data
            .iter()
            .map(|t| {
                let s = PreparedSubject::new(t);
                let e = s.outcome_exposure(&theta);
                let m = Model::Observational(&theta);
                s.outcome_loglik(&theta, 1.0, e) + s.treatment_loglik(m, 1.0) + s.covariate_loglik(&theta) + s.termination_loglik(m)
            })
            .sum();
        assert!((marg - all_one).abs() < 1e-6);
    }

    #[test]
    fn posterior_support() {
        let (data, mut theta) = small();
        let lp = log_posterior_obs(&data, &theta, &Priors::flat());
        let ll = marginal_loglik_obs(&data, &theta).unwrap();
        let sig = theta.dose_mark.sigma.ln() + theta.covariate.sigma.ln() + theta.outcome.sigma.ln();
        assert!((lp - (ll - sig)).abs() < 1e-9);
        theta.confounder_prob = 1.2;
        assert_eq!(log_posterior_obs(&data, &theta, &Priors::flat()), f64::NEG_INFINITY);
    }

    #[test]
    fn even_odds() {
        let (data, mut theta) = small();
        theta.outcome.confounder = 0.0;
        theta.treatment_rate.confounder = 0.0;
        theta.dose_mark.confounder = 0.0;
        theta.confounder_prob = 0.5;
        assert!((conditional_posterior_u(&data[0], &theta) - 0.5).abs() < 1e-12);
    }
}
