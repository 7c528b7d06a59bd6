//! Adaptive block random-walk Metropolis for `theta` (confounder summed out) and, as a
//! separate chain state, for `alpha` against the experimental-world likelihood.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mle, Priors};
use crate::error::{Error, Result};
use crate::intensity::{log_prior_u_unchecked, Model, PreparedSubject};
use crate::params::{ExpWorldParams, ObsWorldParams};
use crate::paths::Trajectory;
use crate::rng::rng_for;
use crate::stats::{dot, effective_sample_size, log_sum_exp2, mean, normal_log_pdf, percentile, sample_sd};

const TARGET_ACCEPTANCE: f64 = 0.25;
const ACCEPTANCE_BAND: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    TreatmentRate,
    DoseMark,
    Outcome,
    ConfounderProb,
    Termination,
    Covariate,
    ExpTreatmentRate,
    ExpDoseMark,
    ExpTermination,
}

impl Block {
    pub const ALL: [Block; 9] = [
        Block::TreatmentRate,
        Block::DoseMark,
        Block::Outcome,
        Block::ConfounderProb,
        Block::Termination,
        Block::Covariate,
        Block::ExpTreatmentRate,
        Block::ExpDoseMark,
        Block::ExpTermination,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::TreatmentRate => "treatment_rate",
            Block::DoseMark => "dose_mark",
            Block::Outcome => "outcome",
            Block::ConfounderProb => "confounder_prob",
            Block::Termination => "termination",
            Block::Covariate => "covariate",
            Block::ExpTreatmentRate => "exp_treatment_rate",
            Block::ExpDoseMark => "exp_dose_mark",
            Block::ExpTermination => "exp_termination",
        }
    }

    /// Names of the block's coordinates on the sampling scale.
    pub fn coordinates(self, p_z: usize) -> Vec<String> {
        let z = |v: &mut Vec<String>| v.extend((0..p_z).map(|k| format!("baseline{k}")));
        let mut v: Vec<String> = Vec::new();
        match self {
            Block::TreatmentRate => {
                v.extend(["intercept".into(), "covariate".into()]);
                z(&mut v);
                v.extend(["dose".into(), "confounder".into()]);
            }
            Block::DoseMark => {
                v.extend(["intercept".into(), "covariate".into()]);
                z(&mut v);
                v.extend(["dose".into(), "confounder".into(), "log_sigma".into()]);
            }
            Block::Outcome => {
                v.extend(["intercept".into(), "exposure".into(), "kernel_decay".into(), "covariate".into()]);
                z(&mut v);
                v.extend(["confounder".into(), "log_sigma".into()]);
            }
            Block::ConfounderProb => v.push("logit".into()),
            Block::Termination => {
                v.extend(["intercept".into(), "time".into(), "covariate".into()]);
                z(&mut v);
                v.push("dose".into());
            }
            Block::Covariate => {
                v.extend(["intercept".into(), "lag".into(), "dose".into()]);
                z(&mut v);
                v.push("log_sigma".into());
            }
            Block::ExpTreatmentRate => v.extend(["intercept".into(), "dose".into()]),
            Block::ExpDoseMark => v.extend(["intercept".into(), "dose".into(), "log_sigma".into()]),
            Block::ExpTermination => v.extend(["intercept".into(), "time".into(), "dose".into()]),
        }
        v
    }

    fn get(self, th: &ObsWorldParams, al: &ExpWorldParams) -> Vec<f64> {
        let mut v = Vec::new();
        match self {
            Block::TreatmentRate => {
                let r = &th.treatment_rate;
                v.extend([r.intercept, r.covariate]);
                v.extend(&r.baseline);
                v.extend([r.dose, r.confounder]);
            }
            Block::DoseMark => {
                let m = &th.dose_mark;
                v.extend([m.intercept, m.covariate]);
                v.extend(&m.baseline);
                v.extend([m.dose, m.confounder, m.sigma.ln()]);
            }
            Block::Outcome => {
                let o = &th.outcome;
                v.extend([o.intercept, o.exposure, o.kernel_decay, o.covariate]);
                v.extend(&o.baseline);
                v.extend([o.confounder, o.sigma.ln()]);
            }
            Block::ConfounderProb => v.push((th.confounder_prob / (1.0 - th.confounder_prob)).ln()),
            Block::Termination => {
                let t = &th.termination;
                v.extend([t.intercept, t.time, t.covariate]);
                v.extend(&t.baseline);
                v.push(t.dose);
            }
            Block::Covariate => {
                let c = &th.covariate;
                v.extend([c.intercept, c.lag, c.dose]);
                v.extend(&c.baseline);
                v.push(c.sigma.ln());
            }
            Block::ExpTreatmentRate => v.extend([al.treatment_rate.intercept, al.treatment_rate.dose]),
            Block::ExpDoseMark => {
                let m = &al.dose_mark;
                v.extend([m.intercept, m.dose, m.sigma.ln()]);
            }
            Block::ExpTermination => {
                let t = &al.termination;
                v.extend([t.intercept, t.time, t.dose]);
            }
        }
        v
    }

    fn set(self, th: &mut ObsWorldParams, al: &mut ExpWorldParams, v: &[f64]) {
        let p = th.p_z();
        match self {
            Block::TreatmentRate => {
                let r = &mut th.treatment_rate;
                r.intercept = v[0];
                r.covariate = v[1];
                r.baseline.copy_from_slice(&v[2..2 + p]);
                r.dose = v[2 + p];
                r.confounder = v[3 + p];
            }
            Block::DoseMark => {
                let m = &mut th.dose_mark;
                m.intercept = v[0];
                m.covariate = v[1];
                m.baseline.copy_from_slice(&v[2..2 + p]);
                m.dose = v[2 + p];
                m.confounder = v[3 + p];
                m.sigma = v[4 + p].exp();
            }
            Block::Outcome => {
                let o = &mut th.outcome;
                o.intercept = v[0];
                o.exposure = v[1];
                o.kernel_decay = v[2];
                o.covariate = v[3];
                o.baseline.copy_from_slice(&v[4..4 + p]);
                o.confounder = v[4 + p];
                o.sigma = v[5 + p].exp();
            }
            Block::ConfounderProb => th.confounder_prob = 1.0 / (1.0 + (-v[0]).exp()),
            Block::Termination => {
                let t = &mut th.termination;
                t.intercept = v[0];
                t.time = v[1];
                t.covariate = v[2];
                t.baseline.copy_from_slice(&v[3..3 + p]);
                t.dose = v[3 + p];
            }
            Block::Covariate => {
                let c = &mut th.covariate;
                c.intercept = v[0];
                c.lag = v[1];
                c.dose = v[2];
                c.baseline.copy_from_slice(&v[3..3 + p]);
                c.sigma = v[3 + p].exp();
            }
            Block::ExpTreatmentRate => {
                al.treatment_rate.intercept = v[0];
                al.treatment_rate.dose = v[1];
            }
            Block::ExpDoseMark => {
                al.dose_mark.intercept = v[0];
                al.dose_mark.dose = v[1];
                al.dose_mark.sigma = v[2].exp();
            }
            Block::ExpTermination => {
                al.termination.intercept = v[0];
                al.termination.time = v[1];
                al.termination.dose = v[2];
            }
        }
    }

    /// Positions holding regression coefficients (the ones a coefficient prior applies to).
    fn coefficient_mask(self, p_z: usize) -> Vec<bool> {
        self.coordinates(p_z)
            .iter()
            .map(|n| n != "log_sigma" && n != "kernel_decay" && n != "logit")
            .collect()
    }
}

/// Sampler settings. `n_iterations` counts full sweeps over all blocks, burn-in included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_iterations: usize,
    pub n_burnin: usize,
    pub n_thin: usize,
    /// Multipliers on the curvature-based initial proposal scale, per block.
    #[serde(default)]
    pub proposal_scales: BTreeMap<Block, f64>,
    #[serde(default = "default_adapt_window")]
    pub adapt_window: usize,
    #[serde(default)]
    pub seed: u64,
    /// Coordinates held at their initial values: `"block"` or `"block.coordinate"`.
    #[serde(default)]
    pub frozen: Vec<FrozenParam>,
}

fn default_adapt_window() -> usize {
    50
}

pub type FrozenParam = String;

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_iterations: 3000,
            n_burnin: 1000,
            n_thin: 10,
            proposal_scales: BTreeMap::new(),
            adapt_window: default_adapt_window(),
            seed: 0,
            frozen: Vec::new(),
        }
    }
}

impl SamplerConfig {
    /// Settings that retain exactly `draws` thinned draws after `burnin` sweeps.
    pub fn for_draws(draws: usize, burnin: usize, thin: usize, seed: u64) -> Self {
        SamplerConfig {
            n_iterations: burnin + draws * thin,
            n_burnin: burnin,
            n_thin: thin,
            seed,
            ..Default::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n_burnin >= self.n_iterations {
            return Err(Error::Config(format!(
                "n_burnin ({}) must be smaller than n_iterations ({})",
                self.n_burnin, self.n_iterations
            )));
        }
        if self.n_thin == 0 || self.adapt_window == 0 {
            return Err(Error::Config("n_thin and adapt_window must be at least 1".into()));
        }
        if let Some((b, s)) = self.proposal_scales.iter().find(|(_, s)| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("proposal scale for {} must be positive, got {s}", b.name())));
        }
        Ok(())
    }

    pub fn draw_count(&self) -> usize {
        (self.n_iterations - self.n_burnin).div_ceil(self.n_thin)
    }

    fn frozen_mask(&self, p_z: usize) -> Result<BTreeMap<Block, Vec<bool>>> {
        let mut out: BTreeMap<Block, Vec<bool>> =
            Block::ALL.iter().map(|b| (*b, vec![false; b.coordinates(p_z).len()])).collect();
        for spec in &self.frozen {
            let (bname, coord) = match spec.split_once('.') {
                Some((b, c)) => (b, Some(c)),
                None => (spec.as_str(), None),
            };
            let block = Block::ALL
                .iter()
                .copied()
                .find(|b| b.name() == bname)
                .ok_or_else(|| Error::Config(format!("unknown sampler block '{bname}'")))?;
            let names = block.coordinates(p_z);
            let mask = out.get_mut(&block).unwrap();
            match coord {
                None => mask.iter_mut().for_each(|m| *m = true),
                Some(c) => {
                    let k = names
                        .iter()
                        .position(|n| n == c)
                        .ok_or_else(|| Error::Config(format!("unknown coordinate '{spec}'")))?;
                    mask[k] = true;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub theta: ObsWorldParams,
    pub alpha: ExpWorldParams,
    /// Unnormalized log posterior of `theta` on its natural scale.
    pub log_post: f64,
    pub draw_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub block: Block,
    pub free_coordinates: usize,
    pub acceptance_rate: f64,
    pub proposals: usize,
    /// Whether the post-burn-in acceptance rate lies within the adaptation target band.
    pub on_target: bool,
    pub final_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub blocks: Vec<BlockDiagnostics>,
    pub traces: Vec<TraceSummary>,
    pub draws: usize,
}

#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub draws: Vec<PosteriorDraw>,
    pub diagnostics: SamplerDiagnostics,
}

/// Cached per-subject likelihood components.
struct State<'a> {
    prepared: &'a [PreparedSubject],
    theta: ObsWorldParams,
    alpha: ExpWorldParams,
    rate: Vec<[f64; 2]>,
    mark: Vec<[f64; 2]>,
    out: Vec<[f64; 2]>,
    term: Vec<f64>,
    cov: Vec<f64>,
    exp_rate: f64,
    exp_mark: f64,
    exp_term: f64,
}

enum Update {
    Rate(Vec<[f64; 2]>),
    Mark(Vec<[f64; 2]>),
    Out(Vec<[f64; 2]>),
    Prob,
    Term(Vec<f64>),
    Cov(Vec<f64>),
    ExpRate(f64),
    ExpMark(f64),
    ExpTerm(f64),
}

fn rate_terms(s: &PreparedSubject, th: &ObsWorldParams) -> [f64; 2] {
    let r = &th.treatment_rate;
    let zb = r.intercept + dot(&r.baseline, &s.z);
    let events: f64 = s.jumps.iter().map(|j| zb + r.covariate * j.covariate + r.dose * j.dose_left).sum();
    let lambda: f64 = s
        .pieces
        .iter()
        .map(|p| (zb + r.covariate * p.covariate + r.dose * p.dose).exp() * (p.end - p.start))
        .sum();
    let nj = s.jumps.len() as f64;
    [events - lambda, events + r.confounder * nj - r.confounder.exp() * lambda]
}

fn mark_terms(s: &PreparedSubject, th: &ObsWorldParams) -> [f64; 2] {
    let m = &th.dose_mark;
    let zb = m.intercept + dot(&m.baseline, &s.z);
    let mut acc = [0.0; 2];
    for j in &s.jumps {
        let mu = zb + m.covariate * j.covariate + m.dose * j.dose_left;
        acc[0] += normal_log_pdf(j.dose, mu, m.sigma);
        acc[1] += normal_log_pdf(j.dose, mu + m.confounder, m.sigma);
    }
    acc
}

fn out_terms(s: &PreparedSubject, th: &ObsWorldParams) -> [f64; 2] {
    let e = s.outcome_exposure(th);
    [s.outcome_loglik(th, 0.0, e), s.outcome_loglik(th, 1.0, e)]
}

impl<'a> State<'a> {
    fn new(prepared: &'a [PreparedSubject], theta: ObsWorldParams, alpha: ExpWorldParams) -> Self {
        let exp = Model::Experimental(&alpha);
        State {
            prepared,
            rate: prepared.iter().map(|s| rate_terms(s, &theta)).collect(),
            mark: prepared.iter().map(|s| mark_terms(s, &theta)).collect(),
            out: prepared.iter().map(|s| out_terms(s, &theta)).collect(),
            term: prepared.iter().map(|s| s.termination_loglik(Model::Observational(&theta))).collect(),
            cov: prepared.iter().map(|s| s.covariate_loglik(&theta)).collect(),
            exp_rate: prepared.iter().map(|s| s.treatment_rate_loglik(exp, 0.0)).sum(),
            exp_mark: prepared.iter().map(|s| s.mark_loglik(exp, 0.0)).sum(),
            exp_term: prepared.iter().map(|s| s.termination_loglik(exp)).sum(),
            theta,
            alpha,
        }
    }

    fn mixture(&self, rate: &[[f64; 2]], mark: &[[f64; 2]], out: &[[f64; 2]], prob: f64) -> f64 {
        let lp = [log_prior_u_unchecked(0.0, prob), log_prior_u_unchecked(1.0, prob)];
        let mut acc = 0.0;
        for i in 0..rate.len() {
            acc += log_sum_exp2(
                rate[i][0] + mark[i][0] + out[i][0] + lp[0],
                rate[i][1] + mark[i][1] + out[i][1] + lp[1],
            );
        }
        acc
    }

    /// Block-relevant log target on the sampling scale, with the update that produced it.
    fn evaluate(&self, block: Block, th: &ObsWorldParams, al: &ExpWorldParams, fresh: bool, priors: &Priors) -> (f64, Option<Update>) {
        let p_z = th.p_z();
        let coefs: Vec<f64> = block
            .get(th, al)
            .into_iter()
            .zip(block.coefficient_mask(p_z))
            .filter_map(|(v, m)| m.then_some(v))
            .collect();
        let prior = priors.coef_logpdf(&coefs);
        let ps = self.prepared;
        let (like, update) = match block {
            Block::TreatmentRate => {
                let rate = if fresh { ps.iter().map(|s| rate_terms(s, th)).collect() } else { self.rate.clone() };
                (self.mixture(&rate, &self.mark, &self.out, th.confounder_prob), Update::Rate(rate))
            }
            Block::DoseMark => {
                let mark = if fresh { ps.iter().map(|s| mark_terms(s, th)).collect() } else { self.mark.clone() };
                (self.mixture(&self.rate, &mark, &self.out, th.confounder_prob), Update::Mark(mark))
            }
            Block::Outcome => {
                if th.outcome.kernel_decay < 0.0 {
                    return (f64::NEG_INFINITY, None);
                }
                let out = if fresh { ps.iter().map(|s| out_terms(s, th)).collect() } else { self.out.clone() };
                (self.mixture(&self.rate, &self.mark, &out, th.confounder_prob), Update::Out(out))
            }
            Block::ConfounderProb => {
                let p = th.confounder_prob;
                if !(p > 0.0 && p < 1.0) {
                    return (f64::NEG_INFINITY, None);
                }
                (self.mixture(&self.rate, &self.mark, &self.out, p) + p.ln() + (1.0 - p).ln(), Update::Prob)
            }
            Block::Termination => {
                let term: Vec<f64> = if fresh {
                    ps.iter().map(|s| s.termination_loglik(Model::Observational(th))).collect()
                } else {
                    self.term.clone()
                };
                (term.iter().sum(), Update::Term(term))
            }
            Block::Covariate => {
                let cov: Vec<f64> = if fresh { ps.iter().map(|s| s.covariate_loglik(th)).collect() } else { self.cov.clone() };
                (cov.iter().sum(), Update::Cov(cov))
            }
            Block::ExpTreatmentRate => {
                let v = if fresh {
                    ps.iter().map(|s| s.treatment_rate_loglik(Model::Experimental(al), 0.0)).sum()
                } else {
                    self.exp_rate
                };
                (v, Update::ExpRate(v))
            }
            Block::ExpDoseMark => {
                let v = if fresh { ps.iter().map(|s| s.mark_loglik(Model::Experimental(al), 0.0)).sum() } else { self.exp_mark };
                (v, Update::ExpMark(v))
            }
            Block::ExpTermination => {
                let v = if fresh { ps.iter().map(|s| s.termination_loglik(Model::Experimental(al))).sum() } else { self.exp_term };
                (v, Update::ExpTerm(v))
            }
        };
        let total = like + prior;
        if total.is_finite() {
            (total, Some(update))
        } else {
            (f64::NEG_INFINITY, None)
        }
    }

    fn apply(&mut self, th: ObsWorldParams, al: ExpWorldParams, update: Update) {
        self.theta = th;
        self.alpha = al;
        match update {
            Update::Rate(v) => self.rate = v,
            Update::Mark(v) => self.mark = v,
            Update::Out(v) => self.out = v,
            Update::Prob => {}
            Update::Term(v) => self.term = v,
            Update::Cov(v) => self.cov = v,
            Update::ExpRate(v) => self.exp_rate = v,
            Update::ExpMark(v) => self.exp_mark = v,
            Update::ExpTerm(v) => self.exp_term = v,
        }
    }

    /// `log_posterior_obs` of the current `theta`, from the caches.
    fn log_post(&self, priors: &Priors) -> f64 {
        let th = &self.theta;
        self.mixture(&self.rate, &self.mark, &self.out, th.confounder_prob)
            + self.term.iter().sum::<f64>()
            + self.cov.iter().sum::<f64>()
            + super::log_prior_obs(th, priors)
    }
}

struct Adapt {
    block: Block,
    free: Vec<usize>,
    chol: DMatrix<f64>,
    log_scale: f64,
    history: Vec<Vec<f64>>,
    window_accepted: usize,
    window_proposed: usize,
    windows: usize,
    accepted: usize,
    proposed: usize,
}

fn initial_scales(state: &State, block: Block, free: &[usize], priors: &Priors) -> Vec<f64> {
    let x0 = block.get(&state.theta, &state.alpha);
    let (f0, _) = state.evaluate(block, &state.theta, &state.alpha, true, priors);
    free.iter()
        .map(|&k| {
            let h = 1e-3 * x0[k].abs().max(1.0);
            let eval = |d: f64| {
                let mut th = state.theta.clone();
                let mut al = state.alpha.clone();
                let mut x = x0.clone();
                x[k] += d;
                block.set(&mut th, &mut al, &x);
                state.evaluate(block, &th, &al, true, priors).0
            };
            let curv = -(eval(h) - 2.0 * f0 + eval(-h)) / (h * h);
            if curv.is_finite() && curv > 0.0 { 1.0 / curv.sqrt() } else { 0.1 }
        })
        .collect()
}

fn covariance_cholesky(history: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let d = history.first()?.len();
    let n = history.len() as f64;
    let mut mu = vec![0.0; d];
    for h in history {
        for k in 0..d {
            mu[k] += h[k] / n;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for h in history {
        for a in 0..d {
            for b in 0..=a {
                cov[(a, b)] += (h[a] - mu[a]) * (h[b] - mu[b]) / (n - 1.0);
            }
        }
    }
    let jitter = 1e-10 * (0..d).map(|k| cov[(k, k)]).fold(0.0, f64::max).max(1e-12);
    for a in 0..d {
        cov[(a, a)] += jitter;
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    cov.cholesky().map(|c| c.l())
}

/// Runs the sampler from an EM-based starting point for `theta` and the maximum-likelihood
/// `alpha`.
pub fn sample_posterior(dataset: &[Trajectory], priors: &Priors, config: &SamplerConfig) -> Result<PosteriorSample> {
    config.check()?;
    let prepared = crate::intensity::prepare(dataset);
    let theta = mle::em_initialize_prepared(&prepared, 25)?;
    let alpha = mle::fit_exp(&prepared, &vec![1.0; prepared.len()])?;
    run(&prepared, priors, config, theta, alpha)
}

/// Runs the sampler from the given starting values. Frozen coordinates keep these values.
pub fn sample_posterior_from(
    dataset: &[Trajectory],
    priors: &Priors,
    config: &SamplerConfig,
    theta: ObsWorldParams,
    alpha: ExpWorldParams,
) -> Result<PosteriorSample> {
    config.check()?;
    theta.check()?;
    alpha.check()?;
    let prepared = crate::intensity::prepare(dataset);
    run(&prepared, priors, config, theta, alpha)
}

pub(crate) fn run(
    prepared: &[PreparedSubject],
    priors: &Priors,
    config: &SamplerConfig,
    theta: ObsWorldParams,
    alpha: ExpWorldParams,
) -> Result<PosteriorSample> {
    config.check()?;
    if prepared.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let p_z = theta.p_z();
    let frozen = config.frozen_mask(p_z)?;
    let mut state = State::new(prepared, theta, alpha);
    let start = state.log_post(priors);
    if !start.is_finite() {
        return Err(Error::Diagnostics(format!("initial log posterior is not finite ({start})")));
    }
    let mut rng = rng_for(config.seed, &[0x5a4d_504c]);
    let mut adapts: Vec<Adapt> = Block::ALL
        .iter()
        .filter_map(|&block| {
            let free: Vec<usize> = frozen[&block].iter().enumerate().filter(|(_, f)| !**f).map(|(k, _)| k).collect();
            if free.is_empty() {
                return None;
            }
            let scales = initial_scales(&state, block, &free, priors);
            let mult = config.proposal_scales.get(&block).copied().unwrap_or(1.0);
            let d = free.len();
            Some(Adapt {
                block,
                chol: DMatrix::from_diagonal(&DVector::from_vec(scales)),
                log_scale: (mult * 2.38 / (d as f64).sqrt()).ln(),
                free,
                history: Vec::new(),
                window_accepted: 0,
                window_proposed: 0,
                windows: 0,
                accepted: 0,
                proposed: 0,
            })
        })
        .collect();

    let mut draws = Vec::with_capacity(config.draw_count());
    let history_start = config.n_burnin / 10;
    for it in 0..config.n_iterations {
        let burning = it < config.n_burnin;
        if it == config.n_burnin {
            for a in adapts.iter_mut() {
                a.accepted = 0;
                a.proposed = 0;
            }
        }
        for a in adapts.iter_mut() {
            let block = a.block;
            let x = block.get(&state.theta, &state.alpha);
            let (current, _) = state.evaluate(block, &state.theta, &state.alpha, false, priors);
            let d = a.free.len();
            let xi = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let step = &a.chol * xi * a.log_scale.exp();
            let mut cand = x.clone();
            for (j, &k) in a.free.iter().enumerate() {
                cand[k] += step[j];
            }
            let mut th = state.theta.clone();
            let mut al = state.alpha.clone();
            block.set(&mut th, &mut al, &cand);
            let (proposed, update) = state.evaluate(block, &th, &al, true, priors);
            let log_u: f64 = rng.random::<f64>().ln();
            a.proposed += 1;
            a.window_proposed += 1;
            let accept = update.is_some() && log_u < proposed - current;
            if accept {
                state.apply(th, al, update.unwrap());
                a.accepted += 1;
                a.window_accepted += 1;
            }
            if burning {
                if it >= history_start {
                    let now = block.get(&state.theta, &state.alpha);
                    a.history.push(a.free.iter().map(|&k| now[k]).collect());
                }
                if a.window_proposed >= config.adapt_window {
                    a.windows += 1;
                    let rate = a.window_accepted as f64 / a.window_proposed as f64;
                    a.log_scale += (rate - TARGET_ACCEPTANCE) * 2.0 / (a.windows as f64).sqrt();
                    a.window_accepted = 0;
                    a.window_proposed = 0;
                    if a.history.len() >= 10 * d + 20 {
                        if let Some(l) = covariance_cholesky(&a.history) {
                            a.chol = l;
                        }
                    }
                }
            }
        }
        if !burning && (it - config.n_burnin) % config.n_thin == 0 {
            let log_post = state.log_post(priors);
            if !log_post.is_finite() {
                return Err(Error::Diagnostics(format!("non-finite log posterior at iteration {it}")));
            }
            draws.push(PosteriorDraw {
                theta: state.theta.clone(),
                alpha: state.alpha.clone(),
                log_post,
                draw_index: draws.len(),
            });
        }
    }

    let mut blocks = Vec::new();
    for a in &adapts {
        let rate = if a.proposed == 0 { 0.0 } else { a.accepted as f64 / a.proposed as f64 };
        if a.accepted == 0 && a.proposed >= 20 {
            return Err(Error::Diagnostics(format!(
                "block {} rejected all {} proposals after adaptation",
                a.block.name(),
                a.proposed
            )));
        }
        blocks.push(BlockDiagnostics {
            block: a.block,
            free_coordinates: a.free.len(),
            acceptance_rate: rate,
            proposals: a.proposed,
            on_target: (rate - TARGET_ACCEPTANCE).abs() <= ACCEPTANCE_BAND,
            final_scale: a.log_scale.exp(),
        });
    }
    let traces = trace_summaries(&draws, &adapts, p_z);
    Ok(PosteriorSample { diagnostics: SamplerDiagnostics { blocks, traces, draws: draws.len() }, draws })
}

fn trace_summaries(draws: &[PosteriorDraw], adapts: &[Adapt], p_z: usize) -> Vec<TraceSummary> {
    let mut out = Vec::new();
    if draws.is_empty() {
        return out;
    }
    for a in adapts {
        let names = a.block.coordinates(p_z);
        let series: Vec<Vec<f64>> = draws.iter().map(|d| a.block.get(&d.theta, &d.alpha)).collect();
        for &k in &a.free {
            let xs: Vec<f64> = series.iter().map(|v| v[k]).collect();
            out.push(TraceSummary {
                parameter: format!("{}.{}", a.block.name(), names[k]),
                mean: mean(&xs),
                sd: sample_sd(&xs).unwrap_or(0.0),
                q025: percentile(&xs, 2.5),
                q500: percentile(&xs, 50.0),
                q975: percentile(&xs, 97.5),
                ess: effective_sample_size(&xs),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::World;
    use crate::scenario::simulation_preset;
    use crate::simulator::simulate_dataset;

    #[test]
    fn block_round_trip() {
        let c = simulation_preset(0.3);
        let mut th = c.obs_params.clone();
        let mut al = c.exp_params.clone();
        for b in Block::ALL {
            let v = b.get(&th, &al);
            assert_eq!(v.len(), b.coordinates(th.p_z()).len());
            b.set(&mut th, &mut al, &v);
        }
        assert!((th.confounder_prob - c.obs_params.confounder_prob).abs() < 1e-15);
        assert!((th.outcome.sigma - c.obs_params.outcome.sigma).abs() < 1e-15);
    }

    #[test]
    fn caches_match_direct_evaluation() {
        let c = simulation_preset(0.3);
        let data = simulate_dataset(&c, World::Observational, 20, 4).unwrap();
        let prepared = crate::intensity::prepare(&data);
        let st = State::new(&prepared, c.obs_params.clone(), c.exp_params.clone());
        let direct = super::super::log_posterior_obs(&data, &c.obs_params, &Priors::flat());
        assert!((st.log_post(&Priors::flat()) - direct).abs() < 1e-8);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SamplerConfig::for_draws(10, 20, 2, 1);
        assert!(cfg.check().is_ok());
        assert_eq!(cfg.draw_count(), 10);
        cfg.n_burnin = cfg.n_iterations;
        assert!(cfg.check().is_err());
        let mut cfg = SamplerConfig::default();
        cfg.frozen = vec!["outcome.nope".into()];
        assert!(cfg.frozen_mask(2).is_err());
    }

    #[test]
    fn fixed_seed_reproduces_draws() {
        let c = simulation_preset(0.15);
        let data = simulate_dataset(&c, World::Observational, 30, 9).unwrap();
        let cfg = SamplerConfig::for_draws(5, 40, 2, 77);
        let a = sample_posterior_from(&data, &Priors::flat(), &cfg, c.obs_params.clone(), c.exp_params.clone()).unwrap();
        let b = sample_posterior_from(&data, &Priors::flat(), &cfg, c.obs_params.clone(), c.exp_params.clone()).unwrap();
        assert_eq!(a.draws, b.draws);
    }
}
