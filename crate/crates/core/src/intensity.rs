//! Intensity functions, jump-mark densities, exact cumulative intensities and the
//! per-subject likelihood components.
//!
//! Every intensity is log-linear in the current history state. Between treatment jumps
//! and covariate grid points the state is constant, so integrals are computed exactly
//! on the refined partition of `[0, t_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{CovariatePath, Segment, TreatmentPath, Trajectory};
use crate::params::{ExpWorldParams, ObsWorldParams};
use crate::stats::{dot, expm1_over_x, normal_log_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum World {
    #[serde(rename = "jo")]
    Observational,
    #[serde(rename = "je")]
    Experimental,
}

impl std::str::FromStr for World {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jo" | "observational" => Ok(World::Observational),
            "je" | "experimental" => Ok(World::Experimental),
            other => Err(Error::Input(format!("unknown world '{other}' (expected jo|je)"))),
        }
    }
}

/// History available to an intensity or mark model at time `t`.
#[derive(Debug, Clone, Copy)]
pub struct HistoryState<'a> {
    pub t: f64,
    /// `a(t-)`
    pub dose_left: f64,
    /// `l(t)` for treatment models, `l(t-)` for the stop intensity.
    pub covariate: f64,
    pub baseline: &'a [f64],
    pub u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Process {
    Treatment,
    Termination,
}

/// The interventional-part model of one world.
#[derive(Debug, Clone, Copy)]
pub enum Model<'a> {
    Observational(&'a ObsWorldParams),
    Experimental(&'a ExpWorldParams),
}

impl<'a> Model<'a> {
    pub fn world(&self) -> World {
        match self {
            Model::Observational(_) => World::Observational,
            Model::Experimental(_) => World::Experimental,
        }
    }

    /// Linear predictor without the explicit time term, and the time slope.
    #[inline]
    fn linear_parts(&self, process: Process, s: &HistoryState) -> (f64, f64) {
        match (self, process) {
            (Model::Observational(p), Process::Treatment) => {
                let r = &p.treatment_rate;
                (
                    r.intercept
                        + r.covariate * s.covariate
                        + dot(&r.baseline, s.baseline)
                        + r.dose * s.dose_left
                        + r.confounder * s.u,
                    0.0,
                )
            }
            (Model::Experimental(p), Process::Treatment) => {
                let r = &p.treatment_rate;
                (r.intercept + r.dose * s.dose_left, 0.0)
            }
            (Model::Observational(p), Process::Termination) => {
                let r = &p.termination;
                (
                    r.intercept
                        + r.covariate * s.covariate
                        + dot(&r.baseline, s.baseline)
                        + r.dose * s.dose_left,
                    r.time,
                )
            }
            (Model::Experimental(p), Process::Termination) => {
                let r = &p.termination;
                (r.intercept + r.dose * s.dose_left, r.time)
            }
        }
    }

    pub fn log_rate(&self, process: Process, s: &HistoryState) -> f64 {
        let (base, slope) = self.linear_parts(process, s);
        base + slope * s.t
    }

    pub fn rate(&self, process: Process, s: &HistoryState) -> f64 {
        self.log_rate(process, s).exp()
    }

    /// Mean and standard deviation of the new dose at a treatment change.
    pub fn mark_moments(&self, s: &HistoryState) -> (f64, f64) {
        match self {
            Model::Observational(p) => {
                let m = &p.dose_mark;
                (
                    m.intercept
                        + m.covariate * s.covariate
                        + dot(&m.baseline, s.baseline)
                        + m.dose * s.dose_left
                        + m.confounder * s.u,
                    m.sigma,
                )
            }
            Model::Experimental(p) => {
                let m = &p.dose_mark;
                (m.intercept + m.dose * s.dose_left, m.sigma)
            }
        }
    }

    pub fn log_mark_density(&self, new_dose: f64, s: &HistoryState) -> Result<f64> {
        let (mean, sigma) = self.mark_moments(s);
        if !(sigma > 0.0) {
            return Err(Error::Parameter(format!("mark sigma must be positive, got {sigma}")));
        }
        Ok(normal_log_pdf(new_dose, mean, sigma))
    }
}

/// `exp(a1_0 + a1_L l + a1_Z'z + a1_a a(t-) + delta_rate u)`.
pub fn rate_treatment_obs(p: &ObsWorldParams, s: &HistoryState) -> f64 {
    Model::Observational(p).rate(Process::Treatment, s)
}

/// `exp(e1_0 + e1_a a(t-))`.
pub fn rate_treatment_exp(p: &ExpWorldParams, dose_left: f64) -> f64 {
    let s = HistoryState { t: 0.0, dose_left, covariate: 0.0, baseline: &[], u: 0.0 };
    Model::Experimental(p).rate(Process::Treatment, &s)
}

/// Stop intensity of either world; the confounder never enters.
pub fn rate_termination(model: Model, t: f64, dose_left: f64, covariate_left: f64, z: &[f64]) -> f64 {
    let s = HistoryState { t, dose_left, covariate: covariate_left, baseline: z, u: 0.0 };
    model.rate(Process::Termination, &s)
}

pub fn log_mark_density(model: Model, new_dose: f64, s: &HistoryState) -> Result<f64> {
    model.log_mark_density(new_dose, s)
}

/// `∫_{start}^{end} exp(base + slope t) dt`.
#[inline]
pub fn integrate_log_linear(base: f64, slope: f64, start: f64, end: f64) -> f64 {
    let h = end - start;
    (base + slope * start).exp() * h * expm1_over_x(slope * h)
}

/// Constant-state piece of the refined partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub start: f64,
    pub end: f64,
    pub dose: f64,
    pub covariate: f64,
}

/// Refines `[t0, t1]` at every treatment jump and covariate grid time.
pub fn pieces(a_path: &TreatmentPath, l_path: &CovariatePath, t0: f64, t1: f64) -> Vec<Piece> {
    let mut cuts = Vec::with_capacity(a_path.jumps.len() + l_path.grid.len() + 2);
    cuts.push(t0);
    cuts.extend(a_path.jumps.iter().map(|j| j.time).filter(|&t| t > t0 && t < t1));
    cuts.extend(l_path.grid.iter().copied().filter(|&t| t > t0 && t < t1));
    cuts.push(t1);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| Piece {
            start: w[0],
            end: w[1],
            dose: a_path.dose_at(w[0]).unwrap_or(0.0),
            covariate: l_path.value_at(w[0]),
        })
        .collect()
}

/// Exact integral of an intensity over explicit pieces.
pub fn cumulative_intensity_over(
    model: Model,
    process: Process,
    pieces: &[Piece],
    z: &[f64],
    u: f64,
) -> f64 {
    pieces
        .iter()
        .map(|p| {
            let s = HistoryState { t: p.start, dose_left: p.dose, covariate: p.covariate, baseline: z, u };
            let (base, slope) = model.linear_parts(process, &s);
            integrate_log_linear(base, slope, p.start, p.end)
        })
        .sum()
}

/// `Λ(t_start, t_end)` for a subject's paths.
pub fn cumulative_intensity_between(
    model: Model,
    process: Process,
    a_path: &TreatmentPath,
    l_path: &CovariatePath,
    z: &[f64],
    u: f64,
    t_start: f64,
    t_end: f64,
) -> Result<f64> {
    if t_end < t_start || t_start < 0.0 {
        return Err(Error::Domain(format!("invalid interval [{t_start}, {t_end}]")));
    }
    if t_end == t_start {
        return Ok(0.0);
    }
    let ps = pieces(a_path, l_path, t_start, t_end);
    Ok(cumulative_intensity_over(model, process, &ps, z, u))
}

/// `Λ(0, t_end)`.
pub fn cumulative_intensity(
    model: Model,
    process: Process,
    a_path: &TreatmentPath,
    l_path: &CovariatePath,
    z: &[f64],
    u: f64,
    t_end: f64,
) -> Result<f64> {
    cumulative_intensity_between(model, process, a_path, l_path, z, u, 0.0, t_end)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpContext {
    pub time: f64,
    pub dose: f64,
    pub dose_left: f64,
    /// `l(t)` at the jump.
    pub covariate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateObs {
    pub time: f64,
    pub value: f64,
    /// Previous grid value; `None` for the initial observation.
    pub lag: Option<f64>,
    pub dose_left: f64,
}

/// A trajectory pre-digested for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub id: u64,
    pub z: Vec<f64>,
    pub u: Option<f64>,
    pub y: f64,
    pub t_max: f64,
    pub terminated: bool,
    pub pieces: Vec<Piece>,
    pub jumps: Vec<JumpContext>,
    pub end_dose_left: f64,
    pub end_covariate_left: f64,
    pub covariate_at_end: f64,
    pub covariate_obs: Vec<CovariateObs>,
    pub dose_segments: Vec<Segment>,
}

impl PreparedSubject {
    pub fn new(traj: &Trajectory) -> Self {
        let t_max = traj.t_max;
        let a = &traj.a_path;
        let l = &traj.l_path;
        let jumps = a
            .jumps
            .iter()
            .filter(|j| j.time <= t_max)
            .map(|j| JumpContext {
                time: j.time,
                dose: j.dose,
                dose_left: a.left_limit_unchecked(j.time),
                covariate: l.value_at(j.time),
            })
            .collect();
        let mut covariate_obs = Vec::with_capacity(l.grid.len());
        for (k, (&time, &value)) in l.grid.iter().zip(&l.values).enumerate() {
            if time > t_max {
                break;
            }
            covariate_obs.push(CovariateObs {
                time,
                value,
                lag: if k == 0 { None } else { Some(l.values[k - 1]) },
                dose_left: if time > 0.0 { a.left_limit_unchecked(time) } else { 0.0 },
            });
        }
        PreparedSubject {
            id: traj.id,
            z: traj.z.clone(),
            u: traj.u_value(),
            y: traj.y,
            t_max,
            terminated: traj.terminated,
            pieces: pieces(a, l, 0.0, t_max),
            jumps,
            end_dose_left: a.left_limit_unchecked(t_max),
            end_covariate_left: l.value_left_limit(t_max),
            covariate_at_end: l.value_at(t_max),
            covariate_obs,
            dose_segments: a.segments(t_max).unwrap_or_default(),
        }
    }

    /// Jump-time log-intensities minus the cumulative intensity of treatment changes.
    pub fn treatment_rate_loglik(&self, model: Model, u: f64) -> f64 {
        let mut acc = 0.0;
        for j in &self.jumps {
            let s = HistoryState { t: j.time, dose_left: j.dose_left, covariate: j.covariate, baseline: &self.z, u };
            acc += model.log_rate(Process::Treatment, &s);
        }
        acc - cumulative_intensity_over(model, Process::Treatment, &self.pieces, &self.z, u)
    }

    /// Sum of jump-mark log densities. Scales are assumed positive.
    pub fn mark_loglik(&self, model: Model, u: f64) -> f64 {
        self.jumps
            .iter()
            .map(|j| {
                let s = HistoryState { t: j.time, dose_left: j.dose_left, covariate: j.covariate, baseline: &self.z, u };
                let (mean, sigma) = model.mark_moments(&s);
                normal_log_pdf(j.dose, mean, sigma)
            })
            .sum()
    }

    pub fn treatment_loglik(&self, model: Model, u: f64) -> f64 {
        self.treatment_rate_loglik(model, u) + self.mark_loglik(model, u)
    }

    pub fn termination_loglik(&self, model: Model) -> f64 {
        let mut acc = -cumulative_intensity_over(model, Process::Termination, &self.pieces, &self.z, 0.0);
        if self.terminated {
            let s = HistoryState {
                t: self.t_max,
                dose_left: self.end_dose_left,
                covariate: self.end_covariate_left,
                baseline: &self.z,
                u: 0.0,
            };
            acc += model.log_rate(Process::Termination, &s);
        }
        acc
    }

    pub fn covariate_loglik(&self, p: &ObsWorldParams) -> f64 {
        let c = &p.covariate;
        let zc = dot(&c.baseline, &self.z);
        self.covariate_obs
            .iter()
            .map(|o| {
                let mean = match o.lag {
                    None => c.intercept + zc,
                    Some(lag) => c.intercept + c.lag * lag + c.dose * o.dose_left + zc,
                };
                normal_log_pdf(o.value, mean, c.sigma)
            })
            .sum()
    }

    pub fn outcome_mean(&self, p: &ObsWorldParams, u: f64, exposure: f64) -> f64 {
        let m = &p.outcome;
        m.intercept
            + m.exposure * exposure
            + m.covariate * self.covariate_at_end
            + dot(&m.baseline, &self.z)
            + m.confounder * u
    }

    pub fn outcome_loglik(&self, p: &ObsWorldParams, u: f64, exposure: f64) -> f64 {
        normal_log_pdf(self.y, self.outcome_mean(p, u, exposure), p.outcome.sigma)
    }

    pub fn outcome_exposure(&self, p: &ObsWorldParams) -> f64 {
        crate::msm::exposure_over_segments(&self.dose_segments, self.t_max, p.outcome.kernel_decay)
    }
}

pub fn prepare(dataset: &[Trajectory]) -> Vec<PreparedSubject> {
    dataset.iter().map(PreparedSubject::new).collect()
}

fn check_model(model: Model) -> Result<()> {
    match model {
        Model::Observational(p) => p.check(),
        Model::Experimental(p) => p.check(),
    }
}

/// Log of the treatment-process likelihood `p_A` of one subject in the given world.
pub fn log_lik_treatment(traj: &Trajectory, model: Model, u: f64) -> Result<f64> {
    check_model(model)?;
    Ok(PreparedSubject::new(traj).treatment_loglik(model, u))
}

/// Log of the treatment-stop likelihood `p_Tmax`; censored subjects contribute survival only.
pub fn log_lik_termination(traj: &Trajectory, model: Model) -> Result<f64> {
    check_model(model)?;
    Ok(PreparedSubject::new(traj).termination_loglik(model))
}

/// Gaussian AR log density of the covariate observations in `[0, t_max]`.
pub fn log_lik_covariate(traj: &Trajectory, p: &ObsWorldParams) -> Result<f64> {
    p.check()?;
    Ok(PreparedSubject::new(traj).covariate_loglik(p))
}

/// Conditional outcome log density given the precomputed kernel exposure.
pub fn log_lik_outcome(traj: &Trajectory, p: &ObsWorldParams, u: f64, exposure: f64) -> Result<f64> {
    p.check()?;
    Ok(PreparedSubject::new(traj).outcome_loglik(p, u, exposure))
}

pub fn log_prior_confounder(u: u8, prob: f64) -> Result<f64> {
    if u > 1 {
        return Err(Error::Domain(format!("u must be 0 or 1, got {u}")));
    }
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::Domain(format!("confounder probability must lie in (0, 1), got {prob}")));
    }
    Ok(if u == 1 { prob.ln() } else { (1.0 - prob).ln() })
}

#[inline]
pub(crate) fn log_prior_u_unchecked(u: f64, prob: f64) -> f64 {
    if u > 0.5 {
        prob.ln()
    } else {
        (-prob).ln_1p()
    }
}
