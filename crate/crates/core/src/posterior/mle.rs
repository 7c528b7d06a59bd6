//! Maximum-likelihood fits of the nuisance models.
//!
//! Intensities are log-linear, so each one is a weighted Poisson-process regression fit by
//! damped Newton ascent with the exact Hessian. Mark, covariate and outcome models are
//! Gaussian and fit in closed form (the outcome by profiling the kernel decay).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::PreparedSubject;
use crate::msm::{KernelRegression, DEFAULT_ETA3_MAX};
use crate::optim::{newton_maximize, Eval, NormalEquations};
use crate::params::*;
use crate::paths::{Segment, Trajectory};

const GRAD_TOL: f64 = 1e-6;
const MAX_NEWTON: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MleTarget {
    /// Observational parameters with every confounder term dropped.
    ObsIgnoreU,
    /// Observational parameters with the recorded `u` used as a covariate.
    ObsObservedU,
    /// Experimental-world parameters fit to the interventional components only.
    ExpMarginal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MleEstimate {
    Observational(ObsWorldParams),
    Experimental(ExpWorldParams),
}

impl MleEstimate {
    pub fn observational(&self) -> Option<&ObsWorldParams> {
        match self {
            MleEstimate::Observational(p) => Some(p),
            MleEstimate::Experimental(_) => None,
        }
    }

    pub fn experimental(&self) -> Option<&ExpWorldParams> {
        match self {
            MleEstimate::Experimental(p) => Some(p),
            MleEstimate::Observational(_) => None,
        }
    }
}

/// One weighted copy of a subject with a fixed confounder value.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Unit {
    pub index: usize,
    pub u: f64,
    pub weight: f64,
}

/// Weighted log-linear intensity regression on piecewise-constant covariates. The
/// optional time column enters the exponent linearly and is integrated exactly.
struct PoissonDesign {
    p: usize,
    time_col: Option<usize>,
    piece_x: Vec<f64>,
    piece_span: Vec<(f64, f64, f64)>,
    event_x: Vec<f64>,
    event_w: Vec<f64>,
}

/// `∫_0^h τ^k e^{bτ} dτ` for `k = 0, 1, 2`.
fn tau_moments(b: f64, h: f64) -> [f64; 3] {
    let x = b * h;
    if x.abs() < 0.5 {
        let mut m = [0.0; 3];
        let mut term = 1.0;
        for n in 0..30 {
            if n > 0 {
                term *= x / n as f64;
            }
            for (k, mk) in m.iter_mut().enumerate() {
                *mk += term / (n + k + 1) as f64;
            }
            if term.abs() < 1e-18 {
                break;
            }
        }
        [m[0] * h, m[1] * h * h, m[2] * h * h * h]
    } else {
        let e = x.exp();
        let m0 = (e - 1.0) / b;
        let m1 = (h * e - m0) / b;
        let m2 = (h * h * e - 2.0 * m1) / b;
        [m0, m1, m2]
    }
}

impl PoissonDesign {
    fn new(p: usize, time_col: Option<usize>) -> Self {
        PoissonDesign { p, time_col, piece_x: Vec::new(), piece_span: Vec::new(), event_x: Vec::new(), event_w: Vec::new() }
    }

    fn add_piece(&mut self, x: &[f64], start: f64, end: f64, w: f64) {
        debug_assert_eq!(x.len(), self.p);
        self.piece_x.extend_from_slice(x);
        if let Some(tc) = self.time_col {
            let base = self.piece_x.len() - self.p;
            self.piece_x[base + tc] = 0.0;
        }
        self.piece_span.push((start, end, w));
    }

    fn add_event(&mut self, x: &[f64], w: f64) {
        self.event_x.extend_from_slice(x);
        self.event_w.push(w);
    }

    fn eval(&self, beta: &DVector<f64>) -> Eval {
        let p = self.p;
        let mut value = 0.0;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for (x, &w) in self.event_x.chunks_exact(p).zip(&self.event_w) {
            let eta: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            value += w * eta;
            for j in 0..p {
                grad[j] += w * x[j];
            }
        }
        let slope = self.time_col.map_or(0.0, |c| beta[c]);
        for (x, &(s, e, w)) in self.piece_x.chunks_exact(p).zip(&self.piece_span) {
            let c: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let h = e - s;
            let scale = (c + slope * s).exp();
            let [m0, m1, m2] = tau_moments(slope, h);
            let i0 = scale * m0;
            value -= w * i0;
            for j in 0..p {
                if Some(j) == self.time_col {
                    continue;
                }
                let wxj = w * x[j];
                grad[j] -= wxj * i0;
                for k in 0..=j {
                    if Some(k) == self.time_col {
                        continue;
                    }
                    hess[(j, k)] -= wxj * x[k] * i0;
                }
            }
            if let Some(tc) = self.time_col {
                let i1 = scale * (s * m0 + m1);
                let i2 = scale * (s * s * m0 + 2.0 * s * m1 + m2);
                grad[tc] -= w * i1;
                hess[(tc, tc)] -= w * i2;
                for j in 0..p {
                    if j != tc {
                        hess[(j.max(tc), j.min(tc))] -= w * x[j] * i1;
                    }
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                hess[(k, j)] = hess[(j, k)];
            }
        }
        Eval { value, grad, hess }
    }

    fn fit(&self, what: &str) -> Result<Vec<f64>> {
        let events: f64 = self.event_w.iter().sum();
        let time: f64 = self.piece_span.iter().map(|&(s, e, w)| w * (e - s)).sum();
        if !(events > 0.0) || !(time > 0.0) {
            return Err(Error::DegenerateFit(format!("{what}: no events or no time at risk")));
        }
        let mut x0 = DVector::zeros(self.p);
        x0[0] = (events / time).ln();
        let r = newton_maximize(|b| self.eval(b), x0, GRAD_TOL, MAX_NEWTON).map_err(|e| match e {
            Error::NonConvergence { iterations, grad_norm, trace } => Error::NonConvergence {
                iterations,
                grad_norm,
                trace: format!("{what}: {trace}"),
            },
            other => other,
        })?;
        Ok(r.x.iter().copied().collect())
    }
}

fn ols(ne: &NormalEquations, what: &str) -> Result<(Vec<f64>, f64)> {
    let (beta, rss) = ne
        .solve()
        .ok_or_else(|| Error::DegenerateFit(format!("{what}: design is rank deficient")))?;
    let sigma = (rss / ne.weight_sum).sqrt();
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::DegenerateFit(format!("{what}: residual scale {sigma}")));
    }
    Ok((beta.iter().copied().collect(), sigma))
}

fn split_baseline(beta: &[f64], from: usize, p_z: usize) -> Vec<f64> {
    beta[from..from + p_z].to_vec()
}

/// Rate `[1, l, z.., a(t-), (u)]` and mark fits of the observational treatment model.
pub(crate) fn fit_obs_treatment(
    prepared: &[PreparedSubject],
    units: &[Unit],
    with_u: bool,
) -> Result<(TreatmentRateObs, DoseMarkObs)> {
    let p_z = prepared.first().map_or(0, |s| s.z.len());
    let p = 3 + p_z + usize::from(with_u);
    let mut design = PoissonDesign::new(p, None);
    let mut marks = NormalEquations::new(p);
    let mut row = vec![0.0; p];
    for unit in units.iter().filter(|u| u.weight > 0.0) {
        let s = &prepared[unit.index];
        row[0] = 1.0;
        row[2..2 + p_z].copy_from_slice(&s.z);
        if with_u {
            row[p - 1] = unit.u;
        }
        for pc in &s.pieces {
            row[1] = pc.covariate;
            row[2 + p_z] = pc.dose;
            design.add_piece(&row, pc.start, pc.end, unit.weight);
        }
        for j in &s.jumps {
            row[1] = j.covariate;
            row[2 + p_z] = j.dose_left;
            design.add_event(&row, unit.weight);
            marks.add(&row, j.dose, unit.weight);
        }
    }
    let b = design.fit("treatment rate")?;
    let (m, sigma) = ols(&marks, "dose mark")?;
    let rate = TreatmentRateObs {
        intercept: b[0],
        covariate: b[1],
        baseline: split_baseline(&b, 2, p_z),
        dose: b[2 + p_z],
        confounder: if with_u { b[p - 1] } else { 0.0 },
    };
    let mark = DoseMarkObs {
        intercept: m[0],
        covariate: m[1],
        baseline: split_baseline(&m, 2, p_z),
        dose: m[2 + p_z],
        confounder: if with_u { m[p - 1] } else { 0.0 },
        sigma,
    };
    Ok((rate, mark))
}

/// Stop intensity `[1, t, l(t-), z.., a(t-)]`.
pub(crate) fn fit_obs_termination(prepared: &[PreparedSubject], weights: &[f64]) -> Result<TerminationObs> {
    let p_z = prepared.first().map_or(0, |s| s.z.len());
    let p = 4 + p_z;
    let mut design = PoissonDesign::new(p, Some(1));
    let mut row = vec![0.0; p];
    for (s, &w) in prepared.iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        row[0] = 1.0;
        row[3..3 + p_z].copy_from_slice(&s.z);
        for pc in &s.pieces {
            row[2] = pc.covariate;
            row[3 + p_z] = pc.dose;
            design.add_piece(&row, pc.start, pc.end, w);
        }
        if s.terminated {
            row[1] = s.t_max;
            row[2] = s.end_covariate_left;
            row[3 + p_z] = s.end_dose_left;
            design.add_event(&row, w);
            row[1] = 0.0;
        }
    }
    let b = design.fit("termination")?;
    Ok(TerminationObs {
        intercept: b[0],
        time: b[1],
        covariate: b[2],
        baseline: split_baseline(&b, 3, p_z),
        dose: b[3 + p_z],
    })
}

/// Grid transition `[1, lag, a(t-), z..]`; the initial draw uses `lag = a(t-) = 0`.
pub(crate) fn fit_covariate(prepared: &[PreparedSubject], weights: &[f64]) -> Result<CovariateTransition> {
    let p_z = prepared.first().map_or(0, |s| s.z.len());
    let p = 3 + p_z;
    let mut ne = NormalEquations::new(p);
    let mut row = vec![0.0; p];
    for (s, &w) in prepared.iter().zip(weights) {
        row[0] = 1.0;
        row[3..].copy_from_slice(&s.z);
        for o in &s.covariate_obs {
            match o.lag {
                None => {
                    row[1] = 0.0;
                    row[2] = 0.0;
                }
                Some(lag) => {
                    row[1] = lag;
                    row[2] = o.dose_left;
                }
            }
            ne.add(&row, o.value, w);
        }
    }
    let (b, sigma) = ols(&ne, "covariate transition")?;
    Ok(CovariateTransition {
        intercept: b[0],
        lag: b[1],
        dose: b[2],
        baseline: split_baseline(&b, 3, p_z),
        sigma,
    })
}

/// Outcome regression on `[1, exposure(decay), l(t_max), z.., (u)]`.
pub(crate) fn fit_outcome(prepared: &[PreparedSubject], units: &[Unit], with_u: bool) -> Result<OutcomeModel> {
    let p_z = prepared.first().map_or(0, |s| s.z.len());
    let units: Vec<&Unit> = units.iter().filter(|u| u.weight > 0.0).collect();
    let segments: Vec<Vec<Segment>> = units.iter().map(|u| prepared[u.index].dose_segments.clone()).collect();
    let t_max: Vec<f64> = units.iter().map(|u| prepared[u.index].t_max).collect();
    let y: Vec<f64> = units.iter().map(|u| prepared[u.index].y).collect();
    let extras: Vec<Vec<f64>> = units
        .iter()
        .map(|u| {
            let s = &prepared[u.index];
            let mut r = Vec::with_capacity(2 + p_z);
            r.push(s.covariate_at_end);
            r.extend(&s.z);
            if with_u {
                r.push(u.u);
            }
            r
        })
        .collect();
    let w: Vec<f64> = units.iter().map(|u| u.weight).collect();
    let reg = KernelRegression { segments: &segments, t_max: &t_max, y: &y, extras: Some(&extras) };
    let fit = reg.fit(&w, DEFAULT_ETA3_MAX)?;
    let c = &fit.coefficients;
    Ok(OutcomeModel {
        intercept: c[0],
        exposure: c[1],
        kernel_decay: fit.decay,
        covariate: c[2],
        baseline: split_baseline(c, 3, p_z),
        confounder: if with_u { c[3 + p_z] } else { 0.0 },
        sigma: fit.sigma,
    })
}

/// Experimental-world fits: rate `[1, a(t-)]`, mark `[1, a(t-)]`, stop `[1, t, a(t-)]`.
pub(crate) fn fit_exp(prepared: &[PreparedSubject], weights: &[f64]) -> Result<ExpWorldParams> {
    let mut rate = PoissonDesign::new(2, None);
    let mut marks = NormalEquations::new(2);
    let mut term = PoissonDesign::new(3, Some(1));
    for (s, &w) in prepared.iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        for pc in &s.pieces {
            rate.add_piece(&[1.0, pc.dose], pc.start, pc.end, w);
            term.add_piece(&[1.0, 0.0, pc.dose], pc.start, pc.end, w);
        }
        for j in &s.jumps {
            rate.add_event(&[1.0, j.dose_left], w);
            marks.add(&[1.0, j.dose_left], j.dose, w);
        }
        if s.terminated {
            term.add_event(&[1.0, s.t_max, s.end_dose_left], w);
        }
    }
    let r = rate.fit("experimental treatment rate")?;
    let (m, sigma) = ols(&marks, "experimental dose mark")?;
    let t = term.fit("experimental termination")?;
    Ok(ExpWorldParams {
        treatment_rate: TreatmentRateExp { intercept: r[0], dose: r[1] },
        dose_mark: DoseMarkExp { intercept: m[0], dose: m[1], sigma },
        termination: TerminationExp { intercept: t[0], time: t[1], dose: t[2] },
    })
}

/// Parameters needed for weights only: the interventional part of `theta`, with the
/// covariate and outcome blocks left neutral.
pub(crate) fn fit_obs_interventional(
    prepared: &[PreparedSubject],
    weights: &[f64],
    observed_u: bool,
) -> Result<ObsWorldParams> {
    let units = subject_units(prepared, weights, observed_u)?;
    let (rate, mark) = fit_obs_treatment(prepared, &units, observed_u)?;
    let termination = fit_obs_termination(prepared, weights)?;
    let p_z = rate.baseline.len();
    let mut theta = ObsWorldParams::neutral(p_z);
    theta.treatment_rate = rate;
    theta.dose_mark = mark;
    theta.termination = termination;
    Ok(theta)
}

fn subject_units(prepared: &[PreparedSubject], weights: &[f64], observed_u: bool) -> Result<Vec<Unit>> {
    prepared
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(index, (s, &weight))| {
            let u = if observed_u {
                s.u.ok_or_else(|| Error::Input(format!("subject {} has no recorded u", s.id)))?
            } else {
                0.0
            };
            Ok(Unit { index, u, weight })
        })
        .collect()
}

pub(crate) fn fit_mle_prepared(
    prepared: &[PreparedSubject],
    target: MleTarget,
    weights: &[f64],
) -> Result<MleEstimate> {
    if prepared.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    if weights.len() != prepared.len() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Input("fit weights must be finite, non-negative and one per subject".into()));
    }
    match target {
        MleTarget::ExpMarginal => Ok(MleEstimate::Experimental(fit_exp(prepared, weights)?)),
        MleTarget::ObsIgnoreU | MleTarget::ObsObservedU => {
            let observed = target == MleTarget::ObsObservedU;
            let units = subject_units(prepared, weights, observed)?;
            let (treatment_rate, dose_mark) = fit_obs_treatment(prepared, &units, observed)?;
            let termination = fit_obs_termination(prepared, weights)?;
            let covariate = fit_covariate(prepared, weights)?;
            let outcome = fit_outcome(prepared, &units, observed)?;
            let confounder_prob = if observed {
                let w: f64 = weights.iter().sum();
                let p = units.iter().map(|u| u.weight * u.u).sum::<f64>() / w;
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::DegenerateFit(format!("recorded u is constant (proportion {p})")));
                }
                p
            } else {
                0.5
            };
            Ok(MleEstimate::Observational(ObsWorldParams {
                treatment_rate,
                dose_mark,
                termination,
                covariate,
                confounder_prob,
                outcome,
            }))
        }
    }
}

/// Maximum-likelihood estimates for the selected model.
pub fn fit_mle(dataset: &[Trajectory], target: MleTarget) -> Result<MleEstimate> {
    fit_mle_weighted(dataset, target, &vec![1.0; dataset.len()])
}

/// As [`fit_mle`] with per-subject likelihood exponents (for example resampling counts).
pub fn fit_mle_weighted(dataset: &[Trajectory], target: MleTarget, weights: &[f64]) -> Result<MleEstimate> {
    let prepared = crate::intensity::prepare(dataset);
    fit_mle_prepared(&prepared, target, weights)
}

/// Expectation-maximization for the confounder mixture, started from a split of the
/// outcome residuals. Used to initialize the sampler.
pub fn em_initialize(dataset: &[Trajectory], max_iter: usize) -> Result<ObsWorldParams> {
    let prepared = crate::intensity::prepare(dataset);
    em_initialize_prepared(&prepared, max_iter)
}

pub(crate) fn em_initialize_prepared(prepared: &[PreparedSubject], max_iter: usize) -> Result<ObsWorldParams> {
    let ones = vec![1.0; prepared.len()];
    let mut theta = match fit_mle_prepared(prepared, MleTarget::ObsIgnoreU, &ones)? {
        MleEstimate::Observational(t) => t,
        MleEstimate::Experimental(_) => unreachable!(),
    };
    let mut resp: Vec<f64> = prepared
        .iter()
        .map(|s| {
            let e = s.outcome_exposure(&theta);
            if s.y > s.outcome_mean(&theta, 0.0, e) { 0.75 } else { 0.25 }
        })
        .collect();
    let mut last = f64::NEG_INFINITY;
    for _ in 0..max_iter.max(1) {
        let units: Vec<Unit> = (0..prepared.len())
            .flat_map(|i| {
                [Unit { index: i, u: 0.0, weight: 1.0 - resp[i] }, Unit { index: i, u: 1.0, weight: resp[i] }]
            })
            .collect();
        let (rate, mark) = fit_obs_treatment(prepared, &units, true)?;
        let outcome = fit_outcome(prepared, &units, true)?;
        let mut next = theta.clone();
        next.treatment_rate = rate;
        next.dose_mark = mark;
        next.outcome = outcome;
        next.confounder_prob = (resp.iter().sum::<f64>() / prepared.len() as f64).clamp(1e-3, 1.0 - 1e-3);
        let ll = super::marginal_loglik_prepared(prepared, &next)?;
        theta = next;
        for (r, s) in resp.iter_mut().zip(prepared) {
            *r = super::conditional_u_prepared(s, &theta);
        }
        if (ll - last).abs() < 1e-6 * (1.0 + ll.abs()) {
            break;
        }
        last = ll;
    }
    Ok(theta)
}
