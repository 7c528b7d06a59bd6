//! The exposure-kernel marginal structural model
//! `Y = eta1 + eta2 * ∫_0^{t_max} a(t) exp(-eta3 (t_max - t) / t_max) dt + eps`,
//! its closed-form exposure integral and the weighted pseudo-likelihood fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{brent_minimize, NormalEquations};
use crate::paths::{Segment, TreatmentPath, Trajectory};
use crate::stats::{expm1_over_x, normal_log_pdf};

pub const DEFAULT_ETA3_MAX: f64 = 50.0;
const ETA3_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsmParams {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub sigma: f64,
}

impl MsmParams {
    pub fn as_array(&self) -> [f64; 4] {
        [self.eta1, self.eta2, self.eta3, self.sigma]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        MsmParams { eta1: a[0], eta2: a[1], eta3: a[2], sigma: a[3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: MsmParams,
    pub converged: bool,
    /// Weighted profile log pseudo-likelihood at the optimum.
    pub objective: f64,
    pub evaluations: usize,
    pub boundary: Option<Boundary>,
}

/// `∫_0^Δ e^{-k s} ds`
#[inline]
fn decay_integral(k: f64, delta: f64) -> f64 {
    delta * expm1_over_x(-k * delta)
}

/// `∫_0^Δ s e^{-k s} ds`
fn decay_moment(k: f64, delta: f64) -> f64 {
    let x = k * delta;
    if x < 0.1 {
        let mut term = 1.0;
        let mut acc = 0.5;
        for m in 1..30 {
            term *= -x / m as f64;
            let add = term / (m + 2) as f64;
            acc += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        delta * delta * acc
    } else {
        (1.0 - (-x).exp() * (1.0 + x)) / (k * k)
    }
}

/// Closed-form exposure over precomputed dose segments.
pub fn exposure_over_segments(segments: &[Segment], t_max: f64, eta3: f64) -> f64 {
    if eta3 < 1e-10 {
        return segments.iter().map(|s| s.dose * s.len()).sum();
    }
    segments
        .iter()
        .filter(|s| s.dose != 0.0)
        .map(|s| {
            let tail = (t_max - s.end) / t_max;
            let width = s.len() / t_max;
            s.dose * t_max * (-eta3 * tail).exp() * decay_integral(eta3, width)
        })
        .sum()
}

/// Exposure and its derivative with respect to `eta3`.
pub fn exposure_with_derivative(segments: &[Segment], t_max: f64, eta3: f64) -> (f64, f64) {
    let mut x = 0.0;
    let mut dx = 0.0;
    for s in segments.iter().filter(|s| s.dose != 0.0) {
        let tail = (t_max - s.end) / t_max;
        let width = s.len() / t_max;
        let lead = s.dose * t_max * (-eta3 * tail).exp();
        let g = decay_integral(eta3, width);
        x += lead * g;
        dx += lead * (-tail * g - decay_moment(eta3, width));
    }
    (x, dx)
}

pub fn exposure_integral(a_path: &TreatmentPath, t_max: f64, eta3: f64) -> Result<f64> {
    if !(eta3 >= 0.0) {
        return Err(Error::Domain(format!("eta3 must be >= 0, got {eta3}")));
    }
    if !(t_max > 0.0) {
        return Err(Error::Domain(format!("t_max must be positive, got {t_max}")));
    }
    let segs = a_path.segments(t_max)?;
    Ok(exposure_over_segments(&segs, t_max, eta3))
}

pub fn msm_log_density(y: f64, t_max: f64, a_path: &TreatmentPath, params: &MsmParams) -> Result<f64> {
    if !(params.sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be positive, got {}", params.sigma)));
    }
    let x = exposure_integral(a_path, t_max, params.eta3)?;
    Ok(normal_log_pdf(y, params.eta1 + params.eta2 * x, params.sigma))
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Input(format!("{} weights for {n} subjects", weights.len())));
    }
    if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
        return Err(Error::Input(format!("weight {i} is {w}; weights must be finite and >= 0")));
    }
    Ok(())
}

/// The MSM's view of a dataset: outcome, stop time and dose segments per subject.
#[derive(Debug, Clone)]
pub struct MsmData {
    pub y: Vec<f64>,
    pub t_max: Vec<f64>,
    pub segments: Vec<Vec<Segment>>,
}

impl MsmData {
    pub fn new(dataset: &[Trajectory]) -> Result<Self> {
        let mut segments = Vec::with_capacity(dataset.len());
        for t in dataset {
            segments.push(t.a_path.segments(t.t_max)?);
        }
        Ok(MsmData {
            y: dataset.iter().map(|t| t.y).collect(),
            t_max: dataset.iter().map(|t| t.t_max).collect(),
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn exposures(&self, eta3: f64) -> Vec<f64> {
        self.segments
            .iter()
            .zip(&self.t_max)
            .map(|(s, &t)| exposure_over_segments(s, t, eta3))
            .collect()
    }

    pub fn weighted_loglik(&self, weights: &[f64], params: &MsmParams) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.len() {
            if weights[i] == 0.0 {
                continue;
            }
            let x = exposure_over_segments(&self.segments[i], self.t_max[i], params.eta3);
            acc += weights[i] * normal_log_pdf(self.y[i], params.eta1 + params.eta2 * x, params.sigma);
        }
        acc
    }

    /// Gradient of the weighted log pseudo-likelihood in `(eta1, eta2, eta3, ln sigma)`.
    pub fn gradient(&self, weights: &[f64], params: &MsmParams) -> [f64; 4] {
        let s2 = params.sigma * params.sigma;
        let mut g = [0.0; 4];
        for i in 0..self.len() {
            let w = weights[i];
            if w == 0.0 {
                continue;
            }
            let (x, dx) = exposure_with_derivative(&self.segments[i], self.t_max[i], params.eta3);
            let r = self.y[i] - params.eta1 - params.eta2 * x;
            g[0] += w * r / s2;
            g[1] += w * r * x / s2;
            g[2] += w * r * params.eta2 * dx / s2;
            g[3] += w * (r * r / s2 - 1.0);
        }
        g
    }

    /// Weighted fit: closed-form least squares in `(eta1, eta2, sigma)` profiled over
    /// `eta3 ∈ [0, eta3_max]`.
    pub fn fit(&self, weights: &[f64], eta3_max: f64) -> Result<FitResult> {
        check_weights(weights, self.len())?;
        let positive = weights.iter().filter(|&&w| w > 0.0).count();
        if positive < 3 {
            return Err(Error::DegenerateFit(format!(
                "{positive} subjects with positive weight; need at least 3"
            )));
        }
        let kernel = KernelRegression {
            segments: &self.segments,
            t_max: &self.t_max,
            y: &self.y,
            extras: None,
        };
        let fit = kernel.fit(weights, eta3_max)?;
        Ok(FitResult {
            params: MsmParams {
                eta1: fit.coefficients[0],
                eta2: fit.coefficients[1],
                eta3: fit.decay,
                sigma: fit.sigma,
            },
            converged: fit.converged,
            objective: fit.objective,
            evaluations: fit.evaluations,
            boundary: fit.boundary,
        })
    }
}

pub fn weighted_pseudo_loglik(dataset: &[Trajectory], weights: &[f64], params: &MsmParams) -> Result<f64> {
    check_weights(weights, dataset.len())?;
    if !(params.sigma > 0.0) || !(params.eta3 >= 0.0) {
        return Err(Error::Parameter("sigma must be > 0 and eta3 >= 0".into()));
    }
    Ok(MsmData::new(dataset)?.weighted_loglik(weights, params))
}

pub fn fit_msm(dataset: &[Trajectory], weights: &[f64], eta3_max: f64) -> Result<FitResult> {
    MsmData::new(dataset)?.fit(weights, eta3_max)
}

/// Analytic gradient vs central finite differences (step 1e-5) in
/// `(eta1, eta2, eta3, ln sigma)`; returns the largest absolute deviation.
pub fn profile_objective_grad_check(dataset: &[Trajectory], weights: &[f64], params: &MsmParams) -> Result<f64> {
    check_weights(weights, dataset.len())?;
    let data = MsmData::new(dataset)?;
    let analytic = data.gradient(weights, params);
    let h = 1e-5;
    let eval = |v: [f64; 4]| {
        let p = MsmParams { eta1: v[0], eta2: v[1], eta3: v[2], sigma: v[3].exp() };
        data.weighted_loglik(weights, &p)
    };
    let base = [params.eta1, params.eta2, params.eta3, params.sigma.ln()];
    let mut worst: f64 = 0.0;
    for k in 0..4 {
        let mut up = base;
        let mut dn = base;
        up[k] += h;
        dn[k] -= h;
        let fd = (eval(up) - eval(dn)) / (2.0 * h);
        worst = worst.max((fd - analytic[k]).abs());
    }
    Ok(worst)
}

/// Least squares of `y` on `[1, exposure(decay), extras...]`, profiled over the decay.
/// Shared by the MSM fit and the conditional outcome model fit.
pub struct KernelRegression<'a> {
    pub segments: &'a [Vec<Segment>],
    pub t_max: &'a [f64],
    pub y: &'a [f64],
    /// Optional extra covariates, one row per observation.
    pub extras: Option<&'a [Vec<f64>]>,
}

#[derive(Debug, Clone)]
pub struct KernelFit {
    /// `[intercept, exposure coefficient, extras...]`
    pub coefficients: Vec<f64>,
    pub decay: f64,
    pub sigma: f64,
    pub objective: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub boundary: Option<Boundary>,
}

impl<'a> KernelRegression<'a> {
    fn n_cols(&self) -> usize {
        2 + self.extras.and_then(|e| e.first()).map_or(0, |r| r.len())
    }

    fn solve_at(&self, weights: &[f64], decay: f64) -> Option<(Vec<f64>, f64)> {
        let p = self.n_cols();
        let mut ne = NormalEquations::new(p);
        let mut row = vec![0.0; p];
        row[0] = 1.0;
        for i in 0..self.y.len() {
            if weights[i] == 0.0 {
                continue;
            }
            row[1] = exposure_over_segments(&self.segments[i], self.t_max[i], decay);
            if let Some(ex) = self.extras {
                row[2..].copy_from_slice(&ex[i]);
            }
            ne.add(&row, self.y[i], weights[i]);
        }
        ne.solve().map(|(b, rss)| (b.iter().copied().collect(), rss))
    }

    pub fn fit(&self, weights: &[f64], decay_max: f64) -> Result<KernelFit> {
        if !(decay_max > 0.0) {
            return Err(Error::Parameter(format!("eta3_max must be positive, got {decay_max}")));
        }
        let weight_sum: f64 = weights.iter().sum();
        let mut evaluations = 0;
        let mut rss_at = |d: f64| -> f64 {
            evaluations += 1;
            match self.solve_at(weights, d) {
                Some((_, rss)) => rss,
                None => f64::INFINITY,
            }
        };
        let mut grid = vec![0.0];
        let g = 32;
        let lo: f64 = 0.01_f64.min(decay_max / 10.0);
        for j in 0..g {
            grid.push(lo * (decay_max / lo).powf(j as f64 / (g - 1) as f64));
        }
        let vals: Vec<f64> = grid.iter().map(|&d| rss_at(d)).collect();
        if vals.iter().all(|v| !v.is_finite()) {
            return Err(Error::DegenerateFit(
                "weighted design is rank deficient for every eta3 (exposures do not vary)".into(),
            ));
        }
        let best = vals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let a = if best == 0 { 0.0 } else { grid[best - 1] };
        let b = if best + 1 < grid.len() { grid[best + 1] } else { decay_max };
        let line = brent_minimize(&mut rss_at, a, b, ETA3_TOL / 4.0, 200);
        let (mut decay, rss) = (line.x, line.fx);
        let last = grid.len() - 1;
        let mut boundary = None;
        if vals[0] <= rss {
            decay = 0.0;
            boundary = Some(Boundary::Lower);
        } else if vals[last] <= rss {
            decay = decay_max;
            boundary = Some(Boundary::Upper);
        } else if decay <= 2.0 * ETA3_TOL {
            boundary = Some(Boundary::Lower);
        } else if decay >= decay_max - 2.0 * ETA3_TOL {
            boundary = Some(Boundary::Upper);
        }
        let (coefficients, rss_final) = self.solve_at(weights, decay).ok_or_else(|| {
            Error::DegenerateFit(format!("weighted design is rank deficient at eta3 = {decay}"))
        })?;
        let sigma2 = rss_final / weight_sum;
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Optimizer(format!("non-finite or zero residual variance {sigma2}")));
        }
        let objective = -0.5 * weight_sum * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
        if !objective.is_finite() {
            return Err(Error::Optimizer("non-finite objective".into()));
        }
        Ok(KernelFit {
            coefficients,
            decay,
            sigma: sigma2.sqrt(),
            objective,
            evaluations,
            converged: line.converged || boundary.is_some(),
            boundary,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exposure_trivial_cases() {
        let zero = TreatmentPath::from_pairs(&[], 12.0);
        assert_eq!(exposure_integral(&zero, 12.0, 2.0).unwrap(), 0.0);
        let c = TreatmentPath::from_pairs(&[(1e-12, 3.0)], 12.0);
        assert!((exposure_integral(&c, 12.0, 0.0).unwrap() - 36.0).abs() < 1e-9);
        assert!(exposure_integral(&c, 12.0, -1.0).is_err());
        assert!(exposure_integral(&c, 0.0, 1.0).is_err());
    }

    #[test]
    fn worked_regimen_value() {
        let p = TreatmentPath::from_pairs(&[(4.0, 3.0)], 12.0);
        let c = exposure_integral(&p, 12.0, 4.051).unwrap();
        let closed = 3.0 * 12.0 / 4.051 * (1.0 - (-4.051_f64 * 8.0 / 12.0).exp());
        assert!((c - closed).abs() < 1e-12);
        assert!((8.28..=8.30).contains(&c));
    }

    #[test]
    fn continuity_at_zero_decay() {
        let p = TreatmentPath::from_pairs(&[(1.0, 2.0), (3.0, 0.5), (7.0, 4.0)], 9.0);
        let segs = p.segments(9.0).unwrap();
        let limit: f64 = segs.iter().map(|s| s.dose * s.len()).sum();
        let near = exposure_over_segments(&segs, 9.0, 1e-8);
        let mass: f64 = segs.iter().map(|s| s.dose.abs() * s.len()).sum();
        assert!((near - limit).abs() <= 1e-6 * mass);
    }

    #[test]
    fn derivative_matches_difference() {
        let p = TreatmentPath::from_pairs(&[(1.0, 2.0), (3.0, 0.5), (7.0, 4.0)], 9.0);
        let segs = p.segments(9.0).unwrap();
        for &k in &[0.0, 0.05, 1.0, 7.5, 40.0] {
            let h = 1e-6;
            let lo = if k == 0.0 { 0.0 } else { k - h };
            let fd = (exposure_over_segments(&segs, 9.0, k + h) - exposure_over_segments(&segs, 9.0, lo)) / (k + h - lo);
            let (_, d) = exposure_with_derivative(&segs, 9.0, k);
            assert!((fd - d).abs() < 1e-5 * (1.0 + d.abs()), "k={k}: {fd} vs {d}");
        }
    }

    #[test]
    fn msm_density_at_mean() {
        let p = TreatmentPath::from_pairs(&[(2.0, 1.0)], 4.0);
        let params = MsmParams { eta1: 0.5, eta2: 0.0, eta3: 1.0, sigma: 1.0 };
        let v = msm_log_density(0.5, 4.0, &p, &params).unwrap();
        assert!((v + crate::stats::HALF_LN_2PI).abs() < 1e-15);
    }
}
