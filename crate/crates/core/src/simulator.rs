//! Discretized trajectory generation under the observational or experimental world.
//!
//! Per grid step: the covariate updates if the step is on its grid, then a treatment
//! change is drawn, then time advances and the stop event is drawn. Treatment changes
//! are not drawn at `t = 0` (no events at the start time).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::{HistoryState, Model, Process, World};
use crate::msm::exposure_integral;
use crate::paths::{CovariatePath, Jump, TreatmentPath, Trajectory};
use crate::rng::RngStream;
use crate::scenario::ScenarioConfig;
use crate::stats::dot;

const MAX_MARK_REDRAWS: usize = 1000;

fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    let e: f64 = StandardNormal.sample(rng);
    mean + sd * e
}

/// Generates one subject. `u` is stored (complete-data record).
pub fn simulate_subject<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    world: World,
    id: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    let obs = &config.obs_params;
    let interventional = match world {
        World::Observational => Model::Observational(obs),
        World::Experimental => Model::Experimental(&config.exp_params),
    };
    let dt = config.dt;
    let total = config.total_steps();
    let l_every = config.steps_per_covariate_update();

    let z: Vec<f64> = (0..config.p_z).map(|_| normal(rng, 0.0, 1.0)).collect();
    let u: u8 = u8::from(rng.random::<f64>() < obs.confounder_prob);
    let uf = f64::from(u);
    let cov = &obs.covariate;
    let z_cov = dot(&cov.baseline, &z);

    let mut l_grid = Vec::with_capacity(total / l_every + 1);
    let mut l_vals = Vec::with_capacity(total / l_every + 1);
    let mut jumps: Vec<Jump> = Vec::new();
    let mut dose = 0.0;
    let mut l = f64::NAN;
    let mut t_max = config.t_r;
    let mut terminated = false;

    for k in 0..total {
        let t = k as f64 * dt;
        if k % l_every == 0 {
            let mean = if k == 0 {
                cov.intercept + z_cov
            } else {
                cov.intercept + cov.lag * l + cov.dose * dose + z_cov
            };
            l = normal(rng, mean, cov.sigma);
            l_grid.push(t);
            l_vals.push(l);
        }
        if k > 0 {
            let s = HistoryState { t, dose_left: dose, covariate: l, baseline: &z, u: uf };
            let p = interventional.rate(Process::Treatment, &s) * dt;
            if !(p < 1.0) {
                return Err(Error::Config(format!(
                    "treatment-change rate {:.4} at t = {t:.4} gives rate*dt = {p:.4} >= 1; reduce dt",
                    p / dt
                )));
            }
            if rng.random::<f64>() < p {
                let (mean, sigma) = interventional.mark_moments(&s);
                let mut new_dose = normal(rng, mean, sigma);
                let mut tries = 0;
                while new_dose == dose {
                    tries += 1;
                    if tries > MAX_MARK_REDRAWS {
                        return Err(Error::Config("dose mark cannot differ from current dose".into()));
                    }
                    new_dose = normal(rng, mean, sigma);
                }
                jumps.push(Jump { time: t, dose: new_dose });
                dose = new_dose;
            }
        }
        let t_next = (k + 1) as f64 * dt;
        let s = HistoryState { t: t_next, dose_left: dose, covariate: l, baseline: &z, u: 0.0 };
        // stopping is absorbing: rate*dt >= 1 means certain stop in this step
        let p = interventional.rate(Process::Termination, &s) * dt;
        if rng.random::<f64>() < p {
            t_max = t_next;
            terminated = true;
            break;
        }
    }
    if !terminated {
        t_max = config.t_r;
    }

    let a_path = TreatmentPath::new(jumps, t_max);
    let l_path = CovariatePath::new(l_grid, l_vals);
    let out = &obs.outcome;
    let exposure = exposure_integral(&a_path, t_max, out.kernel_decay)?;
    let mean = out.intercept
        + out.exposure * exposure
        + out.covariate * l
        + dot(&out.baseline, &z)
        + out.confounder * uf;
    let y = normal(rng, mean, out.sigma);
    Ok(Trajectory {
        id,
        z,
        u: Some(u),
        l_path,
        a_path,
        t_max,
        terminated,
        y,
    })
}

/// `n` independent subjects; subject `i` uses stream `(seed, i)`.
pub fn simulate_dataset(config: &ScenarioConfig, world: World, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n < 1 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    config.check()?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i).rng();
            simulate_subject(config, world, i, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub mean_jumps: f64,
    pub mean_t_max: f64,
    pub terminated_fraction: f64,
    pub mean_y: f64,
    pub mean_dose: Option<f64>,
    pub sd_dose: Option<f64>,
    /// Jumps per unit of treatment time among subjects with `u = 0` and `u = 1`.
    pub jump_rate_by_u: [Option<f64>; 2],
    pub count_by_u: [usize; 2],
}

pub fn empirical_moments(dataset: &[Trajectory]) -> Result<DatasetSummary> {
    if dataset.is_empty() {
        return Err(Error::Domain("empirical_moments of an empty dataset".into()));
    }
    let n = dataset.len();
    let nf = n as f64;
    let doses: Vec<f64> = dataset.iter().flat_map(|t| t.a_path.jumps.iter().map(|j| j.dose)).collect();
    let mut jumps_u = [0.0; 2];
    let mut time_u = [0.0; 2];
    let mut count_u = [0usize; 2];
    for t in dataset {
        if let Some(u) = t.u {
            let k = usize::from(u.min(1));
            jumps_u[k] += t.a_path.jumps.len() as f64;
            time_u[k] += t.t_max;
            count_u[k] += 1;
        }
    }
    Ok(DatasetSummary {
        n,
        mean_jumps: dataset.iter().map(|t| t.a_path.jumps.len() as f64).sum::<f64>() / nf,
        mean_t_max: dataset.iter().map(|t| t.t_max).sum::<f64>() / nf,
        terminated_fraction: dataset.iter().filter(|t| t.terminated).count() as f64 / nf,
        mean_y: dataset.iter().map(|t| t.y).sum::<f64>() / nf,
        mean_dose: (!doses.is_empty()).then(|| crate::stats::mean(&doses)),
        sd_dose: crate::stats::sample_sd(&doses),
        jump_rate_by_u: [0, 1].map(|k| (time_u[k] > 0.0).then(|| jumps_u[k] / time_u[k])),
        count_by_u: count_u,
    })
}
