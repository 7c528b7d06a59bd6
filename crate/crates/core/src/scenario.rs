//! Scenario configuration: grid scales, sample size and both worlds' parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::*;

fn default_t_r() -> f64 {
    10.0
}
fn default_dt() -> f64 {
    0.01
}
fn default_delta_l() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    #[serde(default = "default_t_r")]
    pub t_r: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_delta_l")]
    pub delta_l: f64,
    pub p_z: usize,
    pub obs_params: ObsWorldParams,
    pub exp_params: ExpWorldParams,
    #[serde(default)]
    pub seed: u64,
}

fn is_multiple(x: f64, step: f64) -> bool {
    let r = x / step;
    (r - r.round()).abs() * step <= 1e-9
}

impl ScenarioConfig {
    pub fn check(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !(self.t_r > 0.0 && self.dt > 0.0 && self.delta_l > 0.0) {
            return Err(Error::Config("t_r, dt and delta_l must be positive".into()));
        }
        if self.dt > self.delta_l {
            return Err(Error::Config(format!("dt {} exceeds delta_l {}", self.dt, self.delta_l)));
        }
        if !is_multiple(self.t_r, self.dt) || !is_multiple(self.delta_l, self.dt) {
            return Err(Error::Config("dt must divide both t_r and delta_l".into()));
        }
        if self.obs_params.p_z() != self.p_z {
            return Err(Error::Config(format!(
                "p_z = {} but parameters carry {} baseline coefficients",
                self.p_z,
                self.obs_params.p_z()
            )));
        }
        self.obs_params.check().map_err(|e| Error::Config(e.to_string()))?;
        self.exp_params.check().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        (self.t_r / self.dt).round() as usize
    }

    pub fn steps_per_covariate_update(&self) -> usize {
        ((self.delta_l / self.dt).round() as usize).max(1)
    }

    /// Covariate grid `{k delta_l} ∩ [0, t_r)`.
    pub fn covariate_grid(&self) -> Vec<f64> {
        let steps = self.steps_per_covariate_update();
        (0..self.total_steps())
            .step_by(steps)
            .map(|k| k as f64 * self.dt)
            .collect()
    }

    pub fn with_confounding(mut self, delta: f64) -> Self {
        self.obs_params = self.obs_params.with_confounding(delta);
        self
    }

    /// Built-in scenarios: `simulation` (takes its confounding level from `delta`) and
    /// `oxytocin-like`. Aliases `delta-0`, `delta-0.15`, `delta-0.3` fix the level.
    pub fn preset(name: &str) -> Option<ScenarioConfig> {
        match name {
            "simulation" | "delta-0" => Some(simulation_preset(0.0)),
            "delta-0.15" => Some(simulation_preset(0.15)),
            "delta-0.3" => Some(simulation_preset(0.3)),
            "oxytocin-like" => Some(oxytocin_like_preset()),
            _ => None,
        }
    }
}

/// Simulation scenario on a 10-hour horizon with two baseline covariates. The binary
/// confounder shifts both the treatment-change rate and the dose marks by `delta`;
/// it also shifts the outcome by 1. Measured covariates weakly drive treatment and
/// stopping but not the outcome, so with `delta = 0` there is no confounding. Because
/// the outcome is linear in the exposure and the confounder is independent of treatment
/// under the experimental world, the true MSM parameters are
/// `(1 + P(U = 1), 1.0, 2.0)` whatever the experimental parameters.
pub fn simulation_preset(delta: f64) -> ScenarioConfig {
    let obs = ObsWorldParams {
        treatment_rate: TreatmentRateObs {
            intercept: -0.9,
            covariate: 0.15,
            baseline: vec![0.2, -0.15],
            dose: -0.1,
            confounder: delta,
        },
        dose_mark: DoseMarkObs {
            intercept: 0.6,
            covariate: 0.1,
            baseline: vec![0.15, 0.1],
            dose: 0.7,
            confounder: delta,
            sigma: 0.5,
        },
        termination: TerminationObs {
            intercept: -4.0,
            time: 0.2,
            covariate: 0.1,
            baseline: vec![0.1, 0.0],
            dose: 0.05,
        },
        covariate: CovariateTransition {
            intercept: 0.0,
            lag: 0.7,
            dose: 0.1,
            baseline: vec![0.3, 0.0],
            sigma: 0.5,
        },
        confounder_prob: 0.5,
        outcome: OutcomeModel {
            intercept: 1.0,
            exposure: 1.0,
            kernel_decay: 2.0,
            covariate: 0.0,
            baseline: vec![0.0, 0.0],
            confounder: 1.0,
            sigma: 0.2,
        },
    };
    let exp = ExpWorldParams {
        treatment_rate: TreatmentRateExp { intercept: -0.8, dose: -0.1 },
        dose_mark: DoseMarkExp { intercept: 0.75, dose: 0.7, sigma: 0.55 },
        termination: TerminationExp { intercept: -3.9, time: 0.2, dose: 0.05 },
    };
    ScenarioConfig {
        n: 400,
        t_r: 10.0,
        dt: 0.01,
        delta_l: 0.5,
        p_z: 2,
        obs_params: obs,
        exp_params: exp,
        seed: 20240601,
    }
}

/// Labor-ward-like scenario: 24-hour horizon, hourly covariate checks, doses on the
/// `log(x + 1)` scale and a weak, slowly decaying dose effect.
pub fn oxytocin_like_preset() -> ScenarioConfig {
    let obs = ObsWorldParams {
        treatment_rate: TreatmentRateObs {
            intercept: -1.8,
            covariate: 0.3,
            baseline: vec![0.3, -0.2],
            dose: -0.1,
            confounder: 0.3,
        },
        dose_mark: DoseMarkObs {
            intercept: 0.8,
            covariate: 0.1,
            baseline: vec![0.2, 0.1],
            dose: 0.5,
            confounder: 0.3,
            sigma: 0.4,
        },
        termination: TerminationObs {
            intercept: -4.0,
            time: 0.15,
            covariate: 0.3,
            baseline: vec![0.2, 0.0],
            dose: 0.1,
        },
        covariate: CovariateTransition {
            intercept: 0.5,
            lag: 0.8,
            dose: 0.05,
            baseline: vec![0.2, 0.0],
            sigma: 0.4,
        },
        confounder_prob: 0.3,
        outcome: OutcomeModel {
            intercept: 3.0,
            exposure: 0.05,
            kernel_decay: 1.0,
            covariate: 0.0,
            baseline: vec![0.0, 0.0],
            confounder: 1.0,
            sigma: 1.5,
        },
    };
    let exp = ExpWorldParams {
        treatment_rate: TreatmentRateExp { intercept: -1.7, dose: -0.1 },
        dose_mark: DoseMarkExp { intercept: 0.9, dose: 0.5, sigma: 0.5 },
        termination: TerminationExp { intercept: -3.8, time: 0.15, dose: 0.1 },
    };
    ScenarioConfig {
        n: 1000,
        t_r: 24.0,
        dt: 0.02,
        delta_l: 1.0,
        p_z: 2,
        obs_params: obs,
        exp_params: exp,
        seed: 20240602,
    }
}
