//! Parameter sets for the observational and experimental data-generating worlds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-linear treatment-change intensity under the observational world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentRateObs {
    pub intercept: f64,
    pub covariate: f64,
    pub baseline: Vec<f64>,
    pub dose: f64,
    /// Coefficient on the unmeasured confounder.
    pub confounder: f64,
}

/// Gaussian model for the new dose at a treatment change (observational world).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseMarkObs {
    pub intercept: f64,
    pub covariate: f64,
    pub baseline: Vec<f64>,
    pub dose: f64,
    pub confounder: f64,
    pub sigma: f64,
}

/// Log-linear treatment-stop intensity (observational world).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminationObs {
    pub intercept: f64,
    pub time: f64,
    pub covariate: f64,
    pub baseline: Vec<f64>,
    pub dose: f64,
}

/// Gaussian autoregressive transition for the time-varying covariate on its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTransition {
    pub intercept: f64,
    pub lag: f64,
    pub dose: f64,
    pub baseline: Vec<f64>,
    pub sigma: f64,
}

/// Conditional outcome model. The treatment enters through the decaying-kernel exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub intercept: f64,
    pub exposure: f64,
    pub kernel_decay: f64,
    pub covariate: f64,
    pub baseline: Vec<f64>,
    pub confounder: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsWorldParams {
    pub treatment_rate: TreatmentRateObs,
    pub dose_mark: DoseMarkObs,
    pub termination: TerminationObs,
    pub covariate: CovariateTransition,
    /// `P(U = 1)`.
    pub confounder_prob: f64,
    pub outcome: OutcomeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentRateExp {
    pub intercept: f64,
    pub dose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseMarkExp {
    pub intercept: f64,
    pub dose: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminationExp {
    pub intercept: f64,
    pub time: f64,
    pub dose: f64,
}

/// Interventional-part parameters under the experimental world; histories hold only the
/// past dose (and time, for the stop intensity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpWorldParams {
    pub treatment_rate: TreatmentRateExp,
    pub dose_mark: DoseMarkExp,
    pub termination: TerminationExp,
}

impl ObsWorldParams {
    /// All-zero coefficients, unit scales and `P(U = 1) = 0.5`.
    pub fn neutral(p_z: usize) -> Self {
        let z = vec![0.0; p_z];
        ObsWorldParams {
            treatment_rate: TreatmentRateObs {
                intercept: 0.0,
                covariate: 0.0,
                baseline: z.clone(),
                dose: 0.0,
                confounder: 0.0,
            },
            dose_mark: DoseMarkObs {
                intercept: 0.0,
                covariate: 0.0,
                baseline: z.clone(),
                dose: 0.0,
                confounder: 0.0,
                sigma: 1.0,
            },
            termination: TerminationObs {
                intercept: 0.0,
                time: 0.0,
                covariate: 0.0,
                baseline: z.clone(),
                dose: 0.0,
            },
            covariate: CovariateTransition {
                intercept: 0.0,
                lag: 0.0,
                dose: 0.0,
                baseline: z.clone(),
                sigma: 1.0,
            },
            confounder_prob: 0.5,
            outcome: OutcomeModel {
                intercept: 0.0,
                exposure: 0.0,
                kernel_decay: 0.0,
                covariate: 0.0,
                baseline: z,
                confounder: 0.0,
                sigma: 1.0,
            },
        }
    }

    pub fn p_z(&self) -> usize {
        self.treatment_rate.baseline.len()
    }

    /// Sets the confounder's effect on treatment-change rate and on dose marks.
    pub fn with_confounding(mut self, delta: f64) -> Self {
        self.treatment_rate.confounder = delta;
        self.dose_mark.confounder = delta;
        self
    }

    pub fn check(&self) -> Result<()> {
        let p = self.p_z();
        let dims = [
            self.dose_mark.baseline.len(),
            self.termination.baseline.len(),
            self.covariate.baseline.len(),
            self.outcome.baseline.len(),
        ];
        if dims.iter().any(|&d| d != p) {
            return Err(Error::Parameter(
                "baseline coefficient vectors differ in length".into(),
            ));
        }
        for (name, s) in [
            ("dose_mark.sigma", self.dose_mark.sigma),
            ("covariate.sigma", self.covariate.sigma),
            ("outcome.sigma", self.outcome.sigma),
        ] {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Parameter(format!("{name} must be positive, got {s}")));
            }
        }
        if !(self.confounder_prob > 0.0 && self.confounder_prob < 1.0) {
            return Err(Error::Parameter(format!(
                "confounder_prob must lie in (0, 1), got {}",
                self.confounder_prob
            )));
        }
        if !(self.outcome.kernel_decay >= 0.0) {
            return Err(Error::Parameter(format!(
                "outcome.kernel_decay must be >= 0, got {}",
                self.outcome.kernel_decay
            )));
        }
        Ok(())
    }
}

impl ExpWorldParams {
    pub fn neutral() -> Self {
        ExpWorldParams {
            treatment_rate: TreatmentRateExp { intercept: 0.0, dose: 0.0 },
            dose_mark: DoseMarkExp { intercept: 0.0, dose: 0.0, sigma: 1.0 },
            termination: TerminationExp { intercept: 0.0, time: 0.0, dose: 0.0 },
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.dose_mark.sigma > 0.0) || !self.dose_mark.sigma.is_finite() {
            return Err(Error::Parameter(format!(
                "experimental dose_mark.sigma must be positive, got {}",
                self.dose_mark.sigma
            )));
        }
        Ok(())
    }

    /// Observational parameters whose interventional part reproduces this experimental
    /// world exactly (no covariate, baseline or confounder dependence).
    pub fn as_observational(&self, template: &ObsWorldParams) -> ObsWorldParams {
        let p = template.p_z();
        let mut out = template.clone();
        out.treatment_rate = TreatmentRateObs {
            intercept: self.treatment_rate.intercept,
            covariate: 0.0,
            baseline: vec![0.0; p],
            dose: self.treatment_rate.dose,
            confounder: 0.0,
        };
        out.dose_mark = DoseMarkObs {
            intercept: self.dose_mark.intercept,
            covariate: 0.0,
            baseline: vec![0.0; p],
            dose: self.dose_mark.dose,
            confounder: 0.0,
            sigma: self.dose_mark.sigma,
        };
        out.termination = TerminationObs {
            intercept: self.termination.intercept,
            time: self.termination.time,
            covariate: 0.0,
            baseline: vec![0.0; p],
            dose: self.termination.dose,
        };
        out
    }
}
