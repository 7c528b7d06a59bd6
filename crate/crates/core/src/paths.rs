//! Piecewise-constant treatment and covariate paths and the per-subject record.
//!
//! Paths are right-continuous with left limits. A treatment path starts at dose 0,
//! changes only at its recorded jump times and is 0 after its end time (the
//! treatment stop time of the subject).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub dose: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentPath {
    pub jumps: Vec<Jump>,
    pub end_time: f64,
}

/// One constant piece `[start, end)` of a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub dose: f64,
}

impl Segment {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

impl TreatmentPath {
    pub fn new(jumps: Vec<Jump>, end_time: f64) -> Self {
        TreatmentPath { jumps, end_time }
    }

    pub fn from_pairs(pairs: &[(f64, f64)], end_time: f64) -> Self {
        let jumps = pairs.iter().map(|&(time, dose)| Jump { time, dose }).collect();
        TreatmentPath { jumps, end_time }
    }

    pub fn jump_count(&self) -> usize {
        self.jumps.len()
    }

    /// `A(t)`: right-continuous evaluation, zero before the first jump and after the end time.
    pub fn dose_at(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("dose_at: negative time {t}")));
        }
        if t > self.end_time {
            return Ok(0.0);
        }
        let idx = self.jumps.partition_point(|j| j.time <= t);
        Ok(if idx == 0 { 0.0 } else { self.jumps[idx - 1].dose })
    }

    /// `A(t-)`: the left limit.
    pub fn dose_left_limit(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("dose_left_limit: requires t > 0, got {t}")));
        }
        if t > self.end_time {
            return Ok(0.0);
        }
        Ok(self.left_limit_unchecked(t))
    }

    pub(crate) fn left_limit_unchecked(&self, t: f64) -> f64 {
        let idx = self.jumps.partition_point(|j| j.time < t);
        if idx == 0 {
            0.0
        } else {
            self.jumps[idx - 1].dose
        }
    }

    /// Contiguous partition of `[0, upto]` into constant-dose segments.
    pub fn segments(&self, upto: f64) -> Result<Vec<Segment>> {
        if !(upto > 0.0) || upto > self.end_time + TIME_TOL {
            return Err(Error::Domain(format!(
                "segments: upto {upto} outside (0, {}]",
                self.end_time
            )));
        }
        let mut out = Vec::with_capacity(self.jumps.len() + 1);
        let mut start = 0.0;
        let mut dose = 0.0;
        for j in &self.jumps {
            if j.time >= upto {
                break;
            }
            if j.time > start {
                out.push(Segment { start, end: j.time, dose });
            }
            start = j.time;
            dose = j.dose;
        }
        out.push(Segment { start, end: upto, dose });
        Ok(out)
    }

    fn violations(&self, out: &mut Vec<String>) {
        let mut prev_time = 0.0;
        let mut prev_dose = 0.0;
        for (k, j) in self.jumps.iter().enumerate() {
            if !j.time.is_finite() || !j.dose.is_finite() {
                out.push(format!("jump {k}: non-finite time or dose"));
                continue;
            }
            if j.time <= 0.0 || j.time > self.end_time + TIME_TOL {
                out.push(format!("jump {k}: jump times in (0, end] violated (t = {})", j.time));
            }
            if k > 0 && j.time <= prev_time {
                out.push(format!("jump {k}: jump times not strictly increasing"));
            }
            if j.dose == prev_dose {
                out.push(format!("jump {k}: dose does not change ({})", j.dose));
            }
            prev_time = j.time;
            prev_dose = j.dose;
        }
    }
}

/// Step function observed on a grid that starts at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePath {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl CovariatePath {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Self {
        CovariatePath { grid, values }
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        CovariatePath {
            grid: pairs.iter().map(|p| p.0).collect(),
            values: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// `L(t)`, carried forward from the last grid point at or before `t`.
    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.grid.partition_point(|&g| g <= t);
        self.values[idx.max(1) - 1]
    }

    /// `L(t-)`; equals `L(0)` at `t = 0`.
    pub fn value_left_limit(&self, t: f64) -> f64 {
        let idx = self.grid.partition_point(|&g| g < t);
        self.values[idx.max(1) - 1]
    }

    fn violations(&self, t_max: f64, out: &mut Vec<String>) {
        if self.grid.is_empty() {
            out.push("covariate path is empty".into());
            return;
        }
        if self.grid.len() != self.values.len() {
            out.push("covariate grid and values differ in length".into());
        }
        if self.grid[0] != 0.0 {
            out.push(format!("covariate grid must start at 0 (got {})", self.grid[0]));
        }
        for w in self.grid.windows(2) {
            if !(w[1] > w[0]) {
                out.push(format!("covariate grid not strictly increasing at {}", w[1]));
            }
        }
        if let Some(&last) = self.grid.last() {
            if last > t_max + TIME_TOL {
                out.push(format!("covariate observed at {last} after t_max {t_max}"));
            }
        }
        if self.values.iter().chain(&self.grid).any(|v| !v.is_finite()) {
            out.push("non-finite covariate value or time".into());
        }
    }
}

/// One subject's record. `u` is only present for complete-data records.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub z: Vec<f64>,
    pub u: Option<u8>,
    pub l_path: CovariatePath,
    pub a_path: TreatmentPath,
    pub t_max: f64,
    pub terminated: bool,
    pub y: f64,
}

impl Trajectory {
    pub fn u_value(&self) -> Option<f64> {
        self.u.map(f64::from)
    }

    /// Returns a copy with the confounder removed (observed-data record).
    pub fn without_u(&self) -> Trajectory {
        Trajectory { u: None, ..self.clone() }
    }
}

/// Checks every structural invariant of a trajectory against the study horizon `t_r`.
/// An empty list means the record is valid.
pub fn validate(traj: &Trajectory, t_r: f64) -> Vec<String> {
    let mut out = Vec::new();
    if !traj.t_max.is_finite() || traj.t_max <= 0.0 {
        out.push(format!("t_max must be positive and finite (got {})", traj.t_max));
        return out;
    }
    if traj.t_max > t_r + TIME_TOL {
        out.push(format!("t_max {} exceeds t_R {t_r}", traj.t_max));
    }
    if (traj.a_path.end_time - traj.t_max).abs() > TIME_TOL {
        out.push("treatment path end time differs from t_max".into());
    }
    if !traj.terminated && (traj.t_max - t_r).abs() > TIME_TOL {
        out.push(format!(
            "terminated flag is 0 but t_max {} differs from t_R {t_r}",
            traj.t_max
        ));
    }
    if let Some(u) = traj.u {
        if u > 1 {
            out.push(format!("u must be 0 or 1 (got {u})"));
        }
    }
    if !traj.y.is_finite() {
        out.push("outcome is not finite".into());
    }
    if traj.z.iter().any(|v| !v.is_finite()) {
        out.push("baseline covariates must be finite".into());
    }
    traj.a_path.violations(&mut out);
    traj.l_path.violations(traj.t_max, &mut out);
    out
}

/// Validates a whole dataset; also checks that every subject has the same number of
/// baseline covariates.
pub fn validate_dataset(dataset: &[Trajectory], t_r: f64) -> Result<()> {
    let p_z = dataset.first().map(|t| t.z.len());
    for (i, traj) in dataset.iter().enumerate() {
        let mut v = validate(traj, t_r);
        if Some(traj.z.len()) != p_z {
            v.push("baseline covariate dimension differs from first subject".into());
        }
        if !v.is_empty() {
            return Err(Error::Validation {
                line: Some(i + 1),
                violations: v,
            });
        }
    }
    Ok(())
}
