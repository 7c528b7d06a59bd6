//! JSON-lines persistence of trajectories and atomic file writes.
//!
//! One record per line with keys in the order `id, z, u, t_max, terminated, y, a_jumps,
//! l_obs`. Floats are written in scientific notation with 17 significant digits, so a
//! write-read-write cycle reproduces the file byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::paths::{validate, CovariatePath, Jump, TreatmentPath, Trajectory};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrajectory {
    id: u64,
    z: Vec<f64>,
    u: Option<u8>,
    t_max: f64,
    terminated: u8,
    y: f64,
    a_jumps: Vec<(f64, f64)>,
    l_obs: Vec<(f64, f64)>,
}

fn push_float(out: &mut String, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Input(format!("cannot serialize non-finite value {v}")));
    }
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
    Ok(())
}

fn push_pairs(out: &mut String, pairs: impl Iterator<Item = (f64, f64)>) -> Result<()> {
    out.push('[');
    for (k, (a, b)) in pairs.enumerate() {
        if k > 0 {
            out.push(',');
        }
        out.push('[');
        push_float(out, a)?;
        out.push(',');
        push_float(out, b)?;
        out.push(']');
    }
    out.push(']');
    Ok(())
}

/// Serializes one trajectory as a single JSON line (without the trailing newline).
pub fn trajectory_to_line(t: &Trajectory) -> Result<String> {
    let mut s = String::with_capacity(256);
    write!(s, "{{\"id\":{},\"z\":[", t.id).unwrap();
    for (k, v) in t.z.iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        push_float(&mut s, *v)?;
    }
    s.push_str("],\"u\":");
    match t.u {
        Some(u) => write!(s, "{u}").unwrap(),
        None => s.push_str("null"),
    }
    s.push_str(",\"t_max\":");
    push_float(&mut s, t.t_max)?;
    write!(s, ",\"terminated\":{},\"y\":", u8::from(t.terminated)).unwrap();
    push_float(&mut s, t.y)?;
    s.push_str(",\"a_jumps\":");
    push_pairs(&mut s, t.a_path.jumps.iter().map(|j| (j.time, j.dose)))?;
    s.push_str(",\"l_obs\":");
    push_pairs(&mut s, t.l_path.grid.iter().copied().zip(t.l_path.values.iter().copied()))?;
    s.push('}');
    Ok(s)
}

/// Parses one line; `line_no` is 1-based and only used in error messages. Structural
/// invariants are not checked here.
pub fn parse_trajectory_line(line: &str, line_no: usize) -> Result<Trajectory> {
    let raw: RawTrajectory =
        serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
    if raw.u.is_some_and(|u| u > 1) {
        return Err(Error::Parse { line: line_no, message: "u must be 0, 1 or null".into() });
    }
    if raw.terminated > 1 {
        return Err(Error::Parse { line: line_no, message: "terminated must be 0 or 1".into() });
    }
    let (grid, values) = raw.l_obs.into_iter().unzip();
    Ok(Trajectory {
        id: raw.id,
        z: raw.z,
        u: raw.u,
        l_path: CovariatePath::new(grid, values),
        a_path: TreatmentPath::new(raw.a_jumps.into_iter().map(|(time, dose)| Jump { time, dose }).collect(), raw.t_max),
        t_max: raw.t_max,
        terminated: raw.terminated == 1,
        y: raw.y,
    })
}

/// Study horizon implied by a dataset: the common `t_max` of unterminated subjects, or
/// the largest `t_max` when every subject terminated.
pub fn infer_horizon(dataset: &[Trajectory]) -> Option<f64> {
    dataset
        .iter()
        .find(|t| !t.terminated)
        .map(|t| t.t_max)
        .or_else(|| dataset.iter().map(|t| t.t_max).reduce(f64::max))
}

/// Parses and validates a whole JSON-lines document. Blank lines are skipped.
pub fn parse_dataset(text: &str, t_r: Option<f64>) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    let mut lines = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_trajectory_line(line, k + 1)?);
        lines.push(k + 1);
    }
    if out.is_empty() {
        return Err(Error::Input("dataset contains no records".into()));
    }
    let horizon = match t_r {
        Some(h) => h,
        None => infer_horizon(&out).unwrap_or(f64::INFINITY),
    };
    let p_z = out[0].z.len();
    for (t, &line) in out.iter().zip(&lines) {
        let mut v = validate(t, horizon);
        if t.z.len() != p_z {
            v.push("baseline covariate dimension differs from first record".into());
        }
        if !v.is_empty() {
            return Err(Error::Validation { line: Some(line), violations: v });
        }
    }
    Ok(out)
}

pub fn read_dataset(path: &Path, t_r: Option<f64>) -> Result<Vec<Trajectory>> {
    parse_dataset(&fs::read_to_string(path)?, t_r)
}

pub fn dataset_to_string(dataset: &[Trajectory]) -> Result<String> {
    let mut s = String::new();
    for t in dataset {
        s.push_str(&trajectory_to_line(t)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_dataset(path: &Path, dataset: &[Trajectory]) -> Result<()> {
    write_atomic(path, dataset_to_string(dataset)?.as_bytes())
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}
