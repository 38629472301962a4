//! CSV and JSON file formats of the CLI.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::commands::CliError;

#[derive(Debug, Deserialize)]
pub struct Obs2dRow {
    pub view: usize,
    pub joint: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct JointRow {
    pub joint: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Deserialize)]
pub struct SampleJointRow {
    pub sample: usize,
    pub joint: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::input(path, e))
}

/// Per view (ascending index): joint index → pixel.
pub fn read_obs2d(path: &Path) -> Result<BTreeMap<usize, BTreeMap<usize, Vector2<f64>>>, CliError> {
    let mut out: BTreeMap<usize, BTreeMap<usize, Vector2<f64>>> = BTreeMap::new();
    for r in read_rows::<Obs2dRow>(path)? {
        if out.entry(r.view).or_default().insert(r.joint, Vector2::new(r.u, r.v)).is_some() {
            return Err(CliError::Usage(format!(
                "{}: duplicate row for view {} joint {}",
                path.display(),
                r.view,
                r.joint
            )));
        }
    }
    Ok(out)
}

pub fn read_pose(path: &Path) -> Result<BTreeMap<usize, Vector3<f64>>, CliError> {
    Ok(read_rows::<JointRow>(path)?
        .into_iter()
        .map(|r| (r.joint, Vector3::new(r.x, r.y, r.z)))
        .collect())
}

/// Sample index → joint index → position.
pub fn read_sample_joints(path: &Path) -> Result<BTreeMap<usize, BTreeMap<usize, Vector3<f64>>>, CliError> {
    let mut out: BTreeMap<usize, BTreeMap<usize, Vector3<f64>>> = BTreeMap::new();
    for r in read_rows::<SampleJointRow>(path)? {
        out.entry(r.sample).or_default().insert(r.joint, Vector3::new(r.x, r.y, r.z));
    }
    Ok(out)
}

pub fn joints_csv(joints: &[(usize, Vector3<f64>)]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (j, p) in joints {
        w.serialize(JointRow {
            joint: *j,
            x: p.x,
            y: p.y,
            z: p.z,
        })
        .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

/// Writes `bytes` to `path`, or to stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| CliError::output(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .map_err(|e| CliError::Usage(format!("stdout: {e}")))
        }
    }
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}
