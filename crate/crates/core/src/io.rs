//! Line-oriented JSON log formats, parameter files and atomic writes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::kinematics::{DiffDriveParams, DriveParams, MecanumParams, SensorModel};
use crate::metrics::{TimedPose, Trajectory};
use crate::odometry::{OdometryLog, OdometrySample};
use crate::scanmatch::{DisplacementObs, Scan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdometryRecord {
    pub t: f64,
    pub ticks: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanRecord {
    pub t: f64,
    pub pts: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplacementRecord {
    pub tj: f64,
    pub tk: f64,
    pub s: [f64; 3],
    pub sigma: [f64; 3],
    /// Set on rows kept despite a failed match.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub t: f64,
    pub pose: [f64; 3],
}

impl From<&DisplacementObs> for DisplacementRecord {
    fn from(o: &DisplacementObs) -> Self {
        Self { tj: o.t_j, tk: o.t_k, s: o.s_hat.to_array(), sigma: o.sigma, failed: false }
    }
}

impl DisplacementRecord {
    pub fn to_obs(&self) -> DisplacementObs {
        DisplacementObs { t_j: self.tj, t_k: self.tk, s_hat: Pose2D::from_array(self.s), sigma: self.sigma }
    }
}

/// Serialize records one per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Schema(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse one record per non-empty line; errors name the line.
pub fn from_jsonl<T: DeserializeOwned>(text: &str, what: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Schema(format!("{what} line {}: {e}", i + 1))))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    from_jsonl(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_pretty(value)?.as_bytes())
}

/// Write to a sibling temporary file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Schema(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn odometry_records(log: &OdometryLog) -> Vec<OdometryRecord> {
    log.samples.iter().map(|s| OdometryRecord { t: s.t, ticks: s.ticks.clone() }).collect()
}

pub fn odometry_from_records(records: Vec<OdometryRecord>, ticks_per_rev: f64) -> Result<OdometryLog> {
    OdometryLog::new(ticks_per_rev, records.into_iter().map(|r| OdometrySample { t: r.t, ticks: r.ticks }).collect())
}

pub fn scan_records(scans: &[Scan]) -> Vec<ScanRecord> {
    scans.iter().map(|s| ScanRecord { t: s.timestamp, pts: s.points.iter().map(|p| [p.x, p.y]).collect() }).collect()
}

pub fn scans_from_records(records: Vec<ScanRecord>) -> Result<Vec<Scan>> {
    records.into_iter().map(|r| Scan::new(r.t, r.pts.iter().map(|p| Vector2::new(p[0], p[1])).collect())).collect()
}

pub fn trajectory_records(t: &Trajectory) -> Vec<PoseRecord> {
    t.poses().iter().map(|p| PoseRecord { t: p.t, pose: p.pose.to_array() }).collect()
}

pub fn trajectory_from_records(records: Vec<PoseRecord>) -> Result<Trajectory> {
    Trajectory::new(records.into_iter().map(|r| TimedPose { t: r.t, pose: Pose2D::from_array(r.pose) }).collect())
}

/// Named parameters with a drive-type tag, as stored in truth and result files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFile {
    pub drive: String,
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticks_per_rev: Option<f64>,
}

impl ParamFile {
    pub fn from_model(m: &SensorModel, ticks_per_rev: Option<f64>) -> Self {
        let params = m.param_names().into_iter().zip(m.params()).collect();
        Self { drive: m.drive.tag().to_string(), params, ticks_per_rev }
    }

    pub fn to_model(&self) -> Result<SensorModel> {
        let drive = match self.drive.as_str() {
            "diff_drive" => DriveParams::DiffDrive(DiffDriveParams { r_l: 0.0, r_r: 0.0, b: 0.0 }),
            "mecanum" => DriveParams::Mecanum(MecanumParams { r: 0.0, l_x: 0.0, l_y: 0.0 }),
            other => return Err(Error::Schema(format!("unknown drive type {other:?}"))),
        };
        let template = SensorModel::new(drive, Pose2D::IDENTITY);
        let names = template.param_names();
        if let Some(extra) = self.params.keys().find(|k| !names.contains(k)) {
            return Err(Error::Schema(format!("unknown parameter {extra:?} for drive {}", self.drive)));
        }
        let values = names
            .iter()
            .map(|n| {
                let v = *self.params.get(n).ok_or_else(|| Error::Schema(format!("missing parameter {n:?}")))?;
                if !v.is_finite() {
                    return Err(Error::Schema(format!("parameter {n:?} is not finite")));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        template.with_params(&values)
    }
}
