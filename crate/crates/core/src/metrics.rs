//! Absolute and relative trajectory error.
//!
//! ATE compares raw poses without any alignment step, so both trajectories
//! must share their starting frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::kinematics::SensorModel;
use crate::modelfree::{GpModel, LinearModel};
use crate::odometry::OdometryLog;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Pose2D,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    poses: Vec<TimedPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<TimedPose>) -> Result<Self> {
        if let Some(i) = poses.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(Error::Schema(format!("trajectory timestamps not increasing at index {}", i + 1)));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[TimedPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.poses.iter().map(|p| p.t).collect()
    }

    /// Apply `g ⊕ x` to every pose.
    pub fn transformed(&self, g: &Pose2D) -> Self {
        Self { poses: self.poses.iter().map(|p| TimedPose { t: p.t, pose: g.oplus(&p.pose) }).collect() }
    }
}

fn median_spacing(t: &[f64]) -> f64 {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return f64::INFINITY;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Pair each estimated pose with the nearest reference pose within half the
/// reference sampling period.
pub fn associate(est: &Trajectory, reference: &Trajectory) -> Result<Vec<(usize, usize)>> {
    if est.len() != reference.len() {
        return Err(Error::Association(format!("length mismatch: {} estimated vs {} reference poses", est.len(), reference.len())));
    }
    let rt = reference.times();
    let tol = 0.5 * median_spacing(&rt);
    est.poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let k = rt.partition_point(|&t| t < p.t);
            let best = [k.checked_sub(1), Some(k)]
                .into_iter()
                .flatten()
                .filter(|&c| c < rt.len())
                .min_by(|&a, &b| (rt[a] - p.t).abs().total_cmp(&(rt[b] - p.t).abs()));
            match best {
                Some(c) if (rt[c] - p.t).abs() <= tol => Ok((i, c)),
                _ => Err(Error::Association(format!("no reference pose within {tol} s of t = {}", p.t))),
            }
        })
        .collect()
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
}

/// Translational magnitude of each relative-step error.
pub fn rpe_series(est: &Trajectory, reference: &Trajectory) -> Result<Vec<f64>> {
    let pairs = associate(est, reference)?;
    if pairs.len() < 2 {
        return Err(Error::Association("relative pose error needs two poses".into()));
    }
    Ok(pairs
        .windows(2)
        .map(|w| {
            let (e0, e1) = (&est.poses[w[0].0].pose, &est.poses[w[1].0].pose);
            let (x0, x1) = (&reference.poses[w[0].1].pose, &reference.poses[w[1].1].pose);
            let e = e0.between(e1).between(&x0.between(x1));
            e.translation().norm()
        })
        .collect())
}

pub fn ate_series(est: &Trajectory, reference: &Trajectory) -> Result<Vec<f64>> {
    let pairs = associate(est, reference)?;
    Ok(pairs
        .iter()
        .map(|&(i, k)| est.poses[i].pose.between(&reference.poses[k].pose).translation().norm())
        .collect())
}

pub fn rpe(est: &Trajectory, reference: &Trajectory) -> Result<f64> {
    Ok(rms(&rpe_series(est, reference)?))
}

pub fn ate(est: &Trajectory, reference: &Trajectory) -> Result<f64> {
    Ok(rms(&ate_series(est, reference)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ate_m: f64,
    pub rpe_m: f64,
    pub n_poses: usize,
    pub ate_series: Vec<f64>,
    pub rpe_series: Vec<f64>,
}

pub fn evaluate(est: &Trajectory, reference: &Trajectory) -> Result<MetricsReport> {
    let a = ate_series(est, reference)?;
    let r = rpe_series(est, reference)?;
    Ok(MetricsReport { ate_m: rms(&a), rpe_m: rms(&r), n_poses: est.len(), ate_series: a, rpe_series: r })
}

/// Any learned or parametric map from an odometry interval to sensor motion.
#[derive(Clone, Debug)]
pub enum MotionModel {
    Parametric(SensorModel),
    Gp(Box<GpModel>),
    Linear(LinearModel),
}

impl MotionModel {
    pub fn predict(&self, odometry: &OdometryLog, tj: f64, tk: f64) -> Result<Pose2D> {
        match self {
            MotionModel::Parametric(m) => m.displacement(&odometry.segments(tj, tk)?),
            MotionModel::Gp(g) => Ok(Pose2D::from_array(g.predict(&odometry.delta_ticks(tj, tk)?)?.0)),
            MotionModel::Linear(l) => Ok(Pose2D::from_array(l.predict(&odometry.delta_ticks(tj, tk)?)?)),
        }
    }
}

/// Chain per-interval predictions from `start` through the given timestamps.
pub fn predict_trajectory(model: &MotionModel, odometry: &OdometryLog, times: &[f64], start: Pose2D) -> Result<Trajectory> {
    let mut poses = Vec::with_capacity(times.len());
    let mut x = start;
    for (i, &t) in times.iter().enumerate() {
        if i > 0 {
            let s = model.predict(odometry, times[i - 1], t).map_err(|e| match e {
                Error::OdometryGap(m) => Error::OdometryGap(format!("interval [{}, {t}]: {m}", times[i - 1])),
                other => other,
            })?;
            x = x.oplus(&s);
        }
        poses.push(TimedPose { t, pose: x });
    }
    Trajectory::new(poses)
}
