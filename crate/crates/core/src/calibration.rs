//! Result types shared by the calibrators.

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Pose2D};
use crate::kinematics::{DiffDriveParams, DriveParams, MecanumParams, SensorModel};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub params: Vec<f64>,
    /// Robust objective at the new iterate.
    pub objective: f64,
    pub step_norm: f64,
    pub inner_iterations: usize,
    pub gamma: f64,
    pub trimmed: usize,
    pub trim_skipped: bool,
    pub weight_min: f64,
    pub weight_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub method: String,
    pub model: SensorModel,
    pub param_names: Vec<String>,
    pub estimates: Vec<f64>,
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Estimate ± 3 standard deviations.
    pub intervals: Option<Vec<[f64; 2]>>,
    pub mse: Option<f64>,
    /// Final per-observation component weights.
    pub weights: Vec<[f64; 3]>,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl CalibrationResult {
    pub fn std_devs(&self) -> Option<Vec<f64>> {
        self.covariance.as_ref().map(|c| (0..c.len()).map(|i| c[i][i].max(0.0).sqrt()).collect())
    }

    /// Histogram of normalized weights in ten equal bins over [0, 1].
    pub fn weight_histogram(&self, sigma: &[[f64; 3]]) -> [usize; 10] {
        let mut h = [0; 10];
        for (w, s) in self.weights.iter().zip(sigma) {
            for c in 0..3 {
                let v = (w[c] * s[c] * s[c]).clamp(0.0, 1.0);
                h[((v * 10.0) as usize).min(9)] += 1;
            }
        }
        h
    }
}

/// Resolve the sign ambiguity `(r_L, r_R, b, ℓ_x, ℓ_y, ℓ_θ) ~ (−r_L, −r_R, −b, −ℓ_x, −ℓ_y, ℓ_θ + π)`,
/// and its mecanum counterpart in `(r, axle_x, axle_y)`, so that the radii and
/// axle lengths are positive.
pub fn canonicalize(model: &SensorModel) -> SensorModel {
    let l = model.extrinsic;
    match model.drive {
        DriveParams::DiffDrive(p) if p.b < 0.0 => SensorModel {
            drive: DriveParams::DiffDrive(DiffDriveParams { r_l: -p.r_l, r_r: -p.r_r, b: -p.b }),
            extrinsic: Pose2D::new(-l.x, -l.y, l.theta + std::f64::consts::PI),
        },
        DriveParams::Mecanum(p) if p.r < 0.0 && p.l_x + p.l_y < 0.0 => SensorModel {
            drive: DriveParams::Mecanum(MecanumParams { r: -p.r, l_x: -p.l_x, l_y: -p.l_y }),
            extrinsic: Pose2D::new(-l.x, -l.y, l.theta + std::f64::consts::PI),
        },
        _ => SensorModel { drive: model.drive, extrinsic: Pose2D::new(l.x, l.y, wrap_angle(l.theta)) },
    }
}
