//! Drive models mapping wheel angular velocities to robot and sensor motion.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffDriveParams {
    pub r_l: f64,
    pub r_r: f64,
    pub b: f64,
}

/// Wheel order is (rear-left, rear-right, front-left, front-right).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MecanumParams {
    pub r: f64,
    #[serde(rename = "axle_x")]
    pub l_x: f64,
    #[serde(rename = "axle_y")]
    pub l_y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "drive", rename_all = "snake_case")]
pub enum DriveParams {
    DiffDrive(DiffDriveParams),
    Mecanum(MecanumParams),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist2D {
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelRates {
    pub timestamp: f64,
    pub omega: Vec<f64>,
}

/// Wheel rates held constant for `dt` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    pub omega: Vec<f64>,
    pub dt: f64,
}

fn check_len(d: &[f64], m: usize) -> Result<()> {
    if d.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: d.len() });
    }
    Ok(())
}

pub fn diffdrive_twist(p: &DiffDriveParams, d: &[f64]) -> Result<Twist2D> {
    check_len(d, 2)?;
    let (wl, wr) = (d[0], d[1]);
    Ok(Twist2D {
        v_x: 0.5 * p.r_l * wl + 0.5 * p.r_r * wr,
        v_y: 0.0,
        omega: (-p.r_l * wl + p.r_r * wr) / p.b,
    })
}

pub fn mecanum_twist(p: &MecanumParams, d: &[f64]) -> Result<Twist2D> {
    check_len(d, 4)?;
    let l = p.l_x + p.l_y;
    Ok(Twist2D {
        v_x: p.r * (d[0] + d[1] + d[2] + d[3]),
        v_y: p.r * (-d[0] + d[1] + d[2] - d[3]),
        omega: p.r * (-d[0] + d[1] - d[2] + d[3]) / l,
    })
}

/// Wheel rates that produce `t` under the Mecanum model.
pub fn mecanum_inverse(p: &MecanumParams, t: &Twist2D) -> [f64; 4] {
    let l = p.l_x + p.l_y;
    let (a, b, c) = (t.v_x / (4.0 * p.r), t.v_y / (4.0 * p.r), t.omega * l / (4.0 * p.r));
    [a - b - c, a + b + c, a + b - c, a - b + c]
}

/// Wheel rates that produce `(v, ω)` under the differential-drive model.
pub fn diffdrive_inverse(p: &DiffDriveParams, v: f64, omega: f64) -> [f64; 2] {
    [(v - 0.5 * omega * p.b) / p.r_l, (v + 0.5 * omega * p.b) / p.r_r]
}

fn arc(t: &Twist2D, dt: f64) -> Pose2D {
    let a = t.omega * dt;
    let d = t.v_x * dt;
    let (sx, sy) = if a.abs() < 1e-8 {
        (1.0 - a * a / 6.0, 0.5 * a)
    } else {
        (a.sin() / a, (1.0 - a.cos()) / a)
    };
    Pose2D::new(d * sx, d * sy, a)
}

fn straight(t: &Twist2D, dt: f64) -> Pose2D {
    Pose2D::new(t.v_x * dt, t.v_y * dt, t.omega * dt)
}

/// Integrate a constant twist; arcs for planar-nonholonomic motion, straight
/// segments when a lateral velocity is present.
pub fn integrate_twist(t: &Twist2D, dt: f64) -> Result<Pose2D> {
    if dt.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::NonPositiveInterval(dt));
    }
    Ok(if t.v_y == 0.0 { arc(t, dt) } else { straight(t, dt) })
}

impl DriveParams {
    pub fn wheel_count(&self) -> usize {
        match self {
            DriveParams::DiffDrive(_) => 2,
            DriveParams::Mecanum(_) => 4,
        }
    }

    pub fn names(&self) -> &'static [&'static str] {
        match self {
            DriveParams::DiffDrive(_) => &["r_l", "r_r", "b"],
            DriveParams::Mecanum(_) => &["r", "axle_x", "axle_y"],
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            DriveParams::DiffDrive(p) => vec![p.r_l, p.r_r, p.b],
            DriveParams::Mecanum(p) => vec![p.r, p.l_x, p.l_y],
        }
    }

    pub fn with_values(&self, v: &[f64]) -> Result<Self> {
        check_len(v, 3)?;
        Ok(match self {
            DriveParams::DiffDrive(_) => DriveParams::DiffDrive(DiffDriveParams { r_l: v[0], r_r: v[1], b: v[2] }),
            DriveParams::Mecanum(_) => DriveParams::Mecanum(MecanumParams { r: v[0], l_x: v[1], l_y: v[2] }),
        })
    }

    pub fn twist(&self, d: &[f64]) -> Result<Twist2D> {
        match self {
            DriveParams::DiffDrive(p) => diffdrive_twist(p, d),
            DriveParams::Mecanum(p) => mecanum_twist(p, d),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            DriveParams::DiffDrive(_) => "diff_drive",
            DriveParams::Mecanum(_) => "mecanum",
        }
    }
}

/// Robot motion over one constant-rate interval.
pub fn robot_relative_pose(params: &DriveParams, d: &[f64], dt: f64) -> Result<Pose2D> {
    if dt.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::NonPositiveInterval(dt));
    }
    let t = params.twist(d)?;
    Ok(match params {
        DriveParams::DiffDrive(_) => arc(&t, dt),
        DriveParams::Mecanum(_) => straight(&t, dt),
    })
}

/// Robot motion over consecutive constant-rate segments.
pub fn compose_motion(params: &DriveParams, segments: &[RateSegment]) -> Result<Pose2D> {
    let mut q = Pose2D::IDENTITY;
    for s in segments {
        q = q.oplus(&robot_relative_pose(params, &s.omega, s.dt)?);
    }
    Ok(q)
}

/// `⊖ℓ ⊕ q ⊕ ℓ`
pub fn sensor_displacement(l: &Pose2D, q_jk: &Pose2D) -> Pose2D {
    l.ominus().oplus(q_jk).oplus(l)
}

pub fn rates_from_ticks(delta_ticks: &[i64], ticks_per_rev: f64, dt: f64) -> Vec<f64> {
    let rad_per_tick = 2.0 * std::f64::consts::PI / ticks_per_rev;
    delta_ticks.iter().map(|&n| n as f64 * rad_per_tick / dt).collect()
}

/// Drive parameters together with the sensor mounting pose; the parameter
/// vector is the drive values followed by `(ℓ_x, ℓ_y, ℓ_θ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub drive: DriveParams,
    pub extrinsic: Pose2D,
}

impl SensorModel {
    pub fn new(drive: DriveParams, extrinsic: Pose2D) -> Self {
        Self { drive, extrinsic }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = self.drive.values();
        v.extend_from_slice(&[self.extrinsic.x, self.extrinsic.y, self.extrinsic.theta]);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = self.drive.names().iter().map(|s| s.to_string()).collect();
        n.extend(["l_x", "l_y", "l_theta"].iter().map(|s| s.to_string()));
        n
    }

    /// Rebuild from a parameter vector. The heading is kept unwrapped so that
    /// finite differences stay smooth across ±π.
    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        check_len(p, 6)?;
        Ok(Self {
            drive: self.drive.with_values(&p[..3])?,
            extrinsic: Pose2D { x: p[3], y: p[4], theta: p[5] },
        })
    }

    pub fn displacement(&self, segments: &[RateSegment]) -> Result<Pose2D> {
        let q = compose_motion(&self.drive, segments)?;
        let s = sensor_displacement(&self.extrinsic, &q);
        if !s.is_finite() {
            return Err(Error::NonFinite("sensor displacement"));
        }
        Ok(s)
    }
}

/// ∂s/∂p by central differences with step `max(1e-6, 1e-6·|p_i|)`; truncation error O(h²).
pub fn param_jacobian(model: &SensorModel, segments: &[RateSegment]) -> Result<DMatrix<f64>> {
    let p = model.params();
    let mut j = DMatrix::zeros(3, p.len());
    let mut work = p.clone();
    for i in 0..p.len() {
        let h = (1e-6 * p[i].abs()).max(1e-6);
        work[i] = p[i] + h;
        let sp = model.with_params(&work)?.displacement(segments)?;
        work[i] = p[i] - h;
        let sm = model.with_params(&work)?.displacement(segments)?;
        work[i] = p[i];
        let d = sp.delta(&sm);
        for r in 0..3 {
            j[(r, i)] = d[r] / (2.0 * h);
        }
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    const DD: DiffDriveParams = DiffDriveParams { r_l: 0.07, r_r: 0.07, b: 0.23 };

    #[test]
    fn diffdrive_examples() {
        let t = diffdrive_twist(&DD, &[1.0, 1.0]).unwrap();
        assert_eq!((t.v_x, t.v_y, t.omega), (0.07, 0.0, 0.0));
        let t = diffdrive_twist(&DD, &[1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(t.v_x, 0.0);
        assert_abs_diff_eq!(t.omega, -0.14 / 0.23, epsilon = 1e-15);
        assert_abs_diff_eq!(t.omega, -0.6087, epsilon = 1e-4);
        assert!(matches!(diffdrive_twist(&DD, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn mecanum_examples() {
        let p = MecanumParams { r: 0.03, l_x: 0.1, l_y: 0.1 };
        assert_eq!(mecanum_twist(&p, &[0.0; 4]).unwrap(), Twist2D::default());
        let t = mecanum_twist(&p, &[1.0; 4]).unwrap();
        assert_abs_diff_eq!(t.v_x, 0.12, epsilon = 1e-15);
        assert_eq!((t.v_y, t.omega), (0.0, 0.0));
        let t = mecanum_twist(&p, &[-1.0, 1.0, 1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(t.v_y, 0.12, epsilon = 1e-15);
        assert_eq!((t.v_x, t.omega), (0.0, 0.0));
        let w = mecanum_inverse(&p, &Twist2D { v_x: 0.1, v_y: -0.05, omega: 0.3 });
        let back = mecanum_twist(&p, &w).unwrap();
        assert_abs_diff_eq!(back.v_x, 0.1, epsilon = 1e-14);
        assert_abs_diff_eq!(back.v_y, -0.05, epsilon = 1e-14);
        assert_abs_diff_eq!(back.omega, 0.3, epsilon = 1e-14);
    }

    #[test]
    fn integrate_examples() {
        let q = integrate_twist(&Twist2D { v_x: 1.0, v_y: 0.0, omega: 0.0 }, 0.5).unwrap();
        assert_eq!(q, Pose2D::new(0.5, 0.0, 0.0));
        let q = integrate_twist(&Twist2D { v_x: 0.0, v_y: 0.0, omega: PI / 2.0 }, 1.0).unwrap();
        assert_abs_diff_eq!(q.x, 0.0);
        assert_abs_diff_eq!(q.theta, PI / 2.0);
        let q = integrate_twist(&Twist2D { v_x: 1.0, v_y: 0.0, omega: PI / 2.0 }, 1.0).unwrap();
        assert_abs_diff_eq!(q.x, 2.0 / PI, epsilon = 1e-15);
        assert_abs_diff_eq!(q.y, 2.0 / PI, epsilon = 1e-15);
        assert!(integrate_twist(&Twist2D::default(), 0.0).is_err());
        assert!(integrate_twist(&Twist2D::default(), f64::NAN).is_err());
    }

    #[test]
    fn sensor_displacement_examples() {
        let q = Pose2D::new(0.3, -0.1, 0.2);
        assert_eq!(sensor_displacement(&Pose2D::IDENTITY, &q), q);
        let l = Pose2D::new(0.02, 0.05, 3.13);
        let s = sensor_displacement(&l, &Pose2D::IDENTITY);
        assert_abs_diff_eq!(s.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.theta, 0.0, epsilon = 1e-15);
        let s = sensor_displacement(&Pose2D::new(0.0, 0.0, PI), &Pose2D::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(s.x, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.y, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_b_column_matches_analytic() {
        let m = SensorModel::new(DriveParams::DiffDrive(DiffDriveParams { r_l: 0.035, r_r: 0.036, b: 0.238 }), Pose2D::IDENTITY);
        let seg = [RateSegment { omega: vec![2.0, 3.5], dt: 0.7 }];
        let j = param_jacobian(&m, &seg).unwrap();
        let q = m.displacement(&seg).unwrap();
        assert_abs_diff_eq!(j[(2, 2)], -q.theta / 0.238, epsilon = 1e-5);
    }

    #[test]
    fn jacobian_pure_rotation_radius_columns_vanish() {
        let m = SensorModel::new(DriveParams::DiffDrive(DiffDriveParams { r_l: 0.035, r_r: 0.035, b: 0.238 }), Pose2D::IDENTITY);
        let seg = [RateSegment { omega: vec![0.0, 0.0], dt: 0.7 }];
        let j = param_jacobian(&m, &seg).unwrap();
        for r in 0..3 {
            assert_abs_diff_eq!(j[(r, 0)], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(j[(r, 1)], 0.0, epsilon = 1e-12);
        }
    }
}
