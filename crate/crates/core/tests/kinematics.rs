use std::f64::consts::PI;

use proptest::prelude::*;
use wheelcal::geometry::Pose2D;
use wheelcal::kinematics::{
    compose_motion, diffdrive_inverse, diffdrive_twist, mecanum_inverse, mecanum_twist, param_jacobian,
    robot_relative_pose, sensor_displacement, DiffDriveParams, DriveParams, MecanumParams, RateSegment, SensorModel,
    Twist2D,
};

fn diff_params() -> impl Strategy<Value = DiffDriveParams> {
    (0.02..0.05f64, 0.02..0.05f64, 0.15..0.4f64).prop_map(|(r_l, r_r, b)| DiffDriveParams { r_l, r_r, b })
}

fn mecanum_params() -> impl Strategy<Value = MecanumParams> {
    (0.02..0.05f64, 0.05..0.2f64, 0.05..0.2f64).prop_map(|(r, l_x, l_y)| MecanumParams { r, l_x, l_y })
}

fn pose() -> impl Strategy<Value = Pose2D> {
    (-0.5..0.5f64, -0.5..0.5f64, -PI..PI).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
}

fn close(a: &Pose2D, b: &Pose2D, tol: f64) -> bool {
    a.delta(b).iter().all(|d| d.abs() <= tol)
}

/// Fixed-step integration of the unicycle ODE with the heading taken at each
/// step midpoint.
fn euler(t: &Twist2D, dt: f64, steps: usize) -> Pose2D {
    let h = dt / steps as f64;
    let (mut x, mut y) = (0.0, 0.0);
    for i in 0..steps {
        let th = t.omega * (i as f64 + 0.5) * h;
        let (s, c) = th.sin_cos();
        x += h * (c * t.v_x - s * t.v_y);
        y += h * (s * t.v_x + c * t.v_y);
    }
    Pose2D::new(x, y, t.omega * dt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn diffdrive_arc_matches_ode(p in diff_params(), wl in -8.0..8.0f64, wr in -8.0..8.0f64, dt in 0.01..0.7f64) {
        let q = robot_relative_pose(&DriveParams::DiffDrive(p), &[wl, wr], dt).unwrap();
        let oracle = euler(&diffdrive_twist(&p, &[wl, wr]).unwrap(), dt, 10_000);
        prop_assert!(close(&q, &oracle, 1e-6), "{q:?} vs {oracle:?}");
    }
}

proptest! {
    #[test]
    fn conjugation_is_a_homomorphism(l in pose(), q1 in pose(), q2 in pose()) {
        let lhs = sensor_displacement(&l, &q1).oplus(&sensor_displacement(&l, &q2));
        let rhs = sensor_displacement(&l, &q1.oplus(&q2));
        prop_assert!(close(&lhs, &rhs, 1e-10));
    }

    #[test]
    fn diffdrive_never_strafes(p in diff_params(), wl in -10.0..10.0f64, wr in -10.0..10.0f64) {
        prop_assert_eq!(diffdrive_twist(&p, &[wl, wr]).unwrap().v_y, 0.0);
    }

    #[test]
    fn mecanum_heading_is_rate_times_dt(p in mecanum_params(), w in prop::array::uniform4(-10.0..10.0f64), dt in 0.01..1.0f64) {
        let t = mecanum_twist(&p, &w).unwrap();
        let q = robot_relative_pose(&DriveParams::Mecanum(p), &w, dt).unwrap();
        prop_assert_eq!(q.theta, wheelcal::geometry::wrap_angle(t.omega * dt));
    }

    #[test]
    fn inverses_reproduce_twists(p in diff_params(), m in mecanum_params(), v in -0.3..0.3f64, vy in -0.3..0.3f64, w in -1.0..1.0f64) {
        let t = diffdrive_twist(&p, &diffdrive_inverse(&p, v, w)).unwrap();
        prop_assert!((t.v_x - v).abs() < 1e-12 && (t.omega - w).abs() < 1e-12);
        let target = Twist2D { v_x: v, v_y: vy, omega: w };
        let t = mecanum_twist(&m, &mecanum_inverse(&m, &target)).unwrap();
        prop_assert!((t.v_x - v).abs() < 1e-12 && (t.v_y - vy).abs() < 1e-12 && (t.omega - w).abs() < 1e-12);
    }
}

#[test]
fn diffdrive_values() {
    let p = DiffDriveParams { r_l: 0.07, r_r: 0.07, b: 0.23 };
    let t = diffdrive_twist(&p, &[1.0, 1.0]).unwrap();
    assert_eq!((t.v_x, t.v_y, t.omega), (0.07, 0.0, 0.0));
    let t = diffdrive_twist(&p, &[1.0, -1.0]).unwrap();
    assert_eq!(t.v_x, 0.0);
    assert!((t.omega + 0.6087).abs() < 1e-4);
}

#[test]
fn mecanum_values() {
    let p = MecanumParams { r: 0.03, l_x: 0.1, l_y: 0.1 };
    assert_eq!(mecanum_twist(&p, &[0.0; 4]).unwrap(), Twist2D::default());
    let t = mecanum_twist(&p, &[1.0; 4]).unwrap();
    assert!((t.v_x - 0.12).abs() < 1e-15 && t.v_y == 0.0 && t.omega == 0.0);
    let t = mecanum_twist(&p, &[-1.0, 1.0, 1.0, -1.0]).unwrap();
    assert!(t.v_x == 0.0 && (t.v_y - 0.12).abs() < 1e-15 && t.omega == 0.0);
}

#[test]
fn straight_line_motion() {
    let p = DiffDriveParams { r_l: 0.035, r_r: 0.035, b: 0.238 };
    let q = robot_relative_pose(&DriveParams::DiffDrive(p), &[2.0, 2.0], 0.5).unwrap();
    assert!(close(&q, &Pose2D::new(0.035 * 2.0 * 0.5, 0.0, 0.0), 1e-15));
    let q = robot_relative_pose(&DriveParams::DiffDrive(p), &[0.0, 0.0], 0.5).unwrap();
    assert_eq!(q, Pose2D::IDENTITY);
}

#[test]
fn zero_or_negative_interval_rejected() {
    let d = DriveParams::DiffDrive(DiffDriveParams { r_l: 0.035, r_r: 0.035, b: 0.238 });
    assert!(robot_relative_pose(&d, &[1.0, 1.0], 0.0).is_err());
    assert!(robot_relative_pose(&d, &[1.0, 1.0], -0.1).is_err());
    assert!(robot_relative_pose(&d, &[1.0], 0.1).is_err());
}

#[test]
fn segments_compose_in_order() {
    let d = DriveParams::DiffDrive(DiffDriveParams { r_l: 0.035, r_r: 0.036, b: 0.238 });
    let segs = vec![
        RateSegment { omega: vec![1.0, 3.0], dt: 0.3 },
        RateSegment { omega: vec![2.0, 2.0], dt: 0.4 },
    ];
    let direct = robot_relative_pose(&d, &[1.0, 3.0], 0.3).unwrap().oplus(&robot_relative_pose(&d, &[2.0, 2.0], 0.4).unwrap());
    assert_eq!(compose_motion(&d, &segs).unwrap(), direct);
}

#[test]
fn jacobian_matches_richardson_extrapolation() {
    let m = SensorModel::new(
        DriveParams::DiffDrive(DiffDriveParams { r_l: 0.035, r_r: 0.036, b: 0.238 }),
        Pose2D::new(0.02, 0.046, 3.13),
    );
    let segs = vec![RateSegment { omega: vec![1.5, 3.0], dt: 0.7 }];
    let j = param_jacobian(&m, &segs).unwrap();
    let p = m.params();
    let central = |i: usize, h: f64| {
        let mut a = p.clone();
        let mut b = p.clone();
        a[i] += h;
        b[i] -= h;
        let d = m.with_params(&a).unwrap().displacement(&segs).unwrap().delta(&m.with_params(&b).unwrap().displacement(&segs).unwrap());
        d.map(|v| v / (2.0 * h))
    };
    for i in 0..6 {
        let (c1, c2) = (central(i, 1e-3), central(i, 5e-4));
        for r in 0..3 {
            let rich = (4.0 * c2[r] - c1[r]) / 3.0;
            assert!((j[(r, i)] - rich).abs() <= 1e-6 * (1.0 + rich.abs()), "d{r}/dp{i}: {} vs {rich}", j[(r, i)]);
        }
    }
}
