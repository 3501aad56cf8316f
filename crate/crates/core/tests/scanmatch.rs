use std::f64::consts::PI;

use nalgebra::Vector2;
use proptest::prelude::*;
use rand::Rng;
use wheelcal::geometry::Pose2D;
use wheelcal::scanmatch::{
    closest_distances, estimate_displacement, nearest_brute, rigid_align, trim_overlap, IcpConfig, Metric,
    NeighborSearch, PointGrid, Scan,
};
use wheelcal::simulate::rng_from_seed;
use wheelcal::Error;

fn cloud(rng: &mut impl Rng, n: usize, half: f64) -> Vec<Vector2<f64>> {
    (0..n).map(|_| Vector2::new(rng.random_range(-half..half), rng.random_range(-half..half))).collect()
}

/// Points seen from sensor pose `s`, expressed in the sensor frame.
fn observe(world: &[Vector2<f64>], s: &Pose2D, t: f64) -> Scan {
    let inv = s.ominus();
    Scan::new(t, world.iter().map(|p| inv.transform_point(p)).collect()).unwrap()
}

fn close(a: &Pose2D, b: &Pose2D, tol: f64) -> bool {
    a.delta(b).iter().all(|d| d.abs() <= tol)
}

/// Outline of a room with a few interior boxes, sampled densely.
fn room(rng: &mut impl Rng) -> Vec<Vector2<f64>> {
    let segs = [
        ((-4.0, -3.0), (4.0, -3.0)),
        ((4.0, -3.0), (4.0, 3.0)),
        ((4.0, 3.0), (-4.0, 3.0)),
        ((-4.0, 3.0), (-4.0, -3.0)),
        ((1.0, 0.5), (2.0, 0.5)),
        ((2.0, 0.5), (2.0, 1.8)),
        ((-2.0, -1.0), (-1.2, -1.6)),
    ];
    let mut pts = Vec::new();
    for ((x0, y0), (x1, y1)) in segs {
        let n = (f64::hypot(x1 - x0, y1 - y0) / 0.05) as usize;
        for i in 0..n {
            let u = (i as f64 + rng.random_range(0.0..1.0)) / n as f64;
            pts.push(Vector2::new(x0 + u * (x1 - x0), y0 + u * (y1 - y0)));
        }
    }
    pts
}

#[test]
fn grid_search_equals_brute_force() {
    let mut rng = rng_from_seed(7);
    for trial in 0..200 {
        let n = rng.random_range(1..400);
        let half = rng.random_range(0.1..20.0);
        let targets = cloud(&mut rng, n, half);
        let grid = PointGrid::new(&targets);
        for q in cloud(&mut rng, 50, 1.5 * half) {
            assert_eq!(grid.nearest(&q), nearest_brute(&q, &targets), "trial {trial}");
        }
    }
}

#[test]
fn closest_distances_match_double_loop() {
    let mut rng = rng_from_seed(3);
    for _ in 0..50 {
        let (a, b) = (cloud(&mut rng, 5, 2.0), cloud(&mut rng, 5, 2.0));
        let (sj, sk) = (Scan::new(0.0, a).unwrap(), Scan::new(1.0, b).unwrap());
        let q = Pose2D::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-PI..PI));
        let l = Pose2D::new(0.02, 0.046, 3.13);
        for search in [NeighborSearch::Grid, NeighborSearch::BruteForce] {
            let got = closest_distances(&sj, &sk, &q, &l, search);
            for (i, m) in got.iter().enumerate() {
                let p = l.transform_point(&sj.points[i]);
                let mut best = (usize::MAX, f64::INFINITY);
                for (t, z) in sk.points.iter().enumerate() {
                    let d = (p - q.oplus(&l).transform_point(z)).norm_squared();
                    if d < best.1 {
                        best = (t, d);
                    }
                }
                assert_eq!(m.source, i);
                assert_eq!(m.target, best.0);
                assert_eq!(m.sq_dist, best.1);
            }
        }
    }
}

#[test]
fn exact_model_gives_zero_distances() {
    let mut rng = rng_from_seed(5);
    let pts = cloud(&mut rng, 40, 3.0);
    let s = Scan::new(0.0, pts.clone()).unwrap();
    let l = Pose2D::new(0.1, -0.2, 0.7);
    assert!(closest_distances(&s, &s, &Pose2D::IDENTITY, &l, NeighborSearch::Grid).iter().all(|m| m.sq_dist == 0.0));
    let d = 0.25;
    let shifted = Scan::new(1.0, pts.iter().map(|p| p - Vector2::new(d, 0.0)).collect()).unwrap();
    let all = closest_distances(&s, &shifted, &Pose2D::new(d, 0.0, 0.0), &Pose2D::IDENTITY, NeighborSearch::Grid);
    assert!(all.iter().all(|m| m.sq_dist < 1e-24));
}

proptest! {
    #[test]
    fn trim_overlap_is_scale_invariant(mut d in prop::collection::vec(0.0..1.0f64, 1..300), alpha in 1e-3..1e3f64) {
        d.sort_by(f64::total_cmp);
        let scaled: Vec<f64> = d.iter().map(|v| v * alpha).collect();
        prop_assert_eq!(trim_overlap(&d), trim_overlap(&scaled));
    }

    #[test]
    fn rigid_align_recovers_transform(x in -2.0..2.0f64, y in -2.0..2.0f64, t in -PI..PI, seed in 0u64..1000) {
        let mut rng = rng_from_seed(seed);
        let src = cloud(&mut rng, 20, 3.0);
        let truth = Pose2D::new(x, y, t);
        let dst: Vec<_> = src.iter().map(|p| truth.transform_point(p)).collect();
        let est = rigid_align(&src, &dst, &[1.0; 20]).unwrap();
        prop_assert!(close(&est, &truth, 1e-10), "{est:?}");
        let resid = src.iter().zip(&dst).map(|(s, d)| (est.transform_point(s) - d).norm()).fold(0.0, f64::max);
        prop_assert!(resid < 1e-10);
    }
}

#[test]
fn trim_overlap_values() {
    assert_eq!(trim_overlap(&[0.5; 10]), (1.0, 10));
    let mut v = vec![0.0; 60];
    v.extend([1e6; 40]);
    assert_eq!(trim_overlap(&v), (0.6, 60));
    assert_eq!(trim_overlap(&[1.0]), (1.0, 1));
}

#[test]
fn icp_recovers_small_motion() {
    let mut rng = rng_from_seed(11);
    let world = room(&mut rng);
    let cfg = IcpConfig::default();
    for _ in 0..20 {
        let sj = Pose2D::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-PI..PI));
        let s = Pose2D::new(rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), rng.random_range(-0.1..0.1));
        let (a, b) = (observe(&world, &sj, 0.0), observe(&world, &sj.oplus(&s), 0.7));
        let est = estimate_displacement(&a, &b, &Pose2D::IDENTITY, &cfg).unwrap();
        assert!(close(&est.s_hat, &s, 1e-8), "{:?} vs {s:?}", est.s_hat);
        assert_eq!((est.t_j, est.t_k), (0.0, 0.7));
    }
}

#[test]
fn icp_reverse_direction_gives_inverse() {
    let mut rng = rng_from_seed(12);
    let world = room(&mut rng);
    for metric in [Metric::PointToPoint, Metric::PointToLine] {
        let cfg = IcpConfig { metric, ..Default::default() };
        for _ in 0..10 {
            let sj = Pose2D::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-PI..PI));
            let s = Pose2D::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.08..0.08));
            let (a, b) = (observe(&world, &sj, 0.0), observe(&world, &sj.oplus(&s), 0.7));
            let fwd = estimate_displacement(&a, &b, &Pose2D::IDENTITY, &cfg).unwrap().s_hat;
            let back = estimate_displacement(&b, &a, &Pose2D::IDENTITY, &cfg).unwrap().s_hat;
            assert!(close(&back, &fwd.ominus(), 1e-6), "{metric:?}: {back:?} vs {:?}", fwd.ominus());
        }
    }
}

#[test]
fn identical_scans_give_identity_and_floor_sigma() {
    let mut rng = rng_from_seed(13);
    let s = observe(&room(&mut rng), &Pose2D::new(0.3, 0.1, 0.4), 0.0);
    let cfg = IcpConfig::default();
    let est = estimate_displacement(&s, &s, &Pose2D::IDENTITY, &cfg).unwrap();
    assert!(close(&est.s_hat, &Pose2D::IDENTITY, 1e-12));
    assert_eq!(est.sigma, cfg.sigma_floor);
}

#[test]
fn disjoint_clouds_fail_to_match() {
    let mut rng = rng_from_seed(14);
    let a: Vec<_> = cloud(&mut rng, 200, 1.0).into_iter().map(|p| p + Vector2::new(-20.0, 0.0)).collect();
    let b: Vec<_> = cloud(&mut rng, 200, 1.0).into_iter().map(|p| p + Vector2::new(20.0, 0.0)).collect();
    let err = estimate_displacement(&Scan::new(0.0, a).unwrap(), &Scan::new(1.0, b).unwrap(), &Pose2D::IDENTITY, &IcpConfig::default())
        .unwrap_err();
    assert!(matches!(err, Error::MatchFailure { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn empty_scan_rejected() {
    assert!(matches!(Scan::new(0.0, vec![]), Err(Error::Schema(_))));
    assert!(Scan::new(0.0, vec![Vector2::new(f64::NAN, 0.0)]).is_err());
}
