use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use wheelcal::kinematics::{RateSegment, SensorModel};
use wheelcal::modelfree::{
    fit_linear_model, fit_mean_matrix, gp_fit, gp_predict, linear_kernel, log_marginal_likelihood,
    optimize_hyperparameters, predict_linear, rbf_kernel, GpHypers, GpModel, KernelHypers, KernelSpec, LinearModel,
    MeanSpec, TrainingSample,
};
use wheelcal::simulate::{rng_from_seed, synth_model_free, Distortion, SimConfig};
use wheelcal::Error;

fn sample(delta: Vec<f64>, s: [f64; 3], sigma: f64) -> TrainingSample {
    TrainingSample { delta, s_hat: s, sigma: [sigma; 3] }
}

fn hypers(m: usize, sv: f64, ls: f64) -> GpHypers {
    let k = KernelHypers { signal_var: sv, length_scales: vec![ls; m], linear_var: sv };
    GpHypers { mean: vec![vec![0.0; m]; 3], kernels: vec![k.clone(), k.clone(), k] }
}

fn random_data(rng: &mut impl Rng, n: usize, m: usize) -> Vec<TrainingSample> {
    (0..n)
        .map(|_| {
            let d: Vec<f64> = (0..m).map(|_| rng.random_range(-50.0..50.0)).collect();
            let s = [d[0] * 0.01 + (d[1] * 0.05).sin() * 0.02, d[1] * 0.001, (d[0] * 0.03).cos() * 0.1];
            sample(d, s, rng.random_range(0.001..0.02))
        })
        .collect()
}

/// Population standard deviation per input axis, as used to normalize kernel inputs.
fn axis_scale(data: &[TrainingSample]) -> Vec<f64> {
    let m = data[0].delta.len();
    let n = data.len() as f64;
    (0..m)
        .map(|a| {
            let mean = data.iter().map(|d| d.delta[a]).sum::<f64>() / n;
            let v = data.iter().map(|d| (d.delta[a] - mean).powi(2)).sum::<f64>() / n;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn posterior_variance_below_prior(seed in 0u64..10_000, rbf in any::<bool>()) {
        let mut rng = rng_from_seed(seed);
        let data = random_data(&mut rng, 25, 2);
        let spec = if rbf { KernelSpec::Rbf } else { KernelSpec::RbfPlusLinear };
        let model = gp_fit(&data, MeanSpec::Zero, spec, &hypers(2, 0.01, 0.7)).unwrap();
        for _ in 0..20 {
            let x = [rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0)];
            let (_, var) = model.predict(&x).unwrap();
            let prior = model.prior_variance(&x).unwrap();
            for d in 0..3 {
                prop_assert!(var[d] <= prior[d] + 1e-10);
            }
        }
    }
}

#[test]
fn more_data_never_increases_variance() {
    for seed in 0..20 {
        let mut rng = rng_from_seed(100 + seed);
        let data = random_data(&mut rng, 16, 2);
        let h = hypers(2, 0.01, 0.8);
        let x = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
        let small = gp_fit(&data[..15], MeanSpec::Zero, KernelSpec::Rbf, &h).unwrap();
        // inputs are normalized per training set, so keep the raw length scale fixed
        let (ss, sl) = (axis_scale(&data[..15]), axis_scale(&data));
        let mut hl = h.clone();
        for k in &mut hl.kernels {
            k.length_scales = vec![0.8 * ss[0] / sl[0], 0.8 * ss[1] / sl[1]];
        }
        let large = gp_fit(&data, MeanSpec::Zero, KernelSpec::Rbf, &hl).unwrap();
        let (_, v0) = small.predict(&x).unwrap();
        let (_, v1) = large.predict(&x).unwrap();
        for d in 0..3 {
            assert!(v1[d] <= v0[d] + 1e-10, "seed {seed} dim {d}: {} > {}", v1[d], v0[d]);
        }
    }
}

#[test]
fn linear_kernel_reproduces_linear_map() {
    let w = [[0.002, -0.001, 0.0005], [0.0, 0.003, 0.001], [-0.004, 0.0, 0.002]];
    let mut rng = rng_from_seed(7);
    let data: Vec<TrainingSample> = (0..30)
        .map(|_| {
            let d: Vec<f64> = (0..3).map(|_| rng.random_range(-100.0..100.0)).collect();
            let s = [0, 1, 2].map(|r| (0..3).map(|k| w[r][k] * d[k]).sum());
            sample(d, s, 0.0)
        })
        .collect();
    let model = gp_fit(&data, MeanSpec::Zero, KernelSpec::Linear, &hypers(3, 1.0, 1.0)).unwrap();
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-300.0..300.0)).collect();
        let (mu, _) = gp_predict(&model, &x).unwrap();
        for r in 0..3 {
            let truth: f64 = (0..3).map(|k| w[r][k] * x[k]).sum();
            assert!((mu[r] - truth).abs() < 1e-6, "{} vs {truth}", mu[r]);
        }
    }
}

#[test]
fn interpolation_and_prior_reversion() {
    let one = vec![sample(vec![3.0, -2.0], [0.1, -0.2, 0.3], 1e-9)];
    let m = gp_fit(&one, MeanSpec::Zero, KernelSpec::Rbf, &hypers(2, 1.0, 1.0)).unwrap();
    let (mu, _) = m.predict(&[3.0, -2.0]).unwrap();
    for (a, b) in mu.iter().zip([0.1, -0.2, 0.3]) {
        assert!((a - b).abs() < 1e-6);
    }
    let mut rng = rng_from_seed(8);
    let data = random_data(&mut rng, 20, 2);
    let mut h = hypers(2, 0.04, 0.5);
    h.mean = fit_mean_matrix(&data).unwrap();
    let m = gp_fit(&data, MeanSpec::Linear, KernelSpec::Rbf, &h).unwrap();
    let far = [1e5, -1e5];
    let (mu, var) = m.predict(&far).unwrap();
    for d in 0..3 {
        let prior: f64 = h.mean[d][0] * far[0] + h.mean[d][1] * far[1];
        assert!((mu[d] - prior).abs() <= 1e-9 * prior.abs().max(1.0));
        assert!((var[d] - 0.04).abs() < 1e-12);
    }
}

#[test]
fn duplicate_inputs_average_targets() {
    let data = vec![sample(vec![1.0], [0.0, 0.0, 0.0], 0.1), sample(vec![1.0], [1.0, 2.0, -1.0], 0.1)];
    let m = gp_fit(&data, MeanSpec::Zero, KernelSpec::Rbf, &hypers(1, 1.0, 1.0)).unwrap();
    let (mu, _) = m.predict(&[1.0]).unwrap();
    assert!(mu[0] > 0.0 && mu[0] < 1.0 && mu[1] > 0.0 && mu[1] < 2.0 && mu[2] < 0.0 && mu[2] > -1.0);
    // k = 1 for both points, noise 0.01: μ = [1 1](K + 0.01 I)⁻¹y = (y₁ + y₂)/(2.01)
    assert!((mu[0] - 1.0 / 2.01).abs() < 1e-9);
}

#[test]
fn two_point_closed_form() {
    let data = vec![sample(vec![0.0, 0.0], [1.0, 0.0, 0.5], 0.1), sample(vec![1.0, 2.0], [-1.0, 0.3, 0.2], 0.2)];
    let h = hypers(2, 0.7, 1.3);
    let m = gp_fit(&data, MeanSpec::Zero, KernelSpec::Rbf, &h).unwrap();
    let s = axis_scale(&data);
    let kh = &h.kernels[0];
    let k = |a: &[f64], b: &[f64]| rbf_kernel(&[a[0] / s[0], a[1] / s[1]], &[b[0] / s[0], b[1] / s[1]], kh);
    let x = [0.4, 0.9];
    let (x1, x2) = (&data[0].delta, &data[1].delta);
    let (k11, k12, k22) = (k(x1, x1) + 0.01, k(x1, x2), k(x2, x2) + 0.04);
    let det = k11 * k22 - k12 * k12;
    let (ks1, ks2) = (k(&x, x1), k(&x, x2));
    let (mu, var) = m.predict(&x).unwrap();
    for d in 0..3 {
        let (y1, y2) = (data[0].s_hat[d], data[1].s_hat[d]);
        let a1 = (k22 * y1 - k12 * y2) / det;
        let a2 = (-k12 * y1 + k11 * y2) / det;
        assert!((mu[d] - (ks1 * a1 + ks2 * a2)).abs() < 1e-12);
        let quad = (k22 * ks1 * ks1 - 2.0 * k12 * ks1 * ks2 + k11 * ks2 * ks2) / det;
        assert!((var[d] - (0.7 - quad)).abs() < 1e-12);
    }
}

#[test]
fn lml_matches_gaussian_density() {
    let data = vec![
        sample(vec![0.0, 1.0], [0.1, 0.2, 0.3], 0.1),
        sample(vec![1.0, 0.5], [0.0, -0.1, 0.2], 0.2),
        sample(vec![2.0, -1.0], [-0.2, 0.1, 0.0], 0.15),
    ];
    let h = hypers(2, 0.5, 0.9);
    let s = axis_scale(&data);
    let mut expect = 0.0;
    for d in 0..3 {
        let k = DMatrix::from_fn(3, 3, |i, j| {
            let (a, b) = (&data[i].delta, &data[j].delta);
            let v = rbf_kernel(&[a[0] / s[0], a[1] / s[1]], &[b[0] / s[0], b[1] / s[1]], &h.kernels[d]);
            v + if i == j { data[i].sigma[d].powi(2) } else { 0.0 }
        });
        let y = DVector::from_fn(3, |i, _| data[i].s_hat[d]);
        let inv = k.clone().try_inverse().unwrap();
        expect += -0.5 * (y.transpose() * inv * &y)[0] - 0.5 * k.determinant().ln() - 1.5 * (2.0 * PI).ln();
    }
    let got = log_marginal_likelihood(&data, MeanSpec::Zero, KernelSpec::Rbf, &h).unwrap();
    assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
}

#[test]
fn lml_of_pure_noise() {
    let data: Vec<TrainingSample> = (0..5).map(|i| sample(vec![i as f64], [0.0; 3], 1.0)).collect();
    let got = log_marginal_likelihood(&data, MeanSpec::Zero, KernelSpec::Rbf, &hypers(1, 0.0, 1.0)).unwrap();
    assert!((got - 3.0 * (-2.5 * (2.0 * PI).ln())).abs() < 1e-12);
}

#[test]
fn lml_surface_is_smooth() {
    let mut rng = rng_from_seed(9);
    let data = random_data(&mut rng, 30, 2);
    for ls in [0.2, 0.7, 2.0] {
        let f = |l: f64| log_marginal_likelihood(&data, MeanSpec::Zero, KernelSpec::Rbf, &hypers(2, 0.01, l)).unwrap();
        let (e1, e2) = (1e-3, 5e-4);
        let d1 = (f(ls + e1) - f(ls - e1)) / (2.0 * e1);
        let d2 = (f(ls + e2) - f(ls - e2)) / (2.0 * e2);
        assert!(f(ls).is_finite() && d1.is_finite());
        assert!((d1 - d2).abs() <= 1e-3 * d1.abs().max(1.0), "{d1} vs {d2}");
    }
}

/// Draws of a zero-mean RBF process on one input axis.
fn gp_draws(seed: u64, n: usize, length: f64, noise: f64) -> Vec<TrainingSample> {
    let mut rng = rng_from_seed(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let k = DMatrix::from_fn(n, n, |i, j| (-0.5 * ((xs[i] - xs[j]) / length).powi(2)).exp() + if i == j { 1e-8 } else { 0.0 });
    let l = k.cholesky().unwrap().l();
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let f = &l * z;
        (0..n).map(|i| f[i] + noise * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
    };
    let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
    (0..n).map(|i| sample(vec![xs[i]], [a[i], b[i], c[i]], noise)).collect()
}

#[test]
fn lml_prefers_generating_hypers() {
    for seed in 0..10 {
        let data = gp_draws(seed, 60, 0.5, 0.05);
        let s = axis_scale(&data)[0];
        let lml = |ls: f64| log_marginal_likelihood(&data, MeanSpec::Zero, KernelSpec::Rbf, &hypers(1, 1.0, ls / s)).unwrap();
        assert!(lml(0.5) > lml(2.0) && lml(0.5) > lml(0.125), "seed {seed}");
    }
}

#[test]
fn length_scale_recovered_within_factor_two() {
    let data = gp_draws(42, 120, 0.5, 0.05);
    let h = optimize_hyperparameters(&data, MeanSpec::Zero, KernelSpec::Rbf).unwrap();
    let s = axis_scale(&data)[0];
    for k in &h.kernels {
        let raw = k.length_scales[0] * s;
        assert!(raw > 0.25 && raw < 1.0, "{raw}");
    }
    let start = hypers(1, 1.0, 1.0);
    assert!(
        log_marginal_likelihood(&data, MeanSpec::Zero, KernelSpec::Rbf, &h).unwrap()
            >= log_marginal_likelihood(&data, MeanSpec::Zero, KernelSpec::Rbf, &start).unwrap()
    );
}

#[test]
fn mean_matrix_recovers_linear_generator() {
    let w = [[0.002, -0.001], [0.0005, 0.003], [-0.004, 0.002]];
    let mut rng = rng_from_seed(10);
    let data: Vec<TrainingSample> = (0..500)
        .map(|_| {
            let d = vec![rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
            let s = [0, 1, 2].map(|r| w[r][0] * d[0] + w[r][1] * d[1] + 1e-4 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
            sample(d, s, 1e-4)
        })
        .collect();
    let h = optimize_hyperparameters(&data, MeanSpec::Linear, KernelSpec::Rbf).unwrap();
    for r in 0..3 {
        for k in 0..2 {
            assert!((h.mean[r][k] - w[r][k]).abs() <= 0.01 * w[r][k].abs());
        }
    }
}

#[test]
fn linear_model_exact_and_robust() {
    let w = [[0.002, -0.001], [0.0005, 0.003], [-0.004, 0.002]];
    let gen = |seed: u64, noise: f64, outliers: f64| {
        let mut rng = rng_from_seed(seed);
        (0..400)
            .map(|i| {
                let d = vec![rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
                let mut s = [0, 1, 2].map(|r| w[r][0] * d[0] + w[r][1] * d[1] + noise * Distribution::<f64>::sample(&StandardNormal, &mut rng));
                if (i as f64) < outliers * 400.0 {
                    s = s.map(|v| v + rng.random_range(10.0..50.0) * 0.01);
                }
                sample(d, s, 0.01)
            })
            .collect::<Vec<_>>()
    };
    let exact = fit_linear_model(&gen(1, 0.0, 0.0), 1.345).unwrap();
    for r in 0..3 {
        for k in 0..2 {
            assert!((exact.w[r][k] - w[r][k]).abs() < 1e-10);
        }
    }
    let err = |m: &LinearModel| (0..3).flat_map(|r| (0..2).map(move |k| (r, k))).map(|(r, k)| (m.w[r][k] - w[r][k]).powi(2)).sum::<f64>();
    let (mut clean, mut robust, mut plain) = (0.0, 0.0, 0.0);
    for seed in 0..10 {
        clean += err(&fit_linear_model(&gen(seed, 0.01, 0.0), 1.345).unwrap());
        robust += err(&fit_linear_model(&gen(seed, 0.01, 0.2), 1.345).unwrap());
        plain += err(&fit_linear_model(&gen(seed, 0.01, 0.2), 1e12).unwrap());
    }
    assert!(robust.sqrt() <= 3.0 * clean.sqrt(), "{robust} vs {clean}");
    assert!(plain.sqrt() > 3.0 * clean.sqrt(), "{plain} vs {clean}");
}

#[test]
fn linear_model_near_kinematic_linearization() {
    let mut cfg = SimConfig { intervals: 400, seed: 11, noise_sigma: [1e-4, 1e-4, 1e-4], ..Default::default() };
    cfg.profile.speed = [0.005, 0.03];
    cfg.profile.turn_rate = [0.01, 0.08];
    let data = synth_model_free(&cfg, &Distortion::None).unwrap();
    let fit = fit_linear_model(&data.samples, 1.345).unwrap();
    let model = SensorModel::new(cfg.drive, cfg.extrinsic);
    let rad_per_tick = 2.0 * PI / cfg.ticks_per_rev;
    let h = 1e-3;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..2 {
        let mut omega = vec![0.0; 2];
        omega[k] = h * rad_per_tick;
        let s = model.displacement(&[RateSegment { omega, dt: 1.0 }]).unwrap();
        for (r, v) in [s.x, s.y, s.theta].into_iter().enumerate() {
            num += (fit.w[r][k] - v / h).powi(2);
            den += (v / h).powi(2);
        }
    }
    assert!(num.sqrt() <= 0.05 * den.sqrt(), "relative error {}", (num / den).sqrt());
}

#[test]
fn linear_prediction_values() {
    let m = LinearModel { version: 1, w: vec![vec![1.0, 2.0], vec![0.0, 0.0], vec![-3.0, 0.5]] };
    assert_eq!(predict_linear(&m, &[0.0, 0.0]).unwrap(), [0.0; 3]);
    assert_eq!(m.predict(&[1.0, 4.0]).unwrap(), [9.0, 0.0, -1.0]);
    let mut rng = rng_from_seed(12);
    let w: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let x: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
    let got = LinearModel { version: 1, w: w.clone() }.predict(&x).unwrap();
    for r in 0..3 {
        let mut acc = 0.0;
        for k in 0..4 {
            acc += w[r][k] * x[k];
        }
        assert_eq!(got[r], acc);
    }
    assert!(matches!(m.predict(&[1.0]), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn collinear_inputs_are_rank_deficient() {
    let data: Vec<TrainingSample> = (0..20).map(|i| sample(vec![i as f64, 2.0 * i as f64], [0.1; 3], 0.01)).collect();
    let err = fit_linear_model(&data, 1.345).unwrap_err();
    assert!(matches!(err, Error::RankDeficient(_)));
    assert_eq!(err.exit_code(), 5);
}

#[test]
fn models_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng_from_seed(13);
    let data = random_data(&mut rng, 12, 2);
    let gp = gp_fit(&data, MeanSpec::Zero, KernelSpec::Rbf, &hypers(2, 0.01, 1.0)).unwrap();
    let p = dir.path().join("gp.json");
    gp.save(&p).unwrap();
    let back = GpModel::load(&p).unwrap();
    assert_eq!(back, gp);
    assert_eq!(back.predict(&[1.0, 2.0]).unwrap(), gp.predict(&[1.0, 2.0]).unwrap());
    let lin = fit_linear_model(&data, 1.345).unwrap();
    let p = dir.path().join("lin.json");
    lin.save(&p).unwrap();
    assert_eq!(LinearModel::load(&p).unwrap(), lin);
    let mut stale = gp.clone();
    stale.version = 99;
    stale.save(&p).unwrap();
    assert!(matches!(GpModel::load(&p), Err(Error::Schema(_))));
}

#[test]
fn kernel_values() {
    let h = KernelHypers { signal_var: 2.0, length_scales: vec![1.0, 1.0], linear_var: 1.0 };
    assert!((rbf_kernel(&[1.0, 0.0], &[0.0, 0.0], &h) - 1.2131).abs() < 1e-4);
    assert_eq!(rbf_kernel(&[0.5, 0.5], &[0.5, 0.5], &h), 2.0);
    assert_eq!(linear_kernel(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
    assert_eq!(linear_kernel(&[1.0, 1.0], &[0.0, 0.0]), 0.0);
}
