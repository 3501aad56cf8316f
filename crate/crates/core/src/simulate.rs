//! Synthetic robots, environments and logs with known ground truth.

use nalgebra::Vector2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2D};
use crate::kinematics::{
    diffdrive_inverse, mecanum_inverse, robot_relative_pose, sensor_displacement, DiffDriveParams, DriveParams,
    RateSegment, Twist2D,
};
use crate::metrics::{TimedPose, Trajectory};
use crate::modelfree::TrainingSample;
use crate::odometry::{OdometryLog, OdometrySample};
use crate::scanmatch::{DisplacementObs, Scan};

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    #[default]
    Exciting,
    StraightOnly,
    PureRotation,
    PureTranslation,
}

/// Speed ranges for the random piecewise-constant profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSpec {
    pub mode: ProfileMode,
    /// Forward speed range, m/s.
    pub speed: [f64; 2],
    /// Lateral speed bound for drives that can strafe, m/s.
    pub lateral_speed: f64,
    /// Turn-rate magnitude range, rad/s.
    pub turn_rate: [f64; 2],
    /// Distance from the origin beyond which the profile steers back, m.
    pub home_radius: f64,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        Self { mode: ProfileMode::Exciting, speed: [0.04, 0.18], lateral_speed: 0.1, turn_rate: [0.06, 0.4], home_radius: 3.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub landmarks: usize,
    pub half_extent: f64,
    pub max_range: f64,
    /// Bearing bin width; only the nearest landmark per bin is seen. Zero disables occlusion.
    pub angular_resolution: f64,
    pub range_sigma: f64,
    pub dropout: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { landmarks: 300, half_extent: 6.0, max_range: 6.0, angular_resolution: 0.0, range_sigma: 0.005, dropout: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub drive: DriveParams,
    pub extrinsic: Pose2D,
    /// Number of sample periods.
    pub intervals: usize,
    pub period: f64,
    pub profile: ProfileSpec,
    /// Reported standard deviation of each displacement component.
    pub noise_sigma: [f64; 3],
    /// When false the displacements are exact while still reporting `noise_sigma`.
    pub apply_noise: bool,
    pub outlier_fraction: f64,
    pub outlier_multiplier: [f64; 2],
    pub ticks_per_rev: f64,
    /// Choose wheel rates on the tick grid so odometry reproduces the true motion.
    pub snap_to_ticks: bool,
    pub seed: u64,
    pub world: WorldConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            drive: DriveParams::DiffDrive(DiffDriveParams { r_l: 0.035, r_r: 0.035, b: 0.238 }),
            extrinsic: Pose2D::new(0.020, 0.046, 3.13),
            intervals: 300,
            period: 0.7,
            profile: ProfileSpec::default(),
            noise_sigma: [0.002, 0.002, 0.3_f64.to_radians()],
            apply_noise: true,
            outlier_fraction: 0.0,
            outlier_multiplier: [10.0, 50.0],
            ticks_per_rev: 2578.33,
            snap_to_ticks: true,
            seed: 0,
            world: WorldConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0) {
            return Err(Error::Schema(format!("period must be positive, got {}", self.period)));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Schema(format!("outlier_fraction must lie in [0, 1), got {}", self.outlier_fraction)));
        }
        if self.intervals == 0 {
            return Err(Error::Schema("intervals must be at least 1".into()));
        }
        if self.noise_sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Schema("noise_sigma components must be positive".into()));
        }
        if !(self.ticks_per_rev > 0.0) {
            return Err(Error::Schema("ticks_per_rev must be positive".into()));
        }
        Ok(())
    }
}

/// Wheel rates actually applied during each interval plus the logged ticks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelTimeline {
    pub times: Vec<f64>,
    pub rates: Vec<Vec<f64>>,
    pub ticks: Vec<Vec<i64>>,
}

fn body_twist(cfg: &SimConfig, i: usize, pose: &Pose2D, rng: &mut ChaCha8Rng) -> Twist2D {
    let p = &cfg.profile;
    let sign = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
    let speed = |rng: &mut ChaCha8Rng| rng.random_range(p.speed[0]..=p.speed[1]);
    let turn = |rng: &mut ChaCha8Rng| rng.random_range(p.turn_rate[0]..=p.turn_rate[1]);
    let lateral = matches!(cfg.drive, DriveParams::Mecanum(_));
    let dist = pose.translation().norm();
    let to_origin = wrap_angle((-pose.y).atan2(-pose.x) - pose.theta);
    let homing = dist > p.home_radius;
    match p.mode {
        ProfileMode::Exciting => {
            let mut v = speed(rng);
            let mut w = sign(rng) * turn(rng);
            let mut vy = if lateral { rng.random_range(-p.lateral_speed..=p.lateral_speed) } else { 0.0 };
            // at least 70% of intervals both rotate and translate
            if i % 10 >= 7 {
                match rng.random_range(0..3) {
                    0 => {
                        v = 0.0;
                        vy = 0.0;
                    }
                    1 => w = 0.0,
                    _ => {}
                }
            }
            if homing {
                if lateral {
                    v = speed(rng) * to_origin.cos();
                    vy = speed(rng) * to_origin.sin();
                } else if to_origin.abs() > 0.3 {
                    w = to_origin.signum() * p.turn_rate[1];
                }
            }
            Twist2D { v_x: v, v_y: vy, omega: w }
        }
        ProfileMode::StraightOnly => {
            let dir = if (i / 15).is_multiple_of(2) { 1.0 } else { -1.0 };
            Twist2D { v_x: dir * speed(rng), v_y: 0.0, omega: 0.0 }
        }
        ProfileMode::PureRotation => Twist2D { v_x: 0.0, v_y: 0.0, omega: sign(rng) * turn(rng) },
        ProfileMode::PureTranslation => {
            let dir = if (i / 15).is_multiple_of(2) { 1.0 } else { -1.0 };
            let vy = if lateral { rng.random_range(-p.lateral_speed..=p.lateral_speed) } else { 0.0 };
            Twist2D { v_x: dir * speed(rng), v_y: vy, omega: 0.0 }
        }
    }
}

/// Piecewise-constant wheel-rate profile; deterministic for a given generator state.
pub fn gen_profile(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> WheelTimeline {
    let rad_per_tick = 2.0 * std::f64::consts::PI / cfg.ticks_per_rev;
    let times: Vec<f64> = (0..=cfg.intervals).map(|i| i as f64 * cfg.period).collect();
    let m = cfg.drive.wheel_count();
    let mut ticks = vec![vec![0i64; m]];
    let mut angle = vec![0.0f64; m];
    let mut rates = Vec::with_capacity(cfg.intervals);
    let mut pose = Pose2D::IDENTITY;
    for i in 0..cfg.intervals {
        let dt = times[i + 1] - times[i];
        let tw = body_twist(cfg, i, &pose, rng);
        let cmd: Vec<f64> = match &cfg.drive {
            DriveParams::DiffDrive(p) => diffdrive_inverse(p, tw.v_x, tw.omega).to_vec(),
            DriveParams::Mecanum(p) => mecanum_inverse(p, &tw).to_vec(),
        };
        let last = ticks.last().unwrap().clone();
        let (applied, next): (Vec<f64>, Vec<i64>) = if cfg.snap_to_ticks {
            let n: Vec<i64> = cmd.iter().map(|w| (w * dt / rad_per_tick).round() as i64).collect();
            let applied = crate::kinematics::rates_from_ticks(&n, cfg.ticks_per_rev, dt);
            (applied, last.iter().zip(&n).map(|(a, b)| a + b).collect())
        } else {
            for (a, w) in angle.iter_mut().zip(&cmd) {
                *a += w * dt;
            }
            (cmd.clone(), angle.iter().map(|a| (a / rad_per_tick).round() as i64).collect())
        };
        pose = pose.oplus(&robot_relative_pose(&cfg.drive, &applied, dt).expect("profile rates match the drive"));
        rates.push(applied);
        ticks.push(next);
    }
    WheelTimeline { times, rates, ticks }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLog {
    pub odometry: OdometryLog,
    /// Robot poses in the world at each sample time.
    pub robot_poses: Vec<Pose2D>,
    /// Sensor poses `q_k ⊕ ℓ` at each sample time.
    pub sensor_trajectory: Trajectory,
    /// Observations between consecutive samples.
    pub observations: Vec<DisplacementObs>,
    pub true_displacements: Vec<Pose2D>,
    /// Indices of corrupted observations; diagnostics only.
    pub outliers: Vec<usize>,
}

fn corrupt(cfg: &SimConfig, truth: &[Pose2D], rng: &mut ChaCha8Rng) -> (Vec<DisplacementObs>, Vec<usize>, Vec<f64>) {
    let n = truth.len();
    let normals: Vec<Normal<f64>> = cfg.noise_sigma.iter().map(|s| Normal::new(0.0, *s).unwrap()).collect();
    let mut values: Vec<[f64; 3]> = truth
        .iter()
        .map(|s| {
            let e = [0, 1, 2].map(|c| normals[c].sample(rng));
            if cfg.apply_noise {
                [s.x + e[0], s.y + e[1], s.theta + e[2]]
            } else {
                s.to_array()
            }
        })
        .collect();
    let n_out = (cfg.outlier_fraction * n as f64).round() as usize;
    let mut outliers = sample(rng, n, n_out.min(n)).into_vec();
    outliers.sort_unstable();
    for &i in &outliers {
        let s = truth[i].to_array();
        for c in 0..3 {
            let mag = rng.random_range(cfg.outlier_multiplier[0]..=cfg.outlier_multiplier[1]);
            let sgn = if rng.random::<bool>() { 1.0 } else { -1.0 };
            values[i][c] = s[c] + sgn * mag * cfg.noise_sigma[c];
        }
    }
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * cfg.period).collect();
    let obs = values
        .iter()
        .enumerate()
        .map(|(i, v)| DisplacementObs { t_j: times[i], t_k: times[i + 1], s_hat: Pose2D::from_array(*v), sigma: cfg.noise_sigma })
        .collect();
    (obs, outliers, times)
}

fn odometry_from(cfg: &SimConfig, tl: &WheelTimeline) -> Result<OdometryLog> {
    let samples = tl.times.iter().zip(&tl.ticks).map(|(t, k)| OdometrySample { t: *t, ticks: k.clone() }).collect();
    OdometryLog::new(cfg.ticks_per_rev, samples)
}

fn assemble(cfg: &SimConfig, odometry: OdometryLog, robot_motion: Vec<Pose2D>, rng: &mut ChaCha8Rng) -> SyntheticLog {
    let mut robot_poses = vec![Pose2D::IDENTITY];
    for q in &robot_motion {
        robot_poses.push(robot_poses.last().unwrap().oplus(q));
    }
    let truth: Vec<Pose2D> = robot_motion.iter().map(|q| sensor_displacement(&cfg.extrinsic, q)).collect();
    let (observations, outliers, times) = corrupt(cfg, &truth, rng);
    let sensor_trajectory = Trajectory::new(
        robot_poses.iter().zip(&times).map(|(q, t)| TimedPose { t: *t, pose: q.oplus(&cfg.extrinsic) }).collect(),
    )
    .expect("sample times increase");
    SyntheticLog { odometry, robot_poses, sensor_trajectory, observations, true_displacements: truth, outliers }
}

/// Odometry, consecutive displacement observations and ground truth from the generator.
pub fn synth_displacements_with(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<SyntheticLog> {
    cfg.validate()?;
    let tl = gen_profile(cfg, rng);
    let odometry = odometry_from(cfg, &tl)?;
    let motion: Vec<Pose2D> = (0..cfg.intervals)
        .map(|i| {
            let seg = if cfg.snap_to_ticks {
                odometry.segment(i)
            } else {
                RateSegment { omega: tl.rates[i].clone(), dt: tl.times[i + 1] - tl.times[i] }
            };
            robot_relative_pose(&cfg.drive, &seg.omega, seg.dt)
        })
        .collect::<Result<_>>()?;
    Ok(assemble(cfg, odometry, motion, rng))
}

pub fn synth_displacements(cfg: &SimConfig) -> Result<SyntheticLog> {
    synth_displacements_with(cfg, &mut rng_from_seed(cfg.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub landmarks: Vec<Vector2<f64>>,
    pub max_range: f64,
    pub angular_resolution: f64,
}

pub fn make_world(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> World {
    let h = cfg.half_extent;
    let landmarks = (0..cfg.landmarks).map(|_| Vector2::new(rng.random_range(-h..=h), rng.random_range(-h..=h))).collect();
    World { landmarks, max_range: cfg.max_range, angular_resolution: cfg.angular_resolution }
}

/// Scan of the world from every sensor pose of `log`.
pub fn synth_scans(cfg: &SimConfig, world: &World, log: &SyntheticLog, rng: &mut ChaCha8Rng) -> Result<Vec<Scan>> {
    let noise = Normal::new(0.0, cfg.world.range_sigma.max(0.0)).map_err(|e| Error::Schema(e.to_string()))?;
    let mut scans = Vec::with_capacity(log.sensor_trajectory.len());
    for tp in log.sensor_trajectory.poses() {
        let inv = tp.pose.ominus();
        let mut pts: Vec<(f64, Vector2<f64>)> = Vec::new();
        for lm in &world.landmarks {
            let z = inv.transform_point(lm);
            let r = z.norm();
            let dropped = rng.random::<f64>() < cfg.world.dropout;
            let e = noise.sample(rng);
            if r > world.max_range || r == 0.0 || dropped {
                continue;
            }
            pts.push((r, z * ((r + e) / r)));
        }
        if world.angular_resolution > 0.0 {
            let mut by_bin: std::collections::BTreeMap<i64, (f64, Vector2<f64>)> = Default::default();
            for (r, z) in pts {
                let bin = (z.y.atan2(z.x) / world.angular_resolution).floor() as i64;
                let e = by_bin.entry(bin).or_insert((r, z));
                if r < e.0 {
                    *e = (r, z);
                }
            }
            pts = by_bin.into_values().collect();
        }
        if pts.len() < 10 {
            return Err(Error::Coverage { t: tp.t, visible: pts.len() });
        }
        scans.push(Scan::new(tp.t, pts.into_iter().map(|(_, z)| z).collect())?);
    }
    Ok(scans)
}

/// Displacements, world and scans from a single seeded stream.
pub fn simulate_all(cfg: &SimConfig) -> Result<(SyntheticLog, World, Vec<Scan>)> {
    let mut rng = rng_from_seed(cfg.seed);
    let log = synth_displacements_with(cfg, &mut rng)?;
    let world = make_world(&cfg.world, &mut rng);
    let scans = synth_scans(cfg, &world, &log, &mut rng)?;
    Ok((log, world, scans))
}

/// Departures from the nominal differential-drive model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distortion {
    None,
    /// Effective wheel radii scaled by constant factors.
    RadiusScale { left: f64, right: f64 },
    /// Left radius varies with wheel angle: `r_L(φ) = r_L(1 + a·cos φ)`.
    PeriodicRadius { amplitude: f64 },
    /// Additive cross-coupling from wheel rates to (v_x, v_y, ω).
    AxisSkew { coupling: [[f64; 2]; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFreeDataset {
    pub samples: Vec<TrainingSample>,
    /// Noise-free sensor displacement of each sample.
    pub truth: Vec<Pose2D>,
    pub log: SyntheticLog,
}

fn distorted_twist(p: &DiffDriveParams, d: &Distortion, phi: [f64; 2], w: [f64; 2]) -> [f64; 3] {
    let (mut rl, mut rr) = (p.r_l, p.r_r);
    match d {
        Distortion::RadiusScale { left, right } => {
            rl *= left;
            rr *= right;
        }
        Distortion::PeriodicRadius { amplitude } => rl *= 1.0 + amplitude * phi[0].cos(),
        _ => {}
    }
    let mut t = [0.5 * (rl * w[0] + rr * w[1]), 0.0, (-rl * w[0] + rr * w[1]) / p.b];
    if let Distortion::AxisSkew { coupling } = d {
        for (r, row) in coupling.iter().enumerate() {
            t[r] += row[0] * w[0] + row[1] * w[1];
        }
    }
    t
}

/// RK4 integration of the distorted robot motion over one interval.
fn integrate_distorted(p: &DiffDriveParams, d: &Distortion, phi0: [f64; 2], w: [f64; 2], dt: f64, steps: usize) -> Pose2D {
    let h = dt / steps as f64;
    let f = |s: &[f64; 3], tau: f64| {
        let phi = [phi0[0] + w[0] * tau, phi0[1] + w[1] * tau];
        let t = distorted_twist(p, d, phi, w);
        let (sn, cs) = s[2].sin_cos();
        [cs * t[0] - sn * t[1], sn * t[0] + cs * t[1], t[2]]
    };
    let mut s = [0.0; 3];
    for k in 0..steps {
        let tau = k as f64 * h;
        let add = |a: &[f64; 3], b: &[f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
        let k1 = f(&s, tau);
        let k2 = f(&add(&s, &k1, 0.5 * h), tau + 0.5 * h);
        let k3 = f(&add(&s, &k2, 0.5 * h), tau + 0.5 * h);
        let k4 = f(&add(&s, &k3, h), tau + h);
        for c in 0..3 {
            s[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
    }
    Pose2D::new(s[0], s[1], s[2])
}

/// Tick-count inputs and noisy sensor displacements for model-free learning.
/// Ground truth comes from fine-step integration of the distorted kinematics.
pub fn synth_model_free(cfg: &SimConfig, distortion: &Distortion) -> Result<ModelFreeDataset> {
    let log = match (distortion, &cfg.drive) {
        (Distortion::None, _) => synth_displacements(cfg)?,
        (_, DriveParams::DiffDrive(p)) => {
            cfg.validate()?;
            let mut rng = rng_from_seed(cfg.seed);
            let tl = gen_profile(cfg, &mut rng);
            let odometry = odometry_from(cfg, &tl)?;
            let mut phi = [0.0f64; 2];
            let mut motion = Vec::with_capacity(cfg.intervals);
            for i in 0..cfg.intervals {
                let dt = tl.times[i + 1] - tl.times[i];
                let w = [tl.rates[i][0], tl.rates[i][1]];
                motion.push(integrate_distorted(p, distortion, phi, w, dt, 400));
                phi = [phi[0] + w[0] * dt, phi[1] + w[1] * dt];
            }
            assemble(cfg, odometry, motion, &mut rng)
        }
        _ => return Err(Error::Schema("distortions are defined for differential drives only".into())),
    };
    let samples = log
        .observations
        .iter()
        .map(|o| {
            Ok(TrainingSample { delta: log.odometry.delta_ticks(o.t_j, o.t_k)?, s_hat: o.s_hat.to_array(), sigma: o.sigma })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelFreeDataset { samples, truth: log.true_displacements.clone(), log })
}
