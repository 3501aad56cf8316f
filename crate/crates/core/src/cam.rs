//! Joint scan matching and differential-drive calibration by alternating
//! minimization of the trimmed correspondence error over frozen correspondences.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{canonicalize, CalibrationResult, IterationRecord};
use crate::error::{Deficiency, Diagnosis, Error, Result};
use crate::geometry::{rot, wrap_angle, Pose2D};
use crate::kinematics::{compose_motion, DiffDriveParams, DriveParams, RateSegment, SensorModel};
use crate::odometry::OdometryLog;
use crate::quadratic::{solve_constrained_quadratic, solve_partially_constrained};
use crate::scanmatch::{closest_distances, estimate_normals, CorrespondenceSet, Metric, NeighborSearch, Scan, TrimConfig};

/// Motion magnitudes below which a set of relative motions fails to excite parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservabilityThresholds {
    pub t_min: f64,
    pub theta_min: f64,
}

impl Default for ObservabilityThresholds {
    fn default() -> Self {
        Self { t_min: 0.01, theta_min: 0.5_f64.to_radians() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairSelection {
    pub t_min: f64,
    pub t_max: f64,
    pub theta_min: f64,
    /// Maximum number of partners per scan.
    pub successors: usize,
}

impl Default for PairSelection {
    fn default() -> Self {
        let t = ObservabilityThresholds::default();
        Self { t_min: t.t_min, t_max: 0.15, theta_min: t.theta_min, successors: 3 }
    }
}

impl PairSelection {
    pub fn thresholds(&self) -> ObservabilityThresholds {
        ObservabilityThresholds { t_min: self.t_min, theta_min: self.theta_min }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPair {
    pub j: usize,
    pub k: usize,
    pub segments: Vec<RateSegment>,
    /// Robot motion under the nominal parameters.
    pub predicted: Pose2D,
}

/// Diagnose which parameters a set of predicted robot motions leaves unexcited.
pub fn check_observability(preds: &[Pose2D], drive: &DriveParams, th: &ObservabilityThresholds) -> Diagnosis {
    let mut d = Diagnosis::default();
    if preds.is_empty() {
        return d;
    }
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let no_rotation = preds.iter().all(|q| q.theta.abs() < th.theta_min);
    let no_translation = preds.iter().all(|q| q.translation().norm() < th.t_min);
    let diff = matches!(drive, DriveParams::DiffDrive(_));
    if no_rotation {
        let p = if diff { names(&["l_x", "l_y", "b"]) } else { names(&["l_x", "l_y"]) };
        d.errors.push((Deficiency::RotationDeficient, p));
    }
    if no_translation {
        let p = if diff { names(&["r_l", "r_r"]) } else { names(&["r", "axle_x", "axle_y"]) };
        d.errors.push((Deficiency::TranslationDeficient, p));
    }
    if diff && no_rotation && preds.iter().all(|q| q.y.abs() < th.t_min) {
        d.warnings.push((Deficiency::BDeficient, names(&["b"])));
    }
    d
}

/// Scan pairs whose nominal motion translates and rotates enough, at most
/// `successors` partners per scan.
pub fn select_scan_pairs(
    times: &[f64],
    odometry: &OdometryLog,
    nominal: &DriveParams,
    cfg: &PairSelection,
) -> Result<Vec<ScanPair>> {
    let mut pairs = Vec::new();
    let mut candidates = Vec::new();
    for j in 0..times.len() {
        let mut taken = 0;
        for k in j + 1..times.len() {
            if taken >= cfg.successors {
                break;
            }
            let segments = odometry.segments(times[j], times[k])?;
            let q = compose_motion(nominal, &segments)?;
            let t = q.translation().norm();
            if k == j + 1 {
                candidates.push(q);
            }
            if t > cfg.t_max {
                break;
            }
            if t >= cfg.t_min && q.theta.abs() >= cfg.theta_min {
                pairs.push(ScanPair { j, k, segments, predicted: q });
                taken += 1;
            }
        }
    }
    if pairs.is_empty() {
        let diag = check_observability(&candidates, nominal, &cfg.thresholds());
        let why = if diag.is_ok() { String::new() } else { format!("; {diag}") };
        return Err(Error::InsufficientExcitation(format!("no scan pair passes the selection thresholds{why}")));
    }
    Ok(pairs)
}

/// Intrinsics divided by the axle length: `r̃ = (r_L/b, r_R/b)`, together with `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedIntrinsics {
    pub rt_l: f64,
    pub rt_r: f64,
    pub b: f64,
}

impl ReducedIntrinsics {
    pub fn from_params(p: &DiffDriveParams) -> Self {
        Self { rt_l: p.r_l / p.b, rt_r: p.r_r / p.b, b: p.b }
    }

    pub fn to_params(&self) -> DiffDriveParams {
        DiffDriveParams { r_l: self.rt_l * self.b, r_r: self.rt_r * self.b, b: self.b }
    }
}

/// Correspondences held fixed for one round of alternating minimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenPair {
    pub j: usize,
    pub k: usize,
    pub segments: Vec<RateSegment>,
    /// Kept points of scan `j` and their partners in scan `k`, sensor frame.
    pub zj: Vec<Vector2<f64>>,
    pub zk: Vec<Vector2<f64>>,
    /// Robot-frame normals at `zj`; absent for the point-to-point metric.
    pub normals: Option<Vec<Option<Vector2<f64>>>>,
}

impl FrozenPair {
    fn weight_matrix(&self, i: usize) -> Matrix2<f64> {
        match self.normals.as_ref().and_then(|n| n[i]) {
            Some(n) => n * n.transpose(),
            None => Matrix2::identity(),
        }
    }

    fn eta(&self) -> f64 {
        self.zj.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenSet {
    pub pairs: Vec<FrozenPair>,
    /// Residual scale for the Huber loss.
    pub scale: f64,
}

/// Per-pair error `Σᵢ ‖ℓ⊕zⱼ − q⊕ℓ⊕zₖ‖²_Cᵢ`.
pub fn pair_errors(set: &FrozenSet, r: &DiffDriveParams, l: &Pose2D) -> Result<Vec<f64>> {
    let drive = DriveParams::DiffDrive(*r);
    set.pairs
        .par_iter()
        .map(|p| {
            let q = compose_motion(&drive, &p.segments)?;
            let tk = q.oplus(l);
            Ok((0..p.zj.len())
                .map(|i| {
                    let e = l.transform_point(&p.zj[i]) - tk.transform_point(&p.zk[i]);
                    (e.transpose() * p.weight_matrix(i) * e)[0]
                })
                .sum())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Loss {
    robust: bool,
    c: f64,
    scale: f64,
}

impl Loss {
    fn pair(&self, h: f64, eta: f64) -> f64 {
        if !self.robust || eta == 0.0 {
            return h;
        }
        let s = self.scale;
        2.0 * eta * s * s * crate::cirls::huber_loss((h.max(0.0) / eta).sqrt() / s, self.c)
    }

    fn weight(&self, h: f64, eta: f64) -> f64 {
        if !self.robust || eta == 0.0 {
            return 1.0;
        }
        let u = (h.max(0.0) / eta).sqrt() / self.scale;
        if u <= self.c {
            1.0
        } else {
            self.c / u
        }
    }
}

fn total_loss(loss: &Loss, set: &FrozenSet, h: &[f64]) -> f64 {
    set.pairs.iter().zip(h).map(|(p, h)| loss.pair(*h, p.eta())).sum()
}

/// Value of the (robust) inner objective on frozen correspondences.
pub fn frozen_objective(set: &FrozenSet, r: &DiffDriveParams, l: &Pose2D, cfg: &CamConfig) -> Result<f64> {
    let h = pair_errors(set, r, l)?;
    Ok(total_loss(&cfg.loss(set.scale), set, &h))
}

fn pair_weights(set: &FrozenSet, r: &DiffDriveParams, l: &Pose2D, loss: &Loss) -> Result<Vec<f64>> {
    let h = pair_errors(set, r, l)?;
    Ok(set.pairs.iter().zip(&h).map(|(p, h)| loss.weight(*h, p.eta())).collect())
}

fn circle_matrix(z: &Vector2<f64>) -> Matrix2<f64> {
    Matrix2::new(z.x, z.y, -z.y, z.x)
}

/// Global minimizer over `ℓ` of the point-to-point objective with frozen
/// correspondences and fixed intrinsics.
pub fn extrinsic_closed_form(set: &FrozenSet, r: &DiffDriveParams) -> Result<Pose2D> {
    extrinsic_weighted(set, r, &vec![1.0; set.pairs.len()])
}

fn extrinsic_weighted(set: &FrozenSet, r: &DiffDriveParams, w: &[f64]) -> Result<Pose2D> {
    if set.pairs.iter().any(|p| p.normals.is_some()) {
        return plicp_extrinsic_weighted(set, r, w);
    }
    let drive = DriveParams::DiffDrive(*r);
    let mut q_mat = Matrix2::zeros();
    let mut m = Matrix2::zeros();
    let mut g = Vector2::zeros();
    let mut d = Vector2::zeros();
    let mut thetas = Vec::with_capacity(set.pairs.len());
    for (p, w) in set.pairs.iter().zip(w) {
        let q = compose_motion(&drive, &p.segments)?;
        thetas.push(q);
        let rq = rot(q.theta);
        let rjk = Matrix2::identity() - rq;
        let zsum: Vector2<f64> = p.zj.iter().zip(&p.zk).map(|(a, b)| a - rq * b).sum();
        let z = circle_matrix(&zsum);
        let t = q.translation();
        let eta = p.eta();
        q_mat += *w * eta * rjk.transpose() * rjk;
        m += 2.0 * *w * z * rjk;
        g -= 2.0 * *w * z * t;
        d -= 2.0 * *w * eta * rjk.transpose() * t;
    }
    let rotating = thetas.iter().any(|q| (1.0 - q.theta.cos()) > 1e-12);
    let Some(q_inv) = q_mat.cholesky().map(|c| c.inverse()).filter(|_| rotating) else {
        return Err(Error::Observability(Diagnosis {
            errors: vec![(Deficiency::RotationDeficient, vec!["l_x".into(), "l_y".into(), "b".into()])],
            warnings: Vec::new(),
        }));
    };
    let mt = -0.25 * m * q_inv * m.transpose();
    let gt = g - 0.5 * m * q_inv * d;
    let x = solve_constrained_quadratic(&mt, &gt)?;
    let t = -0.5 * q_inv * (m.transpose() * x + d);
    Ok(Pose2D::new(t.x, t.y, x.y.atan2(x.x)))
}

/// Point-to-line extrinsic solve: a quadratic in `(ℓ_x, ℓ_y, cos ℓ_θ, sin ℓ_θ)`
/// with the last two on the unit circle.
pub fn plicp_extrinsic_closed_form(set: &FrozenSet, r: &DiffDriveParams) -> Result<Pose2D> {
    if set.pairs.iter().any(|p| p.normals.is_none()) {
        return Err(Error::Schema("point-to-line calibration needs normals on every pair".into()));
    }
    plicp_extrinsic_weighted(set, r, &vec![1.0; set.pairs.len()])
}

fn plicp_extrinsic_weighted(set: &FrozenSet, r: &DiffDriveParams, w: &[f64]) -> Result<Pose2D> {
    let drive = DriveParams::DiffDrive(*r);
    let mut a = DMatrix::<f64>::zeros(4, 4);
    let mut g = DVector::<f64>::zeros(4);
    for (p, w) in set.pairs.iter().zip(w) {
        let q = compose_motion(&drive, &p.segments)?;
        let rq = rot(q.theta);
        let rjk = Matrix2::identity() - rq;
        let t = q.translation();
        for i in 0..p.zj.len() {
            let z = p.zj[i] - rq * p.zk[i];
            let mi = DMatrix::from_row_slice(2, 4, &[rjk[(0, 0)], rjk[(0, 1)], z.x, -z.y, rjk[(1, 0)], rjk[(1, 1)], z.y, z.x]);
            let c = p.weight_matrix(i);
            let c = DMatrix::from_row_slice(2, 2, &[c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]]);
            let tc = DVector::from_column_slice(&[t.x, t.y]);
            let mc = mi.transpose() * &c;
            a += *w * &mc * &mi;
            g -= 2.0 * *w * &mc * tc;
        }
    }
    let x = solve_partially_constrained(&a, &g)?;
    Ok(Pose2D::new(x[0], x[1], x[3].atan2(x[2])))
}

/// Sufficient statistics of one frozen pair at a fixed extrinsic, so that
/// `h(θ, t) = ‖a − R(θ)b − t‖²_C` summed over points is cheap to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct PairStats {
    eta: f64,
    aca: f64,
    acu: f64,
    acv: f64,
    ucu: f64,
    ucv: f64,
    vcv: f64,
    ca: Vector2<f64>,
    cu: Vector2<f64>,
    cv: Vector2<f64>,
    csum: Matrix2<f64>,
}

impl PairStats {
    fn new(p: &FrozenPair, l: &Pose2D) -> Self {
        let mut s = PairStats { eta: p.eta(), ..Default::default() };
        let j90 = Matrix2::new(0.0, -1.0, 1.0, 0.0);
        for i in 0..p.zj.len() {
            let a = l.transform_point(&p.zj[i]);
            let u = l.transform_point(&p.zk[i]);
            let v = j90 * u;
            let c = p.weight_matrix(i);
            let (ca, cu, cv) = (c * a, c * u, c * v);
            s.aca += a.dot(&ca);
            s.acu += a.dot(&cu);
            s.acv += a.dot(&cv);
            s.ucu += u.dot(&cu);
            s.ucv += u.dot(&cv);
            s.vcv += v.dot(&cv);
            s.ca += ca;
            s.cu += cu;
            s.cv += cv;
            s.csum += c;
        }
        s
    }

    /// `(h without t, m, k)` with `h(b) = base − 2b·t̃ᵀm + b²·k`.
    fn at(&self, theta: f64, tt: &Vector2<f64>) -> (f64, f64, f64) {
        let (s, c) = theta.sin_cos();
        let base = self.aca - 2.0 * c * self.acu - 2.0 * s * self.acv + c * c * self.ucu + 2.0 * c * s * self.ucv + s * s * self.vcv;
        let m = self.ca - c * self.cu - s * self.cv;
        (base, tt.dot(&m), (tt.transpose() * self.csum * tt)[0])
    }
}

fn reduced_motion(rt: [f64; 2], segments: &[RateSegment]) -> Result<Pose2D> {
    compose_motion(&DriveParams::DiffDrive(DiffDriveParams { r_l: rt[0], r_r: rt[1], b: 1.0 }), segments)
}

struct NodeTerms {
    terms: Vec<(f64, f64, f64)>,
}

impl NodeTerms {
    fn new(stats: &[PairStats], set: &FrozenSet, rt: [f64; 2]) -> Result<Self> {
        let terms = stats
            .iter()
            .zip(&set.pairs)
            .map(|(s, p)| {
                let q = reduced_motion(rt, &p.segments)?;
                Ok(s.at(q.theta, &q.translation()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { terms })
    }

    fn errors(&self, b: f64) -> impl Iterator<Item = f64> + '_ {
        self.terms.iter().map(move |(base, tm, k)| (base - 2.0 * b * tm + b * b * k).max(0.0))
    }

    fn loss(&self, stats: &[PairStats], loss: &Loss, b: f64) -> f64 {
        self.errors(b).zip(stats).map(|(h, s)| loss.pair(h, s.eta)).sum()
    }

    fn weighted_b(&self, w: &[f64]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for ((_, tm, k), w) in self.terms.iter().zip(w) {
            num += w * tm;
            den += w * k;
        }
        (den > 0.0).then(|| num / den)
    }

    /// Minimizing `b`: closed form for squared loss, reweighting from `b0` otherwise.
    fn best_b(&self, stats: &[PairStats], loss: &Loss, b0: f64) -> Result<f64> {
        let deficient = || {
            Error::Observability(Diagnosis {
                errors: vec![(Deficiency::TranslationDeficient, vec!["r_l".into(), "r_r".into()])],
                warnings: Vec::new(),
            })
        };
        if !loss.robust {
            return self.weighted_b(&vec![1.0; self.terms.len()]).ok_or_else(deficient);
        }
        let mut b = b0;
        let mut f = self.loss(stats, loss, b);
        for _ in 0..50 {
            let w: Vec<f64> = self.errors(b).zip(stats).map(|(h, s)| loss.weight(h, s.eta)).collect();
            let nb = self.weighted_b(&w).ok_or_else(deficient)?;
            let nf = self.loss(stats, loss, nb);
            if !(nf <= f) {
                break;
            }
            let done = (nb - b).abs() <= 1e-15 * b.abs().max(1e-300);
            b = nb;
            f = nf;
            if done {
                break;
            }
        }
        Ok(b)
    }
}

/// Least-squares axle length for fixed reduced intrinsics and extrinsic.
pub fn b_closed_form(set: &FrozenSet, rt: [f64; 2], l: &Pose2D) -> Result<f64> {
    let stats: Vec<PairStats> = set.pairs.iter().map(|p| PairStats::new(p, l)).collect();
    let loss = Loss { robust: false, c: 1.0, scale: 1.0 };
    NodeTerms::new(&stats, set, rt)?.best_b(&stats, &loss, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Initial half-width as a fraction of the centre value.
    pub half_width: f64,
    pub points: usize,
    pub shrink: f64,
    pub levels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { half_width: 0.1, points: 11, shrink: 0.3, levels: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub params: DiffDriveParams,
    pub objective: f64,
    /// Nodes evaluated, with their objective values.
    pub evaluated: usize,
    pub best_evaluated: f64,
    /// The optimum sat on the grid edge at the finest level.
    pub boundary: bool,
}

/// Minimize over `(r̃_L, r̃_R)` by refined grid search with `b` profiled out.
pub fn intrinsic_search(set: &FrozenSet, l: &Pose2D, init: &DiffDriveParams, cfg: &CamConfig) -> Result<SearchOutcome> {
    let stats: Vec<PairStats> = set.pairs.iter().map(|p| PairStats::new(p, l)).collect();
    search_with_stats(set, &stats, init, &cfg.grid, &cfg.loss(set.scale))
}

/// Point-to-line counterpart of [`intrinsic_search`]; the frozen normals weight every residual.
pub fn plicp_intrinsic_search(set: &FrozenSet, l: &Pose2D, init: &DiffDriveParams, cfg: &CamConfig) -> Result<SearchOutcome> {
    if set.pairs.iter().any(|p| p.normals.is_none()) {
        return Err(Error::Schema("point-to-line calibration needs normals on every pair".into()));
    }
    intrinsic_search(set, l, init, cfg)
}

fn search_with_stats(set: &FrozenSet, stats: &[PairStats], init: &DiffDriveParams, grid: &GridSpec, loss: &Loss) -> Result<SearchOutcome> {
    if grid.points < 3 || grid.levels < 1 {
        return Err(Error::Schema("grid needs at least 3 points per axis and one level".into()));
    }
    let r0 = ReducedIntrinsics::from_params(init);
    let eval = |rt: [f64; 2]| -> Result<(f64, f64)> {
        let terms = NodeTerms::new(stats, set, rt)?;
        let b = terms.best_b(stats, loss, r0.b)?;
        Ok((terms.loss(stats, loss, b), b))
    };
    let mut centre = [r0.rt_l, r0.rt_r];
    let (mut best_f, mut best_b) = eval(centre)?;
    let mut half = [grid.half_width * centre[0].abs(), grid.half_width * centre[1].abs()];
    let n = grid.points;
    let mid = (n - 1) as f64 / 2.0;
    let mut evaluated = 1;
    let mut boundary = false;
    for level in 0..grid.levels {
        let nodes: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |k| (i, k))).collect();
        let at = |i: usize| (i as f64 - mid) / mid;
        let values: Vec<Result<(f64, f64)>> = nodes
            .par_iter()
            .map(|&(i, k)| eval([centre[0] + half[0] * at(i), centre[1] + half[1] * at(k)]))
            .collect();
        evaluated += nodes.len();
        let mut best_node = None;
        for (&(i, k), v) in nodes.iter().zip(values) {
            let Ok((f, b)) = v else { continue };
            if f < best_f {
                best_f = f;
                best_b = b;
                best_node = Some((i, k));
            }
        }
        if let Some((i, k)) = best_node {
            centre = [centre[0] + half[0] * at(i), centre[1] + half[1] * at(k)];
            if level + 1 == grid.levels {
                boundary = i == 0 || k == 0 || i == n - 1 || k == n - 1;
            }
        }
        half = [half[0] * grid.shrink, half[1] * grid.shrink];
    }
    let params = ReducedIntrinsics { rt_l: centre[0], rt_r: centre[1], b: best_b }.to_params();
    Ok(SearchOutcome { params, objective: best_f, evaluated, best_evaluated: best_f, boundary })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamConfig {
    pub huber_c: f64,
    /// Huber loss on per-pair RMS distances; squared loss otherwise.
    pub robust: bool,
    /// Lower bound on the Huber residual scale, metres.
    pub scale_floor: f64,
    pub outer_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub grid: GridSpec,
    /// Largest overlap fraction considered by the trimming step.
    pub trim_preset: f64,
    pub metric: Metric,
    pub search: NeighborSearch,
    /// Pairs whose mean kept squared distance exceeds this are dropped.
    pub pair_failure_sq: f64,
    pub selection: PairSelection,
    /// Relative slack allowed in the monotonicity check.
    pub monotone_tol: f64,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            huber_c: 1.0,
            robust: true,
            scale_floor: 1e-3,
            outer_tol: 1e-6,
            max_outer: 30,
            max_inner: 50,
            grid: GridSpec::default(),
            trim_preset: 1.0,
            metric: Metric::PointToPoint,
            search: NeighborSearch::Grid,
            pair_failure_sq: 0.05 * 0.05,
            selection: PairSelection::default(),
            monotone_tol: 1e-9,
        }
    }
}

impl CamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_c > 0.0) {
            return Err(Error::Schema(format!("huber_c must be positive, got {}", self.huber_c)));
        }
        if self.grid.points < 3 || self.grid.levels < 1 || !(self.grid.shrink > 0.0 && self.grid.shrink < 1.0) {
            return Err(Error::Schema("grid needs ≥ 3 points per axis, ≥ 1 level and shrink in (0, 1)".into()));
        }
        if !(self.trim_preset > 0.0 && self.trim_preset <= 1.0) {
            return Err(Error::Schema(format!("trim_preset must lie in (0, 1], got {}", self.trim_preset)));
        }
        Ok(())
    }

    fn loss(&self, scale: f64) -> Loss {
        Loss { robust: self.robust, c: self.huber_c, scale }
    }

    fn trim(&self) -> TrimConfig {
        let t = TrimConfig::default();
        TrimConfig { zeta_max: self.trim_preset, zeta_min: t.zeta_min.min(self.trim_preset), ..t }
    }
}

/// Closest-point correspondences for every pair at the given parameters,
/// trimmed, with failed pairs removed. Returns the frozen set and the
/// trimmed error `Σ_pairs Σ_kept d`.
pub fn establish_correspondences(
    scans: &[Scan],
    pairs: &[ScanPair],
    r: &DiffDriveParams,
    l: &Pose2D,
    cfg: &CamConfig,
) -> Result<(FrozenSet, f64)> {
    let drive = DriveParams::DiffDrive(*r);
    let trim = cfg.trim();
    let normals: Option<Vec<Vec<Option<Vector2<f64>>>>> = match cfg.metric {
        Metric::PointToLine => Some(scans.par_iter().map(|s| estimate_normals(&s.points)).collect()),
        Metric::PointToPoint => None,
    };
    let rl = rot(l.theta);
    let built: Vec<Option<(FrozenPair, f64)>> = pairs
        .par_iter()
        .map(|p| {
            let q = compose_motion(&drive, &p.segments)?;
            let m = closest_distances(&scans[p.j], &scans[p.k], &q, l, cfg.search);
            let set = CorrespondenceSet::from_matches(p.j, p.k, m, &trim);
            if !(set.mean_kept_sq() <= cfg.pair_failure_sq) {
                return Ok(None);
            }
            let kept = set.kept_matches();
            let fp = FrozenPair {
                j: p.j,
                k: p.k,
                segments: p.segments.clone(),
                zj: kept.iter().map(|m| scans[p.j].points[m.source]).collect(),
                zk: kept.iter().map(|m| scans[p.k].points[m.target]).collect(),
                normals: normals.as_ref().map(|ns| kept.iter().map(|m| ns[p.j][m.source].map(|n| rl * n)).collect()),
            };
            Ok(Some((fp, set.trimmed_error())))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut total = 0.0;
    for (fp, e) in built.into_iter().flatten() {
        total += e;
        out.push(fp);
    }
    if out.is_empty() {
        return Err(Error::InsufficientExcitation("every scan pair failed to match".into()));
    }
    let mut set = FrozenSet { pairs: out, scale: 1.0 };
    let h = pair_errors(&set, r, l)?;
    let mut rms: Vec<f64> = set.pairs.iter().zip(&h).map(|(p, h)| (h.max(0.0) / p.eta().max(1.0)).sqrt()).collect();
    rms.sort_by(f64::total_cmp);
    set.scale = (1.4826 * rms[rms.len() / 2]).max(cfg.scale_floor);
    Ok((set, total))
}

/// Trimmed correspondence error with correspondences established at `(r, ℓ)`.
pub fn trimmed_objective(scans: &[Scan], pairs: &[ScanPair], r: &DiffDriveParams, l: &Pose2D, cfg: &CamConfig) -> Result<(f64, FrozenSet)> {
    let (set, total) = establish_correspondences(scans, pairs, r, l, cfg)?;
    Ok((total, set))
}

fn param_step(a: &SensorModel, b: &SensorModel) -> f64 {
    let (pa, pb) = (a.params(), b.params());
    let mut s = 0.0;
    for i in 0..6 {
        let d = if i == 5 { wrap_angle(pa[i] - pb[i]) } else { pa[i] - pb[i] };
        s += d * d;
    }
    s.sqrt()
}

fn signature(set: &FrozenSet) -> Vec<(usize, usize, Vec<[u64; 4]>)> {
    set.pairs
        .iter()
        .map(|p| {
            let pts = p.zj.iter().zip(&p.zk).map(|(a, b)| [a.x.to_bits(), a.y.to_bits(), b.x.to_bits(), b.y.to_bits()]).collect();
            (p.j, p.k, pts)
        })
        .collect()
}

fn drive_of(m: &SensorModel) -> Result<DiffDriveParams> {
    match m.drive {
        DriveParams::DiffDrive(p) => Ok(p),
        DriveParams::Mecanum(_) => Err(Error::Schema("alternating-minimization calibration supports differential drives only".into())),
    }
}

/// Alternating minimization: freeze correspondences, then alternate the
/// closed-form extrinsic solve and the intrinsic grid search until the
/// parameters settle; repeat until the correspondences stop changing.
pub fn cam_calibrate(scans: &[Scan], odometry: &OdometryLog, init: &SensorModel, cfg: &CamConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    drive_of(init)?;
    let times: Vec<f64> = scans.iter().map(|s| s.timestamp).collect();
    let pairs = select_scan_pairs(&times, odometry, &init.drive, &cfg.selection)?;
    let preds: Vec<Pose2D> = pairs.iter().map(|p| p.predicted).collect();
    let diag = check_observability(&preds, &init.drive, &cfg.selection.thresholds());
    if !diag.is_ok() {
        return Err(Error::Observability(diag));
    }
    let mut warnings = Vec::new();
    let mut log = Vec::new();
    let mut model = *init;
    let mut previous = None;
    let mut converged = false;
    let mut last_weights = Vec::new();
    let mut last_set = None;
    for alpha in 0..cfg.max_outer {
        let r = drive_of(&model)?;
        let (set, _) = establish_correspondences(scans, &pairs, &r, &model.extrinsic, cfg)?;
        let sig = signature(&set);
        if previous.as_ref() == Some(&sig) {
            converged = true;
            last_set = Some(set);
            break;
        }
        previous = Some(sig);
        let start = model;
        let loss = cfg.loss(set.scale);
        let mut obj = frozen_objective(&set, &r, &model.extrinsic, cfg)?;
        let check = |before: f64, after: f64, what: &str| -> Result<()> {
            if after > before + cfg.monotone_tol * before.abs().max(1e-300) {
                return Err(Error::Convergence(format!(
                    "inner objective increased in the {what} step: {before:.12e} -> {after:.12e}"
                )));
            }
            Ok(())
        };
        for beta in 0..cfg.max_inner {
            let r = drive_of(&model)?;
            let w = pair_weights(&set, &r, &model.extrinsic, &loss)?;
            let l_new = extrinsic_weighted(&set, &r, &w)?;
            let after_l = frozen_objective(&set, &r, &l_new, cfg)?;
            check(obj, after_l, "extrinsic")?;
            let search = intrinsic_search(&set, &l_new, &r, cfg)?;
            let after_r = frozen_objective(&set, &search.params, &l_new, cfg)?;
            check(after_l, after_r, "intrinsic")?;
            let next = SensorModel::new(DriveParams::DiffDrive(search.params), l_new);
            let step = param_step(&next, &model);
            last_weights = w.clone();
            log.push(IterationRecord {
                iteration: alpha,
                params: next.params(),
                objective: after_r,
                step_norm: step,
                inner_iterations: beta,
                gamma: set.scale,
                trimmed: pairs.len() - set.pairs.len(),
                trim_skipped: search.boundary,
                weight_min: w.iter().copied().fold(f64::INFINITY, f64::min),
                weight_max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
            if search.boundary && beta + 1 == cfg.max_inner {
                warnings.push("intrinsic optimum on the grid boundary; initialization may be poor".to_string());
            }
            model = next;
            obj = after_r;
            if step <= cfg.outer_tol {
                break;
            }
        }
        last_set = Some(set);
        if param_step(&model, &start) <= cfg.outer_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("correspondences still changing after {} outer iterations", cfg.max_outer));
    }
    let fitted = canonicalize(&model);
    let mse = match &last_set {
        Some(set) => {
            let r = drive_of(&model)?;
            let h = pair_errors(set, &r, &model.extrinsic)?;
            let n: f64 = set.pairs.iter().map(|p| p.eta()).sum();
            Some(h.iter().sum::<f64>() / n.max(1.0))
        }
        None => None,
    };
    Ok(CalibrationResult {
        method: "cam".into(),
        model: fitted,
        param_names: fitted.param_names(),
        estimates: fitted.params(),
        covariance: None,
        intervals: None,
        mse,
        weights: last_weights.iter().map(|w| [*w; 3]).collect(),
        log,
        converged,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pair_from(l: &Pose2D, r: &DiffDriveParams, segs: Vec<RateSegment>, world: &[Vector2<f64>]) -> FrozenPair {
        let q = compose_motion(&DriveParams::DiffDrive(*r), &segs).unwrap();
        let sj = l.ominus();
        let sk = q.oplus(l).ominus();
        FrozenPair {
            j: 0,
            k: 1,
            segments: segs,
            zj: world.iter().map(|p| sj.transform_point(p)).collect(),
            zk: world.iter().map(|p| sk.transform_point(p)).collect(),
            normals: None,
        }
    }

    fn toy_set(l: &Pose2D, r: &DiffDriveParams) -> FrozenSet {
        let world: Vec<Vector2<f64>> = (0..40).map(|i| Vector2::new((i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos() * 2.0 + 0.1 * i as f64)).collect();
        let seg = |wl: f64, wr: f64| vec![RateSegment { omega: vec![wl, wr], dt: 0.7 }];
        let pairs = vec![
            pair_from(l, r, seg(2.0, 3.0), &world),
            pair_from(l, r, seg(3.0, 1.5), &world),
            pair_from(l, r, seg(1.0, 2.5), &world),
            pair_from(l, r, seg(-1.0, 1.5), &world),
        ];
        FrozenSet { pairs, scale: 1e-3 }
    }

    #[test]
    fn extrinsic_recovered_on_exact_correspondences() {
        let r = DiffDriveParams { r_l: 0.035, r_r: 0.035, b: 0.238 };
        for l in [Pose2D::IDENTITY, Pose2D::new(0.02, 0.05, 3.13)] {
            let set = toy_set(&l, &r);
            let got = extrinsic_closed_form(&set, &r).unwrap();
            assert_abs_diff_eq!(got.x, l.x, epsilon = 1e-9);
            assert_abs_diff_eq!(got.y, l.y, epsilon = 1e-9);
            assert_abs_diff_eq!(wrap_angle(got.theta - l.theta), 0.0, epsilon = 1e-9);
            let b = b_closed_form(&set, [r.r_l / r.b, r.r_r / r.b], &l).unwrap();
            assert_abs_diff_eq!(b, r.b, epsilon = 1e-9);
        }
    }

    #[test]
    fn pure_translation_rejected() {
        let r = DiffDriveParams { r_l: 0.035, r_r: 0.035, b: 0.238 };
        let l = Pose2D::new(0.02, 0.05, 0.3);
        let mut set = toy_set(&l, &r);
        for p in &mut set.pairs {
            p.segments = vec![RateSegment { omega: vec![2.0, 2.0], dt: 0.7 }];
        }
        assert!(matches!(extrinsic_closed_form(&set, &r), Err(Error::Observability(_))));
    }

    #[test]
    fn observability_labels() {
        let d = DriveParams::DiffDrive(DiffDriveParams { r_l: 0.035, r_r: 0.035, b: 0.23 });
        let th = ObservabilityThresholds::default();
        let rot_only = vec![Pose2D::new(0.0, 0.0, 0.3); 5];
        assert_eq!(check_observability(&rot_only, &d, &th).errors[0].0, Deficiency::TranslationDeficient);
        let straight = vec![Pose2D::new(0.1, 0.0, 0.0); 5];
        let diag = check_observability(&straight, &d, &th);
        assert_eq!(diag.errors[0].0, Deficiency::RotationDeficient);
        assert_eq!(diag.warnings[0].0, Deficiency::BDeficient);
        let mixed = vec![Pose2D::new(0.1, 0.0, 0.0), Pose2D::new(0.05, 0.01, 0.2)];
        assert!(check_observability(&mixed, &d, &th).is_ok());
    }
}
