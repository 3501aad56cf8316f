//! Robust calibration from displacement observations: Huber-weighted,
//! trimmed iteratively reweighted least squares over an arbitrary drive
//! model, plus a closed-form inner solve for differential drives.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix3x2, Vector2, Vector3, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{canonicalize, CalibrationResult, IterationRecord};
use crate::cam::{check_observability, ObservabilityThresholds};
use crate::error::{Error, Result};
use crate::geometry::{rot, wrap_angle, Pose2D};
use crate::kinematics::{compose_motion, param_jacobian, DiffDriveParams, DriveParams, RateSegment, SensorModel};
use crate::odometry::OdometryLog;
use crate::quadratic::solve_constrained_quadratic;
use crate::scanmatch::DisplacementObs;

pub fn huber_loss(u: f64, c: f64) -> f64 {
    let a = u.abs();
    if a <= c {
        0.5 * u * u
    } else {
        c * (a - 0.5 * c)
    }
}

/// IRLS weight for a scaled residual `u` of a component with standard deviation `sigma`.
pub fn huber_weight(u: f64, sigma: f64, c: f64) -> f64 {
    let a = u.abs();
    if a <= c {
        1.0 / (sigma * sigma)
    } else {
        c / (a * sigma * sigma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimOutcome {
    pub weights: Vec<f64>,
    pub gamma: f64,
    pub trimmed: usize,
    /// Trimming would have removed more than half of the weights and was not applied.
    pub skipped: bool,
}

/// Zero every normalized weight not exceeding `γ = 1 − mean(w)`.
pub fn trim_weights(w: &[f64]) -> TrimOutcome {
    if w.is_empty() {
        return TrimOutcome { weights: Vec::new(), gamma: 0.0, trimmed: 0, skipped: false };
    }
    let gamma = 1.0 - w.iter().sum::<f64>() / w.len() as f64;
    let trimmed = w.iter().filter(|&&v| v <= gamma).count();
    if 2 * trimmed > w.len() {
        return TrimOutcome { weights: w.to_vec(), gamma, trimmed: 0, skipped: true };
    }
    let weights = w.iter().map(|&v| if v <= gamma { 0.0 } else { v }).collect();
    TrimOutcome { weights, gamma, trimmed, skipped: false }
}

/// A displacement observation with the odometry segments it spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub obs: DisplacementObs,
    pub segments: Vec<RateSegment>,
}

pub fn attach_odometry(obs: &[DisplacementObs], odometry: &OdometryLog) -> Result<Vec<Observation>> {
    obs.iter().map(|o| Ok(Observation { obs: *o, segments: odometry.segments(o.t_j, o.t_k)? })).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub t_j: f64,
    pub t_k: f64,
    pub residual: [f64; 3],
    pub scaled: [f64; 3],
    pub weights: [f64; 3],
    pub trimmed: [bool; 3],
}

/// `ŝ − s(p)` per observation, heading wrapped to (−π, π].
pub fn residuals(model: &SensorModel, obs: &[Observation]) -> Result<Vec<[f64; 3]>> {
    obs.par_iter().map(|o| Ok(o.obs.s_hat.delta(&model.displacement(&o.segments)?))).collect()
}

pub fn residual_blocks(model: &SensorModel, obs: &[Observation], weights: &[[f64; 3]]) -> Result<Vec<ResidualBlock>> {
    let r = residuals(model, obs)?;
    Ok(obs
        .iter()
        .zip(r)
        .zip(weights)
        .map(|((o, r), w)| ResidualBlock {
            t_j: o.obs.t_j,
            t_k: o.obs.t_k,
            residual: r,
            scaled: [0, 1, 2].map(|c| r[c] / o.obs.sigma[c]),
            weights: *w,
            trimmed: w.map(|v| v == 0.0),
        })
        .collect())
}

/// A residual vector with its Jacobian `∂υ/∂p`.
pub trait LeastSquaresProblem: Sync {
    fn param_names(&self) -> Vec<String>;
    fn residuals(&self, p: &[f64]) -> Result<DVector<f64>>;
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>>;
}

/// How the solver's free vector maps onto the sensor-model parameters.
/// Mecanum axle offsets only enter through their sum, which is estimated
/// while their ratio stays at its initial value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamMap {
    Full,
    AxleSum { ratio: f64 },
}

impl ParamMap {
    pub fn for_model(m: &SensorModel) -> Self {
        match m.drive {
            DriveParams::Mecanum(p) => ParamMap::AxleSum { ratio: p.l_x / (p.l_x + p.l_y) },
            DriveParams::DiffDrive(_) => ParamMap::Full,
        }
    }

    pub fn to_free(&self, full: &[f64]) -> Vec<f64> {
        match self {
            ParamMap::Full => full.to_vec(),
            ParamMap::AxleSum { .. } => vec![full[0], full[1] + full[2], full[3], full[4], full[5]],
        }
    }

    pub fn to_full(&self, free: &[f64]) -> Vec<f64> {
        match self {
            ParamMap::Full => free.to_vec(),
            ParamMap::AxleSum { ratio } => vec![free[0], ratio * free[1], (1.0 - ratio) * free[1], free[2], free[3], free[4]],
        }
    }

    /// ∂full/∂free
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            ParamMap::Full => DMatrix::identity(6, 6),
            ParamMap::AxleSum { ratio } => {
                let mut t = DMatrix::zeros(6, 5);
                t[(0, 0)] = 1.0;
                t[(1, 1)] = *ratio;
                t[(2, 1)] = 1.0 - ratio;
                for i in 0..3 {
                    t[(3 + i, 2 + i)] = 1.0;
                }
                t
            }
        }
    }

    pub fn names(&self, m: &SensorModel) -> Vec<String> {
        let full = m.param_names();
        match self {
            ParamMap::Full => full,
            ParamMap::AxleSum { .. } => {
                vec![full[0].clone(), format!("{}+{}", full[1], full[2]), full[3].clone(), full[4].clone(), full[5].clone()]
            }
        }
    }
}

pub struct DisplacementProblem<'a> {
    pub obs: &'a [Observation],
    pub template: SensorModel,
    pub map: ParamMap,
}

impl DisplacementProblem<'_> {
    pub fn model(&self, p: &[f64]) -> Result<SensorModel> {
        self.template.with_params(&self.map.to_full(p))
    }
}

impl LeastSquaresProblem for DisplacementProblem<'_> {
    fn param_names(&self) -> Vec<String> {
        self.map.names(&self.template)
    }

    fn residuals(&self, p: &[f64]) -> Result<DVector<f64>> {
        let r = residuals(&self.model(p)?, self.obs)?;
        Ok(DVector::from_iterator(3 * r.len(), r.into_iter().flatten()))
    }

    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.model(p)?;
        let t = self.map.matrix();
        let blocks: Vec<DMatrix<f64>> = self.obs.par_iter().map(|o| Ok(-param_jacobian(&m, &o.segments)? * &t)).collect::<Result<_>>()?;
        let mut j = DMatrix::zeros(3 * blocks.len(), t.ncols());
        for (i, b) in blocks.iter().enumerate() {
            j.view_mut((3 * i, 0), (3, t.ncols())).copy_from(b);
        }
        Ok(j)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    GaussNewton,
    LevenbergMarquardt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub solver: Solver,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub lm_initial: f64,
    pub lm_up: f64,
    pub lm_down: f64,
    /// Smallest admissible ratio of extreme singular values of the column-scaled weighted Jacobian.
    pub cond_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            solver: Solver::GaussNewton,
            max_iters: 100,
            grad_tol: 1e-10,
            rel_tol: 1e-12,
            lm_initial: 1e-3,
            lm_up: 10.0,
            lm_down: 0.3,
            cond_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WnlsOutcome {
    pub p: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

fn weighted_objective(r: &DVector<f64>, w: &[f64]) -> f64 {
    r.iter().zip(w).map(|(r, w)| w * r * r).sum()
}

fn sqrt_weighted(j: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut jw = j.clone();
    for (i, wi) in w.iter().enumerate() {
        let s = wi.max(0.0).sqrt();
        jw.row_mut(i).scale_mut(s);
    }
    jw
}

/// Parameters spanning the near-null directions of the column-scaled
/// weighted Jacobian when it is numerically rank-deficient.
fn null_direction(jw: &DMatrix<f64>, names: &[String], tol: f64) -> Option<Vec<String>> {
    let k = jw.ncols();
    let norms: Vec<f64> = (0..k).map(|c| jw.column(c).norm()).collect();
    let live: Vec<usize> = (0..k).filter(|&c| norms[c] > 0.0).collect();
    let mut flagged: Vec<bool> = norms.iter().map(|n| !(*n > 0.0)).collect();
    if !live.is_empty() {
        let js = DMatrix::from_fn(jw.nrows(), live.len(), |r, c| jw[(r, live[c])] / norms[live[c]]);
        let svd = SVD::new(js, false, true);
        let sv = &svd.singular_values;
        let smax = sv.max();
        let v_t = svd.v_t.as_ref()?;
        for i in (0..sv.len()).filter(|&i| !(sv[i] > tol * smax)) {
            for (c, &col) in live.iter().enumerate() {
                flagged[col] |= v_t[(i, c)].abs() > 0.3;
            }
        }
    }
    flagged.iter().any(|f| *f).then(|| (0..k).filter(|&c| flagged[c]).map(|c| names[c].clone()).collect())
}

/// Minimize `Σ wᵢ υᵢ(p)²` with weights held fixed.
pub fn solve_wnls<P: LeastSquaresProblem>(problem: &P, weights: &[f64], p0: &[f64], cfg: &SolverConfig) -> Result<WnlsOutcome> {
    let names = problem.param_names();
    let mut p = p0.to_vec();
    let mut r = problem.residuals(&p)?;
    if r.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: r.len(), got: weights.len() });
    }
    let mut f = weighted_objective(&r, weights);
    let mut lambda = cfg.lm_initial;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let j = problem.jacobian(&p)?;
        let jw = sqrt_weighted(&j, weights);
        if let Some(params) = null_direction(&jw, &names, cfg.cond_tol) {
            return Err(Error::IllConditioned { params });
        }
        let rw = DVector::from_iterator(r.len(), r.iter().zip(weights).map(|(r, w)| r * w.max(0.0).sqrt()));
        let h = jw.transpose() * &jw;
        let g = jw.transpose() * &rw;
        if g.amax() < cfg.grad_tol || f == 0.0 {
            break;
        }
        let solve = |a: DMatrix<f64>| -> Result<DVector<f64>> {
            match a.clone().cholesky() {
                Some(c) => Ok(-c.solve(&g)),
                None => SVD::new(a, true, true).solve(&(-&g), 1e-14).map_err(|e| Error::Numerical(e.to_string())),
            }
        };
        let accepted = match cfg.solver {
            Solver::GaussNewton => {
                let delta = solve(h)?;
                let mut alpha = 1.0;
                let mut out = None;
                for _ in 0..40 {
                    let cand: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, d)| a + alpha * d).collect();
                    if let Ok(rc) = problem.residuals(&cand) {
                        let fc = weighted_objective(&rc, weights);
                        if fc <= f {
                            out = Some((cand, rc, fc));
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                out
            }
            Solver::LevenbergMarquardt => {
                let mut out = None;
                while lambda < 1e16 {
                    let mut a = h.clone();
                    for i in 0..a.nrows() {
                        a[(i, i)] += lambda * h[(i, i)].max(1e-300);
                    }
                    let delta = solve(a)?;
                    let cand: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
                    let trial = problem.residuals(&cand).map(|rc| {
                        let fc = weighted_objective(&rc, weights);
                        (rc, fc)
                    });
                    match trial {
                        Ok((rc, fc)) if fc <= f => {
                            lambda *= cfg.lm_down;
                            out = Some((cand, rc, fc));
                            break;
                        }
                        _ => lambda *= cfg.lm_up,
                    }
                }
                out
            }
        };
        let Some((pn, rn, fnew)) = accepted else { break };
        iterations += 1;
        let rel = (f - fnew) / f.max(1e-300);
        let moved = pn.iter().zip(&p).any(|(a, b)| a != b);
        p = pn;
        r = rn;
        f = fnew;
        if rel < cfg.rel_tol || !moved {
            break;
        }
    }
    Ok(WnlsOutcome { p, objective: f, iterations })
}

/// `υ̃ᵢ = υᵢ / sqrt(max(1e-6, 1 − hᵢᵢ))` with `hᵢᵢ` from the weighted hat matrix.
pub fn leverage_adjust(residuals: &DVector<f64>, j: &DMatrix<f64>, weights: &[f64]) -> DVector<f64> {
    let jw = sqrt_weighted(j, weights);
    let a = jw.transpose() * &jw;
    let inv = match a.clone().cholesky() {
        Some(c) => c.inverse(),
        None => match a.pseudo_inverse(1e-12) {
            Ok(p) => p,
            Err(_) => return residuals.clone(),
        },
    };
    DVector::from_iterator(
        residuals.len(),
        residuals.iter().enumerate().map(|(i, r)| {
            let row = jw.row(i);
            let h = (row * &inv * row.transpose())[0];
            r / (1.0 - h).max(1e-6).sqrt()
        }),
    )
}

/// `mse · (J_wᵀJ_w)⁻¹` with `J_w = sqrt(W)·J` and mse averaged over rows with positive weight.
pub fn estimate_covariance(j: &DMatrix<f64>, residuals: &DVector<f64>, weights: &[f64]) -> Result<DMatrix<f64>> {
    let names: Vec<String> = (0..j.ncols()).map(|i| format!("p{i}")).collect();
    covariance_named(j, residuals, weights, &names)
}

fn covariance_named(j: &DMatrix<f64>, residuals: &DVector<f64>, weights: &[f64], names: &[String]) -> Result<DMatrix<f64>> {
    let jw = sqrt_weighted(j, weights);
    if let Some(params) = null_direction(&jw, names, 1e-10) {
        return Err(Error::IllConditioned { params });
    }
    let active = weights.iter().filter(|&&w| w > 0.0).count().max(1);
    let mse = weighted_objective(residuals, weights) / active as f64;
    let inv = (jw.transpose() * &jw)
        .cholesky()
        .ok_or_else(|| Error::IllConditioned { params: names.to_vec() })?
        .inverse();
    Ok(inv * mse)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XyWeightRule {
    #[default]
    Separate,
    /// Both translational components take the larger of their two weights.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CirlsConfig {
    pub huber_c: f64,
    /// When false every component is weighted by `1/σ²` (plain least squares).
    pub robust: bool,
    pub trimming: bool,
    pub leverage: bool,
    pub xy_rule: XyWeightRule,
    pub outer_tol: f64,
    pub max_outer: usize,
    pub inner: SolverConfig,
    pub thresholds: ObservabilityThresholds,
}

impl Default for CirlsConfig {
    fn default() -> Self {
        Self {
            huber_c: 1.345,
            robust: true,
            trimming: true,
            leverage: true,
            xy_rule: XyWeightRule::Separate,
            outer_tol: 1e-8,
            max_outer: 50,
            inner: SolverConfig::default(),
            thresholds: ObservabilityThresholds::default(),
        }
    }
}

impl CirlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_c > 0.0) {
            return Err(Error::Schema(format!("huber_c must be positive, got {}", self.huber_c)));
        }
        if !(self.inner.lm_up > 1.0 && self.inner.lm_down > 0.0 && self.inner.lm_down < 1.0) {
            return Err(Error::Schema("damping factors must satisfy up > 1 and 0 < down < 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InnerSolve {
    Generic,
    ClosedForm,
}

fn precheck(obs: &[Observation], model: &SensorModel, cfg: &CirlsConfig) -> Result<()> {
    cfg.validate()?;
    if obs.is_empty() {
        return Err(Error::InsufficientExcitation("no displacement observations".into()));
    }
    let m = model.drive.wheel_count();
    if let Some(o) = obs.iter().find(|o| o.segments.iter().any(|s| s.omega.len() != m)) {
        let got = o.segments.iter().find(|s| s.omega.len() != m).map_or(0, |s| s.omega.len());
        return Err(Error::DimensionMismatch { expected: m, got });
    }
    let predicted: Vec<Pose2D> = obs.iter().map(|o| compose_motion(&model.drive, &o.segments)).collect::<Result<_>>()?;
    let diagnosis = check_observability(&predicted, &model.drive, &cfg.thresholds);
    if !diagnosis.is_ok() {
        return Err(Error::Observability(diagnosis));
    }
    Ok(())
}

/// Robust calibration of any drive model with a generic Gauss-Newton or LM inner solve.
pub fn cirls_calibrate(obs: &[Observation], model: &SensorModel, cfg: &CirlsConfig) -> Result<CalibrationResult> {
    precheck(obs, model, cfg)?;
    run_irls(obs, model, cfg, InnerSolve::Generic, "cirls")
}

/// Differential-drive calibration whose inner weighted problem is solved in
/// closed form; translational weights are equalized by the max rule.
pub fn cirls_cf_calibrate(obs: &[Observation], model: &SensorModel, cfg: &CirlsConfig) -> Result<CalibrationResult> {
    if !matches!(model.drive, DriveParams::DiffDrive(_)) {
        return Err(Error::Schema("the closed-form variant applies to differential drives only".into()));
    }
    precheck(obs, model, cfg)?;
    let cfg = CirlsConfig { xy_rule: XyWeightRule::Max, ..*cfg };
    run_irls(obs, model, &cfg, InnerSolve::ClosedForm, "cirls-cf")
}

fn robust_objective(r: &DVector<f64>, sigma: &[f64], cfg: &CirlsConfig) -> f64 {
    r.iter()
        .zip(sigma)
        .map(|(r, s)| {
            let u = r / s;
            if cfg.robust {
                huber_loss(u, cfg.huber_c)
            } else {
                0.5 * u * u
            }
        })
        .sum()
}

struct WeightUpdate {
    weights: Vec<f64>,
    gamma: f64,
    trimmed: usize,
    skipped: bool,
}

fn update_weights(adj: &DVector<f64>, sigma: &[f64], cfg: &CirlsConfig) -> WeightUpdate {
    let mut w: Vec<f64> = adj
        .iter()
        .zip(sigma)
        .map(|(r, s)| if cfg.robust { huber_weight(r / s, *s, cfg.huber_c) } else { 1.0 / (s * s) })
        .collect();
    let equalize = |w: &mut Vec<f64>| {
        if cfg.xy_rule == XyWeightRule::Max {
            for b in w.chunks_mut(3) {
                let m = b[0].max(b[1]);
                b[0] = m;
                b[1] = m;
            }
        }
    };
    equalize(&mut w);
    let (mut gamma, mut trimmed, mut skipped) = (0.0, 0, false);
    if cfg.robust && cfg.trimming {
        let normalized: Vec<f64> = w.iter().zip(sigma).map(|(w, s)| w * s * s).collect();
        let t = trim_weights(&normalized);
        gamma = t.gamma;
        skipped = t.skipped;
        if t.skipped {
            log::warn!("weight trimming skipped: it would remove more than half of the residuals");
        } else {
            trimmed = t.trimmed;
            for ((w, tn), s) in w.iter_mut().zip(&t.weights).zip(sigma) {
                *w = tn / (s * s);
            }
            equalize(&mut w);
        }
    }
    WeightUpdate { weights: w, gamma, trimmed, skipped }
}

fn run_irls(obs: &[Observation], model: &SensorModel, cfg: &CirlsConfig, inner: InnerSolve, method: &str) -> Result<CalibrationResult> {
    let map = ParamMap::for_model(model);
    let problem = DisplacementProblem { obs, template: *model, map };
    let names = problem.param_names();
    let sigma: Vec<f64> = obs.iter().flat_map(|o| o.obs.sigma).collect();
    let mut weights = vec![1.0; sigma.len()];
    let mut p = map.to_free(&model.params());
    let mut log = Vec::new();
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut converged = false;
    for it in 0..cfg.max_outer {
        let (sol, inner_iters) = match inner {
            InnerSolve::Generic => {
                let out = solve_wnls(&problem, &weights, &p, &cfg.inner)?;
                (out.p, out.iterations)
            }
            InnerSolve::ClosedForm => (closed_form_solve(obs, &weights, model)?, 1),
        };
        let r = problem.residuals(&sol)?;
        let adj = if cfg.leverage { leverage_adjust(&r, &problem.jacobian(&sol)?, &weights) } else { r.clone() };
        let upd = update_weights(&adj, &sigma, cfg);
        let step: f64 = sol.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let objective = robust_objective(&r, &sigma, cfg);
        log.push(IterationRecord {
            iteration: it,
            params: map.to_full(&sol),
            objective,
            step_norm: step,
            inner_iterations: inner_iters,
            gamma: upd.gamma,
            trimmed: upd.trimmed,
            trim_skipped: upd.skipped,
            weight_min: weights.iter().copied().fold(f64::INFINITY, f64::min),
            weight_max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        if best.as_ref().is_none_or(|b| objective < b.0) {
            best = Some((objective, sol.clone(), weights.clone()));
        }
        let used = std::mem::replace(&mut weights, upd.weights);
        p = sol;
        if step <= cfg.outer_tol {
            converged = true;
            weights = used;
            break;
        }
    }
    let (p, used) = if converged {
        (p, weights)
    } else {
        let (_, bp, bw) = best.expect("at least one outer iteration");
        (bp, bw)
    };
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("no convergence after {} outer iterations; returning the best iterate", cfg.max_outer));
    }
    let r = problem.residuals(&p)?;
    let j = problem.jacobian(&p)?;
    let (cov_free, mse) = match covariance_named(&j, &r, &used, &names) {
        Ok(c) => {
            let active = used.iter().filter(|&&w| w > 0.0).count().max(1);
            (Some(c), Some(weighted_objective(&r, &used) / active as f64))
        }
        Err(e) => {
            warnings.push(format!("covariance unavailable: {e}"));
            (None, None)
        }
    };
    let raw = problem.model(&p)?;
    let fitted = canonicalize(&raw);
    let t = map.matrix();
    let flip = raw.params()[0] != fitted.params()[0];
    let covariance = cov_free.map(|c| {
        let mut full = &t * c * t.transpose();
        if flip {
            let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[-1.0, -1.0, -1.0, -1.0, -1.0, 1.0]));
            full = &d * full * &d;
        }
        full
    });
    let estimates = fitted.params();
    let intervals = covariance.as_ref().map(|c| {
        (0..estimates.len()).map(|i| {
            let s = 3.0 * c[(i, i)].max(0.0).sqrt();
            [estimates[i] - s, estimates[i] + s]
        }).collect()
    });
    Ok(CalibrationResult {
        method: method.to_string(),
        model: fitted,
        param_names: fitted.param_names(),
        estimates,
        covariance: covariance.map(|c| (0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect()),
        intervals,
        mse,
        weights: used.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        log,
        converged,
        warnings,
    })
}

/// Per-observation quantities for the closed-form solve at reduced intrinsics `r̃ = (r_L/b, r_R/b)`.
struct ReducedMotion {
    theta: f64,
    t: Vector2<f64>,
}

fn reduced_motion(rt: [f64; 2], segs: &[RateSegment]) -> Result<ReducedMotion> {
    let unit = DriveParams::DiffDrive(DiffDriveParams { r_l: rt[0], r_r: rt[1], b: 1.0 });
    let q = compose_motion(&unit, segs)?;
    let theta: f64 = segs.iter().map(|s| (-rt[0] * s.omega[0] + rt[1] * s.omega[1]) * s.dt).sum();
    Ok(ReducedMotion { theta, t: q.translation() })
}

struct Profile {
    value: f64,
    y: Vector2<f64>,
    u: Vector3<f64>,
}

/// Minimum over `(b, ℓ)` of the translational objective at fixed `r̃`.
fn translation_profile(obs: &[Observation], wxy: &[f64], rt: [f64; 2]) -> Result<Profile> {
    let mut p = Matrix3::zeros();
    let mut n = Matrix3x2::zeros();
    let mut s = Matrix2::zeros();
    for (o, w) in obs.iter().zip(wxy) {
        if *w == 0.0 {
            continue;
        }
        let m = reduced_motion(rt, &o.segments)?;
        let rq = rot(m.theta) - Matrix2::identity();
        let a = nalgebra::Matrix2x3::new(m.t.x, rq[(0, 0)], rq[(0, 1)], m.t.y, rq[(1, 0)], rq[(1, 1)]);
        let sh = o.obs.s_hat;
        let z = Matrix2::new(sh.x, -sh.y, sh.y, sh.x);
        p += *w * a.transpose() * a;
        n += *w * a.transpose() * z;
        s += *w * z.transpose() * z;
    }
    let pinv = p.cholesky().ok_or_else(|| Error::Singular("translation normal matrix is not positive definite".into()))?.inverse();
    let mt = s - n.transpose() * pinv * n;
    let mut y = solve_constrained_quadratic(&mt, &Vector2::zeros())?;
    let mut u = pinv * n * y;
    if u[0] < 0.0 {
        y = -y;
        u = -u;
    }
    Ok(Profile { value: (y.transpose() * mt * y)[0], y, u })
}

fn rotation_cost(obs: &[Observation], wth: &[f64], rt: [f64; 2]) -> f64 {
    obs.iter()
        .zip(wth)
        .map(|(o, w)| {
            let th: f64 = o.segments.iter().map(|s| (-rt[0] * s.omega[0] + rt[1] * s.omega[1]) * s.dt).sum();
            w * wrap_angle(o.obs.s_hat.theta - th).powi(2)
        })
        .sum()
}

/// Exact minimizer of the weighted objective for a differential drive with
/// equal translational weights: linear least squares on headings, then a
/// profiled two-parameter refinement with `(b, ℓ)` eliminated in closed form.
fn closed_form_solve(obs: &[Observation], weights: &[f64], template: &SensorModel) -> Result<Vec<f64>> {
    let wxy: Vec<f64> = weights.chunks(3).map(|w| w[0]).collect();
    let wth: Vec<f64> = weights.chunks(3).map(|w| w[2]).collect();
    let mut h = Matrix2::zeros();
    let mut g = Vector2::zeros();
    for (o, w) in obs.iter().zip(&wth) {
        let a = Vector2::new(
            -o.segments.iter().map(|s| s.omega[0] * s.dt).sum::<f64>(),
            o.segments.iter().map(|s| s.omega[1] * s.dt).sum::<f64>(),
        );
        h += *w * a * a.transpose();
        g += *w * o.obs.s_hat.theta * a;
    }
    let x0 = h.cholesky().ok_or_else(|| Error::IllConditioned { params: vec!["r_l".into(), "r_r".into()] })?.solve(&g);
    let cost = |x: &Vector2<f64>| -> Result<f64> {
        let rt = [x.x, x.y];
        Ok(rotation_cost(obs, &wth, rt) + translation_profile(obs, &wxy, rt)?.value)
    };
    let mut x = x0;
    let mut fx = cost(&x)?;
    for _ in 0..60 {
        let hs = Vector2::new(1e-4 * x.x.abs().max(1e-8), 1e-4 * x.y.abs().max(1e-8));
        let e = |i: usize, s: f64| if i == 0 { Vector2::new(s, 0.0) } else { Vector2::new(0.0, s) };
        let mut grad = Vector2::zeros();
        let mut hess = Matrix2::zeros();
        for i in 0..2 {
            let (fp, fm) = (cost(&(x + e(i, hs[i])))?, cost(&(x - e(i, hs[i])))?);
            grad[i] = (fp - fm) / (2.0 * hs[i]);
            hess[(i, i)] = (fp - 2.0 * fx + fm) / (hs[i] * hs[i]);
        }
        let fpp = cost(&(x + e(0, hs[0]) + e(1, hs[1])))?;
        let fpm = cost(&(x + e(0, hs[0]) - e(1, hs[1])))?;
        let fmp = cost(&(x - e(0, hs[0]) + e(1, hs[1])))?;
        let fmm = cost(&(x - e(0, hs[0]) - e(1, hs[1])))?;
        hess[(0, 1)] = (fpp - fpm - fmp + fmm) / (4.0 * hs[0] * hs[1]);
        hess[(1, 0)] = hess[(0, 1)];
        let delta = match hess.cholesky() {
            Some(c) => -c.solve(&grad),
            None => -grad * (1e-6 / grad.norm().max(1e-300)),
        };
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = x + alpha * delta;
            if let Ok(fc) = cost(&cand) {
                if fc <= fx {
                    moved = fc < fx || cand != x;
                    x = cand;
                    fx = fc;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved || (alpha * delta).norm() <= 1e-14 * x.norm() {
            break;
        }
    }
    let prof = translation_profile(obs, &wxy, [x.x, x.y])?;
    let b = prof.u[0];
    let full = [x.x * b, x.y * b, b, prof.u[1], prof.u[2], prof.y.y.atan2(prof.y.x)];
    Ok(ParamMap::for_model(template).to_free(&full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn huber_values() {
        assert_eq!(huber_loss(0.0, 1.345), 0.0);
        assert_eq!(huber_loss(1.0, 1.0), 0.5);
        assert_eq!(huber_loss(3.0, 1.0), 2.5);
        assert_eq!(huber_weight(0.5, 1.0, 1.0), 1.0);
        assert_eq!(huber_weight(2.0, 1.0, 1.0), 0.5);
        assert_eq!(huber_weight(-4.0, 2.0, 1.0), 0.0625);
    }

    #[test]
    fn trim_values() {
        let t = trim_weights(&[1.0; 5]);
        assert_eq!((t.gamma, t.weights, t.skipped), (0.0, vec![1.0; 5], false));
        let t = trim_weights(&[1.0, 1.0, 0.1, 0.1]);
        assert_abs_diff_eq!(t.gamma, 0.45, epsilon = 1e-15);
        assert_eq!(t.weights, vec![1.0, 1.0, 0.0, 0.0]);
        let t = trim_weights(&[0.5; 4]);
        assert_eq!(t.gamma, 0.5);
        assert!(t.skipped);
        assert_eq!(t.weights, vec![0.5; 4]);
    }

    struct Shift(Vec<f64>);

    impl LeastSquaresProblem for Shift {
        fn param_names(&self) -> Vec<String> {
            (0..self.0.len()).map(|i| format!("p{i}")).collect()
        }
        fn residuals(&self, p: &[f64]) -> Result<DVector<f64>> {
            Ok(DVector::from_iterator(p.len(), p.iter().zip(&self.0).map(|(p, a)| p - a)))
        }
        fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
            Ok(DMatrix::identity(p.len(), p.len()))
        }
    }

    #[test]
    fn toy_residual_in_one_step() {
        let a = vec![1.5, -2.0, 0.25];
        for solver in [Solver::GaussNewton, Solver::LevenbergMarquardt] {
            let cfg = SolverConfig { solver, ..Default::default() };
            let out = solve_wnls(&Shift(a.clone()), &[1.0; 3], &[0.0; 3], &cfg).unwrap();
            for (x, y) in out.p.iter().zip(&a) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-3);
            }
            if solver == Solver::GaussNewton {
                assert_eq!(out.p, a);
                assert_eq!(out.iterations, 1);
            }
        }
    }

    #[test]
    fn leverage_values() {
        let j = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let r = DVector::from_column_slice(&[0.3, 0.7]);
        let adj = leverage_adjust(&r, &j, &[1.0, 1.0]);
        assert_abs_diff_eq!(adj[1], 0.7, epsilon = 1e-15);
        let j = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let adj = leverage_adjust(&DVector::from_element(4, 1.0), &j, &[1.0; 4]);
        assert_abs_diff_eq!(adj[0], 1.0 / 0.75f64.sqrt(), epsilon = 1e-12);
        let j = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        let adj = leverage_adjust(&DVector::from_element(4, 1.0), &j, &[3.0, 1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(adj[0], 1.0 / 1e-6f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn covariance_of_line_through_origin() {
        let x = [1.0, 2.0, -1.0, 0.5];
        let eps = [0.1, -0.05, 0.02, 0.03];
        let p_true = 2.0;
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let p_hat = x.iter().zip(&eps).map(|(x, e)| x * (p_true * x + e)).sum::<f64>() / sxx;
        let r = DVector::from_iterator(4, x.iter().zip(&eps).map(|(x, e)| p_true * x + e - p_hat * x));
        let j = DMatrix::from_column_slice(4, 1, &x);
        let cov = estimate_covariance(&j, &r, &[1.0; 4]).unwrap();
        let s2 = r.norm_squared() / 4.0;
        assert_abs_diff_eq!(cov[(0, 0)], s2 / sxx, epsilon = 1e-15);
        let zero = estimate_covariance(&j, &DVector::zeros(4), &[1.0; 4]).unwrap();
        assert_eq!(zero[(0, 0)], 0.0);
    }
}
