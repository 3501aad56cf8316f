//! Learning the sensor motion model directly from tick counts: three
//! independent Gaussian processes (one per pose component) and a robust
//! linear map.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};
use serde::{Deserialize, Serialize};

use crate::cirls::huber_weight;
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// One interval of training data: tick counts, measured displacement and its standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub delta: Vec<f64>,
    pub s_hat: [f64; 3],
    pub sigma: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanSpec {
    Zero,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    Rbf,
    Linear,
    RbfPlusLinear,
}

/// Hyperparameters of one output dimension. Length scales are in units of
/// the per-axis input standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHypers {
    pub signal_var: f64,
    pub length_scales: Vec<f64>,
    pub linear_var: f64,
}

impl KernelHypers {
    pub fn unit(m: usize) -> Self {
        Self { signal_var: 1.0, length_scales: vec![1.0; m], linear_var: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHypers {
    /// Mean matrix C (3 rows of m entries); ignored for a zero mean.
    pub mean: Vec<Vec<f64>>,
    pub kernels: Vec<KernelHypers>,
}

fn check_dim(x: &[f64], m: usize) -> Result<()> {
    if x.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: x.len() });
    }
    Ok(())
}

pub fn linear_mean(c: &[Vec<f64>], x: &[f64]) -> Result<[f64; 3]> {
    if c.len() != 3 {
        return Err(Error::DimensionMismatch { expected: 3, got: c.len() });
    }
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(c) {
        check_dim(x, row.len())?;
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    Ok(out)
}

/// `σ² exp(−½ Σ ((x_i − x'_i)/ℓ_i)²)`
pub fn rbf_kernel(x: &[f64], x2: &[f64], h: &KernelHypers) -> f64 {
    let q: f64 = x.iter().zip(x2).zip(&h.length_scales).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
    h.signal_var * (-0.5 * q).exp()
}

pub fn linear_kernel(x: &[f64], x2: &[f64]) -> f64 {
    x.iter().zip(x2).map(|(a, b)| a * b).sum()
}

fn kernel(spec: KernelSpec, x: &[f64], x2: &[f64], h: &KernelHypers) -> f64 {
    match spec {
        KernelSpec::Rbf => rbf_kernel(x, x2, h),
        KernelSpec::Linear => h.linear_var * linear_kernel(x, x2),
        KernelSpec::RbfPlusLinear => rbf_kernel(x, x2, h) + h.linear_var * linear_kernel(x, x2),
    }
}

fn input_scale(data: &[TrainingSample]) -> Vec<f64> {
    let m = data[0].delta.len();
    let n = data.len() as f64;
    (0..m)
        .map(|a| {
            let mean = data.iter().map(|d| d.delta[a]).sum::<f64>() / n;
            let var = data.iter().map(|d| (d.delta[a] - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

fn scaled(x: &[f64], s: &[f64]) -> Vec<f64> {
    x.iter().zip(s).map(|(a, b)| a / b).collect()
}

fn validate(data: &[TrainingSample]) -> Result<usize> {
    let first = data.first().ok_or_else(|| Error::Schema("training set is empty".into()))?;
    let m = first.delta.len();
    for d in data {
        check_dim(&d.delta, m)?;
        if d.sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Schema("noise standard deviations must be non-negative".into()));
        }
    }
    Ok(m)
}

fn gram(spec: KernelSpec, xs: &[Vec<f64>], h: &KernelHypers) -> DMatrix<f64> {
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(spec, &xs[i], &xs[j], h);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factor of `K + diag(noise)` with escalating jitter from 1e-10.
fn factor(mut k: DMatrix<f64>, noise: &[f64]) -> Result<(Cholesky<f64, Dyn>, f64)> {
    for (i, v) in noise.iter().enumerate() {
        k[(i, i)] += v;
    }
    let scale = (k.trace() / k.nrows() as f64).abs().max(1e-300);
    let mut jitter = 0.0;
    for attempt in 0..8 {
        let mut kj = k.clone();
        if jitter > 0.0 {
            for i in 0..kj.nrows() {
                kj[(i, i)] += jitter;
            }
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, jitter));
        }
        jitter = if attempt == 0 { 1e-10 * scale.max(1.0) } else { jitter * 100.0 };
    }
    Err(Error::Conditioning("kernel matrix is not positive definite after jitter".into()))
}

/// A fitted model: one scalar GP per pose component sharing the training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub version: u32,
    pub mean_spec: MeanSpec,
    pub kernel_spec: KernelSpec,
    pub hypers: GpHypers,
    pub input_scale: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub noise_var: Vec<[f64; 3]>,
    pub alpha: Vec<Vec<f64>>,
    /// Row-major lower Cholesky factors of `K + Σ`, one per output.
    pub factors: Vec<Vec<f64>>,
    pub jitter: [f64; 3],
}

fn targets(data: &[TrainingSample], mean: MeanSpec, c: &[Vec<f64>], dim: usize) -> Result<DVector<f64>> {
    let mut y = DVector::zeros(data.len());
    for (i, d) in data.iter().enumerate() {
        let mu = match mean {
            MeanSpec::Zero => 0.0,
            MeanSpec::Linear => linear_mean(c, &d.delta)?[dim],
        };
        y[i] = d.s_hat[dim] - mu;
    }
    Ok(y)
}

fn dim_lml(spec: KernelSpec, xs: &[Vec<f64>], noise: &[f64], h: &KernelHypers, y: &DVector<f64>) -> Result<f64> {
    let (chol, _) = factor(gram(spec, xs, h), noise)?;
    let alpha = chol.solve(y);
    let logdet: f64 = chol.l_dirty().diagonal().iter().take(y.len()).map(|v| v.ln()).sum();
    Ok(-0.5 * y.dot(&alpha) - logdet - 0.5 * y.len() as f64 * (2.0 * PI).ln())
}

pub fn gp_fit(data: &[TrainingSample], mean: MeanSpec, kernel_spec: KernelSpec, hypers: &GpHypers) -> Result<GpModel> {
    let m = validate(data)?;
    if hypers.kernels.len() != 3 {
        return Err(Error::DimensionMismatch { expected: 3, got: hypers.kernels.len() });
    }
    let scale = input_scale(data);
    let xs: Vec<Vec<f64>> = data.iter().map(|d| scaled(&d.delta, &scale)).collect();
    let c = match mean {
        MeanSpec::Linear => hypers.mean.clone(),
        MeanSpec::Zero => vec![vec![0.0; m]; 3],
    };
    let mut alpha = Vec::with_capacity(3);
    let mut factors = Vec::with_capacity(3);
    let mut jitter = [0.0; 3];
    for dim in 0..3 {
        let noise: Vec<f64> = data.iter().map(|d| d.sigma[dim] * d.sigma[dim]).collect();
        let (chol, j) = factor(gram(kernel_spec, &xs, &hypers.kernels[dim]), &noise)?;
        let y = targets(data, mean, &c, dim)?;
        alpha.push(chol.solve(&y).as_slice().to_vec());
        let l = chol.l();
        factors.push(l.transpose().as_slice().to_vec());
        jitter[dim] = j;
    }
    Ok(GpModel {
        version: MODEL_FORMAT_VERSION,
        mean_spec: mean,
        kernel_spec,
        hypers: GpHypers { mean: c, kernels: hypers.kernels.clone() },
        input_scale: scale,
        inputs: data.iter().map(|d| d.delta.clone()).collect(),
        noise_var: data.iter().map(|d| d.sigma.map(|s| s * s)).collect(),
        alpha,
        factors,
        jitter,
    })
}

impl GpModel {
    pub fn wheel_count(&self) -> usize {
        self.input_scale.len()
    }

    /// Posterior mean and variance of each pose component.
    pub fn predict(&self, delta: &[f64]) -> Result<([f64; 3], [f64; 3])> {
        check_dim(delta, self.wheel_count())?;
        let n = self.inputs.len();
        let xs = scaled(delta, &self.input_scale);
        let prior_mean = match self.mean_spec {
            MeanSpec::Zero => [0.0; 3],
            MeanSpec::Linear => linear_mean(&self.hypers.mean, delta)?,
        };
        let mut mu = [0.0; 3];
        let mut var = [0.0; 3];
        for dim in 0..3 {
            let h = &self.hypers.kernels[dim];
            let kstar = DVector::from_iterator(
                n,
                self.inputs.iter().map(|x| kernel(self.kernel_spec, &xs, &scaled(x, &self.input_scale), h)),
            );
            mu[dim] = prior_mean[dim] + kstar.dot(&DVector::from_column_slice(&self.alpha[dim]));
            let l = DMatrix::from_row_slice(n, n, &self.factors[dim]);
            let v = l.solve_lower_triangular(&kstar).ok_or_else(|| Error::Conditioning("singular stored factor".into()))?;
            let s = kernel(self.kernel_spec, &xs, &xs, h) - v.norm_squared();
            if s < -1e-10 {
                log::warn!("posterior variance {s:e} clamped to zero");
            }
            var[dim] = s.max(0.0);
        }
        Ok((mu, var))
    }

    /// Prior variance `κ(δ, δ)` of each pose component.
    pub fn prior_variance(&self, delta: &[f64]) -> Result<[f64; 3]> {
        check_dim(delta, self.wheel_count())?;
        let xs = scaled(delta, &self.input_scale);
        Ok([0, 1, 2].map(|dim| kernel(self.kernel_spec, &xs, &xs, &self.hypers.kernels[dim])))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Schema(e.to_string()))?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: GpModel = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if m.version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported model version {}", m.version)));
        }
        Ok(m)
    }
}

pub fn gp_predict(model: &GpModel, delta: &[f64]) -> Result<([f64; 3], [f64; 3])> {
    model.predict(delta)
}

pub fn log_marginal_likelihood(data: &[TrainingSample], mean: MeanSpec, kernel_spec: KernelSpec, hypers: &GpHypers) -> Result<f64> {
    let m = validate(data)?;
    let scale = input_scale(data);
    let xs: Vec<Vec<f64>> = data.iter().map(|d| scaled(&d.delta, &scale)).collect();
    let c = match mean {
        MeanSpec::Linear => hypers.mean.clone(),
        MeanSpec::Zero => vec![vec![0.0; m]; 3],
    };
    let mut total = 0.0;
    for dim in 0..3 {
        let noise: Vec<f64> = data.iter().map(|d| d.sigma[dim] * d.sigma[dim]).collect();
        total += dim_lml(kernel_spec, &xs, &noise, &hypers.kernels[dim], &targets(data, mean, &c, dim)?)?;
    }
    Ok(total)
}

/// Row-wise weighted least squares `ŝ_i ≈ C_i δ` with weights `1/σ_i²`.
pub fn fit_mean_matrix(data: &[TrainingSample]) -> Result<Vec<Vec<f64>>> {
    let m = validate(data)?;
    let n = data.len();
    (0..3)
        .map(|dim| {
            let mut a = DMatrix::zeros(n, m);
            let mut y = DVector::zeros(n);
            for (i, d) in data.iter().enumerate() {
                let w = if d.sigma[dim] > 0.0 { 1.0 / d.sigma[dim] } else { 1.0 };
                for k in 0..m {
                    a[(i, k)] = d.delta[k] * w;
                }
                y[i] = d.s_hat[dim] * w;
            }
            let svd = SVD::new(a, true, true);
            let sol = svd.solve(&y, 1e-12).map_err(|e| Error::Numerical(e.to_string()))?;
            Ok(sol.as_slice().to_vec())
        })
        .collect()
}

fn pack(spec: KernelSpec, h: &KernelHypers) -> Vec<f64> {
    let mut v = Vec::new();
    if spec != KernelSpec::Linear {
        v.push(h.signal_var.ln());
        v.extend(h.length_scales.iter().map(|l| l.ln()));
    }
    if spec != KernelSpec::Rbf {
        v.push(h.linear_var.ln());
    }
    v
}

fn unpack(spec: KernelSpec, v: &[f64], m: usize) -> KernelHypers {
    let mut h = KernelHypers::unit(m);
    let mut it = v.iter();
    if spec != KernelSpec::Linear {
        h.signal_var = it.next().unwrap().exp();
        for l in h.length_scales.iter_mut() {
            *l = it.next().unwrap().exp();
        }
    }
    if spec != KernelSpec::Rbf {
        h.linear_var = it.next().unwrap().exp();
    }
    h
}

/// Mean matrix by weighted least squares, then per-output kernel hyperparameters
/// maximizing the log marginal likelihood with a log-space simplex search from three starts.
pub fn optimize_hyperparameters(data: &[TrainingSample], mean: MeanSpec, kernel_spec: KernelSpec) -> Result<GpHypers> {
    let m = validate(data)?;
    let c = match mean {
        MeanSpec::Linear => fit_mean_matrix(data)?,
        MeanSpec::Zero => vec![vec![0.0; m]; 3],
    };
    let scale = input_scale(data);
    let xs: Vec<Vec<f64>> = data.iter().map(|d| scaled(&d.delta, &scale)).collect();
    let mut kernels = Vec::with_capacity(3);
    for dim in 0..3 {
        let y = targets(data, mean, &c, dim)?;
        let noise: Vec<f64> = data.iter().map(|d| d.sigma[dim] * d.sigma[dim]).collect();
        let yvar = (y.norm_squared() / y.len() as f64).max(1e-12);
        let mut best: Option<(f64, KernelHypers)> = None;
        for (sv, ls) in [(1.0, 1.0), (0.1, 0.3), (10.0, 3.0)] {
            let start = KernelHypers { signal_var: yvar * sv, length_scales: vec![ls; m], linear_var: yvar * sv };
            let x0 = pack(kernel_spec, &start);
            let obj = |v: &[f64]| match dim_lml(kernel_spec, &xs, &noise, &unpack(kernel_spec, v, m), &y) {
                Ok(l) => -l,
                Err(_) => f64::INFINITY,
            };
            let opts = NelderMeadOptions { max_evals: 120 * x0.len().max(2), f_tol: 1e-10, initial_step: 1.0 };
            let res = nelder_mead(obj, &x0, &opts);
            if res.f.is_finite() && best.as_ref().is_none_or(|b| -res.f > b.0) {
                best = Some((-res.f, unpack(kernel_spec, &res.x, m)));
            }
        }
        let (_, h) = best.ok_or_else(|| Error::Conditioning(format!("every restart failed for output {dim}")))?;
        kernels.push(h);
    }
    Ok(GpHypers { mean: c, kernels })
}

/// `f(δ) = W δ`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub version: u32,
    pub w: Vec<Vec<f64>>,
}

impl LinearModel {
    pub fn predict(&self, delta: &[f64]) -> Result<[f64; 3]> {
        linear_mean(&self.w, delta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Schema(e.to_string()))?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

pub fn predict_linear(model: &LinearModel, delta: &[f64]) -> Result<[f64; 3]> {
    model.predict(delta)
}

/// Per-row Huber regression of `ŝ_i/σ_i` on `δ/σ_i` by iteratively reweighted least squares.
pub fn fit_linear_model(data: &[TrainingSample], huber_c: f64) -> Result<LinearModel> {
    let m = validate(data)?;
    let n = data.len();
    if n < m {
        return Err(Error::InsufficientExcitation(format!("{n} samples for {m} wheels")));
    }
    let design = DMatrix::from_fn(n, m, |i, k| data[i].delta[k]);
    let svd = SVD::new(design.clone(), false, true);
    let smax = svd.singular_values.max();
    let vt = svd.v_t.as_ref().expect("requested");
    let weak: Vec<Vec<f64>> = (0..m)
        .filter(|&i| !(svd.singular_values[i] > 1e-10 * smax))
        .map(|i| vt.row(i).iter().copied().collect())
        .collect();
    if !weak.is_empty() || smax == 0.0 {
        return Err(Error::RankDeficient(weak));
    }
    let mut w = Vec::with_capacity(3);
    for dim in 0..3 {
        let s: Vec<f64> = data.iter().map(|d| if d.sigma[dim] > 0.0 { d.sigma[dim] } else { 1.0 }).collect();
        let x = DMatrix::from_fn(n, m, |i, k| design[(i, k)] / s[i]);
        let y = DVector::from_fn(n, |i, _| data[i].s_hat[dim] / s[i]);
        let mut weights = vec![1.0_f64; n];
        let mut beta = DVector::zeros(m);
        for _ in 0..200 {
            let xw = DMatrix::from_fn(n, m, |i, k| x[(i, k)] * weights[i].sqrt());
            let yw = DVector::from_fn(n, |i, _| y[i] * weights[i].sqrt());
            let next = SVD::new(xw, true, true).solve(&yw, 1e-14).map_err(|e| Error::Numerical(e.to_string()))?;
            let change = (&next - &beta).norm() / next.norm().max(1e-300);
            beta = next;
            let r = &y - &x * &beta;
            for i in 0..n {
                weights[i] = huber_weight(r[i], 1.0, huber_c);
            }
            if change < 1e-13 {
                break;
            }
        }
        w.push(beta.as_slice().to_vec());
    }
    Ok(LinearModel { version: MODEL_FORMAT_VERSION, w })
}
