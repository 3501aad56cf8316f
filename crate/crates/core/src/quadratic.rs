//! Quadratic objectives minimized over the unit circle.
//!
//! `min xᵀMx + gᵀx  s.t. ‖x‖ = 1` is solved through the Lagrange condition
//! `x = −½(M + λI)⁻¹g`, whose norm constraint is a quartic in λ. The roots
//! come from the eigenvalues of the companion matrix; eigenvectors of `M`
//! and the hard-case solutions are added as candidates, and the best one is
//! polished by Newton steps on the angle.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SymmetricEigen, Vector2};

use crate::error::{Error, Result};

fn objective(m: &Matrix2<f64>, g: &Vector2<f64>, x: &Vector2<f64>) -> f64 {
    (x.transpose() * m * x)[0] + g.dot(x)
}

fn polish(m: &Matrix2<f64>, g: &Vector2<f64>, x: Vector2<f64>) -> Vector2<f64> {
    let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let mut phi = x.y.atan2(x.x);
    let mut best = x;
    let mut best_f = objective(m, g, &x);
    for _ in 0..20 {
        let (s, c) = phi.sin_cos();
        let (s2, c2) = (2.0 * phi).sin_cos();
        let f1 = (d - a) * s2 + 2.0 * b * c2 - g.x * s + g.y * c;
        let f2 = 2.0 * (d - a) * c2 - 4.0 * b * s2 - g.x * c - g.y * s;
        if f2 <= 0.0 || f1 == 0.0 {
            break;
        }
        let step = f1 / f2;
        let cand = phi - step;
        let xc = Vector2::new(cand.cos(), cand.sin());
        let fc = objective(m, g, &xc);
        if fc > best_f {
            break;
        }
        phi = cand;
        best = xc;
        best_f = fc;
        if step.abs() < 1e-15 {
            break;
        }
    }
    best
}

/// Quartic coefficients (highest degree first) of `‖½(M+λI)⁻¹g‖² = 1`
/// after clearing the determinant.
pub fn lagrange_quartic(m: &Matrix2<f64>, g: &Vector2<f64>) -> [f64; 5] {
    let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let t = a + d;
    let det = a * d - b * b;
    let u = Vector2::new(d * g.x - b * g.y, -b * g.x + a * g.y);
    let gg = g.norm_squared();
    [
        4.0,
        8.0 * t,
        4.0 * (t * t + 2.0 * det) - gg,
        8.0 * t * det - 2.0 * u.dot(g),
        4.0 * det * det - u.norm_squared(),
    ]
}

/// Roots of a quartic via companion-matrix eigenvalues; returns real parts of
/// roots whose imaginary part is negligible.
pub fn quartic_real_roots(c: &[f64; 5]) -> Vec<f64> {
    let mut comp = Matrix4::zeros();
    for i in 0..4 {
        comp[(0, i)] = -c[i + 1] / c[0];
    }
    for i in 1..4 {
        comp[(i, i - 1)] = 1.0;
    }
    let scale = comp.abs().max().max(1.0);
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * scale.sqrt() * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

pub fn solve_constrained_quadratic(m: &Matrix2<f64>, g: &Vector2<f64>) -> Result<Vector2<f64>> {
    if !(m.iter().all(|v| v.is_finite()) && g.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("constrained quadratic"));
    }
    let ms = 0.5 * (m + m.transpose());
    let scale = ms.abs().max().max(g.abs().max());
    if scale == 0.0 {
        return Ok(Vector2::new(1.0, 0.0));
    }
    let (mn, gn) = (ms / scale, g / scale);
    let mut cands: Vec<Vector2<f64>> = Vec::new();
    for lambda in quartic_real_roots(&lagrange_quartic(&mn, &gn)) {
        let a = mn + Matrix2::identity() * lambda;
        if let Some(inv) = a.try_inverse() {
            let x = -0.5 * inv * gn;
            let n = x.norm();
            if n.is_finite() && n > 0.0 {
                cands.push(x / n);
            }
        }
    }
    let eig = SymmetricEigen::new(mn);
    for i in 0..2 {
        let v: Vector2<f64> = eig.eigenvectors.column(i).into();
        cands.push(v);
        cands.push(-v);
        // hard case: λ = −μ_i with g orthogonal to v_i
        let other: Vector2<f64> = eig.eigenvectors.column(1 - i).into();
        let gap = eig.eigenvalues[1 - i] - eig.eigenvalues[i];
        if gap.abs() > 1e-12 {
            let xo = -0.5 * gn.dot(&other) / gap * other;
            let rem = 1.0 - xo.norm_squared();
            if rem >= 0.0 {
                let tau = rem.sqrt();
                cands.push(xo + tau * v);
                cands.push(xo - tau * v);
            }
        }
    }
    let best = cands
        .into_iter()
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .map(|x| x / x.norm())
        .min_by(|a, b| objective(&mn, &gn, a).total_cmp(&objective(&mn, &gn, b)))
        .ok_or_else(|| Error::Numerical("no feasible root of the Lagrange quartic".into()))?;
    let x = polish(&mn, &gn, best);
    Ok(x / x.norm())
}

/// Minimize `xᵀMx + gᵀx` over `x ∈ R^n` with the last two components on the
/// unit circle. The free block is eliminated in closed form and must be
/// positive definite.
pub fn solve_partially_constrained(m: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let n = m.nrows();
    if n < 2 || m.ncols() != n || g.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: g.len() });
    }
    let k = n - 2;
    let ms = 0.5 * (m + m.transpose());
    let b = ms.view((0, k), (k, 2)).into_owned();
    let d = ms.view((k, k), (2, 2)).into_owned();
    let (ga, gb) = (g.rows(0, k).into_owned(), g.rows(k, 2).into_owned());
    let (mt, gt, a_inv) = if k > 0 {
        let a = ms.view((0, 0), (k, k)).into_owned();
        let eig = SymmetricEigen::new(a.clone());
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if !(lo > 1e-12 * hi.max(1e-300)) {
            return Err(Error::Singular("free block of the quadratic is rank-deficient".into()));
        }
        let a_inv = a.try_inverse().ok_or_else(|| Error::Singular("free block not invertible".into()))?;
        let mt = &d - b.transpose() * &a_inv * &b;
        let gt = &gb - b.transpose() * &a_inv * &ga;
        (mt, gt, Some(a_inv))
    } else {
        (d.clone(), gb.clone(), None)
    };
    let y = solve_constrained_quadratic(
        &Matrix2::new(mt[(0, 0)], mt[(0, 1)], mt[(1, 0)], mt[(1, 1)]),
        &Vector2::new(gt[0], gt[1]),
    )?;
    let mut x = DVector::zeros(n);
    if let Some(a_inv) = a_inv {
        let yv = DVector::from_column_slice(&[y.x, y.y]);
        let xa = -(&a_inv * (&b * &yv + 0.5 * &ga));
        x.rows_mut(0, k).copy_from(&xa);
    }
    x[k] = y.x;
    x[k + 1] = y.y;
    Ok(x)
}
