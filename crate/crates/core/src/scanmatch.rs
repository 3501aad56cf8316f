//! Nearest-neighbour correspondences, overlap trimming and trimmed ICP
//! between planar scans.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::quadratic::solve_partially_constrained;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub timestamp: f64,
    pub points: Vec<Vector2<f64>>,
}

impl Scan {
    pub fn new(timestamp: f64, points: Vec<Vector2<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Schema(format!("scan at t = {timestamp} has no points")));
        }
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::NonFinite("scan point"));
        }
        Ok(Self { timestamp, points })
    }
}

/// Nearest point of the second scan for one point of the first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub source: usize,
    pub target: usize,
    pub sq_dist: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSearch {
    BruteForce,
    #[default]
    Grid,
}

#[inline]
fn sq(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    dx * dx + dy * dy
}

/// Exhaustive nearest neighbour; ties resolve to the lowest target index.
pub fn nearest_brute(query: &Vector2<f64>, targets: &[Vector2<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, t) in targets.iter().enumerate() {
        let d = sq(query, t);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Uniform bucket grid answering nearest-neighbour queries with the same
/// results (including tie-breaking) as [`nearest_brute`].
pub struct PointGrid<'a> {
    points: &'a [Vector2<f64>],
    origin: Vector2<f64>,
    cell: f64,
    nx: i64,
    ny: i64,
    buckets: Vec<Vec<u32>>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vector2<f64>]) -> Self {
        let n = points.len().max(1);
        let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vector2::zeros();
            hi = Vector2::zeros();
        }
        let ext = hi - lo;
        let area = ext.x * ext.y;
        let mut cell = if area > 0.0 { (area / n as f64).sqrt() } else { ext.max() / n as f64 };
        if !(cell > 0.0) {
            cell = 1.0;
        }
        let nx = ((ext.x / cell).floor() as i64 + 1).max(1);
        let ny = ((ext.y / cell).floor() as i64 + 1).max(1);
        let mut buckets = vec![Vec::new(); (nx * ny) as usize];
        let mut grid = Self { points, origin: lo, cell, nx, ny, buckets: Vec::new() };
        for (i, p) in points.iter().enumerate() {
            let (cx, cy) = grid.cell_of(p);
            buckets[(cy.clamp(0, ny - 1) * nx + cx.clamp(0, nx - 1)) as usize].push(i as u32);
        }
        grid.buckets = buckets;
        grid
    }

    fn cell_of(&self, p: &Vector2<f64>) -> (i64, i64) {
        (((p.x - self.origin.x) / self.cell).floor() as i64, ((p.y - self.origin.y) / self.cell).floor() as i64)
    }

    pub fn nearest(&self, q: &Vector2<f64>) -> (usize, f64) {
        let (qx, qy) = self.cell_of(q);
        let mut best = (usize::MAX, f64::INFINITY);
        let visit = |cx: i64, cy: i64, best: &mut (usize, f64)| {
            for &i in &self.buckets[(cy * self.nx + cx) as usize] {
                let i = i as usize;
                let d = sq(q, &self.points[i]);
                if d < best.1 || (d == best.1 && i < best.0) {
                    *best = (i, d);
                }
            }
        };
        let gap = |v: i64, n: i64| if v < 0 { -v } else if v >= n { v - n + 1 } else { 0 };
        let r0 = gap(qx, self.nx).max(gap(qy, self.ny));
        let far = (qx.max(self.nx - 1 - qx)).max(qy.max(self.ny - 1 - qy)).max(r0);
        let mut r = r0;
        loop {
            for cy in (qy - r).max(0)..=(qy + r).min(self.ny - 1) {
                if cy == qy - r || cy == qy + r {
                    for cx in (qx - r).max(0)..=(qx + r).min(self.nx - 1) {
                        visit(cx, cy, &mut best);
                    }
                } else {
                    for cx in [qx - r, qx + r] {
                        if (0..self.nx).contains(&cx) && (r > 0 || cx == qx - r) {
                            visit(cx, cy, &mut best);
                        }
                    }
                }
            }
            let reach = r as f64 * self.cell;
            if r >= far || reach * reach > best.1 {
                break;
            }
            r += 1;
        }
        best
    }
}

/// For every point of `scan_j` (mapped by `ℓ`) the nearest point of `scan_k`
/// mapped by `q_jk ⊕ ℓ`, in `scan_j` order.
pub fn closest_distances(
    scan_j: &Scan,
    scan_k: &Scan,
    q_jk: &Pose2D,
    l: &Pose2D,
    search: NeighborSearch,
) -> Vec<Match> {
    let tk = q_jk.oplus(l);
    let targets: Vec<Vector2<f64>> = scan_k.points.iter().map(|z| tk.transform_point(z)).collect();
    let queries = scan_j.points.iter().map(|z| l.transform_point(z));
    match search {
        NeighborSearch::BruteForce => queries
            .enumerate()
            .map(|(i, a)| {
                let (t, d) = nearest_brute(&a, &targets);
                Match { source: i, target: t, sq_dist: d }
            })
            .collect(),
        NeighborSearch::Grid => {
            let grid = PointGrid::new(&targets);
            queries
                .enumerate()
                .map(|(i, a)| {
                    let (t, d) = grid.nearest(&a);
                    Match { source: i, target: t, sq_dist: d }
                })
                .collect()
        }
    }
}

/// Grid of candidate overlap fractions and the penalty exponent λ of the
/// criterion `e(ζ)/ζ^(1+λ)`. Fractions are multiples of 1/20.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrimConfig {
    pub zeta_min: f64,
    pub zeta_max: f64,
    pub lambda: f64,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self { zeta_min: 0.4, zeta_max: 1.0, lambda: 2.0 }
    }
}

/// Overlap fraction and kept count for ascending squared distances.
pub fn trim_overlap(sorted: &[f64]) -> (f64, usize) {
    trim_overlap_with(sorted, &TrimConfig::default())
}

pub fn trim_overlap_with(sorted: &[f64], cfg: &TrimConfig) -> (f64, usize) {
    let n = sorted.len();
    if n == 0 {
        return (1.0, 0);
    }
    let lo = ((cfg.zeta_min * 20.0 - 1e-9).ceil() as usize).clamp(1, 20);
    let hi = ((cfg.zeta_max * 20.0 + 1e-9).floor() as usize).clamp(lo, 20);
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for d in sorted {
        prefix.push(prefix.last().unwrap() + d);
    }
    let mut best = (1.0, n, f64::INFINITY);
    for num in (lo..=hi).rev() {
        let kept = (n * num).div_ceil(20).max(1);
        let zeta = num as f64 / 20.0;
        let e = prefix[kept] / kept as f64;
        let crit = e / zeta.powf(1.0 + cfg.lambda);
        if crit < best.2 {
            best = (zeta, kept, crit);
        }
    }
    (best.0, best.1)
}

/// Matches sorted by distance with the trimmed prefix marked as kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub j: usize,
    pub k: usize,
    pub matches: Vec<Match>,
    pub zeta: f64,
    pub kept: usize,
    pub normals: Option<Vec<Option<Vector2<f64>>>>,
}

impl CorrespondenceSet {
    pub fn from_matches(j: usize, k: usize, mut matches: Vec<Match>, trim: &TrimConfig) -> Self {
        matches.sort_by(|a, b| a.sq_dist.total_cmp(&b.sq_dist).then(a.source.cmp(&b.source)));
        let d: Vec<f64> = matches.iter().map(|m| m.sq_dist).collect();
        let (zeta, kept) = trim_overlap_with(&d, trim);
        Self { j, k, matches, zeta, kept, normals: None }
    }

    pub fn kept_matches(&self) -> &[Match] {
        &self.matches[..self.kept]
    }

    pub fn trimmed_error(&self) -> f64 {
        self.kept_matches().iter().map(|m| m.sq_dist).sum()
    }

    pub fn mean_kept_sq(&self) -> f64 {
        self.trimmed_error() / self.kept.max(1) as f64
    }
}

/// Weighted least-squares rigid transform `T` minimizing `Σ wᵢ‖T⊕srcᵢ − dstᵢ‖²`.
pub fn rigid_align(src: &[Vector2<f64>], dst: &[Vector2<f64>], weights: &[f64]) -> Result<Pose2D> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: src.len(), got: dst.len().min(weights.len()) });
    }
    let wsum: f64 = weights.iter().sum();
    if src.len() < 2 || !(wsum > 0.0) {
        return Err(Error::Singular("rigid alignment needs two weighted pairs".into()));
    }
    let (mut cs, mut cd) = (Vector2::zeros(), Vector2::zeros());
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        cs += *w * s;
        cd += *w * d;
    }
    cs /= wsum;
    cd /= wsum;
    let (mut dot, mut cross, mut spread) = (0.0, 0.0, 0.0);
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        let (a, b) = (s - cs, d - cd);
        dot += w * (a.x * b.x + a.y * b.y);
        cross += w * (a.x * b.y - a.y * b.x);
        spread += w * a.norm_squared();
    }
    if !(spread > 0.0) || (dot == 0.0 && cross == 0.0) {
        return Err(Error::Singular("alignment points are coincident".into()));
    }
    let theta = cross.atan2(dot);
    let r = crate::geometry::rot(theta);
    let t = cd - r * cs;
    Ok(Pose2D::new(t.x, t.y, theta))
}

/// Unit normals from PCA over each point and its two nearest neighbours;
/// `None` where the neighbourhood is not line-like.
pub fn estimate_normals(points: &[Vector2<f64>]) -> Vec<Option<Vector2<f64>>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut nb: Vec<(f64, usize)> =
                points.iter().enumerate().filter(|(k, _)| *k != i).map(|(k, q)| (sq(p, q), k)).collect();
            if nb.len() < 2 {
                return None;
            }
            nb.select_nth_unstable_by(1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let pts = [*p, points[nb[0].1], points[nb[1].1]];
            let c = (pts[0] + pts[1] + pts[2]) / 3.0;
            let mut cov = Matrix2::zeros();
            for q in &pts {
                let d = q - c;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let (imin, imax) = if eig.eigenvalues[0] <= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
            let (lmin, lmax) = (eig.eigenvalues[imin], eig.eigenvalues[imax]);
            if !(lmax > 0.0) || lmin > 0.1 * lmax {
                return None;
            }
            let n: Vector2<f64> = eig.eigenvectors.column(imin).into();
            Some(n / n.norm())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    PointToPoint,
    PointToLine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpConfig {
    pub max_iters: usize,
    pub tolerance: f64,
    pub metric: Metric,
    pub search: NeighborSearch,
    pub trim: TrimConfig,
    /// Mean kept squared distance above which the match is declared failed.
    pub failure_sq: f64,
    pub sigma_floor: [f64; 3],
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tolerance: 1e-7,
            metric: Metric::PointToPoint,
            search: NeighborSearch::Grid,
            trim: TrimConfig::default(),
            failure_sq: 0.05 * 0.05,
            sigma_floor: [1e-3, 1e-3, 0.1_f64.to_radians()],
        }
    }
}

/// Sensor displacement between two times: `z_j ≈ s_hat ⊕ z_k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementObs {
    pub t_j: f64,
    pub t_k: f64,
    pub s_hat: Pose2D,
    pub sigma: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    pub obs: DisplacementObs,
    pub iterations: usize,
    pub mean_kept_sq: f64,
    pub zeta: f64,
    pub failed: bool,
}

fn point_to_line_align(
    src: &[Vector2<f64>],
    dst: &[Vector2<f64>],
    normals: &[Option<Vector2<f64>>],
) -> Result<Pose2D> {
    let mut m = DMatrix::<f64>::zeros(4, 4);
    let mut g = DVector::<f64>::zeros(4);
    let mut add = |n: &Vector2<f64>, s: &Vector2<f64>, d: &Vector2<f64>| {
        let a = DVector::from_column_slice(&[n.x, n.y, n.x * s.x + n.y * s.y, -n.x * s.y + n.y * s.x]);
        let b = n.dot(d);
        m += &a * a.transpose();
        g -= 2.0 * b * a;
    };
    for ((s, d), n) in src.iter().zip(dst).zip(normals) {
        match n {
            Some(n) => add(n, s, d),
            None => {
                add(&Vector2::x(), s, d);
                add(&Vector2::y(), s, d);
            }
        }
    }
    let x = solve_partially_constrained(&m, &g)?;
    Ok(Pose2D::new(x[0], x[1], x[3].atan2(x[2])))
}

/// Trimmed ICP aligning `scan_k` onto `scan_j`, starting from `init`.
pub fn estimate_displacement_detailed(scan_j: &Scan, scan_k: &Scan, init: &Pose2D, cfg: &IcpConfig) -> Result<MatchOutcome> {
    let normals = match cfg.metric {
        Metric::PointToLine => Some(estimate_normals(&scan_j.points)),
        Metric::PointToPoint => None,
    };
    let correspond = |p: &Pose2D| {
        CorrespondenceSet::from_matches(0, 1, closest_distances(scan_j, scan_k, p, &Pose2D::IDENTITY, cfg.search), &cfg.trim)
    };
    let mut p = *init;
    let mut iterations = 0;
    let mut corr = correspond(&p);
    while iterations < cfg.max_iters {
        iterations += 1;
        let kept = corr.kept_matches();
        let src: Vec<Vector2<f64>> = kept.iter().map(|m| scan_k.points[m.target]).collect();
        let dst: Vec<Vector2<f64>> = kept.iter().map(|m| scan_j.points[m.source]).collect();
        let next = match &normals {
            Some(ns) => {
                let nk: Vec<Option<Vector2<f64>>> = kept.iter().map(|m| ns[m.source]).collect();
                point_to_line_align(&src, &dst, &nk).or_else(|_| rigid_align(&src, &dst, &vec![1.0; src.len()]))?
            }
            None => rigid_align(&src, &dst, &vec![1.0; src.len()])?,
        };
        let step = next.delta(&p);
        p = next;
        corr = correspond(&p);
        if step.iter().map(|v| v * v).sum::<f64>().sqrt() < cfg.tolerance {
            break;
        }
    }
    let sigma = alignment_sigma(scan_j, scan_k, &p, &corr, normals.as_deref(), cfg);
    let mean = corr.mean_kept_sq();
    Ok(MatchOutcome {
        obs: DisplacementObs { t_j: scan_j.timestamp, t_k: scan_k.timestamp, s_hat: p, sigma },
        iterations,
        mean_kept_sq: mean,
        zeta: corr.zeta,
        failed: !(mean <= cfg.failure_sq),
    })
}

pub fn estimate_displacement(scan_j: &Scan, scan_k: &Scan, init: &Pose2D, cfg: &IcpConfig) -> Result<DisplacementObs> {
    let out = estimate_displacement_detailed(scan_j, scan_k, init, cfg)?;
    if out.failed {
        return Err(Error::MatchFailure { mean_sq: out.mean_kept_sq, threshold: cfg.failure_sq });
    }
    Ok(out.obs)
}

fn alignment_sigma(
    scan_j: &Scan,
    scan_k: &Scan,
    p: &Pose2D,
    corr: &CorrespondenceSet,
    normals: Option<&[Option<Vector2<f64>>]>,
    cfg: &IcpConfig,
) -> [f64; 3] {
    let (s, c) = p.theta.sin_cos();
    let mut jtj = Matrix3::zeros();
    let (mut ss, mut rows) = (0.0, 0usize);
    let mut add = |n: Vector2<f64>, b: &Vector2<f64>, r: &Vector2<f64>| {
        let dr = Vector2::new(-s * b.x - c * b.y, c * b.x - s * b.y);
        let row = Vector3::new(n.x, n.y, n.dot(&dr));
        jtj += row * row.transpose();
        ss += n.dot(r).powi(2);
        rows += 1;
    };
    for m in corr.kept_matches() {
        let b = scan_k.points[m.target];
        let r = p.transform_point(&b) - scan_j.points[m.source];
        match normals.and_then(|ns| ns[m.source]) {
            Some(n) => add(n, &b, &r),
            None => {
                add(Vector2::x(), &b, &r);
                add(Vector2::y(), &b, &r);
            }
        }
    }
    let mse = if rows > 3 { ss / (rows - 3) as f64 } else { 0.0 };
    let var = jtj.try_inverse().map(|inv| inv.diagonal() * mse).unwrap_or_else(Vector3::zeros);
    [0, 1, 2].map(|i| var[i].max(0.0).sqrt().max(cfg.sigma_floor[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn trim_examples() {
        assert_eq!(trim_overlap(&[2.0; 37]), (1.0, 37));
        let mut v = vec![0.0; 60];
        v.extend(std::iter::repeat_n(1e6, 40));
        assert_eq!(trim_overlap(&v), (0.6, 60));
        assert_eq!(trim_overlap(&[3.0]), (1.0, 1));
    }

    #[test]
    fn align_rotation_about_origin() {
        let src = vec![Vector2::new(1.0, 0.0), Vector2::new(0.0, 2.0), Vector2::new(-1.0, 0.5)];
        let dst: Vec<_> = src.iter().map(|p| Vector2::new(-p.y, p.x)).collect();
        let t = rigid_align(&src, &dst, &[1.0; 3]).unwrap();
        assert_abs_diff_eq!(t.theta, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(t.x, 0.0, epsilon = 1e-12);
        let id = rigid_align(&src, &src, &[1.0; 3]).unwrap();
        assert_eq!(id.theta, 0.0);
        let same = vec![Vector2::new(1.0, 1.0); 3];
        assert!(matches!(rigid_align(&same, &same, &[1.0; 3]), Err(Error::Singular(_))));
    }
}
