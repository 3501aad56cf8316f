//! Minimizing a quadratic on the unit circle, as used for the sensor heading.
use nalgebra::{Matrix2, Vector2};
use wheelcal::quadratic::solve_constrained_quadratic;

fn main() -> wheelcal::Result<()> {
    let m = Matrix2::new(3.0, 1.0, 1.0, 2.0);
    let g = Vector2::new(-1.0, 0.5);
    let x = solve_constrained_quadratic(&m, &g)?;
    let f = |v: &Vector2<f64>| (v.transpose() * m * v)[0] + g.dot(v);
    println!("x = ({:.6}, {:.6}), |x| = {:.12}, f = {:.6}", x.x, x.y, x.norm(), f(&x));
    let best = (0..3600)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 3600.0;
            f(&Vector2::new(a.cos(), a.sin()))
        })
        .fold(f64::INFINITY, f64::min);
    println!("grid minimum f = {best:.6}");
    Ok(())
}
