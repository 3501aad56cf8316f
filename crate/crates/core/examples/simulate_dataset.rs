//! Generate a synthetic log and summarize what it contains.
use wheelcal::simulate::{simulate_all, SimConfig};

fn main() -> wheelcal::Result<()> {
    let cfg = SimConfig { intervals: 200, outlier_fraction: 0.05, seed: 1, ..Default::default() };
    let (log, world, scans) = simulate_all(&cfg)?;
    let end = log.robot_poses.last().unwrap();
    println!("{} intervals, {} landmarks, {} scans", log.observations.len(), world.landmarks.len(), scans.len());
    println!("mean points per scan: {:.1}", scans.iter().map(|s| s.points.len()).sum::<usize>() as f64 / scans.len() as f64);
    println!("outliers at {:?}", log.outliers);
    println!("final robot pose: x={:.3} y={:.3} theta={:.3}", end.x, end.y, end.theta);
    Ok(())
}
