//! Calibration directly from raw scans by alternating correspondences and parameters.
use wheelcal::cam::{cam_calibrate, CamConfig};
use wheelcal::cli::Nominal;
use wheelcal::simulate::{simulate_all, SimConfig};

fn main() -> wheelcal::Result<()> {
    let cfg = SimConfig { intervals: 120, seed: 4, ..Default::default() };
    let (log, _, scans) = simulate_all(&cfg)?;
    let r = cam_calibrate(&scans, &log.odometry, &Nominal::Kobuki.model(), &CamConfig::default())?;
    for (name, v) in r.param_names.iter().zip(&r.estimates) {
        println!("{name:>8} = {v:.6}");
    }
    for rec in &r.log {
        println!("outer {}: objective {:.6e}", rec.iteration, rec.objective);
    }
    Ok(())
}
