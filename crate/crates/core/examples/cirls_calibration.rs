//! Joint intrinsic and extrinsic calibration from noisy displacements with outliers.
use wheelcal::cirls::{attach_odometry, cirls_calibrate, CirlsConfig};
use wheelcal::cli::Nominal;
use wheelcal::simulate::{synth_displacements, SimConfig};

fn main() -> wheelcal::Result<()> {
    let cfg = SimConfig { intervals: 400, outlier_fraction: 0.1, seed: 2, ..Default::default() };
    let log = synth_displacements(&cfg)?;
    let obs = attach_odometry(&log.observations, &log.odometry)?;
    let r = cirls_calibrate(&obs, &Nominal::Kobuki.model(), &CirlsConfig::default())?;
    let sd = r.std_devs().unwrap_or_default();
    for (i, name) in r.param_names.iter().enumerate() {
        println!("{name:>8} = {:.6} ± {:.6}", r.estimates[i], sd.get(i).copied().unwrap_or(f64::NAN));
    }
    println!("truth: {:?} {:?}", cfg.drive, cfg.extrinsic);
    println!("converged: {} after {} outer iterations", r.converged, r.log.iter().map(|l| l.iteration).max().unwrap_or(0));
    Ok(())
}
