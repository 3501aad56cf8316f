//! Calibrating a four-wheel mecanum platform with the generic solver.
use wheelcal::cirls::{attach_odometry, cirls_calibrate, CirlsConfig};
use wheelcal::cli::Nominal;
use wheelcal::kinematics::{DriveParams, MecanumParams};
use wheelcal::simulate::{synth_displacements, SimConfig};

fn main() -> wheelcal::Result<()> {
    let cfg = SimConfig {
        drive: DriveParams::Mecanum(MecanumParams { r: 0.031, l_x: 0.085, l_y: 0.15 }),
        intervals: 400,
        seed: 5,
        ..Default::default()
    };
    let log = synth_displacements(&cfg)?;
    let obs = attach_odometry(&log.observations, &log.odometry)?;
    let r = cirls_calibrate(&obs, &Nominal::Mecanum.model(), &CirlsConfig::default())?;
    for (name, v) in r.param_names.iter().zip(&r.estimates) {
        println!("{name:>8} = {v:.6}");
    }
    // only the axle sum is observable; the split keeps the ratio of the starting values
    println!("axle_x + axle_y = {:.6}", r.estimates[1] + r.estimates[2]);
    for w in &r.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
