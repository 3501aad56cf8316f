//! Dead-reckoning error of nominal and true parameters against the reference path.
use wheelcal::cli::Nominal;
use wheelcal::kinematics::SensorModel;
use wheelcal::metrics::{evaluate, predict_trajectory, MotionModel};
use wheelcal::simulate::{synth_displacements, SimConfig};

fn main() -> wheelcal::Result<()> {
    let cfg = SimConfig { intervals: 300, seed: 8, ..Default::default() };
    let log = synth_displacements(&cfg)?;
    let reference = &log.sensor_trajectory;
    let start = reference.poses()[0].pose;
    for (name, model) in [("nominal", Nominal::Kobuki.model()), ("truth", SensorModel::new(cfg.drive, cfg.extrinsic))] {
        let est = predict_trajectory(&MotionModel::Parametric(model), &log.odometry, &reference.times(), start)?;
        let rep = evaluate(&est, reference)?;
        println!("{name:>8}: ATE {:.4} m, RPE {:.5} m over {} poses", rep.ate_m, rep.rpe_m, rep.n_poses);
    }
    Ok(())
}
