//! Closed-form inner solve for differential drives compared with the generic solver.
use std::time::Instant;

use wheelcal::cirls::{attach_odometry, cirls_calibrate, cirls_cf_calibrate, CirlsConfig};
use wheelcal::cli::Nominal;
use wheelcal::simulate::{synth_displacements, SimConfig};

fn main() -> wheelcal::Result<()> {
    let log = synth_displacements(&SimConfig { intervals: 500, seed: 3, ..Default::default() })?;
    let obs = attach_odometry(&log.observations, &log.odometry)?;
    let init = Nominal::Kobuki.model();
    let cfg = CirlsConfig::default();
    let t = Instant::now();
    let generic = cirls_calibrate(&obs, &init, &cfg)?;
    let tg = t.elapsed();
    let t = Instant::now();
    let cf = cirls_cf_calibrate(&obs, &init, &cfg)?;
    let tc = t.elapsed();
    println!("{:>8} {:>12} {:>12}", "", "generic", "closed form");
    for (i, name) in generic.param_names.iter().enumerate() {
        println!("{name:>8} {:>12.6} {:>12.6}", generic.estimates[i], cf.estimates[i]);
    }
    println!("{:>8} {:>12.1?} {:>12.1?}", "time", tg, tc);
    Ok(())
}
