//! Sensor displacement between consecutive scans with both ICP metrics,
//! seeded from nominal odometry.
use wheelcal::cli::Nominal;
use wheelcal::scanmatch::{estimate_displacement, IcpConfig, Metric};
use wheelcal::simulate::{simulate_all, SimConfig};

fn main() -> wheelcal::Result<()> {
    let (log, _, scans) = simulate_all(&SimConfig { intervals: 10, seed: 9, ..Default::default() })?;
    let nominal = Nominal::Kobuki.model();
    for metric in [Metric::PointToPoint, Metric::PointToLine] {
        let cfg = IcpConfig { metric, ..Default::default() };
        println!("{metric:?}");
        for i in 0..5 {
            let guess = nominal.displacement(&[log.odometry.segment(i)])?;
            let est = estimate_displacement(&scans[i], &scans[i + 1], &guess, &cfg)?;
            let err = est.s_hat.delta(&log.true_displacements[i]);
            println!("  {i}: error x {:+.4} y {:+.4} theta {:+.5}", err[0], err[1], err[2]);
        }
    }
    Ok(())
}
