//! Robust linear map from tick increments to sensor displacement.
use wheelcal::modelfree::fit_linear_model;
use wheelcal::simulate::{synth_model_free, Distortion, SimConfig};

fn main() -> wheelcal::Result<()> {
    let cfg = SimConfig { intervals: 300, outlier_fraction: 0.1, seed: 7, ..Default::default() };
    let data = synth_model_free(&cfg, &Distortion::RadiusScale { left: 1.01, right: 0.995 })?;
    for c in [1.345, 1e9] {
        let m = fit_linear_model(&data.samples, c)?;
        println!("huber c = {c}");
        for row in &m.w {
            println!("  [{:+.4e} {:+.4e}]", row[0], row[1]);
        }
    }
    Ok(())
}
