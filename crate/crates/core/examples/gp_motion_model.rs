//! Learning tick-to-displacement maps with Gaussian processes under a wheel-radius distortion.
use wheelcal::modelfree::{gp_fit, optimize_hyperparameters, KernelSpec, MeanSpec};
use wheelcal::simulate::{synth_model_free, Distortion, SimConfig};

fn main() -> wheelcal::Result<()> {
    let cfg = SimConfig { intervals: 300, seed: 6, ..Default::default() };
    let data = synth_model_free(&cfg, &Distortion::PeriodicRadius { amplitude: 0.03 })?;
    let (train, test) = data.samples.split_at(200);
    for (mean, kernel) in [(MeanSpec::Linear, KernelSpec::Linear), (MeanSpec::Linear, KernelSpec::Rbf), (MeanSpec::Zero, KernelSpec::RbfPlusLinear)] {
        let hypers = optimize_hyperparameters(train, mean, kernel)?;
        let gp = gp_fit(train, mean, kernel, &hypers)?;
        let mut sq = [0.0; 3];
        for (s, truth) in test.iter().zip(&data.truth[200..]) {
            let (mu, _) = gp.predict(&s.delta)?;
            for (c, t) in truth.to_array().iter().enumerate() {
                sq[c] += (mu[c] - t).powi(2);
            }
        }
        let rms = sq.map(|v| (v / test.len() as f64).sqrt());
        println!("{mean:?}/{kernel:?}: rms x {:.2e} m, y {:.2e} m, theta {:.2e} rad", rms[0], rms[1], rms[2]);
    }
    Ok(())
}
