//! Draws per-record processing times from a gamma model, fits gamma and
//! lognormal distributions to them and compares the fits.
//!
//! ```text
//! cargo run --example fit_processing_times
//! ```

use etlsim::calibration::{fit_gamma, fit_lognormal, goodness_of_fit, FittedDistribution};
use etlsim::scenario::write_samples_csv;
use etlsim::stochastic::{sample_seconds, ProcTimeModel, Purpose, RngStream, StreamId};
use etlsim::throughput::ConvenientCurve;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let curve = ConvenientCurve::exponential(100.0, 10.0)?;
    let model = ProcTimeModel::Gamma { curve, shape: 4.0 };
    let a = 4;
    let mut rng = RngStream::new(7, StreamId::new(0, Purpose::Auxiliary));
    let samples = (0..5_000)
        .map(|_| sample_seconds(&model, a, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;

    let head = write_samples_csv(&samples[..5]);
    print!("first samples:\n{head}");
    println!("model mean R({a}) = {:.5} s", model.mean_seconds(a)?);

    for fitted in [fit_gamma(&samples)?, fit_lognormal(&samples)?] {
        let gof = goodness_of_fit(&samples, &fitted)?;
        let params = match fitted {
            FittedDistribution::Gamma { shape, scale } => {
                format!("gamma shape={shape:.3} scale={scale:.5}")
            }
            FittedDistribution::Lognormal { mu, sigma } => {
                format!("lognormal mu={mu:.4} sigma={sigma:.4}")
            }
        };
        println!(
            "{params:<40} mean {:.5}  log-likelihood {:>9.1}  KS {:.4}",
            fitted.mean(),
            gof.log_likelihood,
            gof.ks_statistic
        );
    }
    Ok(())
}
