//! Evaluation instruments: log-ratio metrics, the power-reduction heatmap
//! and the real-time-factor benchmark.

pub mod bench;
pub mod heatmap;

pub use bench::{bench_rtf, BenchReport};
pub use heatmap::{pr_heatmap, pr_heatmap_many, HeatmapCell, HeatmapConfig, HeatmapGrid, Separator};

use crate::dsp::{channel_average, AudioBuffer, MultichannelBuffer};
use crate::error::{Error, Result};
use crate::train::si_sdr;

pub const PR_CLAMP_DB: f64 = 60.0;

/// `10 log10(|y_phi|^2 / |t_hat|^2)`, clamped to ±60 dB.
pub fn power_reduction_db(y_phi: &AudioBuffer, t_hat: &AudioBuffer) -> Result<f64> {
    if y_phi.len() != t_hat.len() {
        return Err(Error::LengthMismatch(format!(
            "mixture has {} samples, estimate {}",
            y_phi.len(),
            t_hat.len()
        )));
    }
    let energy = |x: &AudioBuffer| x.samples().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
    let (num, den) = (energy(y_phi), energy(t_hat));
    if num == 0.0 {
        return Err(Error::EmptyInput("mixture is silent"));
    }
    if den == 0.0 {
        return Ok(PR_CLAMP_DB);
    }
    Ok((10.0 * (num / den).log10()).clamp(-PR_CLAMP_DB, PR_CLAMP_DB))
}

/// SI-SDR improvement of `est` over the channel-averaged `mixture`.
pub fn delta_si_sdr(est: &AudioBuffer, reference: &AudioBuffer, mixture: &MultichannelBuffer) -> Result<f64> {
    Ok(si_sdr(est, reference)? - si_sdr(&channel_average(mixture), reference)?)
}
