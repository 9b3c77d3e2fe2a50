//! SI-SDR objective, AdamW and the toy-scale training loop.

pub mod optim;
pub mod trainer;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use optim::{adamw_step, OptimState, TrainConfig};
pub use trainer::{
    clip_delta_si_sdr, load_clips, loss_and_gradients, mean_delta_si_sdr, read_log, train, train_loop, EpochLog,
    TrainOutcome, TrainingClip, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE,
};

use crate::autodiff::{compare_at, si_sdr_db, CoordCheck, Tape, Tensor, Var};
use crate::cruse::params::tensor_layout;
use crate::cruse::{prepare_input, separation_graph, CruseConfig, CruseParams, ParamVars};
use crate::dsp::{channel_average, AudioBuffer, MultichannelBuffer};
use crate::error::{Error, Result};
use crate::scenegen::{synth_noise, synth_speech};

/// Scale-invariant SDR in dB, mean-subtracted and clamped to ±60.
pub fn si_sdr(est: &AudioBuffer, reference: &AudioBuffer) -> Result<f64> {
    si_sdr_db(est.samples(), reference.samples())
}

/// Outcome of [`loss_gradient_check`].
#[derive(Clone, Debug)]
pub struct LossGradientReport {
    pub checks: Vec<CoordCheck>,
    /// Coordinates drawn but dropped because their stencil crossed a PReLU
    /// kink or the SI-SDR clamp.
    pub skipped: usize,
}

impl LossGradientReport {
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(CoordCheck::relative_error).fold(0.0, f64::max)
    }
}

/// Finite-difference check of the full training loss (network, masking,
/// iSTFT and SI-SDR) in f64 on a short synthetic clip, at doubled initial
/// weights with random biases and PReLU slopes. Coordinates are
/// drawn uniformly over all weights of a freshly initialised model until
/// `coords` of them have a smooth stencil.
pub fn loss_gradient_check(config: &CruseConfig, seed: u64, coords: usize, eps: f64) -> Result<LossGradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = CruseParams::init(config, &mut rng)?;
    // At the initial point (zero biases, small bottleneck activations) the
    // GRU gate derivatives are second-order small, below what central
    // differences resolve in f64; check at a generic point instead.
    let layout = tensor_layout(config);
    for ((name, _), t) in layout.iter().zip(params.tensors_mut()) {
        if name.ends_with(".prelu") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.5));
        } else if name.ends_with(".b") || name.contains(".b_") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        } else {
            t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
    }
    // A mostly real positive mask keeps the estimate correlated with the
    // target, so the SI-SDR is not computed from a cancelling correlation.
    params.dec[0].b.data_mut()[0] = 1.0;
    let speech = synth_speech(&mut rng, 0.25);
    let noise = synth_noise(&mut rng, 0.25);
    let (s, n) = (speech.samples(), noise.samples());
    let left: Vec<f32> = s.iter().zip(n).map(|(a, b)| a + 0.5 * b).collect();
    let right: Vec<f32> = s.iter().zip(n).map(|(a, b)| 0.8 * a + 0.3 * b).collect();
    let y = MultichannelBuffer::new(vec![left, right])?;
    let t = MultichannelBuffer::new(vec![s.to_vec(), s.iter().map(|v| 0.8 * v).collect()])?;
    let target: Vec<f64> = channel_average(&t).samples().iter().map(|&v| v as f64).collect();
    let input = prepare_input::<f64>(&y)?;

    let inputs: Vec<Tensor<f64>> = params.tensors().iter().map(|t| t.cast()).collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    if coords == 0 || coords > total {
        return Err(Error::InvalidArgument(format!("{coords} coordinates requested from {total} weights")));
    }
    let locate = |mut flat: usize| {
        let mut k = 0;
        while flat >= inputs[k].len() {
            flat -= inputs[k].len();
            k += 1;
        }
        (k, flat)
    };
    let loss = |tape: &mut Tape<f64>, vars: &[Var]| {
        let pv = ParamVars::from_vars(&params.config, vars)?;
        let (_, out) = separation_graph(tape, &params, &pv, &input)?;
        let sdr = tape.si_sdr(out, &target)?;
        Ok(tape.scale(sdr, -1.0))
    };

    let candidates = sample_indices(&mut rng, total, (4 * coords).min(total)).into_vec();
    let mut report = LossGradientReport {
        checks: Vec::with_capacity(coords),
        skipped: 0,
    };
    for chunk in candidates.chunks(coords) {
        let picked: Vec<(usize, usize)> = chunk.iter().map(|&f| locate(f)).collect();
        for check in compare_at(loss, &inputs, eps, &picked)? {
            if report.checks.len() == coords {
                break;
            }
            if check.smooth {
                report.checks.push(check);
            } else {
                report.skipped += 1;
            }
        }
        if report.checks.len() == coords {
            return Ok(report);
        }
    }
    Err(Error::InvalidArgument(format!(
        "only {} of {coords} sampled coordinates had a smooth stencil at eps {eps}",
        report.checks.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::DEFAULT_EPS;

    fn buf(v: &[f32]) -> AudioBuffer {
        AudioBuffer::new(v.to_vec()).unwrap()
    }

    #[test]
    fn si_sdr_reference_values() {
        let r = buf(&[1.0, -1.0, 1.0, -1.0]);
        let e = buf(&[2.0, 0.0, 0.0, -2.0]);
        assert!(si_sdr(&e, &r).unwrap().abs() < 1e-9);
        assert_eq!(si_sdr(&r, &r).unwrap(), 60.0);
        assert_eq!(si_sdr(&buf(&[3.0, -3.0, 3.0, -3.0]), &r).unwrap(), 60.0);
        assert!(matches!(si_sdr(&r, &buf(&[0.5; 4])), Err(Error::ZeroReference)));
        assert!(matches!(si_sdr(&r, &buf(&[1.0; 3])), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn end_to_end_loss_gradient() {
        let report = loss_gradient_check(&CruseConfig::toy(), 11, 20, DEFAULT_EPS).unwrap();
        assert_eq!(report.checks.len(), 20);
        assert!(report.worst() < 1e-3, "{report:?}");
    }
}
