//! The masking network: a causal convolutional encoder over the stereo
//! spectrogram, grouped GRUs at the bottleneck and a skip-connected
//! transposed-convolution decoder that emits one complex mask.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod params;
pub mod streaming;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{count_flops, count_params, CruseConfig, MaskMode};
pub use network::{compute_mask, forward_mask, prepare_input, separate, separation_graph, ParamVars, PreparedInput};
pub use params::CruseParams;
pub use streaming::{separate_streaming, FrameModel, StreamState, StreamingSeparator};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::dsp::{channel_average, MultichannelBuffer, FREQ_BINS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> CruseParams {
        CruseParams::init(&CruseConfig::toy(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn noise(seed: u64, len: usize) -> MultichannelBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ch = || (0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect::<Vec<_>>();
        MultichannelBuffer::new(vec![ch(), ch()]).unwrap()
    }

    fn mask_for(params: &CruseParams, features: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let pv = ParamVars::new(&mut tape, params, false);
        let x = tape.constant(features.clone());
        let q = forward_mask(&mut tape, params, &pv, x).unwrap();
        tape.value(q).clone()
    }

    fn random_features(seed: u64, frames: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4 * frames * FREQ_BINS;
        Tensor::new(vec![4, frames, FREQ_BINS], (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_mask() {
        let p = toy(1);
        let q = mask_for(&p, &Tensor::zeros(vec![4, 7, FREQ_BINS]));
        assert_eq!(q.shape(), [2, 7, FREQ_BINS]);
        assert!(q.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_is_bounded() {
        let p = toy(2);
        let mut f = random_features(3, 20);
        f.data_mut().iter_mut().for_each(|v| *v *= 100.0);
        let q = mask_for(&p, &f);
        assert!(q.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn frame_model_matches_batch() {
        for config in [CruseConfig::toy(), CruseConfig::light()] {
            let p = CruseParams::init(&config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let frames = 50;
            let f = random_features(5, frames);
            let batch = mask_for(&p, &f);
            let model = FrameModel::new(&p).unwrap();
            let mut state = model.new_state();
            let mut input = vec![0.0; 4 * FREQ_BINS];
            let mut mask = vec![0.0; 2 * FREQ_BINS];
            let mut worst = 0.0f32;
            for t in 0..frames {
                for c in 0..4 {
                    input[c * FREQ_BINS..(c + 1) * FREQ_BINS]
                        .copy_from_slice(&f.data()[(c * frames + t) * FREQ_BINS..][..FREQ_BINS]);
                }
                model.step(&mut state, &input, &mut mask);
                for c in 0..2 {
                    for k in 0..FREQ_BINS {
                        let b = batch.data()[(c * frames + t) * FREQ_BINS + k];
                        worst = worst.max((b - mask[c * FREQ_BINS + k]).abs());
                    }
                }
            }
            assert!(worst < 1e-5, "{:?}: {worst}", config.enc_filters);
        }
    }

    #[test]
    fn streaming_separation_matches_batch() {
        let p = toy(6);
        let mut sep = StreamingSeparator::new(&p).unwrap();
        for (seed, len) in [(1, 8000), (2, 8037), (3, 100)] {
            let y = noise(seed, len);
            let batch = separate(&p, &y).unwrap();
            let stream = separate_streaming(&mut sep, &y).unwrap();
            assert_eq!(stream.len(), len);
            let worst = batch
                .samples()
                .iter()
                .zip(stream.samples())
                .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            assert!(worst < 1e-5, "{len}: {worst}");
        }
    }

    #[test]
    fn state_reset_isolates_clips() {
        let p = toy(7);
        let mut sep = StreamingSeparator::new(&p).unwrap();
        let a = noise(10, 3200);
        let b = noise(11, 3200);
        let fresh = separate_streaming(&mut StreamingSeparator::new(&p).unwrap(), &b).unwrap();
        separate_streaming(&mut sep, &a).unwrap();
        assert_eq!(separate_streaming(&mut sep, &b).unwrap(), fresh);
    }

    #[test]
    fn causal_prefix() {
        let p = toy(8);
        let frames = 30;
        let f = random_features(9, frames);
        let mut cut = f.clone();
        for c in 0..4 {
            for t in 20..frames {
                cut.data_mut()[(c * frames + t) * FREQ_BINS..][..FREQ_BINS].fill(0.0);
            }
        }
        let (a, b) = (mask_for(&p, &f), mask_for(&p, &cut));
        for c in 0..2 {
            let r = c * frames * FREQ_BINS..(c * frames + 20) * FREQ_BINS;
            assert_eq!(a.data()[r.clone()], b.data()[r]);
        }
    }

    #[test]
    fn fixed_masks() {
        let y = noise(12, 4000);
        let avg = channel_average(&y);
        let mut p = toy(0);
        p.config.mask = MaskMode::Unit;
        for out in [separate(&p, &y).unwrap(), separate_streaming(&mut StreamingSeparator::new(&p).unwrap(), &y).unwrap()] {
            let worst = out.samples().iter().zip(avg.samples()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            assert!(worst < 1e-6, "{worst}");
        }
        p.config.mask = MaskMode::Zero;
        assert!(separate(&p, &y).unwrap().samples().iter().all(|&v| v == 0.0));
        let zero = MultichannelBuffer::zeros(2, 1600);
        let mut learned = toy(0);
        learned.config.mask = MaskMode::Learned;
        let out = separate_streaming(&mut StreamingSeparator::new(&learned).unwrap(), &zero).unwrap();
        assert!(out.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mono_input_is_rejected() {
        let y = MultichannelBuffer::zeros(1, 100);
        assert!(separate(&toy(0), &y).is_err());
    }
}
