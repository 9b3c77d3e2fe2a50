//! Whole-sequence forward pass on the tape (used for training and as the
//! reference for streaming inference) and offline separation.

use super::config::{CruseConfig, MaskMode, NUM_LEVELS};
use super::params::{tensor_layout, CruseParams};
use crate::autodiff::{from_spectrogram, Tape, Tensor, Var};
use crate::dsp::{channel_average, stft_real, AudioBuffer, MultichannelBuffer, Spectrogram, FREQ_BINS};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
}

/// Parameters placed on a tape, mirroring [`CruseParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub enc: Vec<LayerVars>,
    pub gru: Vec<[Var; 9]>,
    pub skip: Vec<LayerVars>,
    pub dec: Vec<LayerVars>,
    pub enc_slopes: Vec<Var>,
    pub dec_slopes: Vec<Var>,
}

impl ParamVars {
    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn new<T: Real>(tape: &mut Tape<T>, params: &CruseParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            let t = t.cast::<T>();
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        let enc = params.enc.iter().map(|l| LayerVars { w: put(&l.w), b: put(&l.b) }).collect();
        let gru = params.gru.iter().map(|g| std::array::from_fn(|k| put(&g[k]))).collect();
        let skip = params.skip.iter().map(|l| LayerVars { w: put(&l.w), b: put(&l.b) }).collect();
        let dec = params.dec.iter().map(|l| LayerVars { w: put(&l.w), b: put(&l.b) }).collect();
        let enc_slopes = params.enc_slopes.iter().map(&mut put).collect();
        let dec_slopes = params.dec_slopes.iter().map(&mut put).collect();
        Self {
            enc,
            gru,
            skip,
            dec,
            enc_slopes,
            dec_slopes,
        }
    }

    /// Inverse of [`ParamVars::vars`] for a tape that already holds the
    /// parameters.
    pub fn from_vars(config: &CruseConfig, vars: &[Var]) -> Result<Self> {
        let expected = tensor_layout(config).len();
        if vars.len() != expected {
            return Err(Error::Shape(format!("{} parameter vars, expected {expected}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let layers = |it: &mut dyn Iterator<Item = Var>, n: usize| -> Vec<LayerVars> {
            (0..n)
                .map(|_| LayerVars {
                    w: it.next().expect("length checked"),
                    b: it.next().expect("length checked"),
                })
                .collect()
        };
        let enc = layers(&mut it, NUM_LEVELS);
        let gru = (0..config.gru_groups)
            .map(|_| std::array::from_fn(|_| it.next().expect("length checked")))
            .collect();
        let skip = layers(&mut it, NUM_LEVELS);
        let mut dec = layers(&mut it, NUM_LEVELS);
        dec.reverse();
        let mut next = || it.next().expect("length checked");
        let enc_slopes = (0..NUM_LEVELS).map(|_| next()).collect();
        let mut dec_slopes: Vec<Var> = (1..NUM_LEVELS).map(|_| next()).collect();
        dec_slopes.reverse();
        Ok(Self {
            enc,
            gru,
            skip,
            dec,
            enc_slopes,
            dec_slopes,
        })
    }

    /// Vars in the same order as [`CruseParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.enc {
            out.extend([l.w, l.b]);
        }
        for g in &self.gru {
            out.extend(g.iter().copied());
        }
        for l in &self.skip {
            out.extend([l.w, l.b]);
        }
        for l in self.dec.iter().rev() {
            out.extend([l.w, l.b]);
        }
        out.extend(self.enc_slopes.iter().copied());
        out.extend(self.dec_slopes.iter().rev().copied());
        out
    }
}

/// Network input `[4, T, 161]`: real and imaginary parts of each channel.
pub fn stereo_features<T: Real>(left: &Spectrogram<T>, right: &Spectrogram<T>) -> Result<Tensor<T>> {
    if left.num_frames() != right.num_frames() {
        return Err(Error::Shape(format!(
            "channel spectrograms have {} and {} frames",
            left.num_frames(),
            right.num_frames()
        )));
    }
    if left.num_frames() == 0 {
        return Err(Error::EmptyInput("spectrogram"));
    }
    let mut data = Vec::with_capacity(4 * left.data().len());
    for s in [left, right] {
        data.extend(s.data().iter().map(|c| c.re));
        data.extend(s.data().iter().map(|c| c.im));
    }
    Tensor::new(vec![4, left.num_frames(), FREQ_BINS], data)
}

/// Mask `[2, T, 161]` (real, imaginary) for network input `[4, T, 161]`.
pub fn forward_mask<T: Real>(tape: &mut Tape<T>, params: &CruseParams, pv: &ParamVars, input: Var) -> Result<Var> {
    let config = &params.config;
    let shape = tape.shape(input).to_vec();
    if shape.len() != 3 || shape[0] != config.in_channels || shape[2] != config.freq_bins {
        return Err(Error::Shape(format!(
            "network input {shape:?}, expected [{}, T, {}]",
            config.in_channels, config.freq_bins
        )));
    }
    let frames = shape[1];
    if frames == 0 {
        return Err(Error::EmptyInput("network input"));
    }
    match config.mask {
        MaskMode::Learned => {}
        MaskMode::Unit | MaskMode::Zero => {
            let mut q = Tensor::zeros(vec![2, frames, config.freq_bins]);
            if config.mask == MaskMode::Unit {
                q.data_mut()[..frames * config.freq_bins].fill(T::one());
            }
            return Ok(tape.constant(q));
        }
    }

    let bins = config.bins();
    let mut enc_out = Vec::with_capacity(NUM_LEVELS);
    let mut x = input;
    for l in 0..NUM_LEVELS {
        let y = tape.conv2d(x, pv.enc[l].w, pv.enc[l].b)?;
        x = tape.prelu(y, pv.enc_slopes[l])?;
        enc_out.push(x);
    }

    let feats = tape.frames_to_features(x)?;
    let g = config.gru_group_size();
    let mut groups = Vec::with_capacity(config.gru_groups);
    for (k, w) in pv.gru.iter().enumerate() {
        let part = tape.slice_cols(feats, k * g, g)?;
        groups.push(tape.gru(part, *w)?);
    }
    let joined = tape.concat_cols(&groups)?;
    let mut d = tape.features_to_frames(joined, config.enc_filters[NUM_LEVELS - 1])?;

    for l in (0..NUM_LEVELS).rev() {
        let skip = tape.conv1x1(enc_out[l], pv.skip[l].w, pv.skip[l].b)?;
        let sum = tape.add(d, skip)?;
        let y = tape.tconv2d(sum, pv.dec[l].w, pv.dec[l].b, bins[l])?;
        d = if l == 0 { tape.tanh(y) } else { tape.prelu(y, pv.dec_slopes[l - 1])? };
    }
    Ok(d)
}

/// Spectra needed to run the network on a stereo clip.
pub struct PreparedInput<T> {
    pub features: Tensor<T>,
    /// STFT of the channel average as `[2, T, 161]`.
    pub mixture: Tensor<T>,
    pub len: usize,
}

pub fn prepare_input<T: Real>(y: &MultichannelBuffer) -> Result<PreparedInput<T>> {
    if y.num_channels() != 2 {
        return Err(Error::InvalidArgument(format!(
            "separation needs a 2-channel input, got {} channel(s)",
            y.num_channels()
        )));
    }
    let cast = |s: &[f32]| s.iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>();
    let left = stft_real(&cast(y.channel(0)))?;
    let right = stft_real(&cast(y.channel(1)))?;
    let avg = stft_real(&cast(channel_average(y).samples()))?;
    Ok(PreparedInput {
        features: stereo_features(&left, &right)?,
        mixture: from_spectrogram(&avg),
        len: y.len(),
    })
}

/// Builds the separated signal `istft(Q * Y_phi)` on `tape`; returns
/// `(mask, output)`.
pub fn separation_graph<T: Real>(
    tape: &mut Tape<T>,
    params: &CruseParams,
    pv: &ParamVars,
    input: &PreparedInput<T>,
) -> Result<(Var, Var)> {
    let x = tape.constant(input.features.clone());
    let q = forward_mask(tape, params, pv, x)?;
    let mix = tape.constant(input.mixture.clone());
    let masked = tape.complex_mul(q, mix)?;
    let out = tape.istft(masked, input.len)?;
    Ok((q, out))
}

/// Offline separation of a stereo clip: `istft(Q * stft(y_phi))`.
pub fn separate(params: &CruseParams, y: &MultichannelBuffer) -> Result<AudioBuffer> {
    let input = prepare_input::<f32>(y)?;
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params, false);
    let (_, out) = separation_graph(&mut tape, params, &pv, &input)?;
    AudioBuffer::new(tape.value(out).data().to_vec())
}

/// The complex mask for a stereo clip, as `[2, T, 161]`.
pub fn compute_mask(params: &CruseParams, y: &MultichannelBuffer) -> Result<Tensor> {
    let input = prepare_input::<f32>(y)?;
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params, false);
    let x = tape.constant(input.features);
    let q = forward_mask(&mut tape, params, &pv, x)?;
    Ok(tape.value(q).clone())
}
