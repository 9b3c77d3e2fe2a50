//! Signal-processing kernels: framed STFT/iSTFT with a square-root periodic
//! Hann window, channel averaging, and FFT convolution.
//!
//! Framing: the signal is prefixed with one hop (160 samples) of zeros and
//! zero-padded at the tail so that `ceil(N / 160) + 1` frames of 320 samples
//! cover it. Every original sample then lies under exactly two frames, where
//! the squared windows sum to one, and the inverse transform reduces to
//! overlap-add followed by trimming the front pad.

use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};
use crate::real::Real;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_LEN: usize = 320;
pub const HOP: usize = 160;
pub const NFFT: usize = 320;
pub const FREQ_BINS: usize = NFFT / 2 + 1;

/// Mono audio at 16 kHz with finite samples.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        check_finite(&samples)?;
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// `M` equally long channels at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelBuffer {
    channels: Vec<Vec<f32>>,
}

impl MultichannelBuffer {
    pub fn new(channels: Vec<Vec<f32>>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or(Error::EmptyInput("no channels"))?
            .len();
        if let Some((m, ch)) = channels.iter().enumerate().find(|(_, c)| c.len() != first) {
            return Err(Error::LengthMismatch(format!(
                "channel {m} has {} samples, channel 0 has {first}",
                ch.len()
            )));
        }
        for ch in &channels {
            check_finite(ch)?;
        }
        Ok(Self { channels })
    }

    pub fn zeros(num_channels: usize, len: usize) -> Self {
        Self {
            channels: vec![vec![0.0; len]; num_channels],
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, m: usize) -> &[f32] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.channels
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }
}

fn check_finite(x: &[f32]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Complex `T x 161` time-frequency grid, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<T = f32> {
    data: Vec<Complex<T>>,
    frames: usize,
}

impl<T: Real> Spectrogram<T> {
    pub fn zeros(frames: usize) -> Self {
        Self {
            data: vec![Complex::new(T::zero(), T::zero()); frames * FREQ_BINS],
            frames,
        }
    }

    pub fn from_data(frames: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != frames * FREQ_BINS {
            return Err(Error::Shape(format!(
                "spectrogram data has {} bins, expected {frames} x {FREQ_BINS}",
                data.len()
            )));
        }
        Ok(Self { data, frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn num_bins(&self) -> usize {
        FREQ_BINS
    }

    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        &self.data[t * FREQ_BINS..(t + 1) * FREQ_BINS]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex<T>] {
        &mut self.data[t * FREQ_BINS..(t + 1) * FREQ_BINS]
    }

    pub fn get(&self, t: usize, f: usize) -> Complex<T> {
        self.data[t * FREQ_BINS + f]
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }
}

/// Number of frames the framing rule produces for `n` samples.
pub fn num_frames(n: usize) -> usize {
    n.div_ceil(HOP) + 1
}

/// Longest signal a spectrogram of `frames` frames reconstructs completely.
pub fn max_output_len(frames: usize) -> usize {
    HOP * frames.saturating_sub(1)
}

/// Square root of the periodic Hann window of length 320.
pub fn sqrt_hann<T: Real>() -> Vec<T> {
    (0..WIN_LEN)
        .map(|n| {
            let phase = 2.0 * std::f64::consts::PI * n as f64 / WIN_LEN as f64;
            T::of((0.5 - 0.5 * phase.cos()).sqrt())
        })
        .collect()
}

/// Reusable forward/inverse FFT plans for single frames.
pub struct FramePlan<T: Real> {
    r2c: Arc<dyn RealToComplex<T>>,
    c2r: Arc<dyn ComplexToReal<T>>,
    window: Vec<T>,
    time_buf: Vec<T>,
    freq_buf: Vec<Complex<T>>,
    r2c_scratch: Vec<Complex<T>>,
    c2r_scratch: Vec<Complex<T>>,
}

impl<T: Real> Default for FramePlan<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> FramePlan<T> {
    pub fn new() -> Self {
        let mut planner = RealFftPlanner::<T>::new();
        let r2c = planner.plan_fft_forward(NFFT);
        let c2r = planner.plan_fft_inverse(NFFT);
        let r2c_scratch = r2c.make_scratch_vec();
        let c2r_scratch = c2r.make_scratch_vec();
        Self {
            time_buf: r2c.make_input_vec(),
            freq_buf: r2c.make_output_vec(),
            r2c,
            c2r,
            window: sqrt_hann(),
            r2c_scratch,
            c2r_scratch,
        }
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    /// Windows `frame` (320 samples) and writes its 161-bin spectrum to `out`.
    pub fn analyze(&mut self, frame: &[T], out: &mut [Complex<T>]) {
        for ((dst, &x), &w) in self.time_buf.iter_mut().zip(frame).zip(&self.window) {
            *dst = x * w;
        }
        self.r2c
            .process_with_scratch(&mut self.time_buf, out, &mut self.r2c_scratch)
            .expect("fft buffer sizes are fixed by the plan");
    }

    /// Inverse transform of one 161-bin frame, windowed, written to `out`
    /// (320 samples). Imaginary parts of the DC and Nyquist bins are ignored.
    pub fn synthesize(&mut self, spectrum: &[Complex<T>], out: &mut [T]) {
        self.freq_buf.copy_from_slice(spectrum);
        self.freq_buf[0].im = T::zero();
        self.freq_buf[FREQ_BINS - 1].im = T::zero();
        self.c2r
            .process_with_scratch(&mut self.freq_buf, out, &mut self.c2r_scratch)
            .expect("fft buffer sizes are fixed by the plan");
        let scale = T::one() / T::of(NFFT as f64);
        for (o, &w) in out.iter_mut().zip(&self.window) {
            *o = *o * w * scale;
        }
    }

    /// Vector-Jacobian product of [`FramePlan::synthesize`]: maps a gradient
    /// on the 320 windowed output samples to a gradient on the 161 bins
    /// (real and imaginary parts as independent coordinates).
    pub fn synthesize_adjoint(&mut self, grad: &[T], out: &mut [Complex<T>]) {
        for ((dst, &g), &w) in self.time_buf.iter_mut().zip(grad).zip(&self.window) {
            *dst = g * w;
        }
        self.r2c
            .process_with_scratch(&mut self.time_buf, out, &mut self.r2c_scratch)
            .expect("fft buffer sizes are fixed by the plan");
        let n = T::of(NFFT as f64);
        let two = T::of(2.0);
        for (k, v) in out.iter_mut().enumerate() {
            let c = if k == 0 || k == FREQ_BINS - 1 { T::one() } else { two };
            *v = *v * (c / n);
        }
        out[0].im = T::zero();
        out[FREQ_BINS - 1].im = T::zero();
    }
}

/// STFT of a raw sample slice at any precision.
pub fn stft_real<T: Real>(x: &[T]) -> Result<Spectrogram<T>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("stft input"));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let frames = num_frames(x.len());
    let mut padded = vec![T::zero(); HOP * (frames + 1)];
    padded[HOP..HOP + x.len()].copy_from_slice(x);
    let mut plan = FramePlan::new();
    let mut spec = Spectrogram::zeros(frames);
    for t in 0..frames {
        plan.analyze(&padded[t * HOP..t * HOP + WIN_LEN], spec.frame_mut(t));
    }
    Ok(spec)
}

/// Inverse of [`stft_real`]: windowed overlap-add, then trim to `out_len`.
pub fn istft_real<T: Real>(spec: &Spectrogram<T>, out_len: usize) -> Result<Vec<T>> {
    let frames = spec.num_frames();
    if out_len > max_output_len(frames) {
        return Err(Error::InvalidArgument(format!(
            "out_len {out_len} exceeds the {} samples {frames} frames can synthesize",
            max_output_len(frames)
        )));
    }
    let mut plan = FramePlan::new();
    let mut acc = vec![T::zero(); HOP * (frames + 1)];
    let mut buf = vec![T::zero(); WIN_LEN];
    for t in 0..frames {
        plan.synthesize(spec.frame(t), &mut buf);
        for (a, &b) in acc[t * HOP..t * HOP + WIN_LEN].iter_mut().zip(&buf) {
            *a += b;
        }
    }
    Ok(acc[HOP..HOP + out_len].to_vec())
}

/// Adjoint of [`istft_real`] with respect to the spectrogram, for a
/// gradient `grad` on its `out_len` output samples.
pub fn istft_vjp<T: Real>(grad: &[T], frames: usize) -> Spectrogram<T> {
    let mut padded = vec![T::zero(); HOP * (frames + 1)];
    padded[HOP..HOP + grad.len()].copy_from_slice(grad);
    let mut plan = FramePlan::new();
    let mut spec = Spectrogram::zeros(frames);
    for t in 0..frames {
        plan.synthesize_adjoint(&padded[t * HOP..t * HOP + WIN_LEN], spec.frame_mut(t));
    }
    spec
}

pub fn stft(x: &AudioBuffer) -> Result<Spectrogram> {
    stft_real(x.samples())
}

pub fn istft(spec: &Spectrogram, out_len: usize) -> Result<AudioBuffer> {
    istft_real(spec, out_len).map(|samples| AudioBuffer { samples })
}

/// Arithmetic mean over channels; the `phi` convention for `y_phi`, `t_phi`.
pub fn channel_average(x: &MultichannelBuffer) -> AudioBuffer {
    let scale = 1.0 / x.num_channels() as f32;
    let mut out = x.channels[0].clone();
    for ch in &x.channels[1..] {
        for (o, &v) in out.iter_mut().zip(ch) {
            *o += v;
        }
    }
    if x.num_channels() > 1 {
        out.iter_mut().for_each(|v| *v *= scale);
    }
    AudioBuffer { samples: out }
}

/// Full linear convolution (length `x.len() + h.len() - 1`), computed in
/// double precision via the FFT.
pub fn fft_convolve(x: &[f32], h: &[f32]) -> Result<Vec<f32>> {
    Ok(fft_convolve_many(x, &[h])?.pop().unwrap())
}

/// Convolves one signal with several kernels, sharing the signal transform.
pub fn fft_convolve_many(x: &[f32], kernels: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("convolution signal"));
    }
    if kernels.iter().any(|h| h.is_empty()) {
        return Err(Error::EmptyInput("convolution kernel"));
    }
    let longest = kernels.iter().map(|h| h.len()).max().unwrap_or(1);
    let size = (x.len() + longest - 1).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let r2c = planner.plan_fft_forward(size);
    let c2r = planner.plan_fft_inverse(size);

    let mut buf = r2c.make_input_vec();
    for (b, &v) in buf.iter_mut().zip(x) {
        *b = v as f64;
    }
    let mut x_spec = r2c.make_output_vec();
    r2c.process(&mut buf, &mut x_spec).expect("sizes fixed by plan");

    let scale = 1.0 / size as f64;
    let mut h_spec = r2c.make_output_vec();
    let mut out = Vec::with_capacity(kernels.len());
    for h in kernels {
        buf.iter_mut().for_each(|b| *b = 0.0);
        for (b, &v) in buf.iter_mut().zip(h.iter()) {
            *b = v as f64;
        }
        r2c.process(&mut buf, &mut h_spec).expect("sizes fixed by plan");
        for (hs, xs) in h_spec.iter_mut().zip(&x_spec) {
            *hs *= xs;
        }
        h_spec[0].im = 0.0;
        h_spec[size / 2].im = 0.0;
        c2r.process(&mut h_spec, &mut buf).expect("sizes fixed by plan");
        let len = x.len() + h.len() - 1;
        out.push(buf[..len].iter().map(|&v| (v * scale) as f32).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn frame_count_for_one_second() {
        let x = AudioBuffer::zeros(16_000);
        let s = stft(&x).unwrap();
        assert_eq!(s.num_frames(), 101);
        assert_eq!(s.num_bins(), 161);
        assert!(s.data().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn sinusoid_peaks_at_bin_20() {
        let x: Vec<f32> = (0..16_000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16_000.0).sin() as f32)
            .collect();
        let s = stft(&AudioBuffer::new(x).unwrap()).unwrap();
        for t in 2..s.num_frames() - 2 {
            let frame = s.frame(t);
            let peak = (0..FREQ_BINS)
                .max_by(|&a, &b| frame[a].norm().total_cmp(&frame[b].norm()))
                .unwrap();
            assert_eq!(peak, 20, "frame {t}");
        }
    }

    #[test]
    fn squared_window_is_cola() {
        let w = sqrt_hann::<f64>();
        for n in 0..HOP {
            let s = w[n] * w[n] + w[n + HOP] * w[n + HOP];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x1 = random_signal(&mut rng, 16_000);
        let x2 = random_signal(&mut rng, 16_000);
        let s1 = stft_real(&x1).unwrap();
        let s2 = stft_real(&x2).unwrap();
        let y = istft_real(&s1, x1.len()).unwrap();
        let err = x1.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-6, "round trip error {err}");

        let mut sum = s1.clone();
        for (a, b) in sum.data_mut().iter_mut().zip(s2.data()) {
            *a += b;
        }
        let y = istft_real(&sum, x1.len()).unwrap();
        let err = (0..x1.len())
            .map(|i| (y[i] - (x1[i] + x2[i])).abs())
            .fold(0.0, f32::max);
        assert!(err < 1e-6, "linearity error {err}");
    }

    #[test]
    fn odd_lengths_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 159, 160, 161, 321, 1234] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = stft_real(&x).unwrap();
            assert_eq!(s.num_frames(), num_frames(n));
            let y = istft_real(&s, n).unwrap();
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "n={n}: {err}");
        }
    }

    #[test]
    fn stft_rejects_bad_input() {
        assert!(matches!(stft_real::<f32>(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            stft_real(&[0.0f32, f32::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(AudioBuffer::new(vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn istft_rejects_overlong_output() {
        let s = Spectrogram::<f32>::zeros(3);
        assert!(istft(&s, 320).is_ok());
        assert!(istft(&s, 321).is_err());
        assert!(istft(&s, 320).unwrap().samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn istft_vjp_matches_inner_product() {
        // <istft(S), g> == <S, istft_vjp(g)> with Re/Im as real coordinates,
        // for spectra whose DC/Nyquist imaginary parts are zero.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1000;
        let frames = num_frames(n);
        let mut s = Spectrogram::<f64>::zeros(frames);
        for (k, c) in s.data_mut().iter_mut().enumerate() {
            let f = k % FREQ_BINS;
            c.re = rng.random_range(-1.0..1.0);
            c.im = if f == 0 || f == FREQ_BINS - 1 { 0.0 } else { rng.random_range(-1.0..1.0) };
        }
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = istft_real(&s, n).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = istft_vjp(&g, frames);
        let rhs: f64 = s
            .data()
            .iter()
            .zip(adj.data())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn channel_average_cases() {
        let same = MultichannelBuffer::new(vec![vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap();
        assert_eq!(channel_average(&same).samples(), &[0.3, -0.2]);
        let cancel = MultichannelBuffer::new(vec![vec![1.0; 4], vec![-1.0; 4]]).unwrap();
        assert_eq!(channel_average(&cancel).samples(), &[0.0; 4]);
        let mean = MultichannelBuffer::new(vec![vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(channel_average(&mean).samples(), &[1.0, 1.0]);
        assert!(matches!(
            MultichannelBuffer::new(vec![vec![0.0; 3], vec![0.0; 2]]),
            Err(Error::LengthMismatch(_))
        ));
    }

    fn direct_convolve(x: &[f32], h: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0f64; x.len() + h.len() - 1];
        for (i, &a) in x.iter().enumerate() {
            for (j, &b) in h.iter().enumerate() {
                out[i + j] += a as f64 * b as f64;
            }
        }
        out
    }

    #[test]
    fn convolution_small_cases() {
        assert_eq!(fft_convolve(&[0.5, -1.0, 2.0], &[1.0]).unwrap(), vec![0.5, -1.0, 2.0]);
        let y = fft_convolve(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(y.len(), 3);
        for (a, b) in y.iter().zip([1.0, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(fft_convolve(&[], &[1.0]).is_err());
        assert!(fft_convolve(&[1.0], &[]).is_err());
    }

    #[test]
    fn convolution_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_signal(&mut rng, 1000);
        let h = random_signal(&mut rng, 257);
        let fast = fft_convolve(&x, &h).unwrap();
        let slow = direct_convolve(&x, &h);
        let scale = slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = fast
            .iter()
            .zip(&slow)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(err / scale < 1e-6, "relative error {}", err / scale);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn perfect_reconstruction(seed in any::<u64>(), n in 320usize..4000, amp in 0.01f32..20.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f32> = (0..n).map(|_| amp * rng.random_range(-1.0f32..1.0)).collect();
                let y = istft_real(&stft_real(&x).unwrap(), n).unwrap();
                let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
                prop_assert!(err < 1e-6 * amp.max(1.0));
            }

            #[test]
            fn stft_is_linear(seed in any::<u64>(), a in -3.0f32..3.0, b in -3.0f32..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x1 = random_signal(&mut rng, 800);
                let x2 = random_signal(&mut rng, 800);
                let mix: Vec<f32> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
                let s = stft_real(&mix).unwrap();
                let s1 = stft_real(&x1).unwrap();
                let s2 = stft_real(&x2).unwrap();
                for ((m, p), q) in s.data().iter().zip(s1.data()).zip(s2.data()) {
                    let expect = p * a + q * b;
                    prop_assert!((m - expect).norm() < 1e-5 * (1.0 + expect.norm()));
                }
            }
        }
    }
}
