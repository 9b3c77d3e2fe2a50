//! Frame-by-frame inference. Every convolution keeps its previous input
//! frame and every GRU group its hidden state, so feeding a clip one hop at
//! a time reproduces the whole-sequence forward pass.

use realfft::num_complex::Complex;

use super::config::{MaskMode, NUM_LEVELS};
use super::params::{CruseParams, Layer};
use crate::autodiff::kernels::{gru_cell, GruWeights, KF, KT, STRIDE_F};
use crate::dsp::{AudioBuffer, FramePlan, MultichannelBuffer, FREQ_BINS, HOP, WIN_LEN};
use crate::error::{Error, Result};

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn prelu(x: &mut [f32], slopes: &[f32], bins: usize) {
    for (c, row) in x.chunks_mut(bins).enumerate() {
        let a = slopes[c];
        for v in row.iter_mut() {
            if *v < 0.0 {
                *v *= a;
            }
        }
    }
}

struct EncLayer {
    cin: usize,
    cout: usize,
    fin: usize,
    fout: usize,
    /// `[cout][cin * 2 * 3]`, matching the patch layout.
    w: Vec<f32>,
    b: Vec<f32>,
    slopes: Vec<f32>,
}

impl EncLayer {
    fn new(l: &Layer, slopes: &[f32], fin: usize, fout: usize) -> Self {
        let s = l.w.shape();
        Self {
            cin: s[1],
            cout: s[0],
            fin,
            fout,
            w: l.w.data().to_vec(),
            b: l.b.data().to_vec(),
            slopes: slopes.to_vec(),
        }
    }

    fn step(&self, prev: &[f32], cur: &[f32], patches: &mut Vec<f32>, out: &mut [f32]) {
        let k = self.cin * KT * KF;
        patches.resize(self.fout * k, 0.0);
        for f in 0..self.fout {
            let patch = &mut patches[f * k..(f + 1) * k];
            for i in 0..self.cin {
                for (kt, src) in [prev, cur].into_iter().enumerate() {
                    let at = (i * KT + kt) * KF;
                    let from = i * self.fin + STRIDE_F * f;
                    patch[at..at + KF].copy_from_slice(&src[from..from + KF]);
                }
            }
        }
        for o in 0..self.cout {
            let w = &self.w[o * k..(o + 1) * k];
            for f in 0..self.fout {
                out[o * self.fout + f] = self.b[o] + dot(w, &patches[f * k..(f + 1) * k]);
            }
        }
        prelu(out, &self.slopes, self.fout);
    }
}

struct DecLayer {
    cin: usize,
    cout: usize,
    fin: usize,
    fout: usize,
    /// `[cin][kt][kf][cout]`.
    w: Vec<f32>,
    b: Vec<f32>,
    /// `None` for the output layer, which uses tanh.
    slopes: Option<Vec<f32>>,
}

impl DecLayer {
    fn new(l: &Layer, slopes: Option<&[f32]>, fin: usize, fout: usize) -> Self {
        let s = l.w.shape();
        let (cin, cout) = (s[0], s[1]);
        let src = l.w.data();
        let mut w = vec![0.0; src.len()];
        for i in 0..cin {
            for o in 0..cout {
                for kt in 0..KT {
                    for kf in 0..KF {
                        w[((i * KT + kt) * KF + kf) * cout + o] = src[((i * cout + o) * KT + kt) * KF + kf];
                    }
                }
            }
        }
        Self {
            cin,
            cout,
            fin,
            fout,
            w,
            b: l.b.data().to_vec(),
            slopes: slopes.map(<[f32]>::to_vec),
        }
    }

    fn step(&self, prev: &[f32], cur: &[f32], bin_major: &mut Vec<f32>, out: &mut [f32]) {
        let co = self.cout;
        bin_major.clear();
        bin_major.resize(self.fout * co, 0.0);
        for i in 0..self.cin {
            for (kt, src) in [prev, cur].into_iter().enumerate() {
                let row = &src[i * self.fin..(i + 1) * self.fin];
                for (f, &xv) in row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for kf in 0..KF {
                        let w = &self.w[((i * KT + kt) * KF + kf) * co..][..co];
                        let q = STRIDE_F * f + kf;
                        axpy(xv, w, &mut bin_major[q * co..(q + 1) * co]);
                    }
                }
            }
        }
        for o in 0..co {
            for q in 0..self.fout {
                out[o * self.fout + q] = self.b[o] + bin_major[q * co + o];
            }
        }
        match &self.slopes {
            Some(s) => prelu(out, s, self.fout),
            None => out.iter_mut().for_each(|v| *v = v.tanh()),
        }
    }
}

struct SkipLayer {
    c: usize,
    w: Vec<f32>,
    b: Vec<f32>,
}

impl SkipLayer {
    /// `out[o][p] += b[o] + sum_i w[o][i] x[i][p]`.
    fn add_into(&self, x: &[f32], bins: usize, out: &mut [f32]) {
        for o in 0..self.c {
            let row = &mut out[o * bins..(o + 1) * bins];
            row.iter_mut().for_each(|v| *v += self.b[o]);
            for i in 0..self.c {
                axpy(self.w[o * self.c + i], &x[i * bins..(i + 1) * bins], row);
            }
        }
    }
}

/// Network weights rearranged for single-frame evaluation.
pub struct FrameModel {
    mask: MaskMode,
    bins: [usize; NUM_LEVELS + 1],
    channels: [usize; NUM_LEVELS + 1],
    enc: Vec<EncLayer>,
    skip: Vec<SkipLayer>,
    dec: Vec<DecLayer>,
    gru: Vec<[Vec<f32>; 9]>,
    group: usize,
}

impl FrameModel {
    pub fn new(params: &CruseParams) -> Result<Self> {
        let config = &params.config;
        config.validate()?;
        let bins = config.bins();
        let enc = (0..NUM_LEVELS)
            .map(|l| EncLayer::new(&params.enc[l], params.enc_slopes[l].data(), bins[l], bins[l + 1]))
            .collect();
        let skip = params
            .skip
            .iter()
            .map(|s| SkipLayer {
                c: s.w.shape()[0],
                w: s.w.data().to_vec(),
                b: s.b.data().to_vec(),
            })
            .collect();
        let dec = (0..NUM_LEVELS)
            .map(|l| {
                let slopes = (l > 0).then(|| params.dec_slopes[l - 1].data());
                DecLayer::new(&params.dec[l], slopes, bins[l + 1], bins[l])
            })
            .collect();
        let gru = params
            .gru
            .iter()
            .map(|g| std::array::from_fn(|k| g[k].data().to_vec()))
            .collect();
        Ok(Self {
            mask: config.mask,
            bins,
            channels: config.channels(),
            enc,
            skip,
            dec,
            gru,
            group: config.gru_group_size(),
        })
    }

    pub fn new_state(&self) -> StreamState {
        let enc_prev = (0..NUM_LEVELS)
            .map(|l| vec![0.0; self.channels[l] * self.bins[l]])
            .collect();
        let dec_prev = (0..NUM_LEVELS)
            .map(|l| vec![0.0; self.channels[l + 1] * self.bins[l + 1]])
            .collect();
        StreamState {
            enc_prev,
            dec_prev,
            hidden: vec![vec![0.0; self.group]; self.gru.len()],
            scratch: Vec::new(),
        }
    }

    /// One network frame: `input` is `[4][161]`, `mask` receives `[2][161]`.
    pub fn step(&self, state: &mut StreamState, input: &[f32], mask: &mut [f32]) {
        match self.mask {
            MaskMode::Learned => {}
            MaskMode::Unit | MaskMode::Zero => {
                mask.fill(0.0);
                if self.mask == MaskMode::Unit {
                    mask[..FREQ_BINS].fill(1.0);
                }
                return;
            }
        }
        let mut enc_out: Vec<Vec<f32>> = Vec::with_capacity(NUM_LEVELS);
        let mut x = input.to_vec();
        for (l, layer) in self.enc.iter().enumerate() {
            let mut y = vec![0.0; self.channels[l + 1] * self.bins[l + 1]];
            layer.step(&state.enc_prev[l], &x, &mut state.scratch, &mut y);
            state.enc_prev[l] = x;
            x = y.clone();
            enc_out.push(y);
        }

        // Bottleneck: the [C, F] frame flattened channel-major is the feature vector.
        let mut d = vec![0.0; x.len()];
        for (k, g) in self.gru.iter().enumerate() {
            let w = GruWeights {
                w_z: &g[0],
                w_r: &g[1],
                w_n: &g[2],
                u_z: &g[3],
                u_r: &g[4],
                u_n: &g[5],
                b_z: &g[6],
                b_r: &g[7],
                b_n: &g[8],
            };
            let span = k * self.group..(k + 1) * self.group;
            gru_cell(&w, &x[span.clone()], &state.hidden[k], &mut d[span.clone()]);
            state.hidden[k].copy_from_slice(&d[span]);
        }

        for l in (0..NUM_LEVELS).rev() {
            self.skip[l].add_into(&enc_out[l], self.bins[l + 1], &mut d);
            let mut y = vec![0.0; self.dec[l].cout * self.bins[l]];
            self.dec[l].step(&state.dec_prev[l], &d, &mut state.scratch, &mut y);
            state.dec_prev[l] = d;
            d = y;
        }
        mask.copy_from_slice(&d);
    }
}

/// Per-stream recurrent state; one per independent audio stream.
pub struct StreamState {
    enc_prev: Vec<Vec<f32>>,
    dec_prev: Vec<Vec<f32>>,
    hidden: Vec<Vec<f32>>,
    scratch: Vec<f32>,
}

impl StreamState {
    pub fn reset(&mut self) {
        for v in self.enc_prev.iter_mut().chain(&mut self.dec_prev).chain(&mut self.hidden) {
            v.fill(0.0);
        }
    }
}

/// Stereo-in, mono-out streaming separator working on 160-sample hops.
/// Output lags input by one hop, the overlap of the synthesis window.
pub struct StreamingSeparator {
    model: FrameModel,
    state: StreamState,
    plan: FramePlan<f32>,
    prev: [Vec<f32>; 2],
    overlap: Vec<f32>,
    frames: usize,
    frame_buf: Vec<f32>,
    spectra: [Vec<Complex<f32>>; 3],
    features: Vec<f32>,
    mask: Vec<f32>,
    synth: Vec<f32>,
}

impl StreamingSeparator {
    pub fn new(params: &CruseParams) -> Result<Self> {
        let model = FrameModel::new(params)?;
        let state = model.new_state();
        Ok(Self {
            model,
            state,
            plan: FramePlan::new(),
            prev: [vec![0.0; HOP], vec![0.0; HOP]],
            overlap: vec![0.0; HOP],
            frames: 0,
            frame_buf: vec![0.0; WIN_LEN],
            spectra: std::array::from_fn(|_| vec![Complex::default(); FREQ_BINS]),
            features: vec![0.0; 4 * FREQ_BINS],
            mask: vec![0.0; 2 * FREQ_BINS],
            synth: vec![0.0; WIN_LEN],
        })
    }

    /// Clears all history so the next hop starts a new stream.
    pub fn reset(&mut self) {
        self.state.reset();
        self.prev.iter_mut().for_each(|p| p.fill(0.0));
        self.overlap.fill(0.0);
        self.frames = 0;
    }

    /// Consumes one hop per channel. From the second hop on, returns the
    /// finished output hop preceding it.
    pub fn process_hop(&mut self, left: &[f32], right: &[f32]) -> Result<Option<Vec<f32>>> {
        if left.len() != HOP || right.len() != HOP {
            return Err(Error::LengthMismatch(format!(
                "hops must be {HOP} samples, got {} and {}",
                left.len(),
                right.len()
            )));
        }
        let avg: Vec<f32> = left.iter().zip(right).map(|(&l, &r)| (l + r) * 0.5).collect();
        let prev_avg: Vec<f32> = self.prev[0].iter().zip(&self.prev[1]).map(|(&l, &r)| (l + r) * 0.5).collect();
        for (k, (p, cur)) in [(&self.prev[0], left), (&self.prev[1], right)].into_iter().enumerate() {
            self.frame_buf[..HOP].copy_from_slice(p);
            self.frame_buf[HOP..].copy_from_slice(cur);
            self.plan.analyze(&self.frame_buf, &mut self.spectra[k]);
        }
        self.frame_buf[..HOP].copy_from_slice(&prev_avg);
        self.frame_buf[HOP..].copy_from_slice(&avg);
        self.plan.analyze(&self.frame_buf, &mut self.spectra[2]);

        for (k, spec) in self.spectra[..2].iter().enumerate() {
            let base = 2 * k * FREQ_BINS;
            for (f, c) in spec.iter().enumerate() {
                self.features[base + f] = c.re;
                self.features[base + FREQ_BINS + f] = c.im;
            }
        }
        self.model.step(&mut self.state, &self.features, &mut self.mask);

        let (mr, mi) = self.mask.split_at(FREQ_BINS);
        let masked: Vec<Complex<f32>> = self.spectra[2]
            .iter()
            .enumerate()
            .map(|(f, y)| Complex::new(mr[f] * y.re - mi[f] * y.im, mr[f] * y.im + mi[f] * y.re))
            .collect();
        self.plan.synthesize(&masked, &mut self.synth);

        self.prev[0].copy_from_slice(left);
        self.prev[1].copy_from_slice(right);
        let done: Vec<f32> = self.overlap.iter().zip(&self.synth[..HOP]).map(|(&a, &b)| a + b).collect();
        self.overlap.copy_from_slice(&self.synth[HOP..]);
        self.frames += 1;
        Ok((self.frames > 1).then_some(done))
    }
}

/// Separates a whole clip by streaming it hop by hop; matches
/// [`super::separate`] up to rounding.
pub fn separate_streaming(sep: &mut StreamingSeparator, y: &MultichannelBuffer) -> Result<AudioBuffer> {
    if y.num_channels() != 2 {
        return Err(Error::InvalidArgument(format!(
            "separation needs a 2-channel input, got {} channel(s)",
            y.num_channels()
        )));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("streaming input"));
    }
    sep.reset();
    let n = y.len();
    let hops = n.div_ceil(HOP) + 1;
    let mut out = Vec::with_capacity(hops * HOP);
    let mut l = vec![0.0; HOP];
    let mut r = vec![0.0; HOP];
    for h in 0..hops {
        l.fill(0.0);
        r.fill(0.0);
        let start = (h * HOP).min(n);
        let end = ((h + 1) * HOP).min(n);
        l[..end - start].copy_from_slice(&y.channel(0)[start..end]);
        r[..end - start].copy_from_slice(&y.channel(1)[start..end]);
        if let Some(done) = sep.process_hop(&l, &r)? {
            out.extend_from_slice(&done);
        }
    }
    out.truncate(n);
    AudioBuffer::new(out)
}
