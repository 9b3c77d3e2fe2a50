//! Operation tape and reverse-mode accumulation.

use super::kernels::{self, ConvDims, GruGrads, GruStep, GruWeights};
use super::tensor::Tensor;
use crate::dsp::{istft_real, istft_vjp, max_output_len, Spectrogram, FREQ_BINS};
use crate::error::{Error, Result};
use crate::real::Real;
use realfft::num_complex::Complex;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// SI-SDR clamp used by the loss op, in dB.
pub const SI_SDR_CLAMP_DB: f64 = 60.0;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Tanh(Var),
    Prelu { x: Var, a: Var },
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    TConv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    Conv1x1 { x: Var, w: Var, b: Var },
    FramesToFeatures(Var),
    FeaturesToFrames { x: Var, channels: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gru { x: Var, weights: [Var; 9], steps: Vec<GruStep<T>> },
    ComplexMul(Var, Var),
    Istft { x: Var },
    SiSdr { est: Var, grad: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order, which is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, &[])
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = T::of(c);
        let out = self.map(x, |v| v * k);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    /// Per-channel PReLU on `[C, ...]` with slopes `a: [C]`.
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || self.shape(a) != [xs[0]] {
            return Err(shape_err("prelu", format!("input {xs:?}, slopes {:?}", self.shape(a))));
        }
        let per = self.value(x).len() / xs[0];
        let slopes = self.value(a).data();
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &u)| if u >= T::zero() { u } else { slopes[i / per] * u })
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(out, Op::Prelu { x, a }, &[x, a]))
    }

    fn conv_dims(&self, op: &str, x: Var, w: Var, b: Var, transposed: bool) -> Result<ConvDims> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 4 || ws[2] != kernels::KT || ws[3] != kernels::KF {
            return Err(shape_err(op, format!("input {xs:?}, weight {ws:?}")));
        }
        let (cin, cout) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[0] != cin || bs != [cout] {
            return Err(shape_err(op, format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        Ok(ConvDims {
            cin,
            cout,
            frames: xs[1],
            fin: xs[2],
            fout: 0,
        })
    }

    /// Causal-in-time, valid-in-frequency convolution, `w: [Cout, Cin, 2, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let mut dims = self.conv_dims("conv2d", x, w, b, false)?;
        dims.fout = kernels::conv_out_bins(dims.fin);
        if dims.fout == 0 {
            return Err(shape_err("conv2d", format!("{} bins is below the kernel width", dims.fin)));
        }
        let mut out = vec![T::zero(); dims.cout * dims.frames * dims.fout];
        kernels::conv2d(dims, self.value(x).data(), self.value(w).data(), self.value(b).data(), &mut out);
        let out = Tensor::from_parts(vec![dims.cout, dims.frames, dims.fout], out);
        Ok(self.push(out, Op::Conv2d { x, w, b, dims }, &[x, w, b]))
    }

    /// Transposed convolution, `w: [Cin, Cout, 2, 3]`, producing `out_bins`,
    /// which is the natural size or one more (a zero pad at the top edge).
    pub fn tconv2d(&mut self, x: Var, w: Var, b: Var, out_bins: usize) -> Result<Var> {
        let mut dims = self.conv_dims("tconv2d", x, w, b, true)?;
        let natural = kernels::tconv_natural_bins(dims.fin);
        if out_bins != natural && out_bins != natural + 1 {
            return Err(shape_err(
                "tconv2d",
                format!("{} input bins give {natural} or {} outputs, not {out_bins}", dims.fin, natural + 1),
            ));
        }
        dims.fout = out_bins;
        let mut out = vec![T::zero(); dims.cout * dims.frames * dims.fout];
        kernels::tconv2d(dims, self.value(x).data(), self.value(w).data(), self.value(b).data(), &mut out);
        let out = Tensor::from_parts(vec![dims.cout, dims.frames, dims.fout], out);
        Ok(self.push(out, Op::TConv2d { x, w, b, dims }, &[x, w, b]))
    }

    /// Channel mixing over `[Cin, ...]` with `w: [Cout, Cin]`, `b: [Cout]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.is_empty() || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(shape_err("conv1x1", format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (cin, cout) = (ws[1], ws[0]);
        let positions = self.value(x).len() / cin;
        let mut shape = xs.to_vec();
        shape[0] = cout;
        let mut out = vec![T::zero(); cout * positions];
        kernels::conv1x1(
            cin,
            cout,
            positions,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv1x1 { x, w, b }, &[x, w, b]))
    }

    /// `[C, T, F] -> [T, C*F]`, feature index `c*F + f`.
    pub fn frames_to_features(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(shape_err("frames_to_features", format!("{xs:?}")));
        }
        let (c, t, f) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * t * f];
        for ci in 0..c {
            for ti in 0..t {
                out[ti * c * f + ci * f..][..f].copy_from_slice(&src[(ci * t + ti) * f..][..f]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![t, c * f], out), Op::FramesToFeatures(x), &[x]))
    }

    /// Inverse of [`Tape::frames_to_features`].
    pub fn features_to_frames(&mut self, x: Var, channels: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || channels == 0 || !xs[1].is_multiple_of(channels) {
            return Err(shape_err("features_to_frames", format!("{xs:?} into {channels} channels")));
        }
        let (t, f) = (xs[0], xs[1] / channels);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for ci in 0..channels {
            for ti in 0..t {
                out[(ci * t + ti) * f..][..f].copy_from_slice(&src[ti * channels * f + ci * f..][..f]);
            }
        }
        let out = Tensor::from_parts(vec![channels, t, f], out);
        Ok(self.push(out, Op::FeaturesToFrames { x, channels }, &[x]))
    }

    /// Columns `start..start+len` of a `[T, D]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || start + len > xs[1] {
            return Err(shape_err("slice_cols", format!("{start}..{} of {xs:?}", start + len)));
        }
        let (t, d) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(t * len);
        for ti in 0..t {
            out.extend_from_slice(&src[ti * d + start..ti * d + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![t, len], out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let t = parts.first().map(|&p| self.shape(p)[0]).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.shape(p).len() != 2 || self.shape(p)[0] != t) {
            return Err(shape_err("concat_cols", "parts must be [T, D_i] with equal T".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(t * total);
        for ti in 0..t {
            for &p in parts {
                let d = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[ti * d..(ti + 1) * d]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![t, total], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// GRU over the rows of `x: [T, I]` from a zero state. `weights` are
    /// `[w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n]`. Returns all hidden states `[T, H]`.
    pub fn gru(&mut self, x: Var, weights: [Var; 9]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let h = self.shape(weights[6]).first().copied().unwrap_or(0);
        let i = xs.get(1).copied().unwrap_or(0);
        let expected = [
            vec![i, h],
            vec![i, h],
            vec![i, h],
            vec![h, h],
            vec![h, h],
            vec![h, h],
            vec![h],
            vec![h],
            vec![h],
        ];
        if xs.len() != 2 || h == 0 || weights.iter().zip(&expected).any(|(&w, e)| self.shape(w) != e.as_slice()) {
            return Err(shape_err("gru", format!("input {xs:?} does not match the weight shapes")));
        }
        let t = xs[0];
        let mut out = vec![T::zero(); t * h];
        let mut steps = Vec::with_capacity(t);
        {
            let w = self.gru_weights(&weights);
            let xd = self.value(x).data();
            let mut prev = vec![T::zero(); h];
            for ti in 0..t {
                let (_, rest) = out.split_at_mut(ti * h);
                let cur = &mut rest[..h];
                steps.push(kernels::gru_cell(&w, &xd[ti * i..(ti + 1) * i], &prev, cur));
                prev.copy_from_slice(cur);
            }
        }
        let mut inputs = vec![x];
        inputs.extend_from_slice(&weights);
        Ok(self.push(Tensor::from_parts(vec![t, h], out), Op::Gru { x, weights, steps }, &inputs))
    }

    fn gru_weights(&self, w: &[Var; 9]) -> GruWeights<'_, T> {
        let d = |k: usize| self.value(w[k]).data();
        GruWeights {
            w_z: d(0),
            w_r: d(1),
            w_n: d(2),
            u_z: d(3),
            u_r: d(4),
            u_n: d(5),
            b_z: d(6),
            b_r: d(7),
            b_n: d(8),
        }
    }

    /// Complex product of two `[2, ...]` tensors holding real and imaginary parts.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("complex_mul", a, b)?;
        if self.shape(a).first() != Some(&2) {
            return Err(shape_err("complex_mul", format!("{:?} has no re/im axis", self.shape(a))));
        }
        let half = self.value(a).len() / 2;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); 2 * half];
        for k in 0..half {
            let (ar, ai, br, bi) = (ad[k], ad[half + k], bd[k], bd[half + k]);
            out[k] = ar * br - ai * bi;
            out[half + k] = ar * bi + ai * br;
        }
        let out = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(out, Op::ComplexMul(a, b), &[a, b]))
    }

    /// Inverse STFT of a `[2, T, 161]` spectrogram to `out_len` samples.
    pub fn istft(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || xs[0] != 2 || xs[2] != FREQ_BINS {
            return Err(shape_err("istft", format!("{xs:?}, expected [2, T, {FREQ_BINS}]")));
        }
        let frames = xs[1];
        if out_len > max_output_len(frames) {
            return Err(shape_err("istft", format!("{out_len} samples from {frames} frames")));
        }
        let spec = to_spectrogram(self.value(x));
        let out = istft_real(&spec, out_len)?;
        Ok(self.push(Tensor::from_parts(vec![out_len], out), Op::Istft { x }, &[x]))
    }

    /// SI-SDR of `est` against a fixed reference, in dB, clamped to ±60.
    /// Both signals are mean-subtracted. The reference receives no gradient.
    pub fn si_sdr(&mut self, est: Var, reference: &[T]) -> Result<Var> {
        self.si_sdr_clamped(est, reference, SI_SDR_CLAMP_DB)
    }

    /// [`Tape::si_sdr`] with a caller-chosen clamp.
    pub fn si_sdr_clamped(&mut self, est: Var, reference: &[T], clamp_db: f64) -> Result<Var> {
        let e = self.value(est).data();
        if self.shape(est).len() != 1 || e.len() != reference.len() {
            return Err(shape_err(
                "si_sdr",
                format!("estimate {:?} vs reference of {}", self.shape(est), reference.len()),
            ));
        }
        let (value, grad) = si_sdr_with_grad(e, reference, clamp_db)?;
        Ok(self.push(Tensor::scalar(value), Op::SiSdr { est, grad }, &[est]))
    }

    /// Which side of every non-smooth point the recorded evaluation sits on:
    /// the sign of each PReLU input and whether each SI-SDR value was
    /// clamped. Two evaluations with equal patterns lie on the same smooth
    /// piece of the function.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Prelu { x, .. } => out.extend(self.value(*x).data().iter().map(|&u| u >= T::zero())),
                Op::SiSdr { grad, .. } => out.push(grad.iter().all(|&g| g == T::zero())),
                _ => {}
            }
        }
        out
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.vjp(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[i].is_none() {
                log::warn!("leaf {i} is disconnected from the loss; its gradient is zero");
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Leaf => Some(g.unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn vjp(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.needs(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |s| s.iter_mut().zip(gd).for_each(|(s, &g)| *s += g));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += gd[k] * vb[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += gd[k] * va[k];
                    }
                });
            }
            Op::Scale(x, c) => {
                let k = T::of(*c);
                acc(*x, &mut |s| s.iter_mut().zip(gd).for_each(|(s, &g)| *s += g * k));
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += gd[0])),
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += gd[k] * (T::one() - y[k] * y[k]);
                    }
                });
            }
            Op::Prelu { x, a } => {
                let xv = self.value(*x).data();
                let av = self.value(*a).data();
                let per = xv.len() / av.len();
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += if xv[k] >= T::zero() { gd[k] } else { av[k / per] * gd[k] };
                    }
                });
                acc(*a, &mut |s| {
                    for k in 0..xv.len() {
                        if xv[k] < T::zero() {
                            s[k / per] += gd[k] * xv[k];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, dims } | Op::TConv2d { x, w, b, dims } => {
                type Vjp<T> = fn(ConvDims, &[T], &[T], &[T], Option<&mut [T]>, Option<&mut [T]>, Option<&mut [T]>);
                let vjp: Vjp<T> = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_vjp::<T>
                } else {
                    kernels::tconv2d_vjp::<T>
                };
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |s| vjp(*dims, xv, wv, gd, Some(s), None, None));
                acc(*w, &mut |s| vjp(*dims, xv, wv, gd, None, Some(s), None));
                acc(*b, &mut |s| vjp(*dims, xv, wv, gd, None, None, Some(s)));
            }
            Op::Conv1x1 { x, w, b } => {
                let ws = self.shape(*w);
                let (cout, cin) = (ws[0], ws[1]);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let p = xv.len() / cin;
                acc(*x, &mut |s| {
                    for o in 0..cout {
                        for i in 0..cin {
                            let k = wv[o * cin + i];
                            for (sv, &g) in s[i * p..(i + 1) * p].iter_mut().zip(&gd[o * p..(o + 1) * p]) {
                                *sv += k * g;
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for o in 0..cout {
                        for i in 0..cin {
                            s[o * cin + i] += gd[o * p..(o + 1) * p]
                                .iter()
                                .zip(&xv[i * p..(i + 1) * p])
                                .map(|(&g, &xv)| g * xv)
                                .sum::<T>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for o in 0..cout {
                        s[o] += gd[o * p..(o + 1) * p].iter().copied().sum::<T>();
                    }
                });
            }
            Op::FramesToFeatures(x) => {
                let xs = self.shape(*x);
                let (c, t, f) = (xs[0], xs[1], xs[2]);
                acc(*x, &mut |s| {
                    for ci in 0..c {
                        for ti in 0..t {
                            let dst = &mut s[(ci * t + ti) * f..][..f];
                            for (d, &g) in dst.iter_mut().zip(&gd[ti * c * f + ci * f..][..f]) {
                                *d += g;
                            }
                        }
                    }
                });
            }
            Op::FeaturesToFrames { x, channels } => {
                let c = *channels;
                let (t, f) = (node.value.shape()[1], node.value.shape()[2]);
                acc(*x, &mut |s| {
                    for ci in 0..c {
                        for ti in 0..t {
                            let dst = &mut s[ti * c * f + ci * f..][..f];
                            for (d, &g) in dst.iter_mut().zip(&gd[(ci * t + ti) * f..][..f]) {
                                *d += g;
                            }
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let d = self.shape(*x)[1];
                let (t, len) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &mut |s| {
                    for ti in 0..t {
                        for k in 0..len {
                            s[ti * d + start + k] += gd[ti * len + k];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (t, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let d = self.shape(p)[1];
                    acc(p, &mut |s| {
                        for ti in 0..t {
                            for k in 0..d {
                                s[ti * d + k] += gd[ti * total + offset + k];
                            }
                        }
                    });
                    offset += d;
                }
            }
            Op::Gru { x, weights, steps } => {
                let (t, h) = (node.value.shape()[0], node.value.shape()[1]);
                let i = self.shape(*x)[1];
                let w = self.gru_weights(weights);
                let xv = self.value(*x).data();
                let hs = node.value.data();
                let mut wg = GruGrads::zeros(i, h);
                let mut gx = vec![T::zero(); t * i];
                let zero = vec![T::zero(); h];
                let mut dh_next = vec![T::zero(); h];
                for ti in (0..t).rev() {
                    let dh: Vec<T> = gd[ti * h..(ti + 1) * h].iter().zip(&dh_next).map(|(&a, &b)| a + b).collect();
                    let h_prev = if ti == 0 { &zero[..] } else { &hs[(ti - 1) * h..ti * h] };
                    dh_next = kernels::gru_cell_vjp(
                        &w,
                        &xv[ti * i..(ti + 1) * i],
                        h_prev,
                        &steps[ti],
                        &dh,
                        Some(&mut gx[ti * i..(ti + 1) * i]),
                        &mut wg,
                    );
                }
                acc(*x, &mut |s| s.iter_mut().zip(&gx).for_each(|(s, &g)| *s += g));
                let parts = [&wg.w_z, &wg.w_r, &wg.w_n, &wg.u_z, &wg.u_r, &wg.u_n, &wg.b_z, &wg.b_r, &wg.b_n];
                for (&v, part) in weights.iter().zip(parts) {
                    acc(v, &mut |s| s.iter_mut().zip(part.iter()).for_each(|(s, &g)| *s += g));
                }
            }
            Op::ComplexMul(a, b) => {
                let half = node.value.len() / 2;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // d(a*b)/da contracted with g is g * conj(b) in the re/im pairing.
                let contract = |other: &[T], s: &mut [T]| {
                    for k in 0..half {
                        let (gr, gi) = (gd[k], gd[half + k]);
                        let (or, oi) = (other[k], other[half + k]);
                        s[k] += gr * or + gi * oi;
                        s[half + k] += gi * or - gr * oi;
                    }
                };
                acc(*a, &mut |s| contract(bv, s));
                acc(*b, &mut |s| contract(av, s));
            }
            Op::Istft { x } => {
                let frames = self.shape(*x)[1];
                let spec = istft_vjp(gd, frames);
                acc(*x, &mut |s| {
                    let bins = frames * FREQ_BINS;
                    for (k, c) in spec.data().iter().enumerate() {
                        s[k] += c.re;
                        s[bins + k] += c.im;
                    }
                });
            }
            Op::SiSdr { est, grad } => {
                acc(*est, &mut |s| s.iter_mut().zip(grad).for_each(|(s, &d)| *s += gd[0] * d));
            }
        }
    }
}

/// Gradients of every leaf, indexed by the leaf's [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; panics for non-leaf nodes.
    pub fn get(&self, v: Var) -> &Tensor<T> {
        self.grads[v.0].as_ref().expect("gradients are kept for leaves only")
    }
}

/// `[2, T, F]` tensor to a complex spectrogram.
pub fn to_spectrogram<T: Real>(x: &Tensor<T>) -> Spectrogram<T> {
    let frames = x.shape()[1];
    let bins = frames * FREQ_BINS;
    let d = x.data();
    let data = (0..bins).map(|k| Complex::new(d[k], d[bins + k])).collect();
    Spectrogram::from_data(frames, data).expect("shape checked by caller")
}

/// Complex spectrogram to a `[2, T, F]` tensor.
pub fn from_spectrogram<T: Real>(s: &Spectrogram<T>) -> Tensor<T> {
    let mut data: Vec<T> = s.data().iter().map(|c| c.re).collect();
    data.extend(s.data().iter().map(|c| c.im));
    Tensor::from_parts(vec![2, s.num_frames(), FREQ_BINS], data)
}

/// SI-SDR value and its gradient with respect to the estimate.
fn si_sdr_with_grad<T: Real>(est: &[T], reference: &[T], clamp: f64) -> Result<(T, Vec<T>)> {
    let n = est.len();
    if n == 0 {
        return Err(Error::EmptyInput("si_sdr input"));
    }
    let mean = |x: &[T]| x.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
    let (me, mr) = (mean(est), mean(reference));
    let e: Vec<f64> = est.iter().map(|v| v.as_f64() - me).collect();
    let r: Vec<f64> = reference.iter().map(|v| v.as_f64() - mr).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::ZeroReference);
    }
    let er: f64 = e.iter().zip(&r).map(|(a, b)| a * b).sum();
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let p = er * er / rr;
    let d = ee - p;
    let raw = if p <= 0.0 {
        -clamp
    } else if d <= 0.0 {
        clamp
    } else {
        10.0 * (p / d).log10()
    };
    if raw.abs() >= clamp {
        return Ok((T::of(raw.clamp(-clamp, clamp)), vec![T::zero(); n]));
    }
    // dP = 2 alpha r, dE = 2 e; SDR = c (ln P - ln(E - P)).
    let c = 10.0 / std::f64::consts::LN_10;
    let alpha = er / rr;
    let mut grad: Vec<f64> = (0..n)
        .map(|k| {
            let dp = 2.0 * alpha * r[k];
            let de = 2.0 * e[k];
            c * (dp / p - (de - dp) / d)
        })
        .collect();
    let gm = grad.iter().sum::<f64>() / n as f64;
    grad.iter_mut().for_each(|g| *g -= gm);
    Ok((T::of(raw), grad.into_iter().map(T::of).collect()))
}

/// SI-SDR in dB (mean-subtracted, clamped to ±60).
pub fn si_sdr_db<T: Real>(est: &[T], reference: &[T]) -> Result<f64> {
    si_sdr_db_clamped(est, reference, SI_SDR_CLAMP_DB)
}

pub fn si_sdr_db_clamped<T: Real>(est: &[T], reference: &[T], clamp_db: f64) -> Result<f64> {
    if !(clamp_db > 0.0) {
        return Err(Error::InvalidArgument(format!("SI-SDR clamp must be positive, got {clamp_db}")));
    }
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    si_sdr_with_grad(est, reference, clamp_db).map(|(v, _)| v.as_f64())
}
