//! Raw forward and vector-Jacobian kernels on `[C, T, F]` slices.
//!
//! Convolutions use a (2, 3) kernel with stride (1, 2). Time is causal: kernel
//! row 0 reads the previous frame, row 1 the current one, and frame -1 is
//! zero. Frequency is unpadded.

use crate::real::Real;

pub const KT: usize = 2;
pub const KF: usize = 3;
pub const STRIDE_F: usize = 2;

/// Output bins of the strided frequency convolution.
pub fn conv_out_bins(f: usize) -> usize {
    if f < KF {
        0
    } else {
        (f - KF) / STRIDE_F + 1
    }
}

/// Natural output bins of the transposed convolution, before output padding.
pub fn tconv_natural_bins(f: usize) -> usize {
    if f == 0 {
        0
    } else {
        (f - 1) * STRIDE_F + KF
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub frames: usize,
    /// Input bins.
    pub fin: usize,
    /// Output bins.
    pub fout: usize,
}

/// `y[o,t,f] = b[o] + sum w[o,i,kt,kf] x[i,t+kt-1,2f+kf]`; `w` is `[cout, cin, 2, 3]`.
pub fn conv2d<T: Real>(d: ConvDims, x: &[T], w: &[T], b: &[T], y: &mut [T]) {
    let (tn, fin, fout) = (d.frames, d.fin, d.fout);
    for o in 0..d.cout {
        for t in 0..tn {
            let row = &mut y[(o * tn + t) * fout..][..fout];
            row.fill(b[o]);
            for i in 0..d.cin {
                for kt in 0..KT {
                    if t + kt == 0 {
                        continue;
                    }
                    let xrow = &x[(i * tn + t + kt - 1) * fin..][..fin];
                    for kf in 0..KF {
                        let wv = w[((o * d.cin + i) * KT + kt) * KF + kf];
                        for (f, yv) in row.iter_mut().enumerate() {
                            *yv += wv * xrow[STRIDE_F * f + kf];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d`]; any output slot may be skipped with `None`.
pub fn conv2d_vjp<T: Real>(
    d: ConvDims,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (tn, fin, fout) = (d.frames, d.fin, d.fout);
    for o in 0..d.cout {
        for t in 0..tn {
            let grow = &gy[(o * tn + t) * fout..][..fout];
            for i in 0..d.cin {
                for kt in 0..KT {
                    if t + kt == 0 {
                        continue;
                    }
                    let base = (i * tn + t + kt - 1) * fin;
                    for kf in 0..KF {
                        let widx = ((o * d.cin + i) * KT + kt) * KF + kf;
                        if let Some(gx) = gx.as_deref_mut() {
                            let wv = w[widx];
                            let gxrow = &mut gx[base..base + fin];
                            for (f, &g) in grow.iter().enumerate() {
                                gxrow[STRIDE_F * f + kf] += wv * g;
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            let xrow = &x[base..base + fin];
                            let mut acc = T::zero();
                            for (f, &g) in grow.iter().enumerate() {
                                acc += g * xrow[STRIDE_F * f + kf];
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for o in 0..d.cout {
            gb[o] += gy[o * tn * fout..(o + 1) * tn * fout].iter().copied().sum();
        }
    }
}

/// `y[o,t,2f+kf] += w[i,o,kt,kf] x[i,t+kt-1,f]`, plus bias everywhere;
/// `w` is `[cin, cout, 2, 3]`. Bins past the natural size receive only the bias.
pub fn tconv2d<T: Real>(d: ConvDims, x: &[T], w: &[T], b: &[T], y: &mut [T]) {
    let (tn, fin, fout) = (d.frames, d.fin, d.fout);
    for o in 0..d.cout {
        for t in 0..tn {
            let row = &mut y[(o * tn + t) * fout..][..fout];
            row.fill(b[o]);
            for i in 0..d.cin {
                for kt in 0..KT {
                    if t + kt == 0 {
                        continue;
                    }
                    let xrow = &x[(i * tn + t + kt - 1) * fin..][..fin];
                    for kf in 0..KF {
                        let wv = w[((i * d.cout + o) * KT + kt) * KF + kf];
                        for (f, &xv) in xrow.iter().enumerate() {
                            row[STRIDE_F * f + kf] += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

pub fn tconv2d_vjp<T: Real>(
    d: ConvDims,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (tn, fin, fout) = (d.frames, d.fin, d.fout);
    for o in 0..d.cout {
        for t in 0..tn {
            let grow = &gy[(o * tn + t) * fout..][..fout];
            for i in 0..d.cin {
                for kt in 0..KT {
                    if t + kt == 0 {
                        continue;
                    }
                    let base = (i * tn + t + kt - 1) * fin;
                    for kf in 0..KF {
                        let widx = ((i * d.cout + o) * KT + kt) * KF + kf;
                        if let Some(gx) = gx.as_deref_mut() {
                            let wv = w[widx];
                            for (f, gxv) in gx[base..base + fin].iter_mut().enumerate() {
                                *gxv += wv * grow[STRIDE_F * f + kf];
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            let xrow = &x[base..base + fin];
                            let mut acc = T::zero();
                            for (f, &xv) in xrow.iter().enumerate() {
                                acc += xv * grow[STRIDE_F * f + kf];
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for o in 0..d.cout {
            gb[o] += gy[o * tn * fout..(o + 1) * tn * fout].iter().copied().sum();
        }
    }
}

/// Channel mixing at every position: `y[o,p] = b[o] + sum_i w[o,i] x[i,p]`.
pub fn conv1x1<T: Real>(cin: usize, cout: usize, positions: usize, x: &[T], w: &[T], b: &[T], y: &mut [T]) {
    for o in 0..cout {
        let row = &mut y[o * positions..(o + 1) * positions];
        row.fill(b[o]);
        for i in 0..cin {
            let wv = w[o * cin + i];
            for (yv, &xv) in row.iter_mut().zip(&x[i * positions..(i + 1) * positions]) {
                *yv += wv * xv;
            }
        }
    }
}

/// Weights of one GRU cell. Input matrices are `[I, H]`, recurrent `[H, H]`,
/// both applied as row vector times matrix.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights<'a, T> {
    pub w_z: &'a [T],
    pub w_r: &'a [T],
    pub w_n: &'a [T],
    pub u_z: &'a [T],
    pub u_r: &'a [T],
    pub u_n: &'a [T],
    pub b_z: &'a [T],
    pub b_r: &'a [T],
    pub b_n: &'a [T],
}

/// Writes `out[h] += sum_i v[i] m[i, h]` for a `[len(v), H]` matrix.
#[inline]
fn vec_mat_acc<T: Real>(v: &[T], m: &[T], out: &mut [T]) {
    let h = out.len();
    for (i, &vi) in v.iter().enumerate() {
        if vi == T::zero() {
            continue;
        }
        for (o, &mv) in out.iter_mut().zip(&m[i * h..(i + 1) * h]) {
            *o += vi * mv;
        }
    }
}

/// Writes `out[i] += sum_h m[i, h] g[h]`.
#[inline]
fn mat_vec_acc<T: Real>(m: &[T], g: &[T], out: &mut [T]) {
    let h = g.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o += m[i * h..(i + 1) * h].iter().zip(g).map(|(&a, &b)| a * b).sum::<T>();
    }
}

#[inline]
fn outer_acc<T: Real>(v: &[T], g: &[T], out: &mut [T]) {
    let h = g.len();
    for (i, &vi) in v.iter().enumerate() {
        for (o, &gv) in out[i * h..(i + 1) * h].iter_mut().zip(g) {
            *o += vi * gv;
        }
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Gate activations of one step, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct GruStep<T> {
    pub z: Vec<T>,
    pub r: Vec<T>,
    pub n: Vec<T>,
    /// `h_prev U_n`, before the reset gate is applied.
    pub hu_n: Vec<T>,
}

/// One GRU step:
/// `z = s(xW_z + hU_z + b_z)`, `r = s(xW_r + hU_r + b_r)`,
/// `n = tanh(xW_n + r*(hU_n) + b_n)`, `h' = (1-z)*n + z*h`.
pub fn gru_cell<T: Real>(w: &GruWeights<'_, T>, x: &[T], h_prev: &[T], h_out: &mut [T]) -> GruStep<T> {
    let mut z = w.b_z.to_vec();
    let mut r = w.b_r.to_vec();
    let mut n = w.b_n.to_vec();
    let mut hu_n = vec![T::zero(); h_prev.len()];
    vec_mat_acc(x, w.w_z, &mut z);
    vec_mat_acc(h_prev, w.u_z, &mut z);
    vec_mat_acc(x, w.w_r, &mut r);
    vec_mat_acc(h_prev, w.u_r, &mut r);
    vec_mat_acc(x, w.w_n, &mut n);
    vec_mat_acc(h_prev, w.u_n, &mut hu_n);
    for k in 0..h_prev.len() {
        z[k] = sigmoid(z[k]);
        r[k] = sigmoid(r[k]);
        n[k] = (n[k] + r[k] * hu_n[k]).tanh();
        h_out[k] = (T::one() - z[k]) * n[k] + z[k] * h_prev[k];
    }
    GruStep { z, r, n, hu_n }
}

/// Gradient buffers matching [`GruWeights`].
#[derive(Clone, Debug)]
pub struct GruGrads<T> {
    pub w_z: Vec<T>,
    pub w_r: Vec<T>,
    pub w_n: Vec<T>,
    pub u_z: Vec<T>,
    pub u_r: Vec<T>,
    pub u_n: Vec<T>,
    pub b_z: Vec<T>,
    pub b_r: Vec<T>,
    pub b_n: Vec<T>,
}

impl<T: Real> GruGrads<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let ih = || vec![T::zero(); input * hidden];
        let hh = || vec![T::zero(); hidden * hidden];
        let h = || vec![T::zero(); hidden];
        Self {
            w_z: ih(),
            w_r: ih(),
            w_n: ih(),
            u_z: hh(),
            u_r: hh(),
            u_n: hh(),
            b_z: h(),
            b_r: h(),
            b_n: h(),
        }
    }
}

/// Backward through one step. `dh` is the gradient on `h'`; returns the
/// gradient on `h_prev` and accumulates into `gx` and `grads`.
pub fn gru_cell_vjp<T: Real>(
    w: &GruWeights<'_, T>,
    x: &[T],
    h_prev: &[T],
    step: &GruStep<T>,
    dh: &[T],
    gx: Option<&mut [T]>,
    grads: &mut GruGrads<T>,
) -> Vec<T> {
    let hn = h_prev.len();
    let mut dh_prev = vec![T::zero(); hn];
    let mut daz = vec![T::zero(); hn];
    let mut dar = vec![T::zero(); hn];
    let mut dan = vec![T::zero(); hn];
    let mut dhu = vec![T::zero(); hn];
    for k in 0..hn {
        let (z, r, n) = (step.z[k], step.r[k], step.n[k]);
        let dn = dh[k] * (T::one() - z);
        let dz = dh[k] * (h_prev[k] - n);
        dh_prev[k] = dh[k] * z;
        dan[k] = dn * (T::one() - n * n);
        let dr = dan[k] * step.hu_n[k];
        dhu[k] = dan[k] * r;
        daz[k] = dz * z * (T::one() - z);
        dar[k] = dr * r * (T::one() - r);
    }
    outer_acc(x, &daz, &mut grads.w_z);
    outer_acc(x, &dar, &mut grads.w_r);
    outer_acc(x, &dan, &mut grads.w_n);
    outer_acc(h_prev, &daz, &mut grads.u_z);
    outer_acc(h_prev, &dar, &mut grads.u_r);
    outer_acc(h_prev, &dhu, &mut grads.u_n);
    for k in 0..hn {
        grads.b_z[k] += daz[k];
        grads.b_r[k] += dar[k];
        grads.b_n[k] += dan[k];
    }
    if let Some(gx) = gx {
        mat_vec_acc(w.w_z, &daz, gx);
        mat_vec_acc(w.w_r, &dar, gx);
        mat_vec_acc(w.w_n, &dan, gx);
    }
    mat_vec_acc(w.u_z, &daz, &mut dh_prev);
    mat_vec_acc(w.u_r, &dar, &mut dh_prev);
    mat_vec_acc(w.u_n, &dhu, &mut dh_prev);
    dh_prev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_chain() {
        let chain: Vec<usize> = std::iter::successors(Some(161), |&f| Some(conv_out_bins(f))).take(5).collect();
        assert_eq!(chain, [161, 80, 39, 19, 9]);
        assert_eq!(tconv_natural_bins(9), 19);
        assert_eq!(tconv_natural_bins(19), 39);
        assert_eq!(tconv_natural_bins(39), 79);
        assert_eq!(tconv_natural_bins(80), 161);
    }

    #[test]
    fn hand_convolution() {
        // One channel, 3 frames x 5 bins, values 1..=15.
        let x: Vec<f64> = (1..=15).map(f64::from).collect();
        let w = [1.0, 0.0, -1.0, 0.5, 2.0, 0.5];
        let d = ConvDims {
            cin: 1,
            cout: 1,
            frames: 3,
            fin: 5,
            fout: 2,
        };
        let mut y = vec![0.0; 6];
        conv2d(d, &x, &w, &[0.25], &mut y);
        // t=0: only the current row: 0.5*x0 + 2*x1 + 0.5*x2 at offsets 0 and 2.
        // t>0 adds x_prev[f0] - x_prev[f0+2].
        let expected = [
            0.25 + 0.5 * 1.0 + 2.0 * 2.0 + 0.5 * 3.0,
            0.25 + 0.5 * 3.0 + 2.0 * 4.0 + 0.5 * 5.0,
            0.25 + (1.0 - 3.0) + 0.5 * 6.0 + 2.0 * 7.0 + 0.5 * 8.0,
            0.25 + (3.0 - 5.0) + 0.5 * 8.0 + 2.0 * 9.0 + 0.5 * 10.0,
            0.25 + (6.0 - 8.0) + 0.5 * 11.0 + 2.0 * 12.0 + 0.5 * 13.0,
            0.25 + (8.0 - 10.0) + 0.5 * 13.0 + 2.0 * 14.0 + 0.5 * 15.0,
        ];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{y:?}");
        }
    }

    #[test]
    fn delta_kernel_crops_and_subsamples() {
        let x: Vec<f64> = (0..2 * 9).map(|v| v as f64).collect();
        let w = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let d = ConvDims {
            cin: 1,
            cout: 1,
            frames: 2,
            fin: 9,
            fout: 4,
        };
        let mut y = vec![0.0; 8];
        conv2d(d, &x, &w, &[0.0], &mut y);
        assert_eq!(y, [1.0, 3.0, 5.0, 7.0, 10.0, 12.0, 14.0, 16.0]);
    }

    #[test]
    fn tconv_zero_input_gives_bias() {
        let d = ConvDims {
            cin: 2,
            cout: 3,
            frames: 4,
            fin: 39,
            fout: 80,
        };
        let w: Vec<f64> = (0..2 * 3 * 6).map(|i| (i as f64).sin()).collect();
        let mut y = vec![9.0; 3 * 4 * 80];
        tconv2d(d, &vec![0.0; 2 * 4 * 39], &w, &[0.5, -1.0, 2.0], &mut y);
        for o in 0..3 {
            assert!(y[o * 320..(o + 1) * 320].iter().all(|&v| v == [0.5, -1.0, 2.0][o]));
        }
    }

    #[test]
    fn gru_zero_fixed_point() {
        let zeros = vec![0.0f64; 4];
        let w = GruWeights {
            w_z: &zeros,
            w_r: &zeros,
            w_n: &zeros,
            u_z: &zeros,
            u_r: &zeros,
            u_n: &zeros,
            b_z: &zeros[..2],
            b_r: &zeros[..2],
            b_n: &zeros[..2],
        };
        let mut h = [1.0; 2];
        let step = gru_cell(&w, &[0.3, -0.2], &[0.0, 0.0], &mut h);
        assert_eq!(h, [0.0, 0.0]);
        assert_eq!(step.z, [0.5, 0.5]);
        assert_eq!(step.n, [0.0, 0.0]);
    }

    #[test]
    fn gru_hand_computation() {
        // I = H = 2; matrices are row-major [in, hidden].
        let w_z = [0.1, 0.2, 0.3, 0.4];
        let w_r = [-0.1, 0.0, 0.2, 0.1];
        let w_n = [0.5, -0.5, 0.25, 0.75];
        let u_z = [0.2, 0.0, 0.0, 0.2];
        let u_r = [0.1, 0.1, 0.1, 0.1];
        let u_n = [0.3, -0.2, 0.1, 0.4];
        let b_z = [0.0, 0.1];
        let b_r = [0.05, 0.0];
        let b_n = [0.0, -0.1];
        let w = GruWeights {
            w_z: &w_z,
            w_r: &w_r,
            w_n: &w_n,
            u_z: &u_z,
            u_r: &u_r,
            u_n: &u_n,
            b_z: &b_z,
            b_r: &b_r,
            b_n: &b_n,
        };
        let x = [1.0, 2.0];
        let h = [0.5, -0.5];
        let mut out = [0.0; 2];
        gru_cell(&w, &x, &h, &mut out);

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // z pre-activations: x W_z = [0.1 + 0.6, 0.2 + 0.8]; h U_z = [0.1, -0.1]
        let z = [sig(0.7 + 0.1 + 0.0), sig(1.0 - 0.1 + 0.1)];
        // r: x W_r = [-0.1 + 0.4, 0.0 + 0.2]; h U_r = [0.0, 0.0]
        let r = [sig(0.3 + 0.05), sig(0.2)];
        // n: x W_n = [0.5 + 0.5, -0.5 + 1.5]; h U_n = [0.15 - 0.05, -0.1 - 0.2]
        let n = [(1.0 + r[0] * 0.1).tanh(), (1.0 + r[1] * -0.3 - 0.1).tanh()];
        let expected = [(1.0 - z[0]) * n[0] + z[0] * 0.5, (1.0 - z[1]) * n[1] + z[1] * -0.5];
        for k in 0..2 {
            assert!((out[k] - expected[k]).abs() < 1e-6, "{out:?} vs {expected:?}");
        }
    }
}
