//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::dsp::{max_output_len, FREQ_BINS};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences. Inputs with more than `max_coords` entries are checked on a
/// seeded random subset. Returns the largest relative error.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        let n = t.len();
        if n <= max_coords {
            coords.extend((0..n).map(|c| (k, c)));
        } else {
            coords.extend(sample_indices(&mut rng, n, max_coords).into_iter().map(|c| (k, c)));
        }
    }
    gradient_check_at(f, inputs, eps, &coords)
}

/// Finite-difference comparison at one coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// False when the stencil `x ± eps` crosses a non-smooth point, where
    /// central differences do not estimate the derivative.
    pub smooth: bool,
}

impl CoordCheck {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Analytic and numeric derivatives at explicit `(input, element)`
/// coordinates.
pub fn compare_at<F>(f: F, inputs: &[Tensor<f64>], eps: f64, coords: &[(usize, usize)]) -> Result<Vec<CoordCheck>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if let Some(&(k, c)) = coords.iter().find(|&&(k, c)| inputs.get(k).is_none_or(|t| c >= t.len())) {
        return Err(Error::InvalidArgument(format!("gradient check coordinate ({k}, {c}) is out of range")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).data()[0], tape.activation_pattern()))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let pattern = tape.activation_pattern();

    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &(k, c) in coords {
        let orig = inputs[k].data()[c];
        probe[k].data_mut()[c] = orig + eps;
        let (up, up_pattern) = eval(&probe)?;
        probe[k].data_mut()[c] = orig - eps;
        let (down, down_pattern) = eval(&probe)?;
        probe[k].data_mut()[c] = orig;
        out.push(CoordCheck {
            input: k,
            index: c,
            analytic: grads.get(vars[k]).data()[c],
            numeric: (up - down) / (2.0 * eps),
            smooth: up_pattern == pattern && down_pattern == pattern,
        });
    }
    Ok(out)
}

/// Worst relative error over explicit `(input, element)` coordinates.
pub fn gradient_check_at<F>(f: F, inputs: &[Tensor<f64>], eps: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let checks = compare_at(f, inputs, eps, coords)?;
    Ok(checks.iter().map(CoordCheck::relative_error).fold(0.0, f64::max))
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("finite")
}

/// Values bounded away from zero so that kinks are not straddled by the probe.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

/// `sum(out * r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = normal(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// Finite-difference check of every tape primitive on small random inputs.
/// Returns `(op name, max relative error)` pairs.
pub fn check_primitives(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = rng.random::<u64>();
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor<f64>>,
                   f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let err = gradient_check(f, &inputs, DEFAULT_EPS, 60, ps)?;
        out.push((name, err));
        Ok(())
    };

    let a = normal(&mut rng, &[3, 4, 5]);
    let b = normal(&mut rng, &[3, 4, 5]);
    run("add", vec![a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, ps)
    })?;
    run("mul", vec![a.clone(), b.clone()], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, ps)
    })?;
    run("scale", vec![a.clone()], &|t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, ps)
    })?;
    run("sum", vec![a.clone()], &|t, v| {
        let s = t.sum(v[0]);
        Ok(t.tanh(s))
    })?;
    run("tanh", vec![a.clone()], &|t, v| {
        let y = t.tanh(v[0]);
        project(t, y, ps)
    })?;
    run("prelu", vec![off_zero(&mut rng, &[3, 4, 5]), normal(&mut rng, &[3])], &|t, v| {
        let y = t.prelu(v[0], v[1])?;
        project(t, y, ps)
    })?;
    run(
        "conv2d",
        vec![normal(&mut rng, &[3, 4, 11]), normal(&mut rng, &[4, 3, 2, 3]), normal(&mut rng, &[4])],
        &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            project(t, y, ps)
        },
    )?;
    for (name, fin, fout) in [("tconv2d", 5, 11), ("tconv2d_padded", 5, 12)] {
        run(
            name,
            vec![normal(&mut rng, &[3, 4, fin]), normal(&mut rng, &[3, 2, 2, 3]), normal(&mut rng, &[2])],
            &move |t, v| {
                let y = t.tconv2d(v[0], v[1], v[2], fout)?;
                project(t, y, ps)
            },
        )?;
    }
    run(
        "conv1x1",
        vec![normal(&mut rng, &[3, 4, 5]), normal(&mut rng, &[4, 3]), normal(&mut rng, &[4])],
        &|t, v| {
            let y = t.conv1x1(v[0], v[1], v[2])?;
            project(t, y, ps)
        },
    )?;
    run("frames_to_features", vec![a.clone()], &|t, v| {
        let y = t.frames_to_features(v[0])?;
        project(t, y, ps)
    })?;
    run("features_to_frames", vec![normal(&mut rng, &[4, 15])], &|t, v| {
        let y = t.features_to_frames(v[0], 3)?;
        project(t, y, ps)
    })?;
    run("slice_cols", vec![normal(&mut rng, &[4, 6])], &|t, v| {
        let y = t.slice_cols(v[0], 2, 3)?;
        project(t, y, ps)
    })?;
    run("concat_cols", vec![normal(&mut rng, &[4, 2]), normal(&mut rng, &[4, 3])], &|t, v| {
        let y = t.concat_cols(v)?;
        project(t, y, ps)
    })?;
    let (i, h) = (3, 5);
    let mut gru_inputs = vec![normal(&mut rng, &[4, i])];
    for shape in [[i, h], [i, h], [i, h], [h, h], [h, h], [h, h]] {
        let w = normal(&mut rng, &shape);
        gru_inputs.push(Tensor::new(shape.to_vec(), w.data().iter().map(|v| 0.5 * v).collect())?);
    }
    for _ in 0..3 {
        gru_inputs.push(normal(&mut rng, &[h]));
    }
    run("gru", gru_inputs, &|t, v| {
        let w: [Var; 9] = v[1..].try_into().expect("nine weights");
        let y = t.gru(v[0], w)?;
        project(t, y, ps)
    })?;
    run(
        "complex_mul",
        vec![normal(&mut rng, &[2, 3, 5]), normal(&mut rng, &[2, 3, 5])],
        &|t, v| {
            let y = t.complex_mul(v[0], v[1])?;
            project(t, y, ps)
        },
    )?;
    let frames = 5;
    run("istft", vec![normal(&mut rng, &[2, frames, FREQ_BINS])], &|t, v| {
        let y = t.istft(v[0], max_output_len(frames) - 37)?;
        project(t, y, ps)
    })?;
    let reference = normal(&mut rng, &[400]);
    let noise = normal(&mut rng, &[400]);
    let est: Vec<f64> = reference.data().iter().zip(noise.data()).map(|(r, n)| 0.7 * r + 0.4 * n + 0.1).collect();
    let ref_data = reference.into_data();
    run("si_sdr", vec![Tensor::new(vec![400], est)?], &|t, v| t.si_sdr(v[0], &ref_data))?;
    Ok(out)
}
