use rand::Rng;

use super::config::{CruseConfig, NUM_LEVELS, PRELU_INIT};
use crate::autodiff::kernels::{KF, KT};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// GRU tensor suffixes in storage order.
pub const GRU_PARTS: [&str; 9] = ["w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n"];

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

/// All network weights. Index `l - 1` holds level `l` for the encoder,
/// skip and decoder stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct CruseParams {
    pub config: CruseConfig,
    /// `w: [C_l, C_{l-1}, 2, 3]`.
    pub enc: Vec<Layer>,
    /// Per group: `[w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n]`.
    pub gru: Vec<[Tensor; 9]>,
    /// `w: [C_l, C_l]`, applied to encoder output `l`.
    pub skip: Vec<Layer>,
    /// Transposed convolutions, `w: [C_l, C_out, 2, 3]`.
    pub dec: Vec<Layer>,
    /// PReLU slopes after every encoder layer.
    pub enc_slopes: Vec<Tensor>,
    /// PReLU slopes after decoder layers 2..=4 (index `l - 2`).
    pub dec_slopes: Vec<Tensor>,
}

/// Name and shape of every stored tensor, in checkpoint order.
pub fn tensor_layout(config: &CruseConfig) -> Vec<(String, Vec<usize>)> {
    let c = config.channels();
    let g = config.gru_group_size();
    let mut out = Vec::new();
    for l in 1..=NUM_LEVELS {
        out.push((format!("enc{l}.w"), vec![c[l], c[l - 1], KT, KF]));
        out.push((format!("enc{l}.b"), vec![c[l]]));
    }
    for k in 1..=config.gru_groups {
        for (j, part) in GRU_PARTS.iter().enumerate() {
            let shape = if j < 6 { vec![g, g] } else { vec![g] };
            out.push((format!("gru{k}.{part}"), shape));
        }
    }
    for l in 1..=NUM_LEVELS {
        out.push((format!("skip{l}.w"), vec![c[l], c[l]]));
        out.push((format!("skip{l}.b"), vec![c[l]]));
    }
    for l in (1..=NUM_LEVELS).rev() {
        let cout = config.dec_out_channels(l);
        out.push((format!("dec{l}.w"), vec![c[l], cout, KT, KF]));
        out.push((format!("dec{l}.b"), vec![cout]));
    }
    for l in 1..=NUM_LEVELS {
        out.push((format!("enc{l}.prelu"), vec![c[l]]));
    }
    for l in (2..=NUM_LEVELS).rev() {
        out.push((format!("dec{l}.prelu"), vec![config.dec_out_channels(l)]));
    }
    out
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("finite")
}

fn filled(shape: Vec<usize>, v: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, vec![v; n]).expect("finite")
}

impl CruseParams {
    /// Weights uniform in ±sqrt(1/fan_in) (fan-in `C_in * 6` for both
    /// convolution kinds, `C` for 1x1), GRU matrices ±sqrt(1/H), zero biases,
    /// PReLU slopes 0.25.
    pub fn init<R: Rng + ?Sized>(config: &CruseConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        let g = config.gru_group_size() as f32;
        for (name, shape) in tensor_layout(config) {
            let t = if name.ends_with(".prelu") {
                filled(shape, PRELU_INIT)
            } else if name.ends_with(".b") || name.contains(".b_") {
                Tensor::zeros(shape)
            } else if name.starts_with("gru") {
                uniform(rng, shape, (1.0 / g).sqrt())
            } else if name.starts_with("skip") {
                let fan_in = shape[1] as f32;
                uniform(rng, shape, (1.0 / fan_in).sqrt())
            } else {
                let fan_in = (shape[if name.starts_with("enc") { 1 } else { 0 }] * KT * KF) as f32;
                uniform(rng, shape, (1.0 / fan_in).sqrt())
            };
            tensors.push(t);
        }
        Self::from_tensors(config.clone(), tensors)
    }

    /// Assembles parameters from tensors in [`tensor_layout`] order.
    pub fn from_tensors(config: CruseConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = tensor_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "configuration needs {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let layer = |next: &mut dyn FnMut() -> Tensor| Layer { w: next(), b: next() };
        let enc = (0..NUM_LEVELS).map(|_| layer(&mut next)).collect();
        let gru = (0..config.gru_groups)
            .map(|_| std::array::from_fn(|_| next()))
            .collect();
        let skip = (0..NUM_LEVELS).map(|_| layer(&mut next)).collect();
        let mut dec: Vec<Layer> = (0..NUM_LEVELS).map(|_| layer(&mut next)).collect();
        dec.reverse();
        let enc_slopes = (0..NUM_LEVELS).map(|_| next()).collect();
        let mut dec_slopes: Vec<Tensor> = (0..NUM_LEVELS - 1).map(|_| next()).collect();
        dec_slopes.reverse();
        Ok(Self {
            config,
            enc,
            gru,
            skip,
            dec,
            enc_slopes,
            dec_slopes,
        })
    }

    /// Tensors in [`tensor_layout`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.enc {
            out.extend([&l.w, &l.b]);
        }
        for g in &self.gru {
            out.extend(g.iter());
        }
        for l in &self.skip {
            out.extend([&l.w, &l.b]);
        }
        for l in self.dec.iter().rev() {
            out.extend([&l.w, &l.b]);
        }
        out.extend(self.enc_slopes.iter());
        out.extend(self.dec_slopes.iter().rev());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.enc {
            out.extend([&mut l.w, &mut l.b]);
        }
        for g in &mut self.gru {
            out.extend(g.iter_mut());
        }
        for l in &mut self.skip {
            out.extend([&mut l.w, &mut l.b]);
        }
        for l in self.dec.iter_mut().rev() {
            out.extend([&mut l.w, &mut l.b]);
        }
        out.extend(self.enc_slopes.iter_mut());
        out.extend(self.dec_slopes.iter_mut().rev());
        out
    }

    /// Weight count excluding PReLU slopes; equals [`super::count_params`].
    pub fn num_weights(&self) -> usize {
        let slopes: usize = self.enc_slopes.iter().chain(&self.dec_slopes).map(Tensor::len).sum();
        self.tensors().iter().map(|t| t.len()).sum::<usize>() - slopes
    }
}
