use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, SI_SDR_CLAMP_DB};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clamp_db: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            clamp_db: SI_SDR_CLAMP_DB,
        }
    }
}

impl TrainConfig {
    /// Checks field ranges. A zero learning rate is accepted so that a run
    /// can be replayed without moving the weights.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("train.{field}: {why}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be a finite non-negative number, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(field, format!("must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps", format!("must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.clamp_db > 0.0 && self.clamp_db.is_finite()) {
            return bad("clamp_db", format!("must be positive, got {}", self.clamp_db));
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay:
/// `w -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * w`.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut OptimState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[k].shape() {
            return Err(Error::Shape(format!(
                "parameter {k}: {:?} vs gradient {:?} vs moments {:?}",
                p.shape(),
                g.shape(),
                state.m[k].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = (b1 * *mi as f64 + (1.0 - b1) * gi as f64) as f32;
        }
        let v = state.v[k].data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            let gi = gi as f64;
            *vi = (b2 * *vi as f64 + (1.0 - b2) * gi * gi) as f32;
        }
        let (m, v) = (state.m[k].data(), state.v[k].data());
        for ((w, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi as f64 / c1;
            let v_hat = vi as f64 / c2;
            let wf = *w as f64;
            *w = (wf - config.lr * m_hat / (v_hat.sqrt() + config.eps) - config.lr * config.weight_decay * wf) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_hand_value() {
        let mut w = Tensor::new(vec![1], vec![1.0]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut state = OptimState::new(&[&w]);
        adamw_step(&mut [&mut w], &[g], &mut state, &TrainConfig::default()).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        let expected: f64 = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8)) - 0.001 * 2e-5;
        assert!((expected - 0.99899998).abs() < 1e-8);
        assert!((w.data()[0] as f64 - expected).abs() < 1e-7, "{}", w.data()[0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_weight_with_zero_gradient_stays() {
        let mut w = Tensor::zeros(vec![3]);
        let mut state = OptimState::new(&[&w]);
        for _ in 0..10 {
            adamw_step(&mut [&mut w], &[Tensor::zeros(vec![3])], &mut state, &TrainConfig::default()).unwrap();
        }
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut w = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
            let mut state = OptimState::new(&[&w]);
            for s in 0..20 {
                let g: Vec<f32> = w.data().iter().map(|v| v * 0.7 + s as f32 * 0.01).collect();
                adamw_step(&mut [&mut w], &[Tensor::new(vec![4], g).unwrap()], &mut state, &TrainConfig::default()).unwrap();
            }
            w
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = Tensor::zeros(vec![3]);
        let mut state = OptimState::new(&[&w]);
        let err = adamw_step(&mut [&mut w], &[Tensor::zeros(vec![2])], &mut state, &TrainConfig::default());
        assert!(matches!(err, Err(Error::Shape(_))));
        assert!(matches!(adamw_step(&mut [&mut w], &[], &mut state, &TrainConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cases = [
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { beta2: 0.0, ..Default::default() },
            TrainConfig { lr: -1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { clamp_db: 0.0, ..Default::default() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
