//! Parameter updates and learning-rate schedules.
//!
//! [`SgdConfig`] follows the epoch-milestone protocol (0.05, ×0.1 at epochs
//! 150/180/210, weight decay 5e-4). [`AdamConfig`] uses bias-corrected Adam
//! with decoupled weight decay and a linear warmup followed by linear decay
//! to zero; its defaults are ε = 1e-6, β₁ = 0.9, β₂ = 0.999, weight decay
//! 1e-4 and warmup fraction 0.1.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dense, GradientTape, Mlp};
use crate::scalar::Scalar;

pub trait LrSchedule<F> {
    /// Learning rate at an epoch (SGD) or optimizer step (Adam).
    fn lr_at(&self, t: usize) -> F;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[serde(bound(deserialize = "F: Scalar + Deserialize<'de>"))]
pub struct SgdConfig<F> {
    pub lr: F,
    pub momentum: F,
    pub weight_decay: F,
    pub milestones: Vec<usize>,
    pub decay_factor: F,
}

impl<F: Scalar> Default for SgdConfig<F> {
    fn default() -> Self {
        Self {
            lr: F::of(0.05),
            momentum: F::of(0.9),
            weight_decay: F::of(5e-4),
            milestones: vec![150, 180, 210],
            decay_factor: F::of(0.1),
        }
    }
}

impl<F: Scalar> SgdConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > F::zero()) {
            return Err(Error::Config("sgd lr must be positive".into()));
        }
        if !(self.momentum >= F::zero() && self.momentum < F::one()) {
            return Err(Error::Config("sgd momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= F::zero()) {
            return Err(Error::Config("sgd weight_decay must be nonnegative".into()));
        }
        if !(self.decay_factor > F::zero() && self.decay_factor <= F::one()) {
            return Err(Error::Config("sgd decay_factor must lie in (0, 1]".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sgd milestones must be strictly increasing".into()));
        }
        Ok(())
    }
}

impl<F: Scalar> LrSchedule<F> for SgdConfig<F> {
    fn lr_at(&self, epoch: usize) -> F {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        // Dividing by the reciprocal keeps decimal factors such as 0.1 exact:
        // 0.05 / 10 == 0.005 whereas 0.05 * 0.1 == 0.005000000000000001.
        let inverse = F::one() / self.decay_factor;
        (0..passed).fold(self.lr, |lr, _| lr / inverse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[serde(bound(deserialize = "F: Scalar + Deserialize<'de>"))]
pub struct AdamConfig<F> {
    pub peak_lr: F,
    pub eps: F,
    pub beta1: F,
    pub beta2: F,
    pub weight_decay: F,
    pub warmup_fraction: F,
    pub total_steps: usize,
    pub decay: LrDecay,
    /// Apply weight decay directly to the weights rather than through the moments.
    pub decoupled_weight_decay: bool,
}

impl<F: Scalar> Default for AdamConfig<F> {
    fn default() -> Self {
        Self {
            peak_lr: F::of(1e-2),
            eps: F::of(1e-6),
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            weight_decay: F::of(1e-4),
            warmup_fraction: F::of(0.1),
            total_steps: 1000,
            decay: LrDecay::Linear,
            decoupled_weight_decay: true,
        }
    }
}

impl<F: Scalar> AdamConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > F::zero()) || !(self.eps > F::zero()) {
            return Err(Error::Config("adam peak_lr and eps must be positive".into()));
        }
        let unit = |b: F| b >= F::zero() && b < F::one();
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= F::zero()) {
            return Err(Error::Config("adam weight_decay must be nonnegative".into()));
        }
        if !unit(self.warmup_fraction) {
            return Err(Error::Config("adam warmup_fraction must lie in [0, 1)".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("adam total_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> F {
        self.warmup_fraction * F::of(self.total_steps as f64)
    }
}

impl<F: Scalar> LrSchedule<F> for AdamConfig<F> {
    fn lr_at(&self, step: usize) -> F {
        let t = F::of(step as f64);
        let total = F::of(self.total_steps as f64);
        let warmup = self.warmup_steps();
        if t < warmup {
            self.peak_lr * t / warmup
        } else if t >= total {
            F::zero()
        } else {
            match self.decay {
                LrDecay::Linear => self.peak_lr * (total - t) / (total - warmup),
            }
        }
    }
}

/// Moment buffers plus step and epoch counters for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    /// Velocity (SGD) or first moment (Adam).
    pub first: Vec<Dense<F>>,
    /// Second moment (Adam only).
    pub second: Vec<Dense<F>>,
    step: usize,
    pub epoch: usize,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(model: &Mlp<F>) -> Self {
        let zeros = || {
            model
                .layers()
                .iter()
                .map(|l| Dense::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect::<Vec<_>>()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
            epoch: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

fn check_shapes<F: Scalar>(model: &Mlp<F>, tape: &GradientTape<F>, state: &OptimizerState<F>) -> Result<()> {
    if !tape.is_congruent(model) {
        return Err(Error::Shape("gradient tape does not match model".into()));
    }
    let congruent = |bufs: &[Dense<F>]| {
        bufs.len() == model.layers().len()
            && bufs
                .iter()
                .zip(model.layers())
                .all(|(b, l)| b.weight.dim() == l.weight.dim() && b.bias.len() == l.bias.len())
    };
    if !congruent(&state.first) || !congruent(&state.second) {
        return Err(Error::Shape("optimizer state does not match model".into()));
    }
    Ok(())
}

/// `v ← μ·v + (g + λ·w)`, `w ← w − lr_epoch·v` (plain gradient when μ = 0).
pub fn sgd_step<F: Scalar>(
    model: &mut Mlp<F>,
    tape: &GradientTape<F>,
    state: &mut OptimizerState<F>,
    cfg: &SgdConfig<F>,
) -> Result<()> {
    check_shapes(model, tape, state)?;
    let lr = cfg.lr_at(state.epoch);
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    let update = |w: &mut F, &g: &F, v: &mut F| {
        let g = g + wd * *w;
        let dir = if mu > F::zero() {
            *v = mu * *v + g;
            *v
        } else {
            g
        };
        *w -= lr * dir;
    };
    for ((layer, grad), vel) in model.layers_mut().iter_mut().zip(&tape.layers).zip(&mut state.first) {
        Zip::from(&mut layer.weight)
            .and(&grad.weight)
            .and(&mut vel.weight)
            .for_each(update);
        Zip::from(&mut layer.bias)
            .and(&grad.bias)
            .and(&mut vel.bias)
            .for_each(update);
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam at learning rate `lr_at(step)`, step counted from zero.
pub fn adam_step<F: Scalar>(
    model: &mut Mlp<F>,
    tape: &GradientTape<F>,
    state: &mut OptimizerState<F>,
    cfg: &AdamConfig<F>,
) -> Result<()> {
    check_shapes(model, tape, state)?;
    let lr = cfg.lr_at(state.step);
    let t = (state.step + 1) as i32;
    let (b1, b2, eps, wd) = (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let c1 = F::one() - b1.powi(t);
    let c2 = F::one() - b2.powi(t);
    let decoupled = cfg.decoupled_weight_decay;
    let update = |w: &mut F, &g: &F, m: &mut F, v: &mut F| {
        let g = if decoupled { g } else { g + wd * *w };
        *m = b1 * *m + (F::one() - b1) * g;
        *v = b2 * *v + (F::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        let mut delta = m_hat / (v_hat.sqrt() + eps);
        if decoupled {
            delta += wd * *w;
        }
        *w -= lr * delta;
    };
    for (((layer, grad), m), v) in model
        .layers_mut()
        .iter_mut()
        .zip(&tape.layers)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        Zip::from(&mut layer.weight)
            .and(&grad.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(update);
        Zip::from(&mut layer.bias)
            .and(&grad.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(update);
    }
    state.step += 1;
    Ok(())
}

/// Either optimizer, as selected in an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[serde(bound(deserialize = "F: Scalar + Deserialize<'de>"))]
pub enum OptimizerConfig<F> {
    Sgd(SgdConfig<F>),
    Adam(AdamConfig<F>),
}

impl<F: Scalar> OptimizerConfig<F> {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Sgd(c) => c.validate(),
            Self::Adam(c) => c.validate(),
        }
    }

    pub fn step(&self, model: &mut Mlp<F>, tape: &GradientTape<F>, state: &mut OptimizerState<F>) -> Result<()> {
        match self {
            Self::Sgd(c) => sgd_step(model, tape, state, c),
            Self::Adam(c) => adam_step(model, tape, state, c),
        }
    }

    /// Fits step-based schedules to a run of `total_steps` optimizer steps.
    pub fn with_total_steps(&self, total_steps: usize) -> Self {
        match self {
            Self::Adam(c) => Self::Adam(AdamConfig {
                total_steps: total_steps.max(1),
                ..c.clone()
            }),
            other => other.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};

    fn scalar_model(w: f64) -> Mlp<f64> {
        Mlp::from_layers(
            Activation::Relu,
            vec![Dense {
                weight: array![[w]],
                bias: Array1::zeros(1),
            }],
        )
        .unwrap()
    }

    fn scalar_tape(g: f64) -> GradientTape<f64> {
        GradientTape {
            layers: vec![Dense {
                weight: array![[g]],
                bias: Array1::zeros(1),
            }],
        }
    }

    #[test]
    fn sgd_single_step() {
        let mut m = scalar_model(1.0);
        let mut st = OptimizerState::new(&m);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        sgd_step(&mut m, &scalar_tape(0.5), &mut st, &cfg).unwrap();
        assert_eq!(m.layers()[0].weight[[0, 0]], 0.95);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut m = scalar_model(1.0);
        let mut st = OptimizerState::new(&m);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            ..Default::default()
        };
        sgd_step(&mut m, &scalar_tape(1.0), &mut st, &cfg).unwrap();
        sgd_step(&mut m, &scalar_tape(1.0), &mut st, &cfg).unwrap();
        // v1 = 1, v2 = 1.9
        assert_abs_diff_eq!(m.layers()[0].weight[[0, 0]], 1.0 - 0.1 - 0.19, epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let mut m = Mlp::<f64>::init(&[3, 4, 2], Activation::Tanh, 4).unwrap();
        let before = m.clone();
        let tape = GradientTape::zeros_like(&m);
        let mut st = OptimizerState::new(&m);
        let sgd = SgdConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let adam = AdamConfig {
            weight_decay: 0.0,
            total_steps: 50,
            ..Default::default()
        };
        for _ in 0..20 {
            sgd_step(&mut m, &tape, &mut st, &sgd).unwrap();
            adam_step(&mut m, &tape, &mut st, &adam).unwrap();
        }
        assert_eq!(m, before);
    }

    #[test]
    fn milestone_schedule() {
        let cfg = SgdConfig::<f64>::default();
        assert_eq!(cfg.lr_at(0), 0.05);
        assert_eq!(cfg.lr_at(149), 0.05);
        assert_eq!(cfg.lr_at(150), 0.005);
        assert_eq!(cfg.lr_at(200), 0.0005);
        assert_eq!(cfg.lr_at(230), 0.00005);
    }

    #[test]
    fn warmup_linear_decay_schedule() {
        let cfg = AdamConfig::<f64> {
            peak_lr: 2e-3,
            total_steps: 1000,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert_eq!(cfg.lr_at(100), 2e-3);
        assert_eq!(cfg.lr_at(1000), 0.0);
        assert_eq!(cfg.lr_at(5000), 0.0);
        assert_abs_diff_eq!(cfg.lr_at(550), 1e-3, epsilon = 1e-18);
        assert_abs_diff_eq!(cfg.lr_at(50), 1e-3, epsilon = 1e-18);
    }

    #[test]
    fn adam_single_step_hand_computed() {
        let mut m = scalar_model(0.5);
        let mut st = OptimizerState::new(&m);
        let cfg = AdamConfig {
            peak_lr: 0.01,
            warmup_fraction: 0.0,
            weight_decay: 0.0,
            total_steps: 10,
            ..Default::default()
        };
        adam_step(&mut m, &scalar_tape(1.0), &mut st, &cfg).unwrap();
        // m̂ = 0.1/0.1 = 1, v̂ = 0.001/0.001 = 1, delta = 1/(1 + 1e-6).
        let expected = 0.5 - 0.01 / (1.0 + 1e-6);
        assert_abs_diff_eq!(m.layers()[0].weight[[0, 0]], expected, epsilon = 1e-15);
        assert!(st.second[0].weight[[0, 0]] >= 0.0);
    }

    #[test]
    fn adam_decoupled_decay_acts_on_weights() {
        let mut m = scalar_model(2.0);
        let mut st = OptimizerState::new(&m);
        let cfg = AdamConfig {
            peak_lr: 0.1,
            warmup_fraction: 0.0,
            weight_decay: 0.5,
            total_steps: 10,
            ..Default::default()
        };
        adam_step(&mut m, &scalar_tape(0.0), &mut st, &cfg).unwrap();
        assert_abs_diff_eq!(m.layers()[0].weight[[0, 0]], 2.0 - 0.1 * 0.5 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn validation() {
        let bad = SgdConfig::<f64> {
            milestones: vec![10, 10],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AdamConfig::<f64> {
            total_steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let short = AdamConfig::<f64> {
            total_steps: 5,
            ..Default::default()
        };
        short.validate().unwrap();
        assert_eq!(short.lr_at(0), 0.0);
        assert!((1..5).all(|t| short.lr_at(t) > 0.0 && short.lr_at(t).is_finite()));
        assert!(AdamConfig::<f64>::default().validate().is_ok());
        assert!(SgdConfig::<f64>::default().validate().is_ok());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut m = scalar_model(1.0);
        let other = Mlp::<f64>::init(&[2, 2], Activation::Relu, 0).unwrap();
        let mut st = OptimizerState::new(&m);
        let tape = GradientTape::zeros_like(&other);
        assert!(matches!(
            sgd_step(&mut m, &tape, &mut st, &SgdConfig::default()),
            Err(Error::Shape(_))
        ));
    }
}
