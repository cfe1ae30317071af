//! AdamW with linear warmup.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::swiftkv::StudentParameters;

use super::tape::Gradients;
use super::train::{LossRecord, TrainConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// A set of named trainable tensors.
pub trait ParamSet {
    fn visit_trainable(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));
}

impl ParamSet for StudentParameters {
    fn visit_trainable(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.visit_trainable_mut(f)
    }
}

impl ParamSet for BTreeMap<String, Matrix> {
    fn visit_trainable(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (name, m) in self.iter_mut() {
            f(name, m);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Steps the schedule is laid out over.
    pub total_steps: usize,
    pub first_moment: BTreeMap<String, Matrix>,
    pub second_moment: BTreeMap<String, Matrix>,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    /// Zeroed moments for every trainable tensor of `params`.
    pub fn new<P: ParamSet + ?Sized>(params: &mut P, total_steps: usize) -> Self {
        let mut state = Self { total_steps, ..Self::default() };
        params.visit_trainable(&mut |name, m| {
            let z = Matrix::zeros(m.rows(), m.cols(), m.precision());
            state.first_moment.insert(name.to_string(), z.clone());
            state.second_moment.insert(name.to_string(), z);
        });
        state
    }
}

/// Rate for 0-based `step`: linear ramp over `ceil(warmup_fraction · total)` steps, then flat.
pub fn learning_rate(config: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let warmup = (config.warmup_fraction * total_steps as f64).ceil() as usize;
    if step < warmup {
        config.learning_rate * (step + 1) as f64 / warmup as f64
    } else {
        config.learning_rate
    }
}

/// One AdamW update of every trainable tensor. Returns the rate used.
pub fn optimizer_step<P: ParamSet + ?Sized>(
    state: &mut TrainState,
    params: &mut P,
    grads: &Gradients,
    config: &TrainConfig,
) -> Result<f64> {
    for (name, m) in &state.first_moment {
        match grads.get(name) {
            None => return Err(Error::Config(format!("no gradient for trainable `{name}`"))),
            Some(g) if g.shape() != m.shape() => {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("{name}: grad {:?} vs param {:?}", g.shape(), m.shape()),
                ))
            }
            Some(_) => {}
        }
    }
    let lr = learning_rate(config, state.step, state.total_steps);
    let t = (state.step + 1) as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    let mut failure = None;
    params.visit_trainable(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let (Some(g), Some(m), Some(v)) =
            (grads.get(name), state.first_moment.get_mut(name), state.second_moment.get_mut(name))
        else {
            failure = Some(Error::Config(format!("no optimizer state for `{name}`")));
            return;
        };
        let prec = p.precision();
        let (pd, gd) = (p.data_mut(), g.data());
        for i in 0..pd.len() {
            let md = &mut m.data_mut()[i];
            *md = ADAM_BETA1 * *md + (1.0 - ADAM_BETA1) * gd[i];
            let mh = *md / c1;
            let vd = &mut v.data_mut()[i];
            *vd = ADAM_BETA2 * *vd + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
            let vh = *vd / c2;
            pd[i] = prec.round(pd[i] - lr * (mh / (vh.sqrt() + ADAM_EPS) + config.weight_decay * pd[i]));
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    state.step += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Precision;

    fn scalar(x: f64) -> BTreeMap<String, Matrix> {
        BTreeMap::from([("w".to_string(), Matrix::from_vec(1, 1, vec![x], Precision::Double).unwrap())])
    }

    fn config(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig { learning_rate: lr, weight_decay: wd, warmup_fraction: 0.0, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut p = scalar(1.25);
        let mut s = TrainState::new(&mut p, 10);
        let g = scalar(0.0);
        for _ in 0..5 {
            optimizer_step(&mut s, &mut p, &g, &config(0.1, 0.0)).unwrap();
        }
        assert_eq!(p["w"].get(0, 0), 1.25);
    }

    #[test]
    fn quadratic_first_steps_match_hand_computation() {
        // f(w) = (w - 3)^2 at w = 1: g = -4.
        let (lr, wd) = (0.1, 0.05);
        let mut p = scalar(1.0);
        let mut s = TrainState::new(&mut p, 10);
        optimizer_step(&mut s, &mut p, &scalar(-4.0), &config(lr, wd)).unwrap();
        // Bias-corrected m̂ = g, v̂ = g², so the step is lr·(g/(|g|+eps) + wd·w).
        let w1 = 1.0 - lr * (-4.0 / (4.0 + ADAM_EPS) + wd * 1.0);
        assert!((p["w"].get(0, 0) - w1).abs() < 1e-15);

        let g2 = 2.0 * (w1 - 3.0);
        optimizer_step(&mut s, &mut p, &scalar(g2), &config(lr, wd)).unwrap();
        let m = 0.9 * 0.1 * -4.0 + 0.1 * g2;
        let v = 0.999 * 0.001 * 16.0 + 0.001 * g2 * g2;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.999f64.powi(2));
        let w2 = w1 - lr * (mh / (vh.sqrt() + ADAM_EPS) + wd * w1);
        assert!((p["w"].get(0, 0) - w2).abs() < 1e-14);
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let c = TrainConfig { learning_rate: 1.0, warmup_fraction: 0.1, ..TrainConfig::default() };
        let rates: Vec<f64> = (0..12).map(|s| learning_rate(&c, s, 100)).collect();
        for (s, r) in rates.iter().enumerate() {
            let expect = if s < 10 { (s + 1) as f64 / 10.0 } else { 1.0 };
            assert!((r - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = scalar(1.0);
        let mut s = TrainState::new(&mut p, 1);
        assert!(optimizer_step(&mut s, &mut p, &Gradients::new(), &config(0.1, 0.0)).is_err());
    }
}
