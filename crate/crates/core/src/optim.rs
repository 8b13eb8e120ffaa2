//! Adam and AdamW parameter updates.
//!
//! Adam drives pretraining (lr 1e-3); AdamW drives transfer learning
//! (lr 5e-5) with decoupled weight decay applied as θ ← θ·(1 − lr·wd)
//! before the Adam-style update.

use std::collections::BTreeMap;

use crate::error::TrainError;
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptKind {
    Adam,
    AdamW,
}

#[derive(Clone)]
pub struct Optimizer {
    pub kind: OptKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Step count; 0 before the first update.
    pub t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn adam(lr: f32) -> Self {
        Optimizer {
            kind: OptKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn adamw(lr: f32, weight_decay: f32) -> Self {
        Optimizer { kind: OptKind::AdamW, weight_decay, ..Optimizer::adam(lr) }
    }

    /// Apply one update. `grads` may omit parameters (treated as zero
    /// gradient, e.g. a frozen backbone in probe mode); any NaN gradient
    /// aborts the step naming the parameter.
    pub fn step(
        &mut self,
        params: &mut Params<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<(), TrainError> {
        for (name, g) in grads {
            if g.iter().any(|v| v.is_nan()) {
                return Err(TrainError::NanGradient { param: name.clone() });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        let names: Vec<String> = grads.keys().cloned().collect();
        for name in names {
            let g = &grads[&name];
            let theta = params.get(&name);
            assert_eq!(
                g.len(),
                theta.numel(),
                "optimizer: gradient length {} vs parameter {} of {} elements",
                g.len(),
                name,
                theta.numel()
            );
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);

            let mut data = theta.data().to_vec();
            if self.kind == OptKind::AdamW && self.weight_decay != 0.0 {
                let shrink = 1.0 - self.lr * self.weight_decay;
                for w in data.iter_mut() {
                    *w *= shrink;
                }
            }
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            params.set(&name, Tensor::from_vec(theta.shape().to_vec(), data));
        }
        Ok(())
    }

    /// Moment buffers in name order, for checkpointing.
    pub fn moments(&self) -> (&BTreeMap<String, Vec<f32>>, &BTreeMap<String, Vec<f32>>) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(
        &mut self,
        t: u64,
        m: BTreeMap<String, Vec<f32>>,
        v: BTreeMap<String, Vec<f32>>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f32) -> Params<f32> {
        let mut p = Params::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    fn grad_of(value: f32) -> BTreeMap<String, Vec<f32>> {
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), vec![value]);
        g
    }

    #[test]
    fn adam_zero_gradient_leaves_parameter_unchanged() {
        let mut p = single_param(1.5);
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut p, &grad_of(0.0)).unwrap();
        assert_eq!(p.get("w").item(), 1.5);
    }

    #[test]
    fn adamw_zero_gradient_applies_pure_decay() {
        // lr 0.1, wd 0.1 → θ scaled by exactly 0.99
        let mut p = single_param(2.0);
        let mut opt = Optimizer::adamw(0.1, 0.1);
        opt.step(&mut p, &grad_of(0.0)).unwrap();
        assert_eq!(p.get("w").item(), 2.0 * 0.99);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        // three steps with g = 1 held fixed, against the hand recurrence
        // evaluated in f64 (tolerance covers f32 rounding in the optimizer)
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut theta = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut p = single_param(0.5);
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..3 {
            opt.step(&mut p, &grad_of(1.0)).unwrap();
        }
        let got = p.get("w").item() as f64;
        assert!((got - theta).abs() < 1e-5, "optimizer {got} vs recurrence {theta}");
    }

    #[test]
    fn nan_gradient_aborts_naming_parameter() {
        let mut p = single_param(1.0);
        let mut opt = Optimizer::adam(0.1);
        let err = opt.step(&mut p, &grad_of(f32::NAN)).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        // parameter untouched, step not counted
        assert_eq!(p.get("w").item(), 1.0);
        assert_eq!(opt.t, 0);
    }
}
