//! Bias-corrected Adam. Moment slots are keyed by parameter name so the
//! optimizer state survives checkpointing without depending on registration
//! order. One `apply` call is one optimizer step for the whole model: the
//! step counter advances exactly once and every parameter sees the same
//! bias-correction factors.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

pub const DEFAULT_LR: f64 = 2e-4;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

/// One parameter's contribution to an optimizer step.
pub struct ParamGrad<'a> {
    pub name: &'a str,
    pub data: &'a mut [f64],
    pub grad: &'a [f64],
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, step: 0, slots: BTreeMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Change the learning rate for subsequent steps (schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Number of completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// One optimizer step over the full parameter set. Validates every
    /// gradient before mutating anything, so a non-finite gradient leaves
    /// both parameters and moments untouched.
    pub fn apply(&mut self, updates: &mut [ParamGrad<'_>]) -> Result<()> {
        for u in updates.iter() {
            if u.grad.len() != u.data.len() {
                return Err(Error::shape(
                    "adam_update",
                    format!("{}: param has {} elements, grad has {}", u.name, u.data.len(), u.grad.len()),
                ));
            }
            if let Some(slot) = self.slots.get(u.name) {
                if slot.m.len() != u.data.len() {
                    return Err(Error::shape(
                        "adam_update",
                        format!("{}: stored moments have {} elements, param has {}", u.name, slot.m.len(), u.data.len()),
                    ));
                }
            }
            if u.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { op: "adam_update" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for u in updates.iter_mut() {
            let slot = self
                .slots
                .entry(u.name.to_string())
                .or_insert_with(|| Slot { m: vec![0.0; u.data.len()], v: vec![0.0; u.data.len()] });
            for i in 0..u.data.len() {
                let g = u.grad[i];
                slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * g;
                slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                u.data[i] -= self.lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }

    /// Named moment vectors, for serialization. Deterministic (sorted) order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.slots.iter().map(|(k, s)| (k.as_str(), s.m.as_slice(), s.v.as_slice()))
    }

    /// Rebuild optimizer state from a checkpoint.
    pub fn restore(lr: f64, step: u64, slots: impl IntoIterator<Item = (String, Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, m, v) in slots {
            if m.len() != v.len() {
                return Err(Error::Checkpoint(format!(
                    "moment vectors for {name} disagree: {} vs {}",
                    m.len(),
                    v.len()
                )));
            }
            if map.insert(name.clone(), Slot { m, v }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate optimizer slot {name}")));
            }
        }
        Ok(Adam { lr, step, slots: map })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_magnitude() {
        // g = 1, lr = 2e-4: bias correction makes m̂ = g, v̂ = g², so the
        // parameter moves by lr·g/(√(g²)+ε) ≈ 1.99998e-4 downward.
        let mut adam = Adam::new(2e-4);
        let mut p = vec![1.0];
        adam.apply(&mut [ParamGrad { name: "w", data: &mut p, grad: &[1.0] }]).unwrap();
        let delta = 1.0 - p[0];
        assert!((delta - 1.99998e-4).abs() < 1e-8, "delta = {delta:e}");
        assert_eq!(adam.step(), 1);
    }

    #[test]
    fn zero_gradient_is_a_param_noop_but_advances_step() {
        let mut adam = Adam::new(2e-4);
        let mut p = vec![0.3, -0.7];
        adam.apply(&mut [ParamGrad { name: "w", data: &mut p, grad: &[0.0, 0.0] }]).unwrap();
        assert_eq!(p, vec![0.3, -0.7]);
        assert_eq!(adam.step(), 1);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut adam = Adam::new(1e-3);
            let mut p = vec![0.5, -0.25, 2.0];
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| 0.1 * x + k as f64 * 0.01).collect();
                adam.apply(&mut [ParamGrad { name: "w", data: &mut p, grad: &g }]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn descends_a_quadratic() {
        // f(p) = p², grad 2p; Adam should drive |p| down.
        let mut adam = Adam::new(0.05);
        let mut p = vec![3.0];
        for _ in 0..200 {
            let g = [2.0 * p[0]];
            adam.apply(&mut [ParamGrad { name: "p", data: &mut p, grad: &g }]).unwrap();
        }
        assert!(p[0].abs() < 0.5, "p = {}", p[0]);
    }

    #[test]
    fn rejects_shape_mismatch_and_nonfinite() {
        let mut adam = Adam::new(1e-3);
        let mut p = vec![1.0, 2.0];
        let err = adam.apply(&mut [ParamGrad { name: "w", data: &mut p, grad: &[1.0] }]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let err =
            adam.apply(&mut [ParamGrad { name: "w", data: &mut p, grad: &[f64::NAN, 0.0] }]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        // failed calls must not advance the step counter or touch params
        assert_eq!(adam.step(), 0);
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn restore_round_trip() {
        let mut adam = Adam::new(2e-4);
        let mut p = vec![1.0, -1.0];
        for _ in 0..3 {
            let g = [0.5, -0.25];
            adam.apply(&mut [ParamGrad { name: "w", data: &mut p, grad: &g }]).unwrap();
        }
        let slots: Vec<(String, Vec<f64>, Vec<f64>)> =
            adam.moments().map(|(n, m, v)| (n.to_string(), m.to_vec(), v.to_vec())).collect();
        let restored = Adam::restore(adam.lr(), adam.step(), slots).unwrap();
        assert_eq!(restored, adam);

        // one more identical step from both must agree bitwise
        let mut adam2 = restored;
        let mut p2 = p.clone();
        let g = [0.5, -0.25];
        adam.apply(&mut [ParamGrad { name: "w", data: &mut p, grad: &g }]).unwrap();
        adam2.apply(&mut [ParamGrad { name: "w", data: &mut p2, grad: &g }]).unwrap();
        assert_eq!(p, p2);
    }
}
