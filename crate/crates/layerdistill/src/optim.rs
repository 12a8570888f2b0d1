//! Optimization pieces: the warmup/decay schedule and Adam with decoupled
//! weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sc, Gradients, Scalar, Tensor};
use crate::error::{Error, Result};

/// Linear warmup to `peak_lr`, then linear decay to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::config(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if self.warmup_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "need 0 < warmup_steps ({}) <= total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0..=total_steps).
pub fn lr_at(step: u64, schedule: &Schedule) -> Result<f64> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(Error::usage(format!(
            "step {step} beyond schedule total {}",
            schedule.total_steps
        )));
    }
    let lr = if step <= schedule.warmup_steps {
        schedule.peak_lr * step as f64 / schedule.warmup_steps as f64
    } else {
        schedule.peak_lr * (schedule.total_steps - step) as f64
            / (schedule.total_steps - schedule.warmup_steps) as f64
    };
    Ok(lr)
}

/// Adam hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moment accumulators per parameter plus the update count.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &(Vec<f32>, Vec<f32>))> {
        self.moments.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub(crate) fn insert_moments(&mut self, name: String, m: Vec<f32>, v: Vec<f32>) {
        self.moments.insert(name, (m, v));
    }
}

/// One decoupled-weight-decay Adam update over named parameters.
///
/// `params` is the full set updated this step; the state's step counter
/// increments once per call. Missing moment buffers start at zero. A
/// non-finite gradient is a numeric error naming the parameter.
pub fn adam_step_named<'a, T: Scalar>(
    params: impl Iterator<Item = (&'a str, &'a mut Tensor<T>)>,
    grads: &Gradients<T>,
    state: &mut OptimizerState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - hyper.beta1.powi(t as i32);
    let bias2 = 1.0 - hyper.beta2.powi(t as i32);
    for (name, tensor) in params {
        let grad = match grads.get(name) {
            Some(g) => g,
            None => continue,
        };
        if let Some(pos) = grad.finite_violation() {
            return Err(Error::numeric(format!(
                "non-finite gradient at element {pos} of parameter '{name}'"
            )));
        }
        if grad.shape() != tensor.shape() {
            return Err(Error::usage(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                grad.shape(),
                tensor.shape()
            )));
        }
        let n = tensor.numel();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::usage(format!(
                "moment buffers for '{name}' have {} values, parameter has {n}",
                m.len()
            )));
        }
        let data = tensor.data_mut();
        for i in 0..n {
            let g = grad.data()[i].to_f64().unwrap();
            let mi = hyper.beta1 * m[i] as f64 + (1.0 - hyper.beta1) * g;
            let vi = hyper.beta2 * v[i] as f64 + (1.0 - hyper.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = m[i] as f64 / bias1;
            let v_hat = v[i] as f64 / bias2;
            let p = data[i].to_f64().unwrap();
            let update = lr * (m_hat / (v_hat.sqrt() + hyper.epsilon) + hyper.weight_decay * p);
            data[i] = sc(p - update);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for v in g.data() {
            let x = v.to_f64().unwrap();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = sc::<T>(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_schedule() -> Schedule {
        Schedule {
            peak_lr: 1e-4,
            warmup_steps: 4000,
            total_steps: 200_000,
        }
    }

    #[test]
    fn schedule_reference_points() {
        let s = paper_schedule();
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert!((lr_at(4000, &s).unwrap() - 1e-4).abs() < 1e-19);
        let mid = lr_at(102_000, &s).unwrap();
        let expect = 1e-4 * 98_000.0 / 196_000.0;
        assert!(((mid - expect) / expect).abs() < 1e-15);
        assert_eq!(lr_at(200_000, &s).unwrap(), 0.0);
    }

    #[test]
    fn step_beyond_total_is_usage_error() {
        assert!(lr_at(200_001, &paper_schedule()).is_err());
    }

    #[test]
    fn invalid_schedules_rejected() {
        let mut s = paper_schedule();
        s.warmup_steps = 0;
        assert!(s.validate().is_err());
        let mut s = paper_schedule();
        s.warmup_steps = s.total_steps + 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn first_adam_step_matches_hand_evaluation() {
        // param 1.0, grad 1.0, lr 0.1, no decay: m_hat = v_hat = 1, so the
        // update is 0.1 / (1 + eps) and the parameter lands at ~0.9.
        let mut p = Tensor::scalar(1.0f64);
        let mut grads = Gradients::new();
        grads.insert("p".to_string(), Tensor::scalar(1.0f64));
        let mut state = OptimizerState::new();
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        adam_step_named(
            std::iter::once(("p", &mut p)),
            &grads,
            &mut state,
            0.1,
            &hyper,
        )
        .unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-5, "got {}", p.data()[0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = Tensor::vector(vec![0.5f32, -2.0]);
        let before = p.clone();
        let mut grads = Gradients::new();
        grads.insert("p".to_string(), Tensor::vector(vec![0.0f32, 0.0]));
        let mut state = OptimizerState::new();
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        adam_step_named(
            std::iter::once(("p", &mut p)),
            &grads,
            &mut state,
            0.1,
            &hyper,
        )
        .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn identical_runs_stay_bitwise_identical() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3f32, 1.7, -0.2]);
            let mut state = OptimizerState::new();
            let hyper = AdamHyper::default();
            for step in 0..10 {
                let mut grads = Gradients::new();
                let g: Vec<f32> = (0..3).map(|i| ((step * 3 + i) as f32 * 0.1).sin()).collect();
                grads.insert("p".to_string(), Tensor::vector(g));
                adam_step_named(
                    std::iter::once(("p", &mut p)),
                    &grads,
                    &mut state,
                    1e-2,
                    &hyper,
                )
                .unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::scalar(1.0f32);
        let mut grads = Gradients::new();
        grads.insert("p".to_string(), Tensor::scalar(f32::NAN));
        let mut state = OptimizerState::new();
        let err = adam_step_named(
            std::iter::once(("p", &mut p)),
            &grads,
            &mut state,
            0.1,
            &AdamHyper::default(),
        )
        .unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("'p'")),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads = Gradients::new();
        grads.insert("a".to_string(), Tensor::vector(vec![3.0f64, 0.0]));
        grads.insert("b".to_string(), Tensor::vector(vec![0.0f64, 4.0]));
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let mut sq = 0.0;
        for g in grads.values() {
            for v in g.data() {
                sq += v * v;
            }
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);
    }
}
