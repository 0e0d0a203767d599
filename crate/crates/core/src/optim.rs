//! AdamW with two parameter groups.
//!
//! Base (teacher) weights and compactors train at different learning rates;
//! weight decay is decoupled and applied before the Adam step.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Base,
    Compactor,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Base => "base",
            ParamGroup::Compactor => "compactor",
        })
    }
}

/// A named trainable tensor with its gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    group: ParamGroup,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, group: ParamGroup) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            group,
        }
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay_base: f64,
    pub weight_decay_compactor: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay_base: 0.01,
            weight_decay_compactor: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn weight_decay(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Base => self.weight_decay_base,
            ParamGroup::Compactor => self.weight_decay_compactor,
        }
    }
}

/// Peak learning rates per group, with an optional linear warmup and an
/// optional linear decay after it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub base: f64,
    pub compactor: f64,
    pub warmup_steps: u64,
    /// Last step of a linear decay towards zero; 0 keeps the peak.
    pub decay_steps: u64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            base: 1e-6,
            compactor: 5e-5,
            warmup_steps: 0,
            decay_steps: 0,
        }
    }
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            base: lr,
            compactor: lr,
            warmup_steps: 0,
            decay_steps: 0,
        }
    }

    /// Rate for `group` at 1-based optimizer step `step`.
    pub fn at(&self, step: u64, group: ParamGroup) -> f64 {
        let peak = match group {
            ParamGroup::Base => self.base,
            ParamGroup::Compactor => self.compactor,
        };
        if self.warmup_steps > 0 && step < self.warmup_steps {
            peak * step as f64 / self.warmup_steps as f64
        } else if self.decay_steps > self.warmup_steps {
            let left = (self.decay_steps + 1).saturating_sub(step) as f64;
            peak * (left / (self.decay_steps + 1 - self.warmup_steps) as f64).min(1.0)
        } else {
            peak
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// Optimizer state: moments per parameter name plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Starts a new optimizer step and returns its 1-based index.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Rebuilds state from serialized parts. The step counter must cover
    /// every moment that exists.
    pub fn restore(config: AdamWConfig, step: u64, moments: BTreeMap<String, Moments>) -> Result<Self> {
        if step == 0 && !moments.is_empty() {
            return Err(Error::State("moments present at step 0".into()));
        }
        for (name, m) in &moments {
            if m.first.shape() != m.second.shape() {
                return Err(Error::State(format!("moment shapes differ for {name}")));
            }
        }
        Ok(Self {
            config,
            step,
            moments,
        })
    }

    /// Applies one AdamW update to `value` using the current step index.
    pub fn update(
        &mut self,
        name: &str,
        group: ParamGroup,
        lr: f64,
        value: &mut Tensor,
        grad: &Tensor,
    ) -> Result<()> {
        if value.shape() != grad.shape() {
            return Err(Error::shape("adamw", value.shape(), grad.shape()));
        }
        if self.step == 0 {
            return Err(Error::State("update called before begin_step".into()));
        }
        let cfg = self.config;
        let entry = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                first: Tensor::zeros(value.shape()),
                second: Tensor::zeros(value.shape()),
            });
        if entry.first.shape() != value.shape() {
            return Err(Error::shape("adamw moments", entry.first.shape(), value.shape()));
        }
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - lr * cfg.weight_decay(group);
        let m = entry.first.data_mut();
        let v = entry.second.data_mut();
        for (((p, &g), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g as f64;
            let m_new = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * g;
            let v_new = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let updated = *p as f64 * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *p = updated as f32;
        }
        Ok(())
    }
}

/// One AdamW step over a set of parameters, each at its group's rate.
pub fn adamw_step(params: &mut [Parameter], state: &mut OptimState, lrs: &LearningRates) -> Result<()> {
    let step = state.begin_step();
    for p in params.iter_mut() {
        let lr = lrs.at(step, p.group);
        state.update(&p.name, p.group, lr, &mut p.value, &p.grad)?;
    }
    Ok(())
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ParamGroup::Base),
            "compactor" => Ok(ParamGroup::Compactor),
            other => Err(Error::Config(format!("unknown parameter group `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(name: &str, v: f32, g: f32, group: ParamGroup) -> Parameter {
        let mut p = Parameter::new(name, Tensor::vector(vec![v]), group);
        p.grad = Tensor::vector(vec![g]);
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut params = vec![scalar("w", 0.7, 0.0, ParamGroup::Compactor)];
        let mut state = OptimState::new(AdamWConfig::default());
        for _ in 0..5 {
            adamw_step(&mut params, &mut state, &LearningRates::default()).unwrap();
        }
        assert_eq!(params[0].value.data(), &[0.7]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After bias correction m̂ = g and v̂ = g², so Δ = lr·g/(|g| + ε).
        let (w, g, lr) = (1.5f64, 0.25f64, 1e-3f64);
        let mut params = vec![scalar("w", w as f32, g as f32, ParamGroup::Compactor)];
        let mut state = OptimState::new(AdamWConfig::default());
        let lrs = LearningRates {
            compactor: lr,
            ..Default::default()
        };
        adamw_step(&mut params, &mut state, &lrs).unwrap();
        let expected = (w as f32) as f64 - lr * g / (g + 1e-8);
        assert!((params[0].value.data()[0] as f64 - expected).abs() < 1e-7);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn groups_use_their_own_rates() {
        let lrs = LearningRates::default();
        assert_eq!(lrs.at(1, ParamGroup::Base), 1e-6);
        assert_eq!(lrs.at(1, ParamGroup::Compactor), 5e-5);
        let warm = LearningRates {
            warmup_steps: 10,
            ..lrs
        };
        assert!((warm.at(5, ParamGroup::Compactor) - 2.5e-5).abs() < 1e-18);
        let decay = LearningRates {
            warmup_steps: 10,
            decay_steps: 29,
            ..lrs
        };
        assert_eq!(decay.at(10, ParamGroup::Compactor), 5e-5);
        assert!((decay.at(20, ParamGroup::Compactor) - 2.5e-5).abs() < 1e-18);
        assert!(decay.at(29, ParamGroup::Compactor) > 0.0);
        assert_eq!(decay.at(30, ParamGroup::Compactor), 0.0);
    }

    #[test]
    fn update_before_begin_step_is_rejected() {
        let mut state = OptimState::new(AdamWConfig::default());
        let mut v = Tensor::vector(vec![1.0]);
        let g = Tensor::vector(vec![1.0]);
        assert!(state.update("w", ParamGroup::Base, 1e-3, &mut v, &g).is_err());
    }
}
