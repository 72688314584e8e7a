//! Learning-rate schedules and Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Linear ramp to the peak, then linear decay to zero.
    LinearWarmupDecay,
    /// Linear ramp, constant hold, then linear decay to zero.
    TriStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    /// Only used by [`ScheduleKind::TriStage`].
    pub hold_fraction: f64,
    pub peak_lr: f64,
}

impl Schedule {
    pub fn linear(total_steps: usize, warmup_fraction: f64, peak_lr: f64) -> Self {
        Schedule {
            kind: ScheduleKind::LinearWarmupDecay,
            total_steps,
            warmup_fraction,
            hold_fraction: 0.0,
            peak_lr,
        }
    }

    pub fn tri_stage(total_steps: usize, warmup_fraction: f64, hold_fraction: f64, peak_lr: f64) -> Self {
        Schedule {
            kind: ScheduleKind::TriStage,
            total_steps,
            warmup_fraction,
            hold_fraction,
            peak_lr,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let hold = match self.kind {
            ScheduleKind::TriStage => self.hold_fraction,
            ScheduleKind::LinearWarmupDecay => 0.0,
        };
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&hold) {
            return Err("schedule fractions must lie in [0, 1]".into());
        }
        if self.warmup_fraction + hold > 1.0 + 1e-12 {
            return Err("warmup + hold fractions exceed 1".into());
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err("peak_lr must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn hold_steps(&self) -> usize {
        match self.kind {
            ScheduleKind::TriStage => {
                let end = ((self.warmup_fraction + self.hold_fraction) * self.total_steps as f64)
                    .round() as usize;
                end.min(self.total_steps).saturating_sub(self.warmup_steps())
            }
            ScheduleKind::LinearWarmupDecay => 0,
        }
    }

    /// Learning rate applied at 0-based update `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        let decay_start = warm + self.hold_steps();
        if step < warm {
            return self.peak_lr * step as f64 / warm as f64;
        }
        if step < decay_start {
            return self.peak_lr;
        }
        let decay_len = self.total_steps.saturating_sub(decay_start);
        if decay_len == 0 {
            return self.peak_lr;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        self.peak_lr * remaining / decay_len as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to `*.weight` tensors only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            max_grad_norm: 0.0,
        }
    }
}

/// Optimizer state. Parameters whose names start with a frozen prefix are
/// never modified.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    frozen_prefixes: Vec<String>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &Parameters) -> Self {
        let n = params.num_values();
        AdamW {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            frozen_prefixes: Vec::new(),
        }
    }

    pub fn freeze(mut self, prefix: &str) -> Self {
        self.frozen_prefixes.push(prefix.to_string());
        self
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Applies one update and returns the learning rate used. Parameters are
    /// kept on the f32 grid.
    pub fn step(
        &mut self,
        params: &mut Parameters,
        grads: &Parameters,
        schedule: &Schedule,
        step: usize,
    ) -> Result<f64, NnError> {
        if step >= schedule.total_steps {
            return Err(NnError::StepOutOfRange {
                step,
                total: schedule.total_steps,
            });
        }
        let mut bad = None;
        let mut sq_norm = 0.0;
        grads.for_each(|name, _, g| {
            if !self.is_frozen(name) {
                if bad.is_none() && g.iter().any(|x| !x.is_finite()) {
                    bad = Some(name.to_string());
                }
                sq_norm += g.iter().map(|x| x * x).sum::<f64>();
            }
        });
        if let Some(tensor) = bad {
            return Err(NnError::NonFiniteGradient { tensor });
        }
        let clip = if self.config.max_grad_norm > 0.0 && sq_norm.sqrt() > self.config.max_grad_norm {
            self.config.max_grad_norm / sq_norm.sqrt()
        } else {
            1.0
        };

        let lr = schedule.lr(step);
        let c = &self.config;
        let t = (step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let flat_grads = grads.to_flat();
        let frozen: Vec<String> = self.frozen_prefixes.clone();
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        params.for_each_mut(|name, values| {
            let range = offset..offset + values.len();
            offset += values.len();
            if frozen.iter().any(|p| name.starts_with(p.as_str())) {
                return;
            }
            let decay = if name.ends_with(".weight") { c.weight_decay } else { 0.0 };
            for ((x, g), (mi, vi)) in values
                .iter_mut()
                .zip(&flat_grads[range.clone()])
                .zip(m[range.clone()].iter_mut().zip(v[range].iter_mut()))
            {
                let g = g * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *x -= lr * (update + decay * *x);
                *x = *x as f32 as f64;
            }
        });
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;

    #[test]
    fn linear_schedule_endpoints() {
        let s = Schedule::linear(100, 0.1, 5e-4);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(1) - 5e-5).abs() < 1e-18);
        assert_eq!(s.lr(10), 5e-4);
        assert!((s.lr(55) - 5e-4 * 45.0 / 90.0).abs() < 1e-18);
        assert!(s.lr(99) > 0.0);
    }

    #[test]
    fn tri_stage_holds() {
        let s = Schedule::tri_stage(1000, 0.1, 0.4, 1e-3);
        for step in 100..500 {
            assert_eq!(s.lr(step), 1e-3);
        }
        assert!(s.lr(99) < 1e-3);
        assert!(s.lr(500) == 1e-3 && s.lr(501) < 1e-3);
        assert!(s.validate().is_ok());
        assert!(Schedule::tri_stage(10, 0.7, 0.4, 1.0).validate().is_err());
    }

    #[test]
    fn frozen_prefix_is_untouched() {
        let cfg = EncoderConfig::default();
        let mut p = Parameters::init(&cfg, 1);
        let mut g = p.zeros_like();
        g.for_each_mut(|_, v| v.iter_mut().for_each(|x| *x = 0.5));
        let front = p.hash_prefix("frontend.");
        let all = p.hash();
        let mut opt = AdamW::new(AdamWConfig::default(), &p).freeze("frontend.");
        let sched = Schedule::tri_stage(10, 0.1, 0.4, 1e-2);
        for step in 0..10 {
            opt.step(&mut p, &g, &sched, step).unwrap();
        }
        assert_eq!(front, p.hash_prefix("frontend."));
        assert_ne!(all, p.hash());
        assert!(matches!(
            opt.step(&mut p, &g, &sched, 10),
            Err(NnError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let cfg = EncoderConfig::default();
        let mut p = Parameters::init(&cfg, 1);
        let mut g = p.zeros_like();
        g.head.bias[0] = f64::NAN;
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let sched = Schedule::linear(10, 0.1, 1e-3);
        assert!(matches!(
            opt.step(&mut p, &g, &sched, 0),
            Err(NnError::NonFiniteGradient { .. })
        ));
    }
}
