use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::InvalidValue(format!(
                "need 0 < beta1 < beta2 < 1, got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.weight_decay < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::InvalidValue(
                "weight decay and epsilon must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Ok(AdamW {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Trainable parameters without a gradient count as
    /// having a zero gradient. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}`", params.get(*id).name)));
            }
        }
        let mut by_id: Vec<Option<&[f64]>> = vec![None; params.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        self.t += 1;
        let OptimizerConfig {
            beta1: b1,
            beta2: b2,
            weight_decay,
            epsilon,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let wd = if p.decay { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let g = by_id[id.index()];
            for (k, x) in p.tensor.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *x -= lr * (mh / (vh.sqrt() + epsilon) + wd * *x);
            }
        }
        Ok(())
    }
}

/// `peak * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, peak: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let s = step.min(total) as f64 / total as f64;
    peak * 0.5 * (1.0 + (PI * s).cos())
}

/// Cosine decay preceded by a linear warmup over `warmup` steps.
pub fn warmup_cosine_lr(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(step - warmup, total.saturating_sub(warmup), peak)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrPolicy {
    Cosine { peak: f64 },
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumPhase {
    pub ar_steps: usize,
    pub train_steps: usize,
    pub lr: LrPolicy,
}

impl CurriculumPhase {
    /// Learning rate at `step` within the phase.
    pub fn lr_at(&self, step: usize, warmup: usize) -> f64 {
        match self.lr {
            LrPolicy::Cosine { peak } => warmup_cosine_lr(step, self.train_steps, warmup, peak),
            LrPolicy::Fixed(v) => v,
        }
    }
}

impl fmt::Display for CurriculumPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.lr {
            LrPolicy::Cosine { peak } => write!(f, "{}x{}@cosine:{peak:e}", self.ar_steps, self.train_steps),
            LrPolicy::Fixed(v) => write!(f, "{}x{}@fixed:{v:e}", self.ar_steps, self.train_steps),
        }
    }
}

impl FromStr for CurriculumPhase {
    type Err = Error;

    /// `KxN@cosine:PEAK` or `KxN@fixed:LR`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::InvalidValue(format!("phase `{s}`: {m}"));
        let (shape, lr) = s.trim().split_once('@').ok_or_else(|| bad("missing `@`"))?;
        let (k, n) = shape.split_once('x').ok_or_else(|| bad("expected KxN before `@`"))?;
        let ar_steps: usize = k.trim().parse().map_err(|_| bad("bad autoregressive step count"))?;
        let train_steps: usize = n.trim().parse().map_err(|_| bad("bad training step count"))?;
        if ar_steps == 0 {
            return Err(bad("autoregressive steps must be at least 1"));
        }
        let (kind, value) = lr
            .split_once(':')
            .ok_or_else(|| bad("expected POLICY:VALUE after `@`"))?;
        let value: f64 = value.trim().parse().map_err(|_| bad("bad learning rate"))?;
        if !value.is_finite() || value < 0.0 {
            return Err(bad("learning rate must be finite and non-negative"));
        }
        let lr = match kind.trim() {
            "cosine" => LrPolicy::Cosine { peak: value },
            "fixed" => LrPolicy::Fixed(value),
            other => return Err(bad(&format!("unknown policy `{other}`"))),
        };
        Ok(CurriculumPhase {
            ar_steps,
            train_steps,
            lr,
        })
    }
}

/// Parses a comma-separated phase list.
pub fn parse_phases(s: &str) -> Result<Vec<CurriculumPhase>> {
    let phases: Vec<CurriculumPhase> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if phases.is_empty() {
        return Err(Error::InvalidValue("empty phase list".into()));
    }
    Ok(phases)
}

/// The published schedule: 80k one-step iterations, then 4000 each at 2, 3, 4 steps.
pub fn full_scale_phases() -> Vec<CurriculumPhase> {
    parse_phases("1x80000@cosine:2.5e-4,2x4000@fixed:1e-7,3x4000@fixed:1e-7,4x4000@fixed:1e-7").expect("valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn cosine_reference_points() {
        assert_eq!(cosine_lr(0, 100, 2.0), 2.0);
        assert!(cosine_lr(100, 100, 2.0).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 2.0) - 1.0).abs() < 1e-15);
        assert!((warmup_cosine_lr(0, 100, 10, 1.0) - 0.1).abs() < 1e-15);
        assert_eq!(warmup_cosine_lr(10, 100, 10, 1.0), 1.0);
    }

    #[test]
    fn phase_strings_round_trip() {
        let p = parse_phases("1x500@cosine:2.5e-4,2x50@fixed:1e-7, 3x50@fixed:1e-7").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].lr, LrPolicy::Cosine { peak: 2.5e-4 });
        assert_eq!(p[2].ar_steps, 3);
        let again = parse_phases(&p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")).unwrap();
        assert_eq!(again, p);
        for bad in ["", "1x5", "0x5@fixed:1", "1x5@linear:1", "axb@fixed:1", "1x5@fixed:-1"] {
            assert!(parse_phases(bad).is_err(), "{bad}");
        }
        assert_eq!(full_scale_phases()[0].train_steps, 80_000);
    }

    fn scalar_store(v: f64, decay: bool) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v), true, decay).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(1.5, false);
        let mut opt = AdamW::new(OptimizerConfig::default(), &s).unwrap();
        for _ in 0..3 {
            opt.step(&mut s, &[(id, vec![0.0])], 0.1).unwrap();
        }
        assert_eq!(s.get(id).tensor.item(), 1.5);
    }

    #[test]
    fn first_step_has_unit_normalized_size() {
        let (mut s, id) = scalar_store(0.0, true);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s).unwrap();
        opt.step(&mut s, &[(id, vec![1.0])], 0.1).unwrap();
        assert!((s.get(id).tensor.item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradients_are_rejected_untouched() {
        let (mut s, id) = scalar_store(2.0, true);
        let mut opt = AdamW::new(OptimizerConfig::default(), &s).unwrap();
        assert!(matches!(
            opt.step(&mut s, &[(id, vec![f64::NAN])], 0.1),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s.get(id).tensor.item(), 2.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn beta_ordering_is_validated() {
        let cfg = OptimizerConfig {
            beta1: 0.99,
            beta2: 0.9,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
