use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Cosine { final_lr: f64 },
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Sequences per optimizer step.
    pub effective_batch: usize,
    /// Sequences per forward pass; gradients accumulate up to `effective_batch`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_batch: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: f64,
    /// Step-denominated runs override `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

fn default_eps() -> f64 {
    1e-8
}

fn default_epochs() -> f64 {
    1.0
}

impl OptimConfig {
    /// Continual pre-training: 8e-6, 1% warmup, cosine to 1e-6, β = (0.9, 0.95).
    pub fn cpt() -> Self {
        Self {
            peak_lr: 8e-6,
            warmup_ratio: 0.01,
            schedule: Schedule::Cosine { final_lr: 1e-6 },
            beta1: 0.9,
            beta2: 0.95,
            eps: default_eps(),
            weight_decay: 0.0,
            effective_batch: 32,
            micro_batch: None,
            epochs: 1.0,
            max_steps: None,
        }
    }

    /// Annealing on the high-quality subset: 3e-4, cosine to 0.
    pub fn anneal() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_ratio: 0.0,
            schedule: Schedule::Cosine { final_lr: 0.0 },
            ..Self::cpt()
        }
    }

    /// Instruction tuning: 3e-5, 3% warmup, linear to 0, β = (0.9, 0.999), batch 128, 2 epochs.
    pub fn sft() -> Self {
        Self {
            peak_lr: 3e-5,
            warmup_ratio: 0.03,
            schedule: Schedule::Linear,
            beta1: 0.9,
            beta2: 0.999,
            eps: default_eps(),
            weight_decay: 0.0,
            effective_batch: 128,
            micro_batch: None,
            epochs: 2.0,
            max_steps: None,
        }
    }

    /// Merged-model instruction tuning: 1e-4, batch 256.
    pub fn moe_sft() -> Self {
        Self {
            peak_lr: 1e-4,
            effective_batch: 256,
            ..Self::sft()
        }
    }

    /// Preference alignment: 3e-6, otherwise the SFT shape.
    pub fn dpo() -> Self {
        Self {
            peak_lr: 3e-6,
            epochs: 1.0,
            ..Self::sft()
        }
    }

    pub fn micro_batch(&self) -> usize {
        self.micro_batch.unwrap_or(self.effective_batch).min(self.effective_batch)
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_ratio * total_steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return bad("peak_lr must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1]");
        }
        if let Schedule::Cosine { final_lr } = self.schedule {
            if !(final_lr.is_finite() && (0.0..=self.peak_lr).contains(&final_lr)) {
                return bad("final_lr must be in [0, peak_lr]");
            }
        }
        for (v, name) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::InvalidConfig(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if self.effective_batch == 0 || self.micro_batch == Some(0) {
            return bad("batch sizes must be >= 1");
        }
        if !(self.epochs > 0.0 && self.epochs.is_finite()) {
            return bad("epochs must be > 0");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1");
        }
        Ok(())
    }
}

/// Learning rate for optimizer step `step` of `total_steps` (step 0 is the
/// untrained state; updates use steps `1..=total_steps`).
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &OptimConfig) -> Result<f64, TrainError> {
    if step > total_steps {
        return Err(TrainError::StepOutOfRange { step, total_steps });
    }
    let warmup = cfg.warmup_steps(total_steps);
    if step <= warmup {
        if warmup == 0 {
            return Ok(cfg.peak_lr);
        }
        return Ok(cfg.peak_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(match cfg.schedule {
        Schedule::Cosine { final_lr } => final_lr + (cfg.peak_lr - final_lr) * (1.0 + (PI * progress).cos()) / 2.0,
        Schedule::Linear => cfg.peak_lr * (1.0 - progress),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Bias-corrected AdamW with decoupled weight decay; moments kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every `(name, parameter)` pair. Missing gradients
    /// count as zero.
    pub fn step<'a, T: Element + 'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params {
            let n = p.numel();
            let grad = match grads.get(name) {
                Some(g) if g.shape() != p.shape() => {
                    return Err(TrainError::ShapeMismatch {
                        name: name.to_string(),
                        param: p.shape().to_vec(),
                        grad: g.shape().to_vec(),
                    })
                }
                Some(g) => Some(g.data()),
                None => None,
            };
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[i].to_f64_lossy());
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                let theta = w.to_f64_lossy();
                let updated = theta - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * theta);
                *w = T::from_f64_lossy(updated);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpt_schedule_endpoints() {
        let cfg = OptimConfig::cpt();
        let total = 1000;
        assert_eq!(cfg.warmup_steps(total), 10);
        assert!((lr_schedule(10, total, &cfg).unwrap() - 8e-6).abs() <= 1e-12);
        assert!((lr_schedule(total, total, &cfg).unwrap() - 1e-6).abs() <= 1e-12);
        assert_eq!(lr_schedule(0, total, &cfg).unwrap(), 0.0);
        let mid = lr_schedule(505, total, &cfg).unwrap();
        assert!((mid - 4.5e-6).abs() < 1e-15);
    }

    #[test]
    fn sft_schedule_ends_at_zero() {
        let cfg = OptimConfig::sft();
        assert_eq!(lr_schedule(777, 777, &cfg).unwrap(), 0.0);
        assert!(lr_schedule(778, 777, &cfg).is_err());
    }

    #[test]
    fn presets_validate() {
        for c in [OptimConfig::cpt(), OptimConfig::anneal(), OptimConfig::sft(), OptimConfig::moe_sft(), OptimConfig::dpo()] {
            c.validate().unwrap();
        }
        assert_eq!(OptimConfig::cpt().beta2, 0.95);
        assert_eq!(OptimConfig::sft().beta2, 0.999);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut cfg = OptimConfig::sft();
        cfg.weight_decay = 0.1;
        let mut opt = AdamW::new(&cfg);
        let mut p = Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        opt.step([("w", &mut p)], &BTreeMap::new(), 0.5).unwrap();
        assert_eq!(p.data(), &[1.0 * (1.0 - 0.05), -2.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = OptimConfig::cpt();
        let mut opt = AdamW::new(&cfg);
        let mut p = Tensor::<f64>::from_f64(&[3], &[0.5, 0.5, 0.5]).unwrap();
        let g = Tensor::<f64>::from_f64(&[3], &[2.0, -1e-3, 0.0]).unwrap();
        let grads = BTreeMap::from([("w".to_string(), g.clone())]);
        let lr = 1e-3;
        opt.step([("w", &mut p)], &grads, lr).unwrap();
        for (i, &gi) in g.data().iter().enumerate() {
            let expected = 0.5 - lr * gi / (gi.abs() + 1e-8);
            assert!((p.data()[i] - expected).abs() < 1e-15);
        }
    }
}
