use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{decode_container, encode_container, Checkpoint, ModelError, ParamVars};
use crate::tensor::{Element, Tape, Tensor};

pub const ADAPTER_MAGIC: &[u8; 4] = b"BTXA";

/// Low-rank adapter settings. A weight named `w` is adapted when it ends
/// with `.{pattern}` for one of `targets`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
}

pub fn default_targets() -> Vec<String> {
    ["attn.q", "attn.k", "attn.v", "attn.o", "up", "gate", "down"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64) -> Self {
        Self {
            rank,
            alpha,
            targets: default_targets(),
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.rank == 0 {
            return Err(TrainError::InvalidConfig("lora rank must be >= 1".into()));
        }
        if !self.scaling().is_finite() || !self.alpha.is_finite() {
            return Err(TrainError::InvalidConfig("lora alpha/rank must be finite".into()));
        }
        if self.targets.is_empty() {
            return Err(TrainError::InvalidConfig("lora targets must not be empty".into()));
        }
        Ok(())
    }

    pub fn matches(&self, name: &str) -> bool {
        self.targets
            .iter()
            .any(|p| name.strip_suffix(p.as_str()).is_some_and(|head| head.ends_with('.')))
    }
}

/// Adapter pairs keyed by the adapted weight's name: `A: [r, in]`, `B: [out, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub config: LoraConfig,
    pub pairs: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Element> LoraAdapter<T> {
    /// `A ~ N(0, 1/r)`, `B = 0`, so the adapted model starts equal to the base.
    pub fn init(base: &Checkpoint<T>, config: &LoraConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (config.rank as f64).sqrt()).expect("valid std");
        let mut pairs = BTreeMap::new();
        for (name, w) in &base.tensors {
            if w.rank() != 2 || !config.matches(name) {
                continue;
            }
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            let a = Tensor::from_fn(&[config.rank, inp], |_| T::from_f64_lossy(normal.sample(&mut rng)));
            pairs.insert(name.clone(), (a, Tensor::zeros(&[out, config.rank])));
        }
        if pairs.is_empty() {
            return Err(TrainError::InvalidConfig("lora targets match no weights".into()));
        }
        Ok(Self {
            config: config.clone(),
            pairs,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.pairs.values().map(|(a, b)| a.numel() + b.numel()).sum()
    }

    /// Replace each adapted weight's tape handle with `W + s·B·A`, recording
    /// `A` and `B` as trainable leaves. Returns their handles by tensor name.
    pub fn bind(&self, tape: &mut Tape<T>, params: &mut ParamVars) -> Result<BTreeMap<String, crate::tensor::Var>, TrainError> {
        let mut leaves = BTreeMap::new();
        for (name, (a, b)) in &self.pairs {
            let w = params.get(name)?;
            let va = tape.param(a.clone())?;
            let vb = tape.param(b.clone())?;
            let ba = tape.matmul(vb, va)?;
            let ba = tape.scale(ba, self.config.scaling())?;
            let eff = tape.add(w, ba)?;
            params.insert(name.clone(), eff);
            leaves.insert(format!("{name}.lora_a"), va);
            leaves.insert(format!("{name}.lora_b"), vb);
        }
        Ok(leaves)
    }

    pub fn tensor_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        if let Some(w) = key.strip_suffix(".lora_a") {
            self.pairs.get_mut(w).map(|p| &mut p.0)
        } else if let Some(w) = key.strip_suffix(".lora_b") {
            self.pairs.get_mut(w).map(|p| &mut p.1)
        } else {
            None
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut flat = BTreeMap::new();
        for (name, (a, b)) in &self.pairs {
            flat.insert(format!("{name}.lora_a"), a.clone());
            flat.insert(format!("{name}.lora_b"), b.clone());
        }
        encode_container(ADAPTER_MAGIC, &self.config, &flat)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let (config, flat): (LoraConfig, BTreeMap<String, Tensor<T>>) = decode_container(ADAPTER_MAGIC, bytes)?;
        config.validate()?;
        let mut pairs = BTreeMap::new();
        for (key, a) in &flat {
            let Some(w) = key.strip_suffix(".lora_a") else {
                continue;
            };
            let b = flat
                .get(&format!("{w}.lora_b"))
                .ok_or_else(|| ModelError::MissingTensor(format!("{w}.lora_b")))?;
            pairs.insert(w.to_string(), (a.clone(), b.clone()));
        }
        if pairs.len() * 2 != flat.len() {
            return Err(ModelError::Format("unpaired adapter tensors".into()).into());
        }
        Ok(Self { config, pairs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()).map_err(ModelError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path).map_err(ModelError::from)?)
    }
}
