use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tokenizer::VOCAB_SIZE;

/// Mixture-of-experts feed-forward settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    /// Weight of the load-balancing auxiliary loss.
    pub lb_coeff: f64,
}

impl MoeConfig {
    pub fn new(n_experts: usize, top_k: usize, lb_coeff: f64) -> Self {
        Self {
            n_experts,
            top_k,
            lb_coeff,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_experts == 0 {
            return Err(ModelError::InvalidConfig("n_experts must be >= 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(ModelError::InvalidConfig(format!(
                "top_k ({}) must be in 1..=n_experts ({})",
                self.top_k, self.n_experts
            )));
        }
        if !(self.lb_coeff.is_finite() && self.lb_coeff >= 0.0) {
            return Err(ModelError::InvalidConfig(
                "lb_coeff must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeConfig>,
}

impl Default for ModelConfig {
    /// Desk-scale: trains in CPU-minutes.
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: VOCAB_SIZE,
            max_context: 256,
            moe: None,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn is_moe(&self) -> bool {
        self.moe.is_some()
    }

    /// Same architecture with dense feed-forward blocks.
    pub fn dense(&self) -> Self {
        Self {
            moe: None,
            ..self.clone()
        }
    }

    pub fn with_moe(&self, moe: MoeConfig) -> Self {
        Self {
            moe: Some(moe),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return bad("n_layers, d_model, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!(
                "head dimension {} must be even for rotary encoding",
                self.head_dim()
            ));
        }
        if self.vocab_size < VOCAB_SIZE {
            return bad(format!(
                "vocab_size ({}) must cover the {VOCAB_SIZE}-token byte vocabulary",
                self.vocab_size
            ));
        }
        if self.max_context == 0 {
            return bad("max_context must be >= 1".into());
        }
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        Ok(())
    }

    /// Canonical parameter names with their shapes, name-sorted.
    ///
    /// Linear weights are stored `[out, in]`; the router is `[d_model, n_experts]`.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("embed.tok".to_string(), vec![v, d]),
            ("head.out".to_string(), vec![v, d]),
        ];
        for i in 0..self.n_layers {
            let p = format!("layers.{i}");
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.attn.{w}"), vec![d, d]));
            }
            out.push((format!("{p}.norm1.gain"), vec![d]));
            out.push((format!("{p}.norm2.gain"), vec![d]));
            match &self.moe {
                None => {
                    for (name, shape) in ffn_shapes(d, f) {
                        out.push((format!("{p}.ffn.{name}"), shape));
                    }
                }
                Some(moe) => {
                    for e in 0..moe.n_experts {
                        for (name, shape) in ffn_shapes(d, f) {
                            out.push((format!("{p}.moe.expert.{e}.{name}"), shape));
                        }
                    }
                    out.push((format!("{p}.moe.router"), vec![d, moe.n_experts]));
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

fn ffn_shapes(d: usize, f: usize) -> [(&'static str, Vec<usize>); 3] {
    [
        ("down", vec![d, f]),
        ("gate", vec![f, d]),
        ("up", vec![f, d]),
    ]
}

/// Feed-forward tensor names of one block, for dense or expert prefixes.
pub const FFN_PARTS: [&str; 3] = ["up", "gate", "down"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.vocab_size, 260);
        assert_eq!(c.head_dim(), 16);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn published_moe_layouts_expressible() {
        for (n, k) in [(2, 2), (3, 2)] {
            MoeConfig::new(n, k, 0.01).validate().unwrap();
        }
        assert!(MoeConfig::new(2, 3, 0.01).validate().is_err());
    }

    #[test]
    fn canonical_names() {
        let c = ModelConfig::default().with_moe(MoeConfig::new(3, 2, 0.01));
        let names: Vec<String> = c.parameter_shapes().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"layers.1.moe.expert.2.gate".to_string()));
        assert!(names.contains(&"layers.0.moe.router".to_string()));
        assert!(!names.iter().any(|n| n.contains(".ffn.")));
        // embed + head + 2 × (4 attn + 2 norms + 3×3 experts + router)
        assert_eq!(names.len(), 2 + 2 * (4 + 2 + 9 + 1));
    }
}
