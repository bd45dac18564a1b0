//! Checkpoint surgery: fold LoRA adapters, check that dense sources line up,
//! average the shared backbone and stack feed-forward blocks as experts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Checkpoint, ModelError, MoeConfig, FFN_PARTS};
use crate::tensor::{Element, Tensor};
use crate::train::LoraAdapter;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("adapter for {name}: {msg}")]
    AdapterShape { name: String, msg: String },
    #[error("adapter targets unknown weight {0}")]
    UnknownTarget(String),
    #[error("merge needs at least 2 sources, got {0}")]
    TooFewSources(usize),
    #[error("source {0} is already a mixture-of-experts model")]
    NotDense(usize),
    #[error("incompatible sources:\n{0}")]
    Incompatible(CompatibilityReport),
    #[error("n_experts {n_experts} does not match {sources} sources")]
    ExpertCount { n_experts: usize, sources: usize },
    #[error("merge manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `W' = W + (alpha/rank)·B·A` for every adapted weight.
pub fn materialize_lora<T: Element>(base: &Checkpoint<T>, adapter: &LoraAdapter<T>) -> Result<Checkpoint<T>, MergeError> {
    let scale = adapter.config.scaling();
    let mut out = base.clone();
    for (name, (a, b)) in &adapter.pairs {
        let w = out
            .tensors
            .get_mut(name)
            .ok_or_else(|| MergeError::UnknownTarget(name.clone()))?;
        let shape_err = |msg: String| MergeError::AdapterShape {
            name: name.clone(),
            msg,
        };
        let r = adapter.config.rank;
        if w.rank() != 2 || a.shape() != [r, w.shape()[1]] || b.shape() != [w.shape()[0], r] {
            return Err(shape_err(format!(
                "A {:?}, B {:?} do not fit weight {:?} at rank {r}",
                a.shape(),
                b.shape(),
                w.shape()
            )));
        }
        let delta = b.matmul(a).map_err(|e| shape_err(e.to_string()))?;
        let s = T::from_f64_lossy(scale);
        for (wv, dv) in w.data_mut().iter_mut().zip(delta.data()) {
            *wv = *wv + s * *dv;
        }
    }
    out.metadata = format!("{}+lora(r={},alpha={})", base.metadata, adapter.config.rank, adapter.config.alpha);
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CompatibilityReport {
    pub mismatches: Vec<String>,
}

impl CompatibilityReport {
    pub fn is_compatible(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl std::fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.mismatches.is_empty() {
            return f.write_str("compatible");
        }
        for m in &self.mismatches {
            writeln!(f, "  {m}")?;
        }
        Ok(())
    }
}

/// Compare every source against the first: configs (ignoring the MoE field)
/// and tensor names with shapes.
pub fn check_compatibility<T: Element>(sources: &[Checkpoint<T>]) -> CompatibilityReport {
    let mut report = CompatibilityReport::default();
    let Some(first) = sources.first() else {
        report.mismatches.push("no sources".into());
        return report;
    };
    if sources.len() < 2 {
        report.mismatches.push("fewer than 2 sources".into());
    }
    for (i, s) in sources.iter().enumerate().skip(1) {
        if s.config.dense() != first.config.dense() {
            report
                .mismatches
                .push(format!("source {i}: config differs from source 0"));
        }
        for (name, t) in &first.tensors {
            match s.tensors.get(name) {
                None => report.mismatches.push(format!("source {i}: missing {name}")),
                Some(u) if u.shape() != t.shape() => report.mismatches.push(format!(
                    "source {i}: {name} has shape {:?}, source 0 has {:?}",
                    u.shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for name in s.tensors.keys().filter(|n| !first.tensors.contains_key(*n)) {
            report.mismatches.push(format!("source {i}: extra {name}"));
        }
    }
    report
}

/// Ordered dense sources; with `include_base_as_expert` the last one is the
/// shared base model.
#[derive(Clone, Debug)]
pub struct MergePlan<T> {
    pub sources: Vec<Checkpoint<T>>,
    /// Provenance label per source.
    pub labels: Vec<String>,
    pub include_base_as_expert: bool,
    pub moe: MoeConfig,
}

impl<T: Element> MergePlan<T> {
    pub fn new(sources: Vec<Checkpoint<T>>, include_base_as_expert: bool, moe: MoeConfig) -> Self {
        let labels = sources.iter().map(|s| s.metadata.clone()).collect();
        Self {
            sources,
            labels,
            include_base_as_expert,
            moe,
        }
    }

    pub fn validate(&self) -> Result<(), MergeError> {
        if self.sources.len() < 2 {
            return Err(MergeError::TooFewSources(self.sources.len()));
        }
        if let Some(i) = self.sources.iter().position(|s| s.config.is_moe()) {
            return Err(MergeError::NotDense(i));
        }
        let report = check_compatibility(&self.sources);
        if !report.is_compatible() {
            return Err(MergeError::Incompatible(report));
        }
        if self.moe.n_experts != self.sources.len() {
            return Err(MergeError::ExpertCount {
                n_experts: self.moe.n_experts,
                sources: self.sources.len(),
            });
        }
        self.moe.validate()?;
        Ok(())
    }
}

/// Split `layers.{i}.ffn.{part}` into `(layer prefix, part)`.
fn ffn_parts(name: &str) -> Option<(&str, &str)> {
    let (prefix, part) = name.rsplit_once(".ffn.")?;
    FFN_PARTS.contains(&part).then_some((prefix, part))
}

pub fn merge_btx<T: Element>(plan: &MergePlan<T>) -> Result<Checkpoint<T>, MergeError> {
    plan.validate()?;
    let first = &plan.sources[0];
    let m = plan.sources.len() as f64;
    let config = first.config.with_moe(plan.moe.clone());
    let mut tensors = BTreeMap::new();
    for (name, t) in &first.tensors {
        if let Some((prefix, part)) = ffn_parts(name) {
            for (e, src) in plan.sources.iter().enumerate() {
                tensors.insert(format!("{prefix}.moe.expert.{e}.{part}"), src.tensors[name].clone());
            }
        } else {
            let mut sum = vec![0.0f64; t.numel()];
            for src in &plan.sources {
                for (acc, v) in sum.iter_mut().zip(src.tensors[name].data()) {
                    *acc += v.to_f64_lossy();
                }
            }
            let mean = Tensor::from_fn(t.shape(), |i| T::from_f64_lossy(sum[i] / m));
            tensors.insert(name.clone(), mean);
        }
    }
    for layer in 0..config.n_layers {
        tensors.insert(
            format!("layers.{layer}.moe.router"),
            Tensor::zeros(&[config.d_model, plan.moe.n_experts]),
        );
    }
    let metadata = format!(
        "btx-merge:{}x top_k={} base_expert={} sources=[{}]",
        plan.sources.len(),
        plan.moe.top_k,
        plan.include_base_as_expert,
        plan.labels.join(", ")
    );
    Ok(Checkpoint::new(config, tensors, metadata)?)
}

/// TOML merge manifest. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeManifest {
    pub sources: Vec<PathBuf>,
    /// The last source is the base model.
    #[serde(default)]
    pub include_base: bool,
    pub top_k: usize,
    #[serde(default = "default_lb_coeff")]
    pub lb_coeff: f64,
    pub output: PathBuf,
}

fn default_lb_coeff() -> f64 {
    0.01
}

impl MergeManifest {
    pub fn parse(text: &str) -> Result<Self, MergeError> {
        toml::from_str(text).map_err(|e| MergeError::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, MergeError> {
        let text = std::fs::read_to_string(path).map_err(ModelError::from)?;
        let mut m = Self::parse(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for s in &mut m.sources {
            *s = dir.join(&*s);
        }
        m.output = dir.join(&m.output);
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Load the sources, merge, and write the result to `output`.
    pub fn run<T: Element>(&self) -> Result<Checkpoint<T>, MergeError> {
        let sources = self
            .sources
            .iter()
            .map(|p| {
                let mut c = Checkpoint::<T>::load(p)?;
                c.metadata = format!("{} ({})", p.display(), c.metadata);
                Ok(c)
            })
            .collect::<Result<Vec<_>, MergeError>>()?;
        let moe = MoeConfig::new(sources.len(), self.top_k, self.lb_coeff);
        let merged = merge_btx(&MergePlan::new(sources, self.include_base, moe))?;
        merged.save(&self.output)?;
        Ok(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::train::LoraConfig;

    #[test]
    fn zero_b_leaves_weights_bitwise_equal() {
        let base = init_model::<f64>(&ModelConfig::default(), 1).unwrap();
        let ad = LoraAdapter::init(&base, &LoraConfig::new(4, 8.0), 2).unwrap();
        assert_eq!(materialize_lora(&base, &ad).unwrap().tensors, base.tensors);
    }

    #[test]
    fn lora_scaling_is_alpha_over_rank() {
        assert_eq!(LoraConfig::new(256, 128.0).scaling(), 0.5);
    }

    #[test]
    fn two_source_shapes() {
        let c = ModelConfig::default();
        let a = init_model::<f32>(&c, 1).unwrap();
        let b = init_model::<f32>(&c, 2).unwrap();
        let merged = merge_btx(&MergePlan::new(vec![a.clone(), b], false, MoeConfig::new(2, 2, 0.01))).unwrap();
        assert_eq!(merged.get("layers.0.moe.router").unwrap().shape(), &[64, 2]);
        let backbone = |k: &Checkpoint<f32>| k.tensors.keys().filter(|n| !n.contains(".ffn.") && !n.contains(".moe.")).count();
        assert_eq!(backbone(&merged), backbone(&a));
    }

    #[test]
    fn compatibility_reports_offending_tensors() {
        let a = init_model::<f32>(&ModelConfig::default(), 1).unwrap();
        let b = init_model::<f32>(&ModelConfig { d_ff: 96, ..ModelConfig::default() }, 1).unwrap();
        assert!(check_compatibility(&[a.clone(), a.clone()]).is_compatible());
        let r = check_compatibility(&[a, b]);
        assert!(!r.is_compatible());
        assert!(r.mismatches.iter().any(|m| m.contains("layers.0.ffn.up")));
    }

    #[test]
    fn expert_count_must_match() {
        let a = init_model::<f32>(&ModelConfig::default(), 1).unwrap();
        let plan = MergePlan::new(vec![a.clone(), a], false, MoeConfig::new(3, 2, 0.01));
        assert!(matches!(merge_btx(&plan), Err(MergeError::ExpertCount { .. })));
    }

    #[test]
    fn manifest_parses() {
        let m = MergeManifest::parse(
            "sources = [\"arabic.ckpt\", \"latin.ckpt\", \"base.ckpt\"]\ninclude_base = true\ntop_k = 2\noutput = \"btx3.ckpt\"\n",
        )
        .unwrap();
        assert_eq!(m.sources.len(), 3);
        assert_eq!(m.lb_coeff, 0.01);
        assert!(MergeManifest::parse("top_k = 2").is_err());
    }
}
