use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, MoeConfig};
use crate::train::{DpoConfig, LoraConfig, OptimConfig, PairMode, Stage, StageConfig};

/// Training settings of one pipeline stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePreset {
    pub optim: OptimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    pub seed: u64,
}

fn default_seq_len() -> usize {
    64
}

impl StagePreset {
    pub fn stage_config(&self, stage: Stage) -> StageConfig {
        let mut c = StageConfig::new(stage, self.optim.clone(), self.seed);
        c.lora = self.lora.clone();
        c.seq_len = self.seq_len;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoPreset {
    pub optim: OptimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub dpo: DpoConfig,
    pub mode: PairMode,
    /// Upper bound on the number of preference pairs.
    pub max_pairs: usize,
    /// Merge variants to align; empty means all.
    #[serde(default)]
    pub variants: Vec<String>,
    pub seed: u64,
}

impl DpoPreset {
    pub fn stage_config(&self) -> StageConfig {
        let mut c = StageConfig::new(Stage::Dpo, self.optim.clone(), self.seed);
        c.lora = self.lora.clone();
        c.dpo = Some(self.dpo.clone());
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePresets {
    /// Pre-training of the shared base on the base-domain corpus; without it
    /// the branches start from the random initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<StagePreset>,
    pub cpt: StagePreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anneal: Option<StagePreset>,
    pub sft: StagePreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpo: Option<DpoPreset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub seed: u64,
    /// Sentences in the base-domain corpus.
    pub n_base: usize,
    /// Share of the base corpus drawn from each branch script (Arabic script
    /// and Arabizi); the rest is base-domain text.
    #[serde(default)]
    pub base_script_share: f64,
    /// Sentences per branch corpus.
    pub n_branch: usize,
    /// Held-out sentences per script for perplexity and routing.
    pub n_heldout: usize,
    /// Sentences joined into one pre-training document.
    #[serde(default = "default_sentences_per_doc")]
    pub sentences_per_doc: usize,
    /// Latin-script share of the Arabic-script branch corpus.
    #[serde(default)]
    pub arabic_branch_latin_ratio: f64,
    /// Latin-script share of the Latin-script branch corpus.
    #[serde(default = "one")]
    pub latin_branch_latin_ratio: f64,
    #[serde(default)]
    pub noise_level: f64,
    /// Instruction conversations before validation.
    pub n_sft: usize,
    /// Share of Arabic-script answers that carry a code-switched word.
    #[serde(default)]
    pub sft_noise: f64,
    /// Inclusive word-count window for corpus sentences.
    #[serde(default = "default_min_words")]
    pub min_words: usize,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
}

fn default_sentences_per_doc() -> usize {
    8
}
fn one() -> f64 {
    1.0
}
fn default_min_words() -> usize {
    crate::data::MIN_WORDS
}
fn default_max_words() -> usize {
    crate::data::MAX_WORDS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeVariant {
    pub name: String,
    /// Add the base model as the last expert.
    #[serde(default)]
    pub include_base: bool,
}

impl MergeVariant {
    pub fn n_experts(&self) -> usize {
        2 + usize::from(self.include_base)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSettings {
    pub top_k: usize,
    #[serde(default = "default_lb")]
    pub lb_coeff: f64,
    pub variants: Vec<MergeVariant>,
}

fn default_lb() -> f64 {
    0.01
}

impl MergeSettings {
    pub fn moe(&self, v: &MergeVariant) -> MoeConfig {
        MoeConfig::new(v.n_experts(), self.top_k, self.lb_coeff)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Suite manifest; when absent a synthetic suite is generated from held-out data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<PathBuf>,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_n_gen")]
    pub n_gen: usize,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    pub seed: u64,
}

fn default_n_mc() -> usize {
    40
}
fn default_n_gen() -> usize {
    8
}
fn default_max_new() -> usize {
    48
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seed of the base model initialization.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataSettings,
    pub stages: StagePresets,
    pub merge: MergeSettings,
    pub eval: EvalSettings,
}

pub const PROFILES: &[(&str, &str)] = &[
    ("desk-scale", include_str!("../../profiles/desk-scale.toml")),
    ("paper-cpt", include_str!("../../profiles/paper-cpt.toml")),
    ("paper-sft", include_str!("../../profiles/paper-sft.toml")),
    ("paper-moe-sft", include_str!("../../profiles/paper-moe-sft.toml")),
    ("paper-dpo", include_str!("../../profiles/paper-dpo.toml")),
];

/// One validation problem, anchored to a 1-based line when it can be located.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub line: Option<usize>,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.path, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return writeln!(f, "valid");
        }
        for i in &self.issues {
            writeln!(f, "{i}")?;
        }
        Ok(())
    }
}

/// Line of the key at dotted `path`, following `[table]` headers, dotted
/// keys and inline tables; falls back to the closest enclosing table.
pub fn locate(text: &str, path: &str) -> Option<usize> {
    let parts: Vec<&str> = path.split('.').filter(|p| p.parse::<usize>().is_err()).collect();
    let mut best: Option<(usize, usize)> = None;
    let mut table: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(h) = line.strip_prefix('[') {
            let h = h.trim_start_matches('[').trim_end_matches(']').trim_end_matches(']');
            table = h.split('.').map(|s| s.trim().to_string()).collect();
            let depth = prefix_len(&table, &parts);
            if depth == table.len() && best.is_none_or(|(d, _)| depth > d) {
                best = Some((depth, i + 1));
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else { continue };
        let mut full = table.clone();
        full.extend(key.trim().split('.').map(|s| s.trim().to_string()));
        if prefix_len(&table, &parts) < table.len() {
            continue;
        }
        let mut depth = prefix_len(&full, &parts);
        if depth < full.len() {
            continue;
        }
        // Keys nested in an inline table on this line.
        if depth < parts.len() && value.contains('{') {
            for p in &parts[depth..] {
                if value.contains(&format!("{p} =")) || value.contains(&format!("{p}=")) {
                    depth += 1;
                } else {
                    break;
                }
            }
        }
        if best.is_none_or(|(d, _)| depth > d) {
            best = Some((depth, i + 1));
        }
    }
    best.filter(|(d, _)| *d > 0).map(|(_, l)| l)
}

fn prefix_len(a: &[String], b: &[&str]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x.as_str() == **y).count()
}

impl ExperimentConfig {
    pub fn profile(name: &str) -> Option<Self> {
        PROFILES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| toml::from_str(text).expect("shipped profile parses"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Invariant problems as `(dotted path, message)`.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |p: &str, m: String| out.push((p.to_string(), m));
        if let Err(e) = self.model.validate() {
            push("model", e.to_string());
        }
        let presets = [
            ("stages.base", self.stages.base.as_ref()),
            ("stages.cpt", Some(&self.stages.cpt)),
            ("stages.anneal", self.stages.anneal.as_ref()),
            ("stages.sft", Some(&self.stages.sft)),
        ];
        for (path, p) in presets {
            let Some(p) = p else { continue };
            optim_problems(&format!("{path}.optim"), &p.optim, &mut push);
            if let Some(l) = &p.lora {
                if let Err(e) = l.validate() {
                    push(&format!("{path}.lora"), e.to_string());
                }
            }
            if p.seq_len == 0 || p.seq_len > self.model.max_context {
                push(
                    &format!("{path}.seq_len"),
                    format!("seq_len ({}) must be in 1..=model.max_context ({})", p.seq_len, self.model.max_context),
                );
            }
        }
        if let Some(d) = &self.stages.dpo {
            optim_problems("stages.dpo.optim", &d.optim, &mut push);
            if let Err(e) = d.dpo.validate() {
                push("stages.dpo.dpo", e.to_string());
            }
            if !d.dpo.full_finetune && d.lora.is_none() {
                push("stages.dpo.lora", "full_finetune = false needs a lora table".into());
            }
            if d.max_pairs == 0 {
                push("stages.dpo.max_pairs", "max_pairs must be >= 1".into());
            }
            for v in &d.variants {
                if !self.merge.variants.iter().any(|m| &m.name == v) {
                    push("stages.dpo.variants", format!("unknown merge variant {v:?}"));
                }
            }
        }
        let d = &self.data;
        for (name, r) in [
            ("arabic_branch_latin_ratio", d.arabic_branch_latin_ratio),
            ("latin_branch_latin_ratio", d.latin_branch_latin_ratio),
            ("noise_level", d.noise_level),
            ("sft_noise", d.sft_noise),
        ] {
            if !(0.0..=1.0).contains(&r) {
                push(&format!("data.{name}"), format!("{name} ({r}) must be in [0, 1]"));
            }
        }
        if !(0.0..=0.5).contains(&d.base_script_share) {
            push(
                "data.base_script_share",
                format!("base_script_share ({}) must be in [0, 0.5]", d.base_script_share),
            );
        }
        for (name, n) in [
            ("n_branch", d.n_branch),
            ("n_heldout", d.n_heldout),
            ("n_sft", d.n_sft),
            ("sentences_per_doc", d.sentences_per_doc),
        ] {
            if n == 0 {
                push(&format!("data.{name}"), format!("{name} must be >= 1"));
            }
        }
        if self.stages.base.is_some() && d.n_base == 0 {
            push("data.n_base", "n_base must be >= 1 when stages.base is set".into());
        }
        if d.min_words > d.max_words {
            push(
                "data.min_words",
                format!("min_words ({}) exceeds max_words ({})", d.min_words, d.max_words),
            );
        }
        if self.merge.variants.is_empty() {
            push("merge.variants", "at least one merge variant is required".into());
        }
        for (i, v) in self.merge.variants.iter().enumerate() {
            if self.merge.variants[..i].iter().any(|w| w.name == v.name) {
                push("merge.variants", format!("duplicate variant name {:?}", v.name));
            }
            if v.name.is_empty() || !v.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                push("merge.variants", format!("variant name {:?} must be [A-Za-z0-9_-]+", v.name));
            }
            let n = v.n_experts();
            if self.merge.top_k == 0 || self.merge.top_k > n {
                push(
                    "merge.top_k",
                    format!(
                        "top_k ({}) must be in 1..=n_experts ({n}) of variant {:?}",
                        self.merge.top_k, v.name
                    ),
                );
            }
        }
        if !(self.merge.lb_coeff.is_finite() && self.merge.lb_coeff >= 0.0) {
            push("merge.lb_coeff", "lb_coeff must be finite and >= 0".into());
        }
        if self.eval.suite.is_none() && (self.eval.n_mc < 4 || self.eval.n_gen == 0) {
            push("eval", "the generated suite needs n_mc >= 4 and n_gen >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> ValidationReport {
        self.report(None)
    }

    fn report(&self, text: Option<&str>) -> ValidationReport {
        ValidationReport {
            issues: self
                .problems()
                .into_iter()
                .map(|(path, message)| Issue {
                    line: text.and_then(|t| locate(t, &path)),
                    path,
                    message,
                })
                .collect(),
        }
    }

    /// Parse and validate. Parse errors become a single issue.
    pub fn check_text(text: &str) -> (Option<Self>, ValidationReport) {
        match toml::from_str::<Self>(text) {
            Ok(cfg) => {
                let report = cfg.report(Some(text));
                (Some(cfg), report)
            }
            Err(e) => {
                let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
                let report = ValidationReport {
                    issues: vec![Issue {
                        line,
                        path: "<parse>".into(),
                        message: e.message().to_string(),
                    }],
                };
                (None, report)
            }
        }
    }

    /// Read a config file or, when `path` names no file, a shipped profile.
    pub fn load(path: &Path) -> Result<Self, ValidationReport> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                let name = path.to_string_lossy();
                if let Some((_, t)) = PROFILES.iter().find(|(n, _)| *n == name) {
                    t.to_string()
                } else {
                    return Err(ValidationReport {
                        issues: vec![Issue {
                            line: None,
                            path: path.display().to_string(),
                            message: e.to_string(),
                        }],
                    });
                }
            }
        };
        match Self::check_text(&text) {
            (Some(cfg), r) if r.is_valid() => Ok(cfg),
            (_, r) => Err(r),
        }
    }
}

fn optim_problems(path: &str, o: &OptimConfig, push: &mut impl FnMut(&str, String)) {
    if !(0.0..=1.0).contains(&o.warmup_ratio) {
        push(
            &format!("{path}.warmup_ratio"),
            format!("warmup_ratio ({}) must be in [0, 1]", o.warmup_ratio),
        );
    } else if let Err(e) = o.validate() {
        push(path, e.to_string());
    }
}

/// Validate a config file (or a shipped profile name) without running anything.
pub fn validate_config(path: &Path) -> ValidationReport {
    let profile = PROFILES.iter().find(|(n, _)| Path::new(n) == path);
    match (std::fs::read_to_string(path), profile) {
        (Ok(text), _) => ExperimentConfig::check_text(&text).1,
        (Err(_), Some((_, text))) => ExperimentConfig::check_text(text).1,
        (Err(e), None) => ValidationReport {
            issues: vec![Issue {
                line: None,
                path: path.display().to_string(),
                message: e.to_string(),
            }],
        },
    }
}
