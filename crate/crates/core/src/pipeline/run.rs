use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, MergeVariant, ValidationReport};
use super::synth;
use super::PipelineError;
use crate::data::{
    filter_by_length, generate_corpus, read_jsonl, validate_conversations, write_jsonl, CorpusSpec, Domain, Script,
    SftRecord, TaggedSentence, TransliterationTable,
};
use crate::eval::{
    routing_stats, run_benchmark, specialization_score, BenchTask, SuiteEntry, SuiteManifest, SuiteTaskType,
};
use crate::merge::{merge_btx, MergePlan};
use crate::model::{init_model, perplexity, Checkpoint};
use crate::moe::RoutingTrace;
use crate::train::{build_preference_pairs, train_stage, LossCurve, Stage, TrainData, TrainError, TrainOutput};

pub type Model = Checkpoint<f32>;

pub const STAGES: [&str; 8] = ["data", "base", "branch", "merge", "sft", "dpo", "eval", "route"];
pub const MANIFEST: &str = "manifest.json";
/// Branch corpora in expert order.
pub const BRANCHES: [(&str, Script); 2] = [("arabic", Script::Arabic), ("latin", Script::Latin)];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's configuration and input artifacts.
    pub input_hash: String,
    /// Artifact path (relative to the output directory) → sha256.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub checks: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Option<Self> {
        serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

/// What a pipeline run did, stage by stage.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub stages: Vec<(String, StageStatus)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parse a comma-separated stage list; `None` or `all` selects every stage.
pub fn parse_stages(list: Option<&str>) -> Result<Vec<&'static str>, PipelineError> {
    let Some(list) = list.filter(|l| l.trim() != "all") else {
        return Ok(STAGES.to_vec());
    };
    let mut wanted = Vec::new();
    for s in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let stage = STAGES
            .iter()
            .find(|x| **x == s)
            .ok_or_else(|| PipelineError::UnknownStage(s.to_string()))?;
        wanted.push(*stage);
    }
    Ok(STAGES.iter().copied().filter(|s| wanted.contains(s)).collect())
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
    table: TransliterationTable,
    log: &'a mut dyn FnMut(&str),
}

type StageResult = Result<(Vec<String>, BTreeMap<String, Value>), PipelineError>;

/// Run the requested stages in pipeline order, writing artifacts and
/// `manifest.json` under `out`. Stages whose configuration and inputs are
/// unchanged since the last run are skipped.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    stages: &[&str],
    out: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<RunSummary, PipelineError> {
    let report: ValidationReport = cfg.validate();
    if !report.is_valid() {
        return Err(PipelineError::Invalid(report));
    }
    std::fs::create_dir_all(out)?;
    let config_hash = sha256_hex(cfg.to_toml().as_bytes());
    let mut manifest = Manifest::load(&out.join(MANIFEST)).unwrap_or_default();
    manifest.experiment = cfg.name.clone();
    manifest.config_hash = config_hash;
    let mut runner = Runner {
        cfg,
        out: out.to_path_buf(),
        manifest,
        table: TransliterationTable::default(),
        log,
    };
    let mut summary = RunSummary::default();
    for stage in STAGES.iter().filter(|s| stages.contains(s)) {
        let status = runner.run_stage(stage)?;
        summary.stages.push((stage.to_string(), status));
    }
    Ok(summary)
}

impl Runner<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn file_hash(&self, rel: &str, kind: &str) -> Result<String, PipelineError> {
        match std::fs::read(self.path(rel)) {
            Ok(b) => Ok(sha256_hex(&b)),
            Err(_) => Err(PipelineError::MissingInput(kind.to_string())),
        }
    }

    fn variants(&self) -> &[MergeVariant] {
        &self.cfg.merge.variants
    }

    fn dpo_applies(&self, v: &str) -> bool {
        self.cfg
            .stages
            .dpo
            .as_ref()
            .is_some_and(|d| d.variants.is_empty() || d.variants.iter().any(|x| x == v))
    }

    /// Checkpoint evaluated for a variant: the DPO result when aligned, else SFT.
    fn final_checkpoint(&self, v: &str) -> String {
        if self.dpo_applies(v) {
            format!("dpo/{v}.ckpt")
        } else {
            format!("sft/{v}.ckpt")
        }
    }

    fn base_checkpoint(&self) -> &'static str {
        "base/base.ckpt"
    }

    /// Stage configuration plus input artifact paths with their kinds.
    fn stage_inputs(&self, stage: &str) -> (Value, Vec<(String, &'static str)>) {
        let c = self.cfg;
        let ckpt = "checkpoint";
        let corpus = "corpus";
        let mut inputs: Vec<(String, &'static str)> = Vec::new();
        let config = match stage {
            "data" => json!({"data": c.data, "max_context": c.model.max_context}),
            "base" => {
                if c.stages.base.is_some() {
                    inputs.push(("data/base.jsonl".into(), corpus));
                }
                json!({"model": c.model, "seed": c.seed, "preset": c.stages.base})
            }
            "branch" => {
                inputs.push((self.base_checkpoint().into(), ckpt));
                for (b, _) in BRANCHES {
                    inputs.push((format!("data/{b}.jsonl"), corpus));
                }
                json!({"cpt": c.stages.cpt, "anneal": c.stages.anneal, "per_doc": c.data.sentences_per_doc})
            }
            "merge" => {
                for (b, _) in BRANCHES {
                    inputs.push((format!("branch/{b}.ckpt"), ckpt));
                }
                if self.variants().iter().any(|v| v.include_base) {
                    inputs.push((self.base_checkpoint().into(), ckpt));
                }
                json!({"merge": c.merge})
            }
            "sft" => {
                for v in self.variants() {
                    inputs.push((format!("merge/{}.ckpt", v.name), ckpt));
                }
                inputs.push(("data/sft.jsonl".into(), corpus));
                json!({"sft": c.stages.sft, "lb": c.merge.lb_coeff})
            }
            "dpo" => {
                for v in self.variants().iter().filter(|v| self.dpo_applies(&v.name)) {
                    inputs.push((format!("sft/{}.ckpt", v.name), ckpt));
                }
                inputs.push(("data/sft.jsonl".into(), corpus));
                json!({"dpo": c.stages.dpo})
            }
            "eval" => {
                inputs.push((self.base_checkpoint().into(), ckpt));
                for (b, _) in BRANCHES {
                    inputs.push((format!("branch/{b}.ckpt"), ckpt));
                    inputs.push((format!("data/heldout_{b}.jsonl"), corpus));
                }
                for v in self.variants() {
                    inputs.push((format!("merge/{}.ckpt", v.name), ckpt));
                    inputs.push((format!("sft/{}.ckpt", v.name), ckpt));
                    inputs.push((self.final_checkpoint(&v.name), ckpt));
                }
                match &c.eval.suite {
                    Some(p) => inputs.push((p.display().to_string(), "suite")),
                    None => inputs.push(("data/suite/suite.toml".into(), "suite")),
                }
                json!({"eval": c.eval, "per_doc": c.data.sentences_per_doc})
            }
            "route" => {
                for (b, _) in BRANCHES {
                    inputs.push((format!("data/heldout_{b}.jsonl"), corpus));
                }
                for v in self.variants() {
                    inputs.push((self.final_checkpoint(&v.name), ckpt));
                }
                json!({"per_doc": c.data.sentences_per_doc})
            }
            _ => Value::Null,
        };
        inputs.dedup();
        (config, inputs)
    }

    fn run_stage(&mut self, stage: &str) -> Result<StageStatus, PipelineError> {
        let (config, inputs) = self.stage_inputs(stage);
        let mut hasher = Sha256::new();
        hasher.update(stage.as_bytes());
        hasher.update(config.to_string().as_bytes());
        for (rel, kind) in &inputs {
            hasher.update(rel.as_bytes());
            hasher.update(self.file_hash(rel, kind)?.as_bytes());
        }
        let input_hash = hex::encode(hasher.finalize());

        if let Some(rec) = self.manifest.stages.get(stage) {
            let intact = rec
                .artifacts
                .iter()
                .all(|(rel, h)| std::fs::read(self.path(rel)).is_ok_and(|b| sha256_hex(&b) == *h));
            if rec.input_hash == input_hash && intact {
                (self.log)(&format!("[{stage}] up to date"));
                return Ok(StageStatus::Cached);
            }
        }
        (self.log)(&format!("[{stage}] running"));
        let (artifacts, checks) = match stage {
            "data" => self.stage_data(),
            "base" => self.stage_base(),
            "branch" => self.stage_branch(),
            "merge" => self.stage_merge(),
            "sft" => self.stage_sft(),
            "dpo" => self.stage_dpo(),
            "eval" => self.stage_eval(),
            "route" => self.stage_route(),
            other => Err(PipelineError::UnknownStage(other.to_string())),
        }?;
        let mut rec = StageRecord {
            input_hash,
            artifacts: BTreeMap::new(),
            checks,
        };
        for rel in artifacts {
            let h = self.file_hash(&rel, "artifact")?;
            rec.artifacts.insert(rel, h);
        }
        self.manifest.stages.insert(stage.to_string(), rec);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(self.path(MANIFEST), text + "\n")?;
        Ok(StageStatus::Ran)
    }

    fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<String, PipelineError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, bytes)?;
        Ok(rel.to_string())
    }

    fn write_jsonl<T: Serialize>(&self, rel: &str, records: &[T]) -> Result<String, PipelineError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_jsonl(&p, records).map_err(|e| PipelineError::stage("data", e))?;
        Ok(rel.to_string())
    }

    fn save(&self, rel: &str, model: &Model) -> Result<String, PipelineError> {
        self.write(rel, model.to_bytes())
    }

    fn load(&self, rel: &str) -> Result<Model, PipelineError> {
        if !self.path(rel).exists() {
            return Err(PipelineError::MissingInput("checkpoint".into()));
        }
        Checkpoint::load(self.path(rel)).map_err(|e| PipelineError::stage(rel, e))
    }

    fn sentences(&self, rel: &str) -> Result<Vec<TaggedSentence>, PipelineError> {
        if !self.path(rel).exists() {
            return Err(PipelineError::MissingInput("corpus".into()));
        }
        read_jsonl(&self.path(rel)).map_err(|e| PipelineError::stage(rel, e))
    }

    fn docs(&self, rel: &str) -> Result<Vec<Vec<u32>>, PipelineError> {
        Ok(synth::documents(&self.sentences(rel)?, self.cfg.data.sentences_per_doc))
    }

    fn train(&mut self, stage: &str, model: &Model, data: &TrainData, cfg: &crate::train::StageConfig, curve: &str) -> Result<(Model, LossCurve, String), PipelineError> {
        let out: TrainOutput<f32> = train_stage(model, data, cfg).map_err(|e| PipelineError::train(stage, e))?;
        let folded = out.folded().map_err(|e| PipelineError::stage(stage, e))?;
        let rel = self.write(curve, out.curve.to_tsv())?;
        if let Some((first, last)) = out.curve.endpoints(10) {
            (self.log)(&format!("[{stage}] {curve}: loss {first:.4} -> {last:.4}"));
        }
        Ok((folded, out.curve, rel))
    }

    fn stage_data(&mut self) -> StageResult {
        let d = &self.cfg.data;
        let corpus = |domain: Domain, n: usize, latin: f64, seed: u64| -> Result<Vec<TaggedSentence>, PipelineError> {
            let mut spec = CorpusSpec::new(domain, n, latin, seed);
            spec.noise_level = d.noise_level;
            let sentences = generate_corpus(&spec, &self.table).map_err(|e| PipelineError::stage("data", e))?;
            let texts: Vec<String> = sentences.iter().map(|s| s.text.clone()).collect();
            let keep = filter_by_length(&texts, d.min_words, d.max_words).map_err(|e| PipelineError::stage("data", e))?;
            let keep: std::collections::HashSet<String> = keep.into_iter().collect();
            Ok(sentences.into_iter().filter(|s| keep.contains(&s.text)).collect())
        };
        let mut artifacts = Vec::new();
        let mut checks = BTreeMap::new();
        let n_script = (d.base_script_share * d.n_base as f64).round() as usize;
        let mut base = corpus(Domain::BaseDomain, d.n_base - 2 * n_script, 0.0, d.seed)?;
        base.extend(corpus(Domain::BranchArabic, n_script, 0.0, d.seed.wrapping_add(101))?);
        base.extend(corpus(Domain::BranchLatin, n_script, 1.0, d.seed.wrapping_add(102))?);
        base.shuffle(&mut ChaCha8Rng::seed_from_u64(d.seed));
        artifacts.push(self.write_jsonl("data/base.jsonl", &base)?);
        let ratios = [d.arabic_branch_latin_ratio, d.latin_branch_latin_ratio];
        let domains = [Domain::BranchArabic, Domain::BranchLatin];
        let mut heldout = Vec::new();
        for (i, (name, _)) in BRANCHES.iter().enumerate() {
            let seed = d.seed.wrapping_add(1 + i as u64);
            let mut all = corpus(domains[i], d.n_branch + d.n_heldout, ratios[i], seed)?;
            let held = all.split_off(all.len().saturating_sub(d.n_heldout));
            artifacts.push(self.write_jsonl(&format!("data/{name}.jsonl"), &all)?);
            artifacts.push(self.write_jsonl(&format!("data/heldout_{name}.jsonl"), &held)?);
            checks.insert(format!("{name}_sentences"), json!(all.len()));
            heldout.push(held);
        }

        let raw = synth::sft_mix(d.n_sft, d.sft_noise, &self.table, d.seed.wrapping_add(10))
            .map_err(|e| PipelineError::stage("data", e))?;
        let (accepted, rejected) = validate_conversations(&raw);
        let max = self.cfg.model.max_context;
        let fits: Vec<SftRecord> = accepted
            .into_iter()
            .filter(|r| crate::tokenizer::encode_chat(&r.conversation()).tokens.len() <= max)
            .collect();
        checks.insert("sft_generated".into(), json!(raw.len()));
        checks.insert("sft_rejected".into(), json!(rejected.len()));
        checks.insert("sft_kept".into(), json!(fits.len()));
        artifacts.push(self.write_jsonl("data/sft.jsonl", &fits)?);
        artifacts.push(self.write(
            "data/sft_rejections.json",
            serde_json::to_string_pretty(&rejected).expect("report serializes") + "\n",
        )?);

        if self.cfg.eval.suite.is_none() {
            artifacts.extend(self.write_suite(&heldout[0], &heldout[1])?);
        }
        Ok((artifacts, checks))
    }

    fn write_suite(&self, arabic: &[TaggedSentence], latin: &[TaggedSentence]) -> Result<Vec<String>, PipelineError> {
        let e = &self.cfg.eval;
        let max = self.cfg.model.max_context;
        let short = |s: &&TaggedSentence| s.text.len() < max / 3;
        let arabic_short: Vec<TaggedSentence> = arabic.iter().filter(short).cloned().collect();
        let mut artifacts = Vec::new();
        let mut entries = Vec::new();
        let mut add_mc = |name: &str, tasks: Vec<crate::eval::McTask>, chat: bool| -> Result<(), PipelineError> {
            let file = format!("{name}.jsonl");
            artifacts.push(self.write_jsonl(&format!("data/suite/{file}"), &tasks)?);
            entries.push(SuiteEntry {
                name: name.into(),
                kind: SuiteTaskType::MultipleChoice,
                fixture: file.into(),
                apply_chat_template: chat,
                max_new_tokens: e.max_new_tokens,
            });
            Ok(())
        };
        add_mc("cloze-arabic", synth::cloze_tasks(arabic, e.n_mc, e.seed), false)?;
        add_mc("cloze-latin", synth::cloze_tasks(latin, e.n_mc, e.seed.wrapping_add(1)), false)?;
        add_mc(
            "translit-choice",
            synth::transliteration_choice_tasks(&arabic_short, &self.table, e.n_mc, e.seed.wrapping_add(2)),
            true,
        )?;
        let gens = [
            ("transliterate", synth::transliteration_generation(&arabic_short, &self.table, e.n_gen)),
            (
                "translate",
                synth::translation_generation(&arabic_short, e.n_gen).map_err(|x| PipelineError::stage("data", x))?,
            ),
        ];
        for (name, items) in gens {
            let file = format!("{name}.jsonl");
            artifacts.push(self.write_jsonl(&format!("data/suite/{file}"), &items)?);
            entries.push(SuiteEntry {
                name: name.into(),
                kind: SuiteTaskType::Generation,
                fixture: file.into(),
                apply_chat_template: true,
                max_new_tokens: e.max_new_tokens,
            });
        }
        let manifest = SuiteManifest { tasks: entries };
        artifacts.push(self.write("data/suite/suite.toml", manifest.to_toml())?);
        Ok(artifacts)
    }

    fn stage_base(&mut self) -> StageResult {
        let init: Model = init_model(&self.cfg.model, self.cfg.seed).map_err(|e| PipelineError::stage("base", e))?;
        let mut artifacts = Vec::new();
        let mut checks = BTreeMap::new();
        let model = match self.cfg.stages.base.clone() {
            Some(preset) => {
                let docs = self.docs("data/base.jsonl")?;
                let (m, curve, rel) = self.train(
                    "base",
                    &init,
                    &TrainData::Documents(docs),
                    &preset.stage_config(Stage::Cpt),
                    "base/curve.tsv",
                )?;
                checks.insert("curve_finite".into(), json!(curve.all_finite()));
                artifacts.push(rel);
                m
            }
            None => init,
        };
        artifacts.push(self.save(self.base_checkpoint(), &model)?);
        Ok((artifacts, checks))
    }

    fn stage_branch(&mut self) -> StageResult {
        let base = self.load(self.base_checkpoint())?;
        let mut artifacts = Vec::new();
        let mut checks = BTreeMap::new();
        for (name, _) in BRANCHES {
            let docs = self.docs(&format!("data/{name}.jsonl"))?;
            let cpt = self.cfg.stages.cpt.clone();
            let (mut model, curve, rel) = self.train(
                "branch",
                &base,
                &TrainData::Documents(docs.clone()),
                &cpt.stage_config(Stage::Cpt),
                &format!("branch/{name}.cpt.tsv"),
            )?;
            artifacts.push(rel);
            let mut finite = curve.all_finite();
            if let Some(anneal) = self.cfg.stages.anneal.clone() {
                let subset = docs[docs.len() - docs.len().div_ceil(4)..].to_vec();
                let (m, curve, rel) = self.train(
                    "branch",
                    &model,
                    &TrainData::Documents(subset),
                    &anneal.stage_config(Stage::Anneal),
                    &format!("branch/{name}.anneal.tsv"),
                )?;
                model = m;
                finite &= curve.all_finite();
                artifacts.push(rel);
            }
            model.metadata = format!("{name}-branch");
            checks.insert(format!("{name}_curve_finite"), json!(finite));
            artifacts.push(self.save(&format!("branch/{name}.ckpt"), &model)?);
        }
        Ok((artifacts, checks))
    }

    fn stage_merge(&mut self) -> StageResult {
        let branches: Vec<Model> = BRANCHES
            .iter()
            .map(|(b, _)| self.load(&format!("branch/{b}.ckpt")))
            .collect::<Result<_, _>>()?;
        let base = if self.variants().iter().any(|v| v.include_base) {
            Some(self.load(self.base_checkpoint())?)
        } else {
            None
        };
        let mut artifacts = Vec::new();
        let mut checks = BTreeMap::new();
        for v in self.variants().to_vec() {
            let mut sources = branches.clone();
            if v.include_base {
                sources.push(base.clone().expect("base loaded"));
            }
            let labels = sources.iter().map(|s| s.metadata.clone()).collect();
            let mut plan = MergePlan::new(sources, v.include_base, self.cfg.merge.moe(&v));
            plan.labels = labels;
            let merged = merge_btx(&plan).map_err(|e| PipelineError::stage("merge", e))?;
            let first = &plan.sources[0].tensors;
            if plan.sources.iter().all(|s| &s.tensors == first) {
                let probe: Vec<Vec<u32>> = (0..4)
                    .map(|r| (0..16u32).map(|i| (i * 37 + r * 11) % 256).collect())
                    .collect();
                let a = merged.forward_logits(&probe).map_err(|e| PipelineError::stage("merge", e))?;
                let b = plan.sources[0].forward_logits(&probe).map_err(|e| PipelineError::stage("merge", e))?;
                let diff = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f32, f32::max);
                checks.insert(
                    format!("{}_dense_equivalence", v.name),
                    json!({"max_abs_diff": diff, "passed": diff <= 1e-4}),
                );
            }
            artifacts.push(self.save(&format!("merge/{}.ckpt", v.name), &merged)?);
        }
        Ok((artifacts, checks))
    }

    fn sft_data(&self) -> Result<Vec<crate::data::Conversation>, PipelineError> {
        if !self.path("data/sft.jsonl").exists() {
            return Err(PipelineError::MissingInput("corpus".into()));
        }
        let records: Vec<SftRecord> = read_jsonl(&self.path("data/sft.jsonl")).map_err(|e| PipelineError::stage("sft", e))?;
        Ok(records.iter().map(SftRecord::conversation).collect())
    }

    fn stage_sft(&mut self) -> StageResult {
        let convs = self.sft_data()?;
        let mut artifacts = Vec::new();
        let mut checks = BTreeMap::new();
        let preset = self.cfg.stages.sft.clone();
        for v in self.variants().to_vec() {
            let merged = self.load(&format!("merge/{}.ckpt", v.name))?;
            let (model, curve, rel) = self.train(
                "sft",
                &merged,
                &TrainData::Conversations(convs.clone()),
                &preset.stage_config(Stage::Sft),
                &format!("sft/{}.tsv", v.name),
            )?;
            artifacts.push(rel);
            checks.insert(format!("{}_curve_finite", v.name), json!(curve.all_finite()));
            artifacts.push(self.save(&format!("sft/{}.ckpt", v.name), &model)?);
        }
        Ok((artifacts, checks))
    }

    fn stage_dpo(&mut self) -> StageResult {
        let Some(preset) = self.cfg.stages.dpo.clone() else {
            (self.log)("[dpo] not configured");
            return Ok((Vec::new(), BTreeMap::new()));
        };
        let convs = self.sft_data()?;
        let mut artifacts = Vec::new();
        let mut checks = BTreeMap::new();
        for v in self.variants().to_vec() {
            if !self.dpo_applies(&v.name) {
                continue;
            }
            let sft = self.load(&format!("sft/{}.ckpt", v.name))?;
            let mut pairs = build_preference_pairs(&convs, Some(&sft), preset.mode, &self.table, preset.seed)
                .map_err(|e| PipelineError::train("dpo", e))?;
            pairs.truncate(preset.max_pairs);
            checks.insert(format!("{}_pairs", v.name), json!(pairs.len()));
            let (model, curve, rel) = self.train(
                "dpo",
                &sft,
                &TrainData::Preferences(pairs),
                &preset.stage_config(),
                &format!("dpo/{}.tsv", v.name),
            )?;
            artifacts.push(rel);
            checks.insert(format!("{}_curve_finite", v.name), json!(curve.all_finite()));
            artifacts.push(self.save(&format!("dpo/{}.ckpt", v.name), &model)?);
        }
        Ok((artifacts, checks))
    }

    fn suite(&self) -> Result<Vec<BenchTask>, PipelineError> {
        let path = match &self.cfg.eval.suite {
            Some(p) => self.out.join(p),
            None => self.path("data/suite/suite.toml"),
        };
        if !path.exists() {
            return Err(PipelineError::MissingInput("suite".into()));
        }
        SuiteManifest::load(&path).map_err(|e| PipelineError::stage("eval", e))
    }

    /// Models scored by the eval stage, by report name.
    fn eval_models(&self) -> Vec<(String, String)> {
        let mut m = vec![("base".to_string(), self.base_checkpoint().to_string())];
        for (b, _) in BRANCHES {
            m.push((b.to_string(), format!("branch/{b}.ckpt")));
        }
        for v in self.variants() {
            m.push((format!("{}.merged", v.name), format!("merge/{}.ckpt", v.name)));
            m.push((format!("{}.sft", v.name), format!("sft/{}.ckpt", v.name)));
            if self.dpo_applies(&v.name) {
                m.push((format!("{}.dpo", v.name), format!("dpo/{}.ckpt", v.name)));
            }
        }
        m
    }

    fn stage_eval(&mut self) -> StageResult {
        let suite = self.suite()?;
        let heldout: Vec<Vec<Vec<u32>>> = BRANCHES
            .iter()
            .map(|(b, _)| self.docs(&format!("data/heldout_{b}.jsonl")))
            .collect::<Result<_, _>>()?;
        let mut artifacts = Vec::new();
        let mut ppl = BTreeMap::new();
        let mut table = String::from("model\tscript\tperplexity\n");
        for (name, rel) in self.eval_models() {
            let model = self.load(&rel)?;
            let mut row = BTreeMap::new();
            for ((script, _), docs) in BRANCHES.iter().zip(&heldout) {
                let p = perplexity(&model, docs).map_err(|e| PipelineError::stage("eval", e))?;
                table.push_str(&format!("{name}\t{script}\t{p:.4}\n"));
                row.insert(script.to_string(), p);
            }
            ppl.insert(name.clone(), row);
            if name == "base" || name.ends_with(".merged") {
                continue;
            }
            let report = run_benchmark(&model, &suite, self.cfg.eval.seed).map_err(|e| PipelineError::stage("eval", e))?;
            artifacts.push(self.write(&format!("eval/{name}.json"), report.to_json())?);
            artifacts.push(self.write(&format!("eval/{name}.txt"), report.to_table())?);
            (self.log)(&format!("[eval] {name}\n{}", report.to_table()));
        }
        (self.log)(&format!("[eval] perplexity\n{table}"));
        artifacts.push(self.write(
            "eval/perplexity.json",
            serde_json::to_string_pretty(&ppl).expect("serializes") + "\n",
        )?);
        Ok((artifacts, BTreeMap::new()))
    }

    fn stage_route(&mut self) -> StageResult {
        let heldout: Vec<(Script, Vec<Vec<u32>>)> = BRANCHES
            .iter()
            .map(|(b, s)| Ok((*s, self.docs(&format!("data/heldout_{b}.jsonl"))?)))
            .collect::<Result<_, PipelineError>>()?;
        let mut artifacts = Vec::new();
        let mut scores = BTreeMap::new();
        for v in self.variants().to_vec() {
            let model = self.load(&self.final_checkpoint(&v.name))?;
            let traces = script_traces(&model, &heldout).map_err(|e| PipelineError::stage("route", e))?;
            let text: String = traces.iter().map(RoutingTrace::to_text).collect();
            artifacts.push(self.write(&format!("route/{}.trace.txt", v.name), text)?);
            let stats = routing_stats(&traces).map_err(|e| PipelineError::stage("route", e))?;
            let score = specialization_score(&stats).map_err(|e| PipelineError::stage("route", e))?;
            artifacts.push(self.write(&format!("route/{}.stats.txt", v.name), stats.to_table())?);
            (self.log)(&format!("[route] {} specialization {score:.4}\n{}", v.name, stats.to_table()));
            scores.insert(v.name.clone(), score);
        }
        artifacts.push(self.write(
            "route/specialization.json",
            serde_json::to_string_pretty(&scores).expect("serializes") + "\n",
        )?);
        Ok((artifacts, BTreeMap::new()))
    }
}

/// Per-layer traces over script-labeled documents, every token labeled with
/// its document's script. Positions count tokens across all documents.
pub fn script_traces(model: &Model, docs: &[(Script, Vec<Vec<u32>>)]) -> Result<Vec<RoutingTrace>, crate::model::ModelError> {
    let mut layers: Vec<RoutingTrace> = Vec::new();
    let mut offset = 0;
    for (script, ds) in docs {
        for doc in ds {
            for window in doc.chunks(model.config.max_context) {
                let (_, traces) = model.forward_full(&[window.to_vec()])?;
                if layers.is_empty() {
                    layers = traces
                        .iter()
                        .map(|t| RoutingTrace {
                            layer: t.layer,
                            n_experts: t.n_experts,
                            entries: Vec::new(),
                        })
                        .collect();
                }
                for (acc, mut t) in layers.iter_mut().zip(traces) {
                    for e in &mut t.entries {
                        e.script = Some(*script);
                        e.position += offset;
                    }
                    acc.entries.extend(t.entries);
                }
                offset += window.len();
            }
        }
    }
    Ok(layers)
}

impl PipelineError {
    fn stage(stage: &str, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        PipelineError::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        }
    }

    fn train(stage: &str, e: TrainError) -> Self {
        match e {
            TrainError::Divergence { step, .. } => PipelineError::Divergence {
                stage: stage.to_string(),
                step,
            },
            other => Self::stage(stage, other),
        }
    }
}
