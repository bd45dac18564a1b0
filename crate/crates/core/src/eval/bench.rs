use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{accuracy, bleu, chrf, EvalError, McTask, ScoreMode};
use crate::data::{parse_jsonl, Conversation, Message};
use crate::model::{Checkpoint, DecodeConfig};
use crate::tensor::Element;
use crate::tokenizer::{decode, encode, encode_chat_prompt, BEGIN};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenItem {
    pub prompt: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    MultipleChoice(Vec<McTask>),
    Generation {
        items: Vec<GenItem>,
        apply_chat_template: bool,
        max_new_tokens: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTask {
    pub name: String,
    pub kind: TaskKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub name: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub checkpoint: String,
    pub seed: u64,
    /// In suite order.
    pub tasks: Vec<TaskResult>,
    /// Mean of each metric over the tasks that report it.
    pub aggregate: BTreeMap<String, f64>,
}

fn generation_prompt(prompt: &str, chat: bool) -> Vec<u32> {
    if chat {
        encode_chat_prompt(&Conversation::new(vec![Message::user(prompt)]))
    } else {
        let mut t = vec![BEGIN];
        t.extend(encode(prompt));
        t
    }
}

fn run_task<T: Element>(model: &Checkpoint<T>, task: &BenchTask, seed: u64) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut m = BTreeMap::new();
    match &task.kind {
        TaskKind::MultipleChoice(items) => {
            m.insert("acc".into(), accuracy(model, items, ScoreMode::Raw)?);
            m.insert("acc_norm".into(), accuracy(model, items, ScoreMode::Normalized)?);
        }
        TaskKind::Generation {
            items,
            apply_chat_template,
            max_new_tokens,
        } => {
            let mut outputs = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                let prompt = generation_prompt(&item.prompt, *apply_chat_template);
                let room = model.config.max_context.saturating_sub(prompt.len());
                let cfg = DecodeConfig {
                    max_new_tokens: (*max_new_tokens).min(room),
                    temperature: 0.0,
                    seed: seed.wrapping_add(i as u64),
                };
                outputs.push(decode(&model.generate(&prompt, &cfg)?));
            }
            let refs: Vec<&str> = items.iter().map(|g| g.reference.as_str()).collect();
            let cands: Vec<&str> = outputs.iter().map(String::as_str).collect();
            m.insert("bleu".into(), bleu(&cands, &refs)?);
            m.insert("chrf".into(), chrf(&cands, &refs)?);
        }
    }
    Ok(m)
}

/// Evaluate every task; a failing task is recorded and the run continues.
pub fn run_benchmark<T: Element>(model: &Checkpoint<T>, suite: &[BenchTask], seed: u64) -> Result<MetricReport, EvalError> {
    if suite.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    let tasks: Vec<TaskResult> = suite
        .iter()
        .map(|task| match run_task(model, task, seed) {
            Ok(metrics) => TaskResult {
                name: task.name.clone(),
                metrics,
                error: None,
            },
            Err(e) => TaskResult {
                name: task.name.clone(),
                metrics: BTreeMap::new(),
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for t in &tasks {
        for (k, v) in &t.metrics {
            let s = sums.entry(k.clone()).or_insert((0.0, 0));
            s.0 += v;
            s.1 += 1;
        }
    }
    Ok(MetricReport {
        checkpoint: model.content_hash(),
        seed,
        tasks,
        aggregate: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Suite(e.to_string()))
    }

    /// Aligned plain-text table: one row per task, one column per metric.
    pub fn to_table(&self) -> String {
        let metrics: Vec<&String> = self.aggregate.keys().collect();
        let mut rows: Vec<Vec<String>> = vec![std::iter::once("task".to_string())
            .chain(metrics.iter().map(|m| m.to_string()))
            .collect()];
        let fmt_row = |name: &str, vals: &BTreeMap<String, f64>, err: Option<&str>| {
            let mut r = vec![name.to_string()];
            for m in &metrics {
                r.push(match (vals.get(*m), err) {
                    (Some(v), _) => format!("{v:.4}"),
                    (None, Some(_)) => "error".into(),
                    (None, None) => "-".into(),
                });
            }
            r
        };
        for t in &self.tasks {
            rows.push(fmt_row(&t.name, &t.metrics, t.error.as_deref()));
        }
        rows.push(fmt_row("average", &self.aggregate, None));
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if c == 0 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteTaskType {
    MultipleChoice,
    Generation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: SuiteTaskType,
    /// JSONL fixture of `McTask` or `GenItem` records.
    pub fixture: PathBuf,
    #[serde(default)]
    pub apply_chat_template: bool,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
}

fn default_max_new() -> usize {
    48
}

/// TOML list of `[[task]]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteManifest {
    #[serde(default, rename = "task")]
    pub tasks: Vec<SuiteEntry>,
}

impl SuiteManifest {
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        toml::from_str(text).map_err(|e| EvalError::Suite(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Read the manifest and its fixtures; fixture paths resolve against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Vec<BenchTask>, EvalError> {
        let manifest = Self::parse(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        manifest
            .tasks
            .iter()
            .map(|e| {
                let text = std::fs::read_to_string(dir.join(&e.fixture))?;
                let kind = match e.kind {
                    SuiteTaskType::MultipleChoice => {
                        let mut items: Vec<McTask> = parse_jsonl(&text)?;
                        for t in &mut items {
                            t.apply_chat_template = e.apply_chat_template;
                        }
                        TaskKind::MultipleChoice(items)
                    }
                    SuiteTaskType::Generation => TaskKind::Generation {
                        items: parse_jsonl(&text)?,
                        apply_chat_template: e.apply_chat_template,
                        max_new_tokens: e.max_new_tokens,
                    },
                };
                Ok(BenchTask { name: e.name.clone(), kind })
            })
            .collect()
    }
}
