mod common;

use std::path::Path;

use btxforge_core::pipeline::{
    parse_stages, run_pipeline, validate_config, ExperimentConfig, Manifest, PipelineError, StageStatus, MANIFEST,
};
use common::fixture;

fn tiny_text() -> String {
    std::fs::read_to_string(fixture("tiny.toml")).unwrap()
}

fn config_from(text: &str) -> ExperimentConfig {
    let (cfg, report) = ExperimentConfig::check_text(text);
    assert!(report.is_valid(), "{report}");
    cfg.unwrap()
}

fn run(cfg: &ExperimentConfig, stages: &str, out: &Path) -> Result<Vec<(String, StageStatus)>, PipelineError> {
    let stages = parse_stages(Some(stages))?;
    Ok(run_pipeline(cfg, &stages, out, &mut |_| {})?.stages)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn shipped_profiles_validate() {
    for name in ["desk-scale", "paper-cpt", "paper-sft", "paper-moe-sft", "paper-dpo"] {
        let report = validate_config(Path::new(name));
        assert!(report.is_valid(), "{name}: {report}");
    }
    assert!(validate_config(&fixture("tiny.toml")).is_valid());
}

#[test]
fn top_k_above_expert_count_is_reported() {
    let text = tiny_text().replace("top_k = 2", "top_k = 3");
    let (_, report) = ExperimentConfig::check_text(&text);
    assert_eq!(report.issues.len(), 1, "{report}");
    let issue = &report.issues[0];
    assert!(issue.message.contains("top_k") && issue.message.contains("n_experts"), "{issue}");
    let line = text.lines().position(|l| l.starts_with("top_k")).unwrap() + 1;
    assert_eq!(issue.line, Some(line));
}

#[test]
fn out_of_range_warmup_is_reported_with_its_line() {
    let text = tiny_text().replacen("warmup_ratio = 0.0", "warmup_ratio = 1.5", 1);
    let (_, report) = ExperimentConfig::check_text(&text);
    let issue = report.issues.iter().find(|i| i.message.contains("warmup_ratio")).expect("warmup issue");
    let line = text.lines().position(|l| l.contains("1.5")).unwrap() + 1;
    assert_eq!(issue.line, Some(line));
    assert!(issue.message.contains("1.5"));
}

#[test]
fn unknown_keys_and_syntax_errors_are_rejected() {
    let (_, report) = ExperimentConfig::check_text(&tiny_text().replace("[eval]", "[eval]\nbogus = 1"));
    assert!(!report.is_valid());
    let (_, report) = ExperimentConfig::check_text("name = \"x\"\nseed = [");
    assert!(report.issues[0].line.is_some(), "{report}");
}

#[test]
fn eval_without_checkpoints_names_the_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let err = run(&config_from(&tiny_text()), "eval", dir.path()).unwrap_err();
    assert_eq!(err.to_string(), "missing stage input: checkpoint");
    assert!(parse_stages(Some("data,bogus")).is_err());
}

#[test]
fn identical_branches_record_a_passing_merge_identity() {
    let dir = tempfile::tempdir().unwrap();
    // A zero learning rate keeps both branches equal to the base model.
    let mut text = tiny_text();
    let cpt = text.find("[stages.cpt.optim]").unwrap();
    let tail = text[cpt..].replacen("peak_lr = 1e-2", "peak_lr = 0.0", 1).replacen("final_lr = 1e-3", "final_lr = 0.0", 1);
    text.replace_range(cpt.., &tail);
    run(&config_from(&text), "data,base,branch,merge", dir.path()).unwrap();
    let manifest = Manifest::load(&dir.path().join(MANIFEST)).unwrap();
    let checks = &manifest.stages["merge"].checks;
    for v in ["btx2", "btx3"] {
        assert_eq!(checks[&format!("{v}_dense_equivalence")]["passed"], true, "{checks:?}");
    }
}

#[test]
fn unchanged_stages_are_skipped_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_from(&tiny_text());
    let first = run(&cfg, "all", dir.path()).unwrap();
    assert!(first.iter().all(|(_, s)| *s == StageStatus::Ran), "{first:?}");
    let before = snapshot(dir.path());
    let second = run(&cfg, "all", dir.path()).unwrap();
    assert!(second.iter().all(|(_, s)| *s == StageStatus::Cached), "{second:?}");
    assert_eq!(snapshot(dir.path()), before);

    // Changing the SFT seed reruns SFT and everything downstream of it.
    let changed = config_from(&tiny_text().replace("[stages.sft]\nseed = 3", "[stages.sft]\nseed = 4"));
    let third = run(&changed, "all", dir.path()).unwrap();
    let ran: Vec<&str> = third.iter().filter(|(_, s)| *s == StageStatus::Ran).map(|(n, _)| n.as_str()).collect();
    assert_eq!(ran, ["sft", "eval", "route"]);
}

#[test]
fn tampered_artifacts_are_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_from(&tiny_text());
    run(&cfg, "data,base", dir.path()).unwrap();
    let ckpt = dir.path().join("base/base.ckpt");
    let good = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, b"junk").unwrap();
    let again = run(&cfg, "data,base", dir.path()).unwrap();
    assert_eq!(again, [("data".to_string(), StageStatus::Cached), ("base".to_string(), StageStatus::Ran)]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), good);
}
