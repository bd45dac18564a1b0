//! One pass/fail line per acceptance criterion. Run with `--nocapture` to
//! see the report; the test fails if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use btxforge_core::data::lexicon::egyptian_words;
use btxforge_core::data::{check_record, code_switch_eligible, Conversation, Message, TransliterationTable};
use btxforge_core::eval::{bleu, chrf, chrf_sentence};
use btxforge_core::merge::{merge_btx, MergePlan};
use btxforge_core::model::{bind_params, init_model, Checkpoint, MoeConfig};
use btxforge_core::moe::{load_balance_loss, RoutingTrace, TraceEntry};
use btxforge_core::pipeline::{parse_stages, run_pipeline, ExperimentConfig, Manifest, MANIFEST};
use btxforge_core::tensor::{Element, Tape, Tensor};
use btxforge_core::train::{
    dpo_loss, lm_loss, lr_schedule, sequence_logprob, sft_loss, train_stage, DpoConfig, LmBatch, OptimConfig,
    PreferencePair, Schedule, Stage, StageConfig, TrainData,
};
use common::oracle::{metric_pairs, oracle_bleu, oracle_chrf_sentence, FROZEN_BLEU, FROZEN_CHRF};
use common::{
    check_gradients, code_switch_fixture, lcg_tokens, op_cases, op_gradient_error, tiny_config, validation_fixture,
};

const OP_GRAD_TOL: f64 = 1e-6;
const MODEL_GRAD_TOL: f64 = 1e-4;
const GRAD_SUITE_BUDGET: Duration = Duration::from_secs(60);
const MERGE_IDENTITY_TOL: f64 = 1e-6;
const MERGE_IDENTITY_INPUTS: usize = 100;
const MERGE_BUDGET: Duration = Duration::from_secs(30);
const LB_TOL: f64 = 1e-9;
const LN2_TOL: f64 = 1e-6;
const DPO_BETA: f64 = 0.5;
const DPO_LR: f64 = 3e-6;
const SCHEDULE_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-9;
const MIN_SPECIALIZATION: f64 = 0.60;
const MAX_PPL_RATIO: f64 = 1.25;
const PIPELINE_BUDGET: Duration = Duration::from_secs(20 * 60);

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn model_loss_grads(ckpt: &Checkpoint<f64>, tokens: &[u32]) -> (f64, BTreeMap<String, Tensor<f64>>) {
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, ckpt, |_: &str| true).unwrap();
    let batch = LmBatch::from_windows(&[tokens]);
    let parts = lm_loss(&mut tape, &ckpt.config, &params, &batch).unwrap();
    let mut loss = parts.ce;
    if let (Some(aux), Some(moe)) = (parts.aux, &ckpt.config.moe) {
        let aux = tape.scale(aux, moe.lb_coeff).unwrap();
        loss = tape.add(loss, aux).unwrap();
    }
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).unwrap();
    let named = params
        .iter()
        .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
        .collect();
    (value, named)
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut worst_op: f64 = 0.0;
    for case in op_cases() {
        let e = op_gradient_error(&case);
        ensure(e <= OP_GRAD_TOL, format!("{} rel err {e:.2e}", case.name))?;
        worst_op = worst_op.max(e);
    }
    let mut worst_model: f64 = 0.0;
    for (seed, moe) in [(21, None), (22, Some(MoeConfig::new(3, 2, 0.01)))] {
        let mut cfg = tiny_config();
        cfg.moe = moe;
        let mut ckpt = init_model::<f64>(&cfg, seed).unwrap();
        for (name, t) in ckpt.tensors.iter_mut() {
            if !name.ends_with(".gain") {
                t.data_mut().iter_mut().for_each(|v| *v *= 25.0);
            }
        }
        let tokens = lcg_tokens(seed, 8, 260);
        let (_, grads) = model_loss_grads(&ckpt, &tokens);
        if ckpt.config.moe.is_none() {
            ensure(grads.len() == ckpt.tensors.len(), "missing parameter gradients")?;
        }
        worst_model = worst_model.max(check_gradients(&ckpt, &grads, 3, |c| model_loss_grads(c, &tokens).0));
    }
    ensure(worst_model <= MODEL_GRAD_TOL, format!("transformer rel err {worst_model:.2e}"))?;
    let t = start.elapsed();
    ensure(t <= GRAD_SUITE_BUDGET, format!("took {t:?}"))?;
    Ok(format!(
        "{} ops worst {worst_op:.1e}, 2-layer model worst {worst_model:.1e}, {:.1}s",
        op_cases().len(),
        t.as_secs_f64()
    ))
}

fn merge_identity() -> Check {
    let start = Instant::now();
    let dense = init_model::<f64>(&tiny_config(), 3).unwrap();
    let inputs: Vec<Vec<u32>> = (0..MERGE_IDENTITY_INPUTS as u64).map(|i| lcg_tokens(i, 1 + (i as usize * 7) % 16, 260)).collect();
    let mut worst: f64 = 0.0;
    for m in [2, 3] {
        for k in [1, 2] {
            let plan = MergePlan::new(vec![dense.clone(); m], m == 3, MoeConfig::new(m, k, 0.01));
            let merged = merge_btx(&plan).map_err(|e| e.to_string())?;
            for x in &inputs {
                let a = dense.forward_logits(&[x.clone()]).unwrap();
                let b = merged.forward_logits(&[x.clone()]).unwrap();
                worst = worst.max(a.max_abs_diff(&b));
            }
        }
    }
    ensure(worst <= MERGE_IDENTITY_TOL, format!("max logit gap {worst:.2e}"))?;
    let t = start.elapsed();
    ensure(t <= MERGE_BUDGET, format!("took {t:?}"))?;
    Ok(format!("max logit gap {worst:.1e} over 4 settings x {MERGE_IDENTITY_INPUTS} inputs, {:.1}s", t.as_secs_f64()))
}

fn averaged_exactly<T: Element>(seeds: [u64; 2]) -> Result<usize, String> {
    let sources: Vec<Checkpoint<T>> = seeds.iter().map(|&s| init_model::<T>(&tiny_config(), s).unwrap()).collect();
    let merged = merge_btx(&MergePlan::new(sources.clone(), false, MoeConfig::new(2, 2, 0.01))).unwrap();
    let mut checked = 0;
    for name in sources[0].tensors.keys().filter(|n| !n.contains(".ffn.")) {
        let (a, b) = (&sources[0].tensors[name], &sources[1].tensors[name]);
        let oracle: Vec<T> = (0..a.numel())
            .map(|i| T::from_f64_lossy((a.data()[i].to_f64_lossy() + b.data()[i].to_f64_lossy()) / 2.0))
            .collect();
        ensure(merged.tensors[name].data() == &oracle[..], format!("{name} differs from the mean"))?;
        checked += 1;
    }
    Ok(checked)
}

fn backbone_average() -> Check {
    let n64 = averaged_exactly::<f64>([1, 2])?;
    let n32 = averaged_exactly::<f32>([3, 4])?;
    Ok(format!("{n64} tensors (f64) and {n32} tensors (f32) bit-equal to the mean"))
}

fn router_init() -> Check {
    for m in [2, 3] {
        let sources = (0..m as u64).map(|s| init_model::<f64>(&tiny_config(), s).unwrap()).collect();
        let merged = merge_btx(&MergePlan::new(sources, false, MoeConfig::new(m, 2, 0.01))).unwrap();
        let (_, traces) = merged.forward_full(&[lcg_tokens(5, 12, 260)]).unwrap();
        for e in traces.iter().flat_map(|t| &t.entries) {
            ensure(e.probs.iter().all(|&p| p == 1.0 / m as f64), format!("probs {:?}", e.probs))?;
        }
    }
    let trace = |p: Vec<f64>| RoutingTrace {
        layer: 0,
        n_experts: p.len(),
        entries: (0..8)
            .map(|position| TraceEntry {
                position,
                script: None,
                experts: vec![0],
                gates: vec![1.0],
                probs: p.clone(),
            })
            .collect(),
    };
    for n in [2, 3, 4, 8] {
        let uniform = load_balance_loss(&trace(vec![1.0 / n as f64; n]), n).unwrap();
        let mut hot = vec![0.0; n];
        hot[0] = 1.0;
        let degenerate = load_balance_loss(&trace(hot), n).unwrap();
        ensure((uniform - 1.0).abs() <= LB_TOL, format!("uniform L = {uniform} at N={n}"))?;
        ensure((degenerate - n as f64).abs() <= LB_TOL, format!("degenerate L = {degenerate} at N={n}"))?;
    }
    Ok("gate probabilities exactly 1/N; L(uniform) = 1, L(degenerate) = N for N in {2,3,4,8}".into())
}

fn dpo_sanity() -> Check {
    let model = init_model::<f64>(&btxforge_core::model::ModelConfig { max_context: 64, ..tiny_config() }, 9).unwrap();
    let pairs: Vec<PreferencePair> = (0..10)
        .map(|i| PreferencePair {
            prompt: Conversation::new(vec![Message::user(format!("q{i}"))]),
            chosen: format!("yes {i}"),
            rejected: format!("no{}", i * 7),
        })
        .collect();
    let cfg = DpoConfig {
        beta: DPO_BETA,
        full_finetune: true,
    };
    for p in &pairs {
        let l = dpo_loss(&model, &model, p, &cfg).map_err(|e| e.to_string())?;
        ensure((l.loss - std::f64::consts::LN_2).abs() <= LN2_TOL, format!("loss {}", l.loss))?;
    }
    let optim = OptimConfig {
        peak_lr: DPO_LR,
        warmup_ratio: 0.0,
        schedule: Schedule::Cosine { final_lr: DPO_LR },
        effective_batch: pairs.len(),
        max_steps: Some(1),
        ..OptimConfig::dpo()
    };
    let mut stage = StageConfig::new(Stage::Dpo, optim, 1);
    stage.dpo = Some(cfg);
    let out = train_stage(&model, &TrainData::Preferences(pairs.clone()), &stage).map_err(|e| e.to_string())?;
    ensure(out.curve.points[0].lr == DPO_LR, "step did not use the requested lr")?;
    let chosen = |m: &Checkpoint<f64>| -> f64 { pairs.iter().map(|p| sequence_logprob(m, &p.prompt, &p.chosen).unwrap()).sum() };
    let (before, after) = (chosen(&model), chosen(&out.checkpoint));
    ensure(after > before, format!("chosen log-prob {before} -> {after}"))?;
    Ok(format!("ln 2 on 10 pairs; chosen log-prob {before:.6} -> {after:.6} after one step"))
}

fn sft_masking() -> Check {
    let model = init_model::<f64>(&btxforge_core::model::ModelConfig { max_context: 64, ..tiny_config() }, 6).unwrap();
    let conv = Conversation::new(vec![
        Message::user("hi there"),
        Message::assistant("hello"),
        Message::user("and?"),
        Message::assistant("bye"),
    ]);
    let batch = LmBatch::from_conversations(&[&conv], 64).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, &model, |_: &str| true).unwrap();
    let parts = lm_loss(&mut tape, &model.config, &params, &batch).unwrap();
    tape.retain_grad(parts.logits);
    let grads = tape.backward(parts.ce).unwrap();
    let g = grads.get(parts.logits).unwrap();
    let v = model.config.vocab_size;
    let masked = batch.mask.iter().filter(|m| !**m).count();
    for (row, &m) in batch.mask.iter().enumerate() {
        if !m {
            ensure(g.data()[row * v..(row + 1) * v].iter().all(|&x| x == 0.0), format!("nonzero gradient at row {row}"))?;
        }
    }
    let text = "plain reply";
    let lone = Conversation::new(vec![Message::assistant(text)]);
    let lp = model.next_token_logprobs(&btxforge_core::tokenizer::encode_chat(&lone).tokens).unwrap();
    let tail = &lp[lp.len() - (text.len() + 1)..];
    let plain = -tail.iter().sum::<f64>() / tail.len() as f64;
    let got = sft_loss(&model, &lone).map_err(|e| e.to_string())?;
    ensure((got - plain).abs() <= 1e-12, format!("{got} vs {plain}"))?;
    Ok(format!("{masked} masked positions with zero gradient; lone reply loss equals plain cross-entropy"))
}

fn schedules() -> Check {
    let total = 1000;
    let cpt = OptimConfig::cpt();
    let warm = lr_schedule(cpt.warmup_steps(total), total, &cpt).unwrap();
    let last = lr_schedule(total, total, &cpt).unwrap();
    ensure((warm - 8e-6).abs() <= SCHEDULE_TOL, format!("warmup end lr {warm}"))?;
    ensure((last - 1e-6).abs() <= SCHEDULE_TOL, format!("final lr {last}"))?;
    let sft_last = lr_schedule(total, total, &OptimConfig::sft()).unwrap();
    ensure(sft_last == 0.0, format!("sft final lr {sft_last}"))?;
    Ok(format!("cpt {warm:e} at warmup end, {last:e} at the end; sft ends at {sft_last}"))
}

fn metrics() -> Check {
    let (c, r) = metric_pairs();
    let b = bleu(&c, &r).map_err(|e| e.to_string())?;
    ensure((b - oracle_bleu(&c, &r)).abs() <= METRIC_TOL && (b - FROZEN_BLEU).abs() <= METRIC_TOL, format!("bleu {b}"))?;
    for (ci, ri) in c.iter().zip(&r) {
        ensure((chrf_sentence(ci, ri) - oracle_chrf_sentence(ci, ri)).abs() <= METRIC_TOL, format!("chrf on {ci:?}"))?;
    }
    let f = chrf(&c, &r).map_err(|e| e.to_string())?;
    ensure((f - FROZEN_CHRF).abs() <= METRIC_TOL, format!("chrf {f}"))?;
    for x in c.iter().chain(&r) {
        ensure(bleu(&[x], &[x]).unwrap() == 1.0 && chrf(&[x], &[x]).unwrap() == 100.0, format!("self score of {x:?}"))?;
    }
    Ok(format!("{} pairs: bleu {b:.6}, chrf {f:.6}; self scores 1 and 100", c.len()))
}

fn data_pipeline() -> Check {
    let table = TransliterationTable::default();
    let failures = table.round_trip_failures(egyptian_words());
    ensure(failures.is_empty(), format!("round trip fails for {failures:?}"))?;
    let (records, expected) = validation_fixture();
    for (i, (rec, want)) in records.iter().zip(&expected).enumerate() {
        let got = check_record(rec).map_or("accept", |r| r.as_str());
        ensure(got == want, format!("record {i}: {got} instead of {want}"))?;
    }
    let switches = code_switch_fixture();
    for (text, want) in &switches {
        ensure(code_switch_eligible(text) == *want, format!("code-switch verdict for {text:?}"))?;
    }
    Ok(format!(
        "{} lexicon words round-trip; {} validator and {} code-switch fixtures match",
        egyptian_words().count(),
        records.len(),
        switches.len()
    ))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn run_desk_scale(out: &Path) -> Result<Duration, String> {
    let cfg = ExperimentConfig::load(Path::new("desk-scale")).map_err(|r| r.to_string())?;
    let start = Instant::now();
    run_pipeline(&cfg, &parse_stages(None).unwrap(), out, &mut |_| {}).map_err(|e| e.to_string())?;
    Ok(start.elapsed())
}

fn specialization(out: &Path, elapsed: Duration) -> Check {
    let spec = read_json(&out.join("route/specialization.json"));
    let ppl = read_json(&out.join("eval/perplexity.json"));
    let mut notes = Vec::new();
    for v in ["btx2", "btx3"] {
        let s = spec[v].as_f64().ok_or(format!("no specialization for {v}"))?;
        ensure(s >= MIN_SPECIALIZATION, format!("{v} specialization {s:.3}"))?;
        let merged = &ppl[format!("{v}.sft")];
        let mut ratios = Vec::new();
        for (script, matching, other) in [("arabic", "arabic", "latin"), ("latin", "latin", "arabic")] {
            let m = merged[script].as_f64().unwrap();
            let own = ppl[matching][script].as_f64().unwrap();
            let mismatched = ppl[other][script].as_f64().unwrap();
            ensure(m <= MAX_PPL_RATIO * own, format!("{v} {script} ppl {m:.3} vs specialist {own:.3}"))?;
            ensure(m < mismatched, format!("{v} {script} ppl {m:.3} vs mismatched {mismatched:.3}"))?;
            ratios.push(format!("{script} {:.2}x", m / own));
        }
        notes.push(format!("{v} spec {s:.3} ppl {}", ratios.join(" ")));
    }
    let manifest = Manifest::load(&out.join(MANIFEST)).ok_or("no manifest")?;
    let mut curves = 0;
    for (stage, rec) in &manifest.stages {
        for (k, val) in &rec.checks {
            if k.ends_with("curve_finite") {
                ensure(val == &serde_json::json!(true), format!("{stage}: {k} is {val}"))?;
                curves += 1;
            }
        }
    }
    ensure(curves >= 5, format!("only {curves} curves recorded"))?;
    ensure(elapsed <= PIPELINE_BUDGET, format!("run took {elapsed:?}"))?;
    Ok(format!("{}; {curves} finite curves; {:.1} min", notes.join("; "), elapsed.as_secs_f64() / 60.0))
}

fn reports_and_traces(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for (dir, suffix) in [("eval", ".json"), ("route", ".trace.txt")] {
        for entry in std::fs::read_dir(out.join(dir)).unwrap() {
            let p = entry.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            if name.ends_with(suffix) {
                files.insert(format!("{dir}/{name}"), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn determinism(first: &Path) -> Check {
    let second = tempfile::tempdir().unwrap();
    run_desk_scale(second.path())?;
    let (a, b) = (reports_and_traces(first), reports_and_traces(second.path()));
    ensure(!a.is_empty(), "no reports found")?;
    ensure(a.keys().eq(b.keys()), "different report sets")?;
    for (name, bytes) in &a {
        ensure(&b[name] == bytes, format!("{name} differs"))?;
    }
    Ok(format!("{} metric reports and traces byte-identical across two runs", a.len()))
}

fn record(results: &mut Vec<bool>, n: usize, title: &str, check: impl FnOnce() -> Check) {
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag} {title}: {detail}");
    results.push(outcome.is_ok());
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    record(&mut results, 1, "gradient suite", gradients);
    record(&mut results, 2, "merge identity", merge_identity);
    record(&mut results, 3, "backbone averaging", backbone_average);
    record(&mut results, 4, "router init and load balance", router_init);
    record(&mut results, 5, "DPO sanity", dpo_sanity);
    record(&mut results, 6, "SFT masking", sft_masking);
    record(&mut results, 7, "schedules", schedules);
    record(&mut results, 8, "metric oracles", metrics);
    record(&mut results, 9, "data pipeline", data_pipeline);

    let run = tempfile::tempdir().unwrap();
    let first = run_desk_scale(run.path());
    record(&mut results, 10, "desk-scale specialization", || specialization(run.path(), first.clone()?));
    record(&mut results, 11, "determinism", || {
        first.clone()?;
        determinism(run.path())
    });

    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len());
}
