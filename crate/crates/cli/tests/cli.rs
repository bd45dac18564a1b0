use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_btxforge"))
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny.toml")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

#[test]
fn validate_config_accepts_the_shipped_profile() {
    let out = bin().args(["validate-config", "--config", "desk-scale"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(text(&out).contains("valid"));
}

#[test]
fn validate_config_reports_bad_fields_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let body = std::fs::read_to_string(tiny())
        .unwrap()
        .replace("top_k = 2", "top_k = 3")
        .replacen("warmup_ratio = 0.0", "warmup_ratio = 1.5", 1);
    std::fs::write(&bad, body).unwrap();
    let out = bin().args(["validate-config", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let t = text(&out);
    assert!(t.contains("top_k (3)") && t.contains("n_experts"), "{t}");
    assert!(t.contains("warmup_ratio (1.5)"), "{t}");
    assert!(t.contains("line "), "{t}");
}

#[test]
fn eval_on_an_empty_directory_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["eval", "--config"])
        .arg(tiny())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("missing stage input: checkpoint"), "{}", text(&out));
}

#[test]
fn validate_data_lists_rejections() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/validation.jsonl");
    let out = bin().args(["validate-data", "--data"]).arg(fixture).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let t = text(&out);
    assert!(t.contains("record 1\trole-flow") && t.contains("record 6\tlength-ratio"), "{t}");
    assert!(t.contains("accepted 4 of 12"), "{t}");
}

#[test]
fn unknown_subcommand_fails() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
}

fn network_isolation_available() -> bool {
    Command::new("unshare").args(["-rn", "true"]).output().is_ok_and(|o| o.status.success())
}

/// Full pipeline inside an empty network namespace, then the artifact commands
/// on its outputs. Inside the namespace, paths are given relative to the
/// workspace so that restrictive parent directories stay reachable.
#[test]
fn pipeline_runs_without_network() {
    let dir = tempfile::tempdir().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap();
    let exe = Path::new(env!("CARGO_BIN_EXE_btxforge"));
    let exe = exe.strip_prefix(&root).unwrap_or(exe);
    let mut cmd = if network_isolation_available() {
        let mut c = Command::new("unshare");
        c.arg("-rn").arg(exe);
        c
    } else {
        eprintln!("unshare unavailable; running without network isolation");
        Command::new(exe)
    };
    cmd.current_dir(&root);
    let config = tiny();
    let config = config.strip_prefix(env!("CARGO_MANIFEST_DIR")).map_or(config.clone(), |rel| Path::new("crates/cli").join(rel));
    let out = cmd
        .args(["pipeline", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    for f in ["manifest.json", "eval/perplexity.json", "route/btx2.trace.txt", "merge/btx3.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let stats = bin()
        .args(["route-stats", "--trace"])
        .arg(dir.path().join("route/btx2.trace.txt"))
        .output()
        .unwrap();
    assert_eq!(stats.status.code(), Some(0), "{}", text(&stats));
    assert!(text(&stats).contains("specialization\t"));

    let manifest = dir.path().join("merge.toml");
    std::fs::write(
        &manifest,
        format!(
            "sources = [\"{0}/branch/arabic.ckpt\", \"{0}/branch/latin.ckpt\"]\ninclude_base = false\ntop_k = 1\noutput = \"{0}/manual.ckpt\"\n",
            dir.path().display()
        ),
    )
    .unwrap();
    let merged = bin().args(["merge", "--config"]).arg(&manifest).output().unwrap();
    assert_eq!(merged.status.code(), Some(0), "{}", text(&merged));
    assert!(dir.path().join("manual.ckpt").exists());
}

#[test]
fn no_networking_crates_in_the_build() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let lock = std::fs::read_to_string(root.join("Cargo.lock")).unwrap();
    for name in ["reqwest", "hyper", "ureq", "curl", "tokio", "socket2", "mio", "h2", "rustls", "native-tls"] {
        assert!(!lock.contains(&format!("name = \"{name}\"")), "{name} in Cargo.lock");
    }
    let mut stack = vec![root.join("crates")];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "rs") && !p.ends_with("cli.rs") {
                let src = std::fs::read_to_string(&p).unwrap();
                assert!(!src.contains("std::net"), "{}", p.display());
            }
        }
    }
}
