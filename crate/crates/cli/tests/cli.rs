use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reconuq"));
    c.env_remove("RECONUQ_SEED").env("RUST_LOG", "warn");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

/// Small but complete run configuration.
const TINY: &str = r#"{
  "dataset": {"n_id": 14, "n_ood": 3, "shape": [32, 32], "spacing": [1.0, 1.0]},
  "net": {"levels": 2, "base_channels": 4, "growth": 4, "convs_per_block": 1},
  "train": {"epochs": 1, "patch_size": [16, 16], "patches_per_patient": 1},
  "cv": {"n_folds": 2, "outer": 1, "val": 2, "test": 2},
  "uq": {"mcdo_probs": [0.5], "mcdo_passes": 2, "de_models": 2}
}"#;

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_idempotent_and_creates_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = tmp.path().join("nested/a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = run(bin().arg("--config").arg(&cfg).arg("gen-data").arg("--dir").arg(d));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    // ct, body, two targets, three OARs and meta.json; ID samples add the dose
    assert_eq!(ta.len(), 14 * 9 + 3 * 8);
    assert_eq!(ta, tb);
    assert!(a.join("id_000/meta.json").exists());
    assert!(a.join("ood_000/ct.uqt").exists());
    assert!(!a.join("ood_000/dose.uqt").exists());
}

#[test]
fn invalid_spec_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(bin().arg("gen-data").arg("--dataset.n_id=3").arg("-o").arg(tmp.path()));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("n_id"), "{err}");
}

#[test]
fn unknown_override_and_bad_seed_are_config_errors() {
    let o = run(bin().arg("eval").arg("--train.epochz=3"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
    let o = run(bin().arg("eval").env("RECONUQ_SEED", "abc"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("RECONUQ_SEED"));
}

#[test]
fn eval_without_scores_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(bin().arg("eval").arg("-o").arg(tmp.path()));
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scores.csv"));
}

#[test]
fn staged_commands_produce_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let step = |args: &[&str]| {
        let o = run(bin().arg("--config").arg(&cfg).arg("-o").arg(&out).args(args));
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    step(&["train"]);
    assert!(out.join("train/manifest.json").exists());
    assert!(out.join("train/history.csv").exists());
    assert!(out.join("train/config.json").exists());
    step(&["uq"]);
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert!(scores.starts_with("sample_id,family,method,value\n"));
    // 5 held-out ID + 3 OOD samples, RECON and one MCDO variant each
    assert_eq!(scores.lines().count(), 1 + 8 * 2);
    step(&["ablation"]);
    assert!(out.join("ablation.json").exists());
    step(&["eval"]);
    for f in ["report.json", "table1.csv", "table2.csv", "table3.csv", "hist_RECON.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let t1 = fs::read_to_string(out.join("table1.csv")).unwrap();
    assert_eq!(t1.lines().count(), 1 + 10);
}

#[test]
fn pipeline_is_reproducible_and_honours_seed_env() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let go = |out: &Path, seed: Option<&str>| {
        let mut c = bin();
        c.arg("--config").arg(&cfg).arg("-o").arg(out).arg("pipeline");
        if let Some(s) = seed {
            c.env("RECONUQ_SEED", s);
        }
        let o = run(&mut c);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("report.json")).unwrap()
    };
    let a = go(&tmp.path().join("a"), None);
    let b = go(&tmp.path().join("b"), None);
    assert_eq!(a, b);
    let c = go(&tmp.path().join("c"), Some("5"));
    assert_ne!(a, c);
    let text = String::from_utf8(c).unwrap();
    assert!(text.contains("\"dataset\": 5"), "{text}");
}

#[test]
fn single_member_ensemble_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let o = run(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("-o")
        .arg(&out)
        .arg("pipeline")
        .arg("--uq.de_models=1"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("single member"));
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    let de: Vec<&str> = scores.lines().filter(|l| l.contains(",DE,")).collect();
    assert!(!de.is_empty());
    assert!(de.iter().all(|l| l.ends_with(",0.0") || l.ends_with(",0")), "{de:?}");
}
