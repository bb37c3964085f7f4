use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sinkprune::io::{load_checkpoint, read_report, Cell};

fn sinkprune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinkprune"))
        .args(args)
        .current_dir(dir)
        .env_remove("SINKPRUNE_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = sinkprune(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = sinkprune(dir, args);
    assert_eq!(out.status.code(), Some(1), "{args:?} should exit 1");
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic must be one line: {err}");
    err
}

fn body(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with("# run:")).collect::<Vec<_>>().join("\n")
}

#[test]
fn scan_finds_the_planted_sink() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-fixture", "--out", "fx", "--sink", "3:2", "--routing", "1:1"]);
    ok(d.path(), &["scan", "--checkpoint", "fx", "--metric", "bos_head", "--n-prompts", "4", "--out", "s.csv"]);
    let r = read_report(&d.path().join("s.csv")).unwrap();
    let best = (0..r.rows.len())
        .max_by(|&a, &b| {
            let s = |i| r.get(i, "score").unwrap().as_f64().unwrap();
            s(a).total_cmp(&s(b))
        })
        .unwrap();
    assert_eq!(r.get(best, "layer"), Some(&Cell::Int(3)));
    assert_eq!(r.get(best, "head"), Some(&Cell::Int(2)));
    assert!(r.run.is_some());
}

#[test]
fn bi_of_zero_blocks_is_zero() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-fixture", "--preset", "uniform", "--out", "u"]);
    ok(d.path(), &["scan", "--checkpoint", "u", "--metric", "bi", "--n-prompts", "4", "--out", "bi.json"]);
    let r = read_report(&d.path().join("bi.json")).unwrap();
    assert_eq!(r.rows.len(), 4);
    for i in 0..4 {
        assert!(r.get(i, "score").unwrap().as_f64().unwrap() < 1e-6);
        assert_eq!(r.get(i, "head"), Some(&Cell::Null));
    }
}

#[test]
fn missing_checkpoint_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let err = fails(d.path(), &["scan", "--checkpoint", "nowhere/ckpt"]);
    assert!(err.contains("nowhere/ckpt.json"), "{err}");
}

#[test]
fn prune_examples() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-fixture", "--preset", "random", "--seed", "3", "--out", "r"]);
    ok(d.path(), &["prune", "--checkpoint", "r", "--strategy", "mag_asc", "--ratio", "0", "--out", "r0"]);
    let (a, b) = (load_checkpoint(&d.path().join("r")).unwrap(), load_checkpoint(&d.path().join("r0")).unwrap());
    for ((_, x), (_, y)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    // Positional strategies never read the corpus.
    ok(
        d.path(),
        &[
            "prune",
            "--checkpoint",
            "r",
            "--strategy",
            "bottom_up",
            "--ratio",
            "0.5",
            "--corpus",
            "absent.txt",
            "--out",
            "bu",
        ],
    );
    assert_eq!(load_checkpoint(&d.path().join("bu")).unwrap().config.n_layers, 2);
    let spec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("bu.spec.json")).unwrap()).unwrap();
    assert_eq!(spec["spec"]["protected_layers"], serde_json::json!([0, 3]));
    let err = fails(d.path(), &["prune", "--checkpoint", "r", "--strategy", "random_pick", "--ratio", "0.1"]);
    assert!(err.contains("random_pick"));
}

#[test]
fn eval_examples() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-fixture", "--out", "fx"]);
    ok(d.path(), &["eval", "--checkpoint", "fx", "--items", "8", "--seed", "1", "--out", "a.csv"]);
    ok(d.path(), &["eval", "--checkpoint", "fx", "--items", "8", "--seed", "2", "--out", "b.csv"]);
    let ppl = |f: &str| read_report(&d.path().join(f)).unwrap().get(0, "perplexity").unwrap().as_f64().unwrap();
    assert_eq!(ppl("a.csv"), ppl("b.csv"));
    assert!(ppl("a.csv") >= 1.0);

    fs::write(d.path().join("short.txt"), "too short").unwrap();
    fails(d.path(), &["eval", "--checkpoint", "fx", "--corpus", "short.txt", "--out", "c.csv"]);
    assert!(!d.path().join("c.csv").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-fixture", "--out", "fx"]);
    let args = ["scan", "--checkpoint", "fx", "--metric", "wanda", "--n-prompts", "3", "--out", "w.csv"];
    let mut runs = Vec::new();
    for threads in ["2", "2", "1"] {
        ok(d.path(), &[&["--threads", threads][..], &args].concat());
        runs.push(fs::read(d.path().join("w.csv")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
    assert!(body(&d.path().join("w.csv")).starts_with("layer,head,score"));
}

#[test]
fn sweeps() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-fixture", "--out", "fx"]);
    ok(
        d.path(),
        &[
            "sweep",
            "--checkpoint",
            "fx",
            "--mode",
            "single",
            "--items",
            "12",
            "--n-prompts",
            "4",
            "--out",
            "single.csv",
        ],
    );
    let r = read_report(&d.path().join("single.csv")).unwrap();
    assert_eq!(r.get(0, "kind"), Some(&Cell::Text("dense".into())));
    assert_eq!(r.rows.len(), 1 + 32 + 4);
    let routing = (0..r.rows.len())
        .find(|&i| r.get(i, "target_layer") == Some(&Cell::Int(1)) && r.get(i, "target_head") == Some(&Cell::Int(3)))
        .unwrap();
    assert!(r.get(routing, "delta").unwrap().as_f64().unwrap() < -0.1);

    ok(
        d.path(),
        &[
            "sweep",
            "--checkpoint",
            "fx",
            "--mode",
            "ratio",
            "--ratios",
            "0,0.25",
            "--items",
            "12",
            "--n-prompts",
            "4",
            "--out",
            "ratio.json",
        ],
    );
    let r = read_report(&d.path().join("ratio.json")).unwrap();
    assert_eq!(r.get(0, "units_removed"), Some(&Cell::Int(0)));
    assert_eq!(r.get(1, "units_removed"), Some(&Cell::Int(8)));
}

#[test]
fn lengths_and_patterns() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-fixture", "--out", "fx"]);
    ok(d.path(), &["lengths", "--checkpoint", "fx", "--lengths", "8,16,32", "--n-prompts", "4", "--out", "len.csv"]);
    let r = read_report(&d.path().join("len.csv")).unwrap();
    assert_eq!(r.rows.len(), 32 * 3);
    let c = read_report(&d.path().join("len.cohorts.csv")).unwrap();
    let labels: Vec<_> = (0..3).map(|i| c.get(i, "cohort").unwrap().clone()).collect();
    assert_eq!(labels, vec![Cell::Text("all".into()), Cell::Text("mu>=0.6".into()), Cell::Text("mu>=0.8".into())]);
    fails(d.path(), &["lengths", "--checkpoint", "fx", "--lengths", "16"]);

    ok(d.path(), &["patterns", "--checkpoint", "fx", "--n-prompts", "4", "--out", "pat.csv"]);
    let r = read_report(&d.path().join("pat.csv")).unwrap();
    let label = |l: i64, h: i64| {
        let i = (0..r.rows.len())
            .find(|&i| r.get(i, "layer") == Some(&Cell::Int(l)) && r.get(i, "head") == Some(&Cell::Int(h)))
            .unwrap();
        r.get(i, "label").unwrap().as_text().unwrap().to_string()
    };
    assert_eq!(label(2, 0), "bos_sink");
    assert_eq!(label(3, 5), "bos_sink");
    assert_eq!(label(0, 6), "diagonal");
}

#[test]
fn out_dir_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sinkprune"))
        .args(["make-fixture", "--preset", "uniform", "--out", "env_fx"])
        .env("SINKPRUNE_OUT_DIR", d.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.path().join("env_fx.json").exists() && d.path().join("env_fx.bin").exists());
}

#[test]
fn every_subcommand_has_help() {
    let d = tempfile::tempdir().unwrap();
    for sub in ["scan", "prune", "eval", "sweep", "lengths", "patterns", "make-fixture"] {
        let out = sinkprune(d.path(), &[sub, "--help"]);
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stdout).contains("--checkpoint") || sub == "make-fixture");
    }
}
