use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sst_core::datagen::Dataset;
use sst_core::trainer::TrainReport;

fn sst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sst")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sst(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "seed = 3\n[train]\nepochs = 7\nbatch_size = 16\n";

fn gen_tiny(dir: &Path) {
    ok(&["gen-data", "--seed", "3", "--categories", "8", "--samples", "150", "--known-prop", "0.4", "--out", p(dir)]);
}

#[test]
fn gen_data_writes_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data);
    let train = Dataset::read_jsonl(&data.join("train.jsonl")).unwrap();
    let test = Dataset::read_jsonl(&data.join("test.jsonl")).unwrap();
    assert_eq!((train.len(), test.len()), (120, 30));
    assert!(train.samples.iter().all(|s| s.partial_labels.known_count() == 3));
    assert!(test.samples.iter().all(|s| s.partial_labels.known_count() == 8));
    assert!(data.join("world.json").is_file());
}

#[test]
fn train_evaluate_and_diagnose() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data);
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out-dir", p(&run), "--known-prop", "0.2,0.5"]);
    for q in ["q0.2", "q0.5"] {
        let report = TrainReport::read_jsonl(&run.join(q).join("train_report.jsonl")).unwrap();
        assert_eq!(report.epochs.len(), 7);
        assert!(report.final_metrics.is_some());
    }

    let csv = tmp.path().join("report.csv");
    ok(&["evaluate", "--checkpoint", p(&run), "--data", p(&data), "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4, "{text}");
    assert!(rows[0].starts_with("known_prop,map,"));
    assert!(rows[1].starts_with("0.2,") && rows[2].starts_with("0.5,") && rows[3].starts_with("average,"));

    let diag = tmp.path().join("diag");
    let ck = run.join("q0.2");
    let out = ok(&["pseudo-diagnose", "--module", "ist", "--checkpoint", p(&ck), "--data", p(&data), "--out-dir", p(&diag), "--images", "0,2"]);
    assert!(out.contains("counts non-increasing: true, nesting violations: 0"), "{out}");
    let out = ok(&["pseudo-diagnose", "--module", "cst", "--checkpoint", p(&ck), "--data", p(&data), "--out-dir", p(&diag), "--bins", "8"]);
    assert!(out.contains("counts non-increasing: true, nesting violations: 0"), "{out}");
    for f in ["ist_sweep.csv", "cst_sweep.csv", "ist_cooccurrence_0.csv", "ist_cooccurrence_2.csv", "cst_similarity_hist.csv"] {
        assert!(diag.join(f).is_file(), "{f}");
    }
    // header plus one row per default threshold
    assert_eq!(fs::read_to_string(diag.join("ist_sweep.csv")).unwrap().lines().count(), 11);
    assert_eq!(fs::read_to_string(diag.join("cst_similarity_hist.csv")).unwrap().lines().count(), 1 + 8 * 8);
}

#[test]
fn ablate_writes_seed_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(
        &cfg,
        format!("{TINY}[world]\ncategories = 6\nd_raw = 6\nn_train = 40\nn_test = 20\n"),
    )
    .unwrap();
    let out = tmp.path().join("cmp.csv");
    ok(&["ablate", "--config", p(&cfg), "--grid", "baseline,ist-stat,sst", "--seeds", "2", "--known-prop", "0.5", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "variant,known_prop,seed_3,seed_4,mean");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("baseline,0.5,") && rows[3].starts_with("sst,0.5,"));
}

#[test]
fn bad_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepohcs = 3\n").unwrap();
    let out = sst(&["train", "--config", p(&cfg), "--out-dir", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epohcs"));
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sst(&["evaluate", "--checkpoint", p(&tmp.path().join("nope")), "--data", p(tmp.path()), "--out", p(&tmp.path().join("r.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
