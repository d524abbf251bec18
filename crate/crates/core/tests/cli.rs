use std::fs;
use std::path::Path;
use std::process::Command;

use snlab::cli::SavedModel;
use snlab::stats::{bn_stats_from_in, in_stats};
use snlab::trainer::make_dataset;

fn snlab(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_snlab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn snlab");
    out.status.code().expect("exit code")
}

const SMALL: [&str; 5] = ["train_samples=64", "eval_samples=32", "width=4", "blocks=2", "batch=8"];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL).collect()
}

#[test]
fn gradcheck_passes_is_reproducible_and_detects_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(snlab(d, &["gradcheck", "--out", "a", "--seed", "7"]), 0);
    assert_eq!(snlab(d, &["gradcheck", "--out", "b", "--seed", "7"]), 0);
    let a = fs::read(d.join("a/gradcheck.json")).unwrap();
    assert_eq!(a, fs::read(d.join("b/gradcheck.json")).unwrap());
    let reports: serde_json::Value = serde_json::from_slice(&a).unwrap();
    for r in reports.as_array().unwrap() {
        assert!(r["max_rel_err"].as_f64().unwrap() <= 1e-4);
        assert_eq!(r["pass"], true);
    }
    assert_eq!(snlab(d, &["gradcheck", "--out", "c", "--corrupt-grad"]), 1);
    // Existing report without --force.
    assert_eq!(snlab(d, &["gradcheck", "--out", "a"]), 2);
    assert_eq!(snlab(d, &["gradcheck", "--out", "a", "--force"]), 0);
}

#[test]
fn train_zero_epochs_writes_uniform_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(snlab(d, &with_small(&["train", "--out", "t", "epochs=0"])), 0);
    assert_eq!(fs::read_to_string(d.join("t/report.jsonl")).unwrap(), "");
    let csv = fs::read_to_string(d.join("t/ratios.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    let third = (1.0f64 / 3.0).to_string();
    for r in rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols[0], "0");
        assert!(cols[2..8].iter().all(|c| *c == third));
    }
}

#[test]
fn train_outputs_are_structured_and_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("exp.cfg"), "# reference layout\nepochs = 2\nnorm = sn\n").unwrap();
    for out in ["x", "y"] {
        let args = with_small(&["train", "--config", "exp.cfg", "--out", out, "--seed", "3"]);
        assert_eq!(snlab(d, &args), 0);
    }
    for f in ["report.jsonl", "model.json", "ratios.csv", "summary.json"] {
        assert_eq!(fs::read(d.join("x").join(f)).unwrap(), fs::read(d.join("y").join(f)).unwrap(), "{f}");
    }
    assert!(d.join("x/metadata.json").exists());
    let jsonl = fs::read_to_string(d.join("x/report.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "train_acc", "eval_acc", "lr", "layers"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let layer = &first["layers"][0];
    assert_eq!(layer["w_mu"].as_array().unwrap().len(), 3);
    assert_eq!(layer["w_sigma"].as_array().unwrap().len(), 3);
    assert!(layer["divergence"].is_number());
    // 2 layers x (initial + 2 epochs) + header.
    assert_eq!(fs::read_to_string(d.join("x/ratios.csv")).unwrap().lines().count(), 7);

    // Refuses to overwrite.
    assert_eq!(snlab(d, &with_small(&["train", "--config", "exp.cfg", "--out", "x"])), 2);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.cfg"), "epochs three\n").unwrap();
    assert_eq!(snlab(d, &["train", "--config", "bad.cfg", "--out", "o"]), 2);
    assert_eq!(snlab(d, &["train", "--out", "o", "unknown_key=1"]), 2);
    assert_eq!(snlab(d, &["train", "--out", "o", "epochs=x"]), 2);
    assert_eq!(snlab(d, &["train", "--config", "missing.cfg", "--out", "o"]), 2);
    assert_eq!(snlab(d, &["frobnicate"]), 2);
    assert_eq!(snlab(d, &["finalize", "--out", "nothing-here"]), 2);
    assert_eq!(snlab(d, &["eval", "--out", "nothing-here"]), 2);
}

#[test]
fn divergence_exits_three_with_partial_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let args = with_small(&["train", "--out", "t", "epochs=3", "lr=1e6", "norm=ln"]);
    assert_eq!(snlab(d, &args), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("t/summary.json")).unwrap()).unwrap();
    assert!(summary["diverged"].is_object());
    assert!(fs::read_to_string(d.join("t/report.jsonl")).unwrap().lines().count() < 3);
}

#[test]
fn batch_sweep_writes_one_report_per_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(snlab(d, &with_small(&["train", "--out", "s", "epochs=1", "batch_sweep=32,8,2"])), 0);
    for b in [32, 8, 2] {
        let jsonl = fs::read_to_string(d.join(format!("s/batch_{b}/report.jsonl"))).unwrap();
        assert_eq!(jsonl.lines().count(), 1);
    }
    let sweep: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s/sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep.as_array().unwrap().len(), 3);
}

#[test]
fn finalize_single_batch_then_eval_twice() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let args = with_small(&["train", "--out", "t", "epochs=1", "norm=sn", "blocks=1"]);
    assert_eq!(snlab(d, &args), 0);
    let args = ["finalize", "--out", "t", "--method", "batch-average", "--batches", "1", "finalize_batch_size=64"];
    assert_eq!(snlab(d, &args), 0);

    // One block: the SN layer sees the conv output of the whole training set.
    let saved: SavedModel = serde_json::from_str(&fs::read_to_string(d.join("t/finalized.json")).unwrap()).unwrap();
    let ds = make_dataset(&saved.dataset).unwrap();
    let conv_out = saved.model.convs[0].forward(&ds.train.images).unwrap();
    let direct = bn_stats_from_in(&in_stats(&conv_out)).unwrap();
    let frozen = saved.model.sn_layers().next().unwrap().params.frozen_bn.clone().unwrap();
    for c in 0..direct.mu.len() {
        assert!((frozen.mu[c] - direct.mu[c]).abs() <= 1e-12);
        assert!((frozen.var[c] - direct.var[c]).abs() <= 1e-12);
    }

    assert_eq!(snlab(d, &["eval", "--out", "e1", "--model", "t/finalized.json"]), 0);
    assert_eq!(snlab(d, &["eval", "--out", "e2", "--model", "t/finalized.json"]), 0);
    assert_eq!(fs::read(d.join("e1/eval.json")).unwrap(), fs::read(d.join("e2/eval.json")).unwrap());
}
