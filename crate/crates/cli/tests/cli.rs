use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use emcad_core::data::{write_dataset, DatasetMeta, SliceRecord, Split};
use emcad_core::{Shape, Tensor4};
use serde_json::Value;

fn emcad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emcad"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("EMCAD_THREADS")
        .output()
        .expect("spawn emcad")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

const TINY_SYNTH: &str = r#"{
  "version": 1,
  "seed": 11,
  "epochs": 2,
  "batch_size": 4,
  "model": {"encoder": {"channels": [8, 16, 24, 32]}, "decoder": {"channels": [8, 16, 24, 32]}},
  "synthetic": {"count": 16, "size": 32, "difficulty": 0.5}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&emcad(d.path(), &["bogus"])), 1);
    assert_eq!(code(&emcad(d.path(), &["train"])), 1);
    assert_eq!(code(&emcad(d.path(), &["--help"])), 0);
    assert_eq!(code(&emcad(d.path(), &["count", "--channels", "8,16"])), 1);
}

#[test]
fn invalid_thread_count_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_emcad"))
        .args(["count", "--resolution", "64"])
        .env("EMCAD_THREADS", "zero")
        .current_dir(d.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("EMCAD_THREADS"));
}

#[test]
fn count_reports_budget_and_scaling() {
    let d = tempfile::tempdir().unwrap();
    let o = ok(emcad(d.path(), &["count", "--out", "c224.json"]));
    assert!(stdout(&o).contains("FLOPs = 2 x MACs"));
    let r224 = json(&d.path().join("c224.json"));
    let params = r224["decoder"]["total_params"].as_f64().unwrap();
    assert!((params - 506_000.0).abs() <= 0.05 * 506_000.0, "{params}");
    assert!(r224["model"]["total_params"].as_u64().unwrap() > params as u64);

    ok(emcad(d.path(), &["count", "--resolution", "448", "--out", "c448.json"]));
    let r448 = json(&d.path().join("c448.json"));
    let ratio = r448["decoder"]["total_flops"].as_f64().unwrap() / r224["decoder"]["total_flops"].as_f64().unwrap();
    assert!((ratio - 4.0).abs() <= 0.04, "{ratio}");

    ok(emcad(
        d.path(),
        &["count", "--channels", "8,16,24,32", "--out", "tiny.json"],
    ));
    let tiny = json(&d.path().join("tiny.json"));
    assert!(tiny["decoder"]["total_params"].as_f64().unwrap() < params);

    assert_eq!(code(&emcad(d.path(), &["count", "--resolution", "100"])), 1);
}

#[test]
fn preprocess_two_volumes_of_eight_slices() {
    let d = tempfile::tempdir().unwrap();
    ok(emcad(
        d.path(),
        &["synth", "--out", "vols", "--volumes", "2", "--dims", "32,32,8"],
    ));
    let o = ok(emcad(d.path(), &["preprocess", "vols", "--out", "ds"]));
    assert!(stdout(&o).contains("16 kept"), "{}", stdout(&o));
    let lines = fs::read_to_string(d.path().join("ds/manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 16);
    let meta = json(&d.path().join("ds/dataset.json"));
    assert_eq!(
        (meta["train_patients"].as_u64(), meta["test_patients"].as_u64()),
        (Some(1), Some(1))
    );
}

#[test]
fn drop_empty_on_background_volume_warns_and_keeps_nothing() {
    let d = tempfile::tempdir().unwrap();
    ok(emcad(
        d.path(),
        &[
            "synth",
            "--out",
            "vols",
            "--volumes",
            "1",
            "--blank",
            "1",
            "--dims",
            "16,16,4",
        ],
    ));
    let o = Command::new(env!("CARGO_BIN_EXE_emcad"))
        .args(["preprocess", "vols", "--out", "ds", "--drop-empty"])
        .current_dir(d.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("0 kept"));
    assert!(stderr(&o).contains("no slices were kept"));
    assert_eq!(fs::read_to_string(d.path().join("ds/manifest.jsonl")).unwrap(), "");
}

#[test]
fn corrupt_and_missing_volumes_are_listed_with_nonzero_exit() {
    let d = tempfile::tempdir().unwrap();
    ok(emcad(
        d.path(),
        &["synth", "--out", "vols", "--volumes", "3", "--dims", "16,16,3"],
    ));
    fs::write(d.path().join("vols/synth_002/image.npy"), b"\x93NUMPY junk").unwrap();
    fs::remove_file(d.path().join("vols/synth_003/label.npy")).unwrap();
    let o = emcad(d.path(), &["preprocess", "vols", "--out", "ds"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("synth_002") && err.contains("synth_003"), "{err}");
    assert!(!err.contains("synth_001"));
    assert_eq!(code(&emcad(d.path(), &["preprocess", "nowhere", "--out", "ds2"])), 1);
}

#[test]
fn train_is_deterministic_and_eval_reads_its_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), "cfg.json", TINY_SYNTH);
    for name in ["a", "b"] {
        let o = ok(emcad(
            d.path(),
            &["train", "--config", "cfg.json", "--out", "runs", "--run-name", name],
        ));
        assert!(stdout(&o).contains(&format!("run directory: runs/{name}")));
    }
    for f in [
        "iteration_loss.csv",
        "epoch_loss.csv",
        "test_dice.csv",
        "best.ckpt",
        "last.ckpt",
    ] {
        let a = fs::read(d.path().join("runs/a").join(f)).unwrap();
        let b = fs::read(d.path().join("runs/b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    let iters = fs::read_to_string(d.path().join("runs/a/iteration_loss.csv")).unwrap();
    assert_eq!(iters.lines().count(), 1 + 2 * 3);

    let o = ok(emcad(d.path(), &["eval", "runs/a/best.ckpt", "--out", "ev"]));
    assert!(stdout(&o).contains("mean dice"));
    let report = json(&d.path().join("ev/eval.json"));
    let best = json(&d.path().join("runs/a/summary.json"))["best_mean_dice"]
        .as_f64()
        .unwrap();
    assert_eq!(report["mean_dice"].as_f64().unwrap(), best);
    let csv = fs::read_to_string(d.path().join("ev/eval_cases.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn existing_run_is_not_overwritten() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), "cfg.json", TINY_SYNTH);
    ok(emcad(
        d.path(),
        &["train", "--config", "cfg.json", "--out", "runs", "--run-name", "a"],
    ));
    let o = emcad(
        d.path(),
        &["train", "--config", "cfg.json", "--out", "runs", "--run-name", "a"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--resume"));
}

#[test]
fn resume_continues_epoch_numbering() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), "cfg.json", TINY_SYNTH);
    ok(emcad(
        d.path(),
        &["train", "--config", "cfg.json", "--out", "runs", "--run-name", "r"],
    ));
    ok(emcad(d.path(), &["train", "--resume", "runs/r", "--epochs", "3"]));
    let epochs = fs::read_to_string(d.path().join("runs/r/epoch_loss.csv")).unwrap();
    let idx: Vec<&str> = epochs.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(idx, ["1", "2", "3"]);

    ok(emcad(
        d.path(),
        &[
            "train",
            "--config",
            "cfg.json",
            "--epochs",
            "3",
            "--out",
            "runs",
            "--run-name",
            "full",
        ],
    ));
    assert_eq!(
        epochs,
        fs::read_to_string(d.path().join("runs/full/epoch_loss.csv")).unwrap()
    );
}

#[test]
fn non_finite_loss_names_the_iteration_and_exits_two() {
    let d = tempfile::tempdir().unwrap();
    write_config(
        d.path(),
        "cfg.json",
        &TINY_SYNTH.replace("\"seed\": 11", "\"seed\": 11, \"lr\": 1e30"),
    );
    let o = emcad(
        d.path(),
        &["train", "--config", "cfg.json", "--out", "runs", "--run-name", "x"],
    );
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("iteration ") && err.contains("non-finite"), "{err}");
}

#[test]
fn bad_configs_exit_one() {
    let d = tempfile::tempdir().unwrap();
    write_config(
        d.path(),
        "unknown.json",
        &TINY_SYNTH.replace("\"seed\": 11", "\"seed\": 11, \"sede\": 3"),
    );
    write_config(d.path(), "nodata.json", r#"{"version": 1}"#);
    write_config(
        d.path(),
        "batch0.json",
        &TINY_SYNTH.replace("\"batch_size\": 4", "\"batch_size\": 0"),
    );
    for cfg in ["unknown.json", "nodata.json", "batch0.json", "missing.json"] {
        let o = emcad(d.path(), &["train", "--config", cfg, "--out", "runs"]);
        assert_eq!(code(&o), 1, "{cfg}: {}", stderr(&o));
    }
}

#[test]
fn eval_rejects_corrupt_checkpoint_and_empty_split() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), "cfg.json", TINY_SYNTH);
    ok(emcad(
        d.path(),
        &["train", "--config", "cfg.json", "--out", "runs", "--run-name", "a"],
    ));
    let mut bytes = fs::read(d.path().join("runs/a/best.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0xff;
    fs::write(d.path().join("bad.ckpt"), &bytes).unwrap();
    let o = emcad(d.path(), &["eval", "bad.ckpt"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));

    let s = Shape::new(1, 3, 32, 32).unwrap();
    let rec = SliceRecord {
        patient_id: "only".into(),
        slice_index: 0,
        image: Tensor4::zeros(s),
        mask: Tensor4::zeros(s.with_c(1)),
    };
    let meta = DatasetMeta {
        format_version: 1,
        seed: 0,
        train_fraction: 0.8,
        source: "synthetic".into(),
        params: Value::Null,
        train_patients: 0,
        test_patients: 0,
        train_slices: 0,
        test_slices: 0,
    };
    write_dataset(&d.path().join("trainonly"), &[(rec, Split::Train)], meta).unwrap();
    let o = emcad(d.path(), &["eval", "runs/a/best.ckpt", "--data", "trainonly"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
    assert!(!stdout(&o).contains("NaN"));
}

#[test]
fn eval_shape_mismatch_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), "cfg.json", TINY_SYNTH);
    ok(emcad(
        d.path(),
        &["train", "--config", "cfg.json", "--out", "runs", "--run-name", "a"],
    ));
    ok(emcad(
        d.path(),
        &["synth", "--out", "vols", "--volumes", "2", "--dims", "48,48,2"],
    ));
    ok(emcad(d.path(), &["preprocess", "vols", "--out", "ds"]));
    let o = emcad(d.path(), &["eval", "runs/a/best.ckpt", "--data", "ds"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("divisible by 32"));
}

#[test]
fn synth_dataset_is_byte_identical_for_a_seed() {
    let d = tempfile::tempdir().unwrap();
    for out in ["x", "y"] {
        ok(emcad(
            d.path(),
            &["synth", "--out", out, "--count", "10", "--size", "32", "--seed", "4"],
        ));
    }
    let manifest = fs::read_to_string(d.path().join("x/manifest.jsonl")).unwrap();
    let first: Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let img = first["image_path"].as_str().unwrap();
    for f in ["manifest.jsonl", "dataset.json", img] {
        assert_eq!(
            fs::read(d.path().join("x").join(f)).unwrap(),
            fs::read(d.path().join("y").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gradcheck_ops_passes_and_bad_scope_fails() {
    let d = tempfile::tempdir().unwrap();
    let o = ok(emcad(d.path(), &["gradcheck", "--scope", "ops"]));
    assert!(stdout(&o).contains("all gradient checks passed"));
    assert!(!stdout(&o).contains("FAIL"));
    assert_eq!(code(&emcad(d.path(), &["gradcheck", "--scope", "nope"])), 1);
}

#[test]
fn thread_count_does_not_change_results() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), "cfg.json", TINY_SYNTH);
    for (name, threads) in [("one", "1"), ("three", "3")] {
        let o = Command::new(env!("CARGO_BIN_EXE_emcad"))
            .args(["train", "--config", "cfg.json", "--out", "runs", "--run-name", name])
            .env("EMCAD_THREADS", threads)
            .current_dir(d.path())
            .output()
            .unwrap();
        ok(o);
    }
    for f in ["iteration_loss.csv", "last.ckpt"] {
        assert!(
            fs::read(d.path().join("runs/one").join(f)).unwrap()
                == fs::read(d.path().join("runs/three").join(f)).unwrap(),
            "{f}"
        );
    }
}
