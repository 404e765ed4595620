//! End-to-end tests of the command-line surface: artifacts, determinism,
//! and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcoco::data::{generate_synthetic, save_dataset, SynthSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcoco"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mcoco")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_into(dir: &Path, n: &str, seed: &str) {
    let out = run(&[
        "synth", "--n", n, "--k", "3", "--views", "2", "--view-dims", "6,5", "--seed", seed,
        "--out", dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
}

fn write_config(path: &Path, dataset: &Path, out_dir: &Path, extra: &str) {
    let text = format!(
        "dataset = {}\nout = {}\nk = 3\nlatent_dim = 4\nencoder_hidden = 16\n\
         generator_hidden = 8\npretrain_epochs = 4\ntrain_epochs = 6\nseed = 5\n{extra}",
        dataset.display(),
        out_dir.display()
    );
    std::fs::write(path, text).unwrap();
}

fn dir_snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn synth_writes_expected_files_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    synth_into(&a, "60", "7");
    synth_into(&b, "60", "7");
    for name in ["manifest.json", "view_0.bin", "view_1.bin", "labels.bin"] {
        assert!(a.join(name).exists(), "missing {name}");
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} not byte-identical across identical invocations"
        );
    }
}

#[test]
fn synth_rejects_single_view() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "synth", "--n", "10", "--k", "2", "--views", "1", "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_code(&out, 1);
}

#[test]
fn unknown_config_key_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.txt");
    std::fs::write(&cfg, "dataset = x\nwibble = 3\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("wibble"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = run(&["train", "--config", "/definitely/not/here.txt"]);
    assert_code(&out, 1);
}

#[test]
fn train_writes_artifacts_and_repeats_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, "80", "1");
    let before = dir_snapshot(&data);

    let run1 = tmp.path().join("run1");
    let run2 = tmp.path().join("run2");
    let cfg1 = tmp.path().join("cfg1.txt");
    let cfg2 = tmp.path().join("cfg2.txt");
    write_config(&cfg1, &data, &run1, "");
    write_config(&cfg2, &data, &run2, "");
    assert_code(&run(&["train", "--config", cfg1.to_str().unwrap()]), 0);
    assert_code(&run(&["train", "--config", cfg2.to_str().unwrap()]), 0);

    // artifacts exist
    for name in ["model.ckpt", "trace.ndjson", "metrics.json"] {
        assert!(run1.join(name).exists(), "missing {name}");
    }
    // trace has one JSON object per epoch
    let trace = std::fs::read_to_string(run1.join("trace.ndjson")).unwrap();
    let records: Vec<serde_json::Value> = trace
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 4 + 6);
    // metrics carry an accuracy field and repeat exactly across reruns
    let m1: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run1.join("metrics.json")).unwrap()).unwrap();
    let m2: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run2.join("metrics.json")).unwrap()).unwrap();
    assert!(m1["acc"].is_number());
    assert_eq!(m1, m2);
    // input dataset directory untouched
    assert_eq!(before, dir_snapshot(&data));
}

#[test]
fn ablation_flag_zeroes_the_semantic_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, "60", "2");
    let out_dir = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.txt");
    write_config(&cfg, &data, &out_dir, "");
    assert_code(
        &run(&["train", "--config", cfg.to_str().unwrap(), "--ablation", "no-se"]),
        0,
    );
    let trace = std::fs::read_to_string(out_dir.join("trace.ndjson")).unwrap();
    for line in trace.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["loss"]["semantic"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn eval_matches_final_training_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, "80", "3");
    let run_dir = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.txt");
    write_config(&cfg, &data, &run_dir, "");
    assert_code(&run(&["train", "--config", cfg.to_str().unwrap()]), 0);

    let eval_dir = tmp.path().join("evald");
    assert_code(
        &run(&[
            "eval",
            "--checkpoint",
            run_dir.join("model.ckpt").to_str().unwrap(),
            "--dataset",
            data.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ]),
        0,
    );
    let train_m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir.join("metrics.json")).unwrap()).unwrap();
    let eval_m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(train_m, eval_m);
    // one fused label per sample
    let labels = std::fs::read_to_string(eval_dir.join("labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 80);
}

#[test]
fn eval_on_unlabeled_data_reports_null_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, "60", "4");
    let run_dir = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.txt");
    write_config(&cfg, &data, &run_dir, "");
    assert_code(&run(&["train", "--config", cfg.to_str().unwrap()]), 0);

    // strip labels from a copy of the dataset
    let mut ds = generate_synthetic(&SynthSpec {
        n_samples: 60,
        n_clusters: 3,
        n_views: 2,
        latent_dim: 5,
        view_dims: vec![6, 5],
        noise_sigmas: vec![0.05, 0.05],
        cluster_separation: 8.0,
        seed: 4,
    })
    .unwrap();
    ds.labels = None;
    let unlabeled = tmp.path().join("unlabeled");
    std::fs::create_dir_all(&unlabeled).unwrap();
    save_dataset(&ds, &unlabeled).unwrap();

    let eval_dir = tmp.path().join("evald");
    assert_code(
        &run(&[
            "eval",
            "--checkpoint",
            run_dir.join("model.ckpt").to_str().unwrap(),
            "--dataset",
            unlabeled.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ]),
        0,
    );
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval_dir.join("metrics.json")).unwrap()).unwrap();
    for field in ["acc", "nmi", "rand_index", "fscore"] {
        assert!(m[field].is_null(), "{field} should be null without labels");
    }
    assert!(eval_dir.join("labels.txt").exists());
}

#[test]
fn eval_dimension_mismatch_fails_without_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, "60", "5");
    let run_dir = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.txt");
    write_config(&cfg, &data, &run_dir, "");
    assert_code(&run(&["train", "--config", cfg.to_str().unwrap()]), 0);

    let other = tmp.path().join("other");
    let out = run(&[
        "synth", "--n", "60", "--k", "3", "--views", "2", "--view-dims", "9,5", "--out",
        other.to_str().unwrap(),
    ]);
    assert_code(&out, 0);

    let eval_dir = tmp.path().join("evald");
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("model.ckpt").to_str().unwrap(),
        "--dataset",
        other.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    assert!(!eval_dir.join("metrics.json").exists());
    assert!(!eval_dir.join("labels.txt").exists());
}

#[test]
fn project_writes_csv_and_tsne_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, "60", "6");
    let run_dir = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.txt");
    write_config(&cfg, &data, &run_dir, "");
    assert_code(&run(&["train", "--config", cfg.to_str().unwrap()]), 0);
    let ckpt = run_dir.join("model.ckpt");

    let pca = tmp.path().join("pca.csv");
    assert_code(
        &run(&[
            "project", "--checkpoint", ckpt.to_str().unwrap(), "--dataset",
            data.to_str().unwrap(), "--view", "0", "--out", pca.to_str().unwrap(),
        ]),
        0,
    );
    let text = std::fs::read_to_string(&pca).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x,y,fused_label,true_label");
    assert_eq!(lines.count(), 60);

    let t1 = tmp.path().join("t1.csv");
    let t2 = tmp.path().join("t2.csv");
    for t in [&t1, &t2] {
        assert_code(
            &run(&[
                "project", "--checkpoint", ckpt.to_str().unwrap(), "--dataset",
                data.to_str().unwrap(), "--view", "1", "--method", "tsne", "--perplexity",
                "10", "--iters", "60", "--seed", "9", "--out", t.to_str().unwrap(),
            ]),
            0,
        );
    }
    assert_eq!(
        std::fs::read(&t1).unwrap(),
        std::fs::read(&t2).unwrap(),
        "same-seed neighbor embeddings must match byte for byte"
    );

    // invalid view index
    let out = run(&[
        "project", "--checkpoint", ckpt.to_str().unwrap(), "--dataset",
        data.to_str().unwrap(), "--view", "5", "--out",
        tmp.path().join("bad.csv").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
}
