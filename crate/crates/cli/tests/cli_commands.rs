use std::path::Path;
use std::process::{Command, Output};

use specklenn::dataset::Dataset;
use specklenn::embedding::EmbeddingNet;
use specklenn::fewshot::{build_support_set, classify_pattern, LabeledFrame};
use specklenn_cli::commands::{build_service, ServeArgs};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_specklenn"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    let out = bin().args(args).current_dir(cwd).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn fails(args: &[&str], cwd: &Path) -> String {
    let out = bin().args(args).current_dir(cwd).output().unwrap();
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn same_dir(a: &Path, b: &Path) {
    for f in ["manifest.txt", "frames.bin", "masks.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn simulate_is_byte_identical_across_runs_and_thread_modes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["simulate", "--samples", "2", "--per-category", "6", "--seed", "7"];
    run(&[&args[..], &["--out", "a"]].concat(), d);
    run(&[&args[..], &["--out", "b"]].concat(), d);
    run(&[&args[..], &["--out", "c", "--serial"]].concat(), d);
    same_dir(&d.join("a"), &d.join("b"));
    same_dir(&d.join("a"), &d.join("c"));
    let ds = Dataset::load(d.join("a")).unwrap();
    assert_eq!(ds.len(), 2 * 4 * 6);

    run(&["simulate", "--samples", "2", "--per-category", "6", "--seed", "8", "--out", "e"], d);
    assert_ne!(std::fs::read(d.join("a/frames.bin")).unwrap(), std::fs::read(d.join("e/frames.bin")).unwrap());
}

#[test]
fn train_evaluate_classify_and_serve_share_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["simulate", "--samples", "3", "--per-category", "12", "--seed", "1", "--out", "train"], d);
    run(&["simulate", "--samples", "2", "--first-sample", "10", "--per-category", "12", "--seed", "2", "--out", "test"], d);
    std::fs::write(d.join("train.toml"), "epochs = 2\nseed = 5\nbatch_size = 32\nmetrics = \"metrics.jsonl\"\n").unwrap();
    run(&["train-offline", "--config", "train.toml", "--data", "train", "--out", "ckpt"], d);
    let records = std::fs::read_to_string(d.join("metrics.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2);
    for line in records.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["mean_loss"].as_f64().unwrap().is_finite());
    }

    run(&["evaluate", "--protocol", "fewshot", "--model", "ckpt", "--data", "test", "--shots", "5", "--episodes", "4", "--out", "reports"], d);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("reports/fewshot.json")).unwrap()).unwrap();
    let acc = report["conditions"][0]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(std::fs::read_to_string(d.join("reports/fewshot.csv")).unwrap().starts_with("protocol,model,shots"));

    // classify matches the library on the same inputs
    run(&["simulate", "--samples", "1", "--first-sample", "20", "--per-category", "2", "--seed", "3", "--out", "support", "--categories", "single,double,non_sample_hit"], d);
    let out = run(&["classify", "--model", "ckpt", "--support", "support", "--input", "test"], d);
    let model = EmbeddingNet::<f32>::load(d.join("ckpt")).unwrap();
    let sup = Dataset::load(d.join("support")).unwrap();
    let frames: Vec<LabeledFrame<'_>> =
        sup.patterns.iter().map(|p| LabeledFrame { label: p.label, source_id: p.id, image: &p.intensity }).collect();
    let support = build_support_set(&model, &frames).unwrap();
    let test = Dataset::load(d.join("test")).unwrap();
    let lines: Vec<serde_json::Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), test.len());
    for (line, p) in lines.iter().zip(&test.patterns) {
        let want = classify_pattern(&model, &p.intensity, &support).unwrap();
        assert_eq!(line["id"].as_u64().unwrap(), p.id);
        assert_eq!(line["predicted"].as_str().unwrap(), want.predicted.as_str());
        for (got, w) in line["distances"].as_array().unwrap().iter().zip(&want.distances) {
            assert_eq!(got["mean"].as_f64().unwrap(), w.mean);
        }
    }

    // the checkpoint loads in serve
    let args = ServeArgs {
        model: Some(d.join("ckpt")),
        ingest: Some(d.join("test")),
        ..parse_serve(&[])
    };
    let svc = build_service(&args).unwrap();
    assert_eq!(svc.status().frames, test.len());
    svc.label(0, test.patterns[0].label).unwrap();
    let r = svc.classify(0).unwrap();
    assert_eq!(r.classification.distances[0].per_support, vec![0.0]);
}

fn parse_serve(extra: &[&str]) -> ServeArgs {
    use clap::Parser;
    use specklenn_cli::commands::{Cli, Command as Sub};
    let cli = Cli::try_parse_from([&["specklenn", "serve"][..], extra].concat()).unwrap();
    match cli.command {
        Sub::Serve(a) => a,
        _ => unreachable!(),
    }
}

#[test]
fn serve_flags_mirror_the_service_config() {
    let a = parse_serve(&["--shots", "3", "--labels", "single_hit,multi_hit", "--retrain-min-labels", "20", "--from-scratch"]);
    let cfg = specklenn_cli::commands::service_config(&a);
    assert_eq!(cfg.shots, 3);
    assert_eq!(cfg.labels.len(), 2);
    assert_eq!(cfg.retrain_min_labels, 20);
    assert!(cfg.from_scratch);
    assert_eq!(cfg.bind, "127.0.0.1:8080");
}

#[test]
fn train_online_runs_from_a_spool() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["simulate", "--samples", "1", "--per-category", "4", "--seed", "4", "--out", "spool", "--categories", "single,double"], d);
    run(
        &["train-online", "--spool", "spool", "--from-scratch", "--epochs", "1", "--train-budget", "8", "--val-budget", "4", "--batch-size", "8", "--labels", "single_hit,multi_hit", "--out", "online"],
        d,
    );
    EmbeddingNet::<f32>::load(d.join("online")).unwrap();
    let err = fails(&["train-online", "--spool", "spool", "--out", "x"], d);
    assert!(err.contains("--init"), "{err}");
}

#[test]
fn bad_inputs_name_the_field_or_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "per_categroy = 3\n").unwrap();
    let err = fails(&["simulate", "--config", "bad.toml", "--out", "x"], d);
    assert!(err.contains("per_categroy"), "{err}");

    let err = fails(&["simulate", "--config", "missing.toml", "--out", "x"], d);
    assert!(err.contains("missing.toml"), "{err}");

    let err = fails(&["train-offline", "--data", "no_such_dir", "--out", "x"], d);
    assert!(err.contains("no_such_dir"), "{err}");

    let err = fails(&["simulate", "--out", "x", "--per-category", "many"], d);
    assert!(err.contains("--per-category"), "{err}");

    run(&["simulate", "--samples", "1", "--per-category", "4", "--out", "tiny"], d);
    let err = fails(&["train-offline", "--data", "tiny", "--out", "x", "--batch-size", "1"], d);
    assert!(err.contains("batch_size"), "{err}");
    let err = fails(&["evaluate", "--protocol", "masking", "--model", "nowhere", "--out", "r"], d);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn explicit_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("sim.toml"), "samples = 1\nper_category = 2\nseed = 3\ncategories = [\"single\", \"double\"]\n").unwrap();
    run(&["simulate", "--config", "sim.toml", "--out", "a"], d);
    run(&["simulate", "--config", "sim.toml", "--per-category", "3", "--out", "b"], d);
    assert_eq!(Dataset::load(d.join("a")).unwrap().len(), 4);
    assert_eq!(Dataset::load(d.join("b")).unwrap().len(), 6);
}
