use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dcrec");

fn dcrec(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("spawn dcrec")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_corpus(dir: &Path) -> String {
    let data = dir.join("syn.tsv");
    let d = data.to_str().unwrap().to_string();
    let out = dcrec(&["synthesize", "--users", "60", "--items", "30", "--mean-len", "8", "--seed", "4", "--out", &d]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    d
}

const TINY: [&str; 10] = [
    "--set", "embed_dim=8", "--set", "ffn_hidden=16", "--set", "t_max=10", "--set", "max_epochs=1", "--set", "batch_size=32",
];

fn train(data: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data, "--out", out.to_str().unwrap()];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    dcrec(&args)
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&dcrec(&[])), 2);
    assert_eq!(code(&dcrec(&["train", "--set", "bogus=1", "--data", "x.tsv"])), 2);
    assert_eq!(code(&dcrec(&["train", "--ablate", "everything", "--data", "x.tsv"])), 2);
    assert_eq!(code(&dcrec(&["train", "--set", "d=7", "--set", "heads=2", "--data", "x.tsv"])), 2);
    assert_eq!(code(&dcrec(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_3() {
    let out = dcrec(&["train", "--data", "/nonexistent/data.tsv"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/data.tsv"));
}

#[test]
fn train_evaluate_export_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path());
    let run = dir.path().join("run");
    let records = dir.path().join("runs.jsonl");
    let rec = records.to_str().unwrap();
    let out = train(&data, &run, &["--records", rec]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.json", "metrics.json", "loss_log.jsonl"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let line = std::fs::read_to_string(run.join("loss_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for k in ["step", "L_rec", "L_u", "L_v", "L_w", "total"] {
        assert!(first.get(k).is_some(), "loss log lacks {k}");
    }

    let ck = run.join("checkpoint.json");
    let ck = ck.to_str().unwrap();
    let out = dcrec(&["evaluate", "--checkpoint", ck, "--data", &data]);
    assert_eq!(code(&out), 0);
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(eval["HR"], metrics["test"]["HR"]);
    assert!(eval["slices"].get("cold_start").is_some());
    assert_eq!(code(&dcrec(&["evaluate", "--checkpoint", ck, "--data", &data, "--stage", "train"])), 2);

    let tsv = dir.path().join("x.tsv");
    let out = dcrec(&["export-embeddings", "--checkpoint", ck, "--data", &data, "--view", "fused", "--out", tsv.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&tsv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0].split('\t').count(), 9);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 9));
    assert!(lines.len() > 1);
    assert_eq!(code(&dcrec(&["export-embeddings", "--checkpoint", ck, "--data", &data, "--view", "w", "--out", "/tmp/x"])), 2);

    // a second ablation makes the report possible
    let out = train(&data, &dir.path().join("run_cl"), &["--records", rec, "--ablate", "cl"]);
    assert_eq!(code(&out), 0);
    let report = dir.path().join("report");
    let out = dcrec(&["report", "--records", rec, "--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(report.join("ablation.md")).unwrap();
    assert!(md.contains("| full |") && md.contains("| w/o CL |"));
    assert!(report.join("ablation.csv").exists());
}

#[test]
fn evaluate_rejects_foreign_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&train(&data, &run, &[])), 0);
    let other = dir.path().join("other.tsv");
    let o = other.to_str().unwrap();
    assert_eq!(code(&dcrec(&["synthesize", "--users", "60", "--items", "31", "--seed", "5", "--out", o])), 0);
    let ck = run.join("checkpoint.json");
    assert_eq!(code(&dcrec(&["evaluate", "--checkpoint", ck.to_str().unwrap(), "--data", o])), 3);
}

#[test]
fn config_file_with_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "data = syn.tsv\nout = from_cfg\nembed_dim = 8\nffn_hidden = 16\nt_max = 10\nmax_epochs = 1\n").unwrap();
    let out = dcrec(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from_cfg/checkpoint.json").exists());
}

#[test]
fn theory_check_outputs_and_strict_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("theory");
    let o = out_dir.to_str().unwrap();
    let out = dcrec(&["theory-check", "--out", o, "--samples", "2000"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS endpoint_values"));
    for f in ["curves.csv", "bands.csv", "theory_summary.json"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    // the f2 interior-maximum location check does not hold, so strict mode fails
    assert!(stdout.contains("FAIL f2_interior_maximum"));
    assert_eq!(code(&dcrec(&["theory-check", "--out", o, "--samples", "2000", "--strict"])), 1);
    assert_eq!(code(&dcrec(&["theory-check", "--out", o, "--tau", "0"])), 2);
}
