use std::path::Path;
use std::process::{Command, Output};

use attbalance::harness::commands::ComparisonReport;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attbalance"))
        .args(args)
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = r#"
[model]
d_model = 8
n_heads = 2
n_layers = 3
grid_rows = 4
grid_cols = 4
mlp_hidden = 8

[attbalance]
applied_layers = [1, 2]

[dataset]
n_train = 16
n_val = 12
grid_rows = 4
grid_cols = 4
max_objects = 3

[optim]
epochs = 2
batch_size = 8
"#;
    let p = dir.join("tiny.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(bin(&["train", "--config", "/nonexistent.toml"]).status.code(), Some(1));
    assert_eq!(bin(&["train", "--set", "optim.bogus=1"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn grad_check_passes_and_negative_control_fails() {
    let ok = bin(&["grad-check", "--seed", "2"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let out = String::from_utf8(ok.stdout).unwrap();
    let groups = attbalance::model::param_names(2);
    for g in &groups {
        assert_eq!(
            out.lines().filter(|l| l.split_whitespace().nth(1) == Some(g)).count(),
            1,
            "{g}"
        );
    }
    assert!(out.contains("pass"));
    let bad = bin(&["grad-check", "--seed", "2", "--corrupt-grad", "matmul"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8(bad.stdout).unwrap().contains("FAIL"));
}

#[test]
fn train_eval_compare_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data.jsonl");
    let gen = bin(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    for (out, mode) in [(&run_a, "baseline"), (&run_b, "attbalance")] {
        let o = bin(&[
            "train",
            "--config",
            s(&cfg),
            "--set",
            &format!("run.out_dir=\"{}\"", s(out)),
            "--set",
            &format!("run.dataset_path=\"{}\"", s(&data)),
            "--set",
            &format!("run.mode={mode}"),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 4);
        for line in text.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
    }

    let ck = run_b.join("checkpoint.ckpt");
    let r1 = dir.path().join("r1.json");
    let r2 = dir.path().join("r2.json");
    let csv = dir.path().join("records.csv");
    for r in [&r1, &r2] {
        let o = bin(&[
            "eval",
            "--checkpoint",
            s(&ck),
            "--dataset",
            s(&data),
            "--out",
            s(r),
            "--csv",
            s(&csv),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&r1).unwrap()).unwrap();
    let acc = report["acc_at_0_5"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["rho_profile"].as_array().unwrap().len(), 3);

    let a2 = dir.path().join("a2.json");
    let o = bin(&["analyze", "--records", s(&csv), "--out", s(&a2)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let again: serde_json::Value = serde_json::from_slice(&std::fs::read(&a2).unwrap()).unwrap();
    assert_eq!(again["acc_at_0_5"], report["acc_at_0_5"]);
    assert_eq!(again["rho_profile"], report["rho_profile"]);

    let o = bin(&["compare", s(&run_b), s(&run_b), "--dataset", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let same: ComparisonReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(same.deltas.acc_at_0_5, 0.0);
    assert_eq!(same.deltas.final_layer_in_mask, 0.0);
    assert!(same.deltas.rho_profile.iter().all(|(_, d)| *d == Some(0.0)));

    let o = bin(&["compare", s(&run_a), s(&run_b), "--dataset", s(&data)]);
    let cmp: ComparisonReport = serde_json::from_slice(&o.stdout).unwrap();
    let config_a = attbalance::harness::config::RunConfig::load(&run_a.join("config.toml")).unwrap();
    assert_eq!(cmp.config_a, config_a);
    assert_eq!(cmp.config_b.run.mode, attbalance::objective::TrainMode::Attbalance);

    // a dataset generated from a different config is rejected
    let other = dir.path().join("other.jsonl");
    bin(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--set",
        "dataset.seed=99",
        "--out",
        s(&other),
    ]);
    assert_eq!(
        bin(&["compare", s(&run_a), s(&run_b), "--dataset", s(&other)])
            .status
            .code(),
        Some(1)
    );
    // and so is one whose grid does not fit the model
    let wide = dir.path().join("wide.jsonl");
    bin(&[
        "gen-data",
        "--set",
        "dataset.n_train=4",
        "--set",
        "dataset.n_val=4",
        "--out",
        s(&wide),
    ]);
    let o = bin(&["eval", "--checkpoint", s(&ck), "--dataset", s(&wide)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid_rows"));
}

#[test]
fn resume_continues_the_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let set_out = format!("run.out_dir=\"{}\"", s(&out));
    let o = bin(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        &set_out,
        "--set",
        "optim.epochs=1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin(&["train", "--config", s(&cfg), "--set", &set_out, "--resume"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resumed = std::fs::read(out.join("metrics.jsonl")).unwrap();

    let fresh = dir.path().join("fresh");
    let o = bin(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        &format!("run.out_dir=\"{}\"", s(&fresh)),
    ]);
    assert!(o.status.success());
    assert_eq!(resumed, std::fs::read(fresh.join("metrics.jsonl")).unwrap());
}
