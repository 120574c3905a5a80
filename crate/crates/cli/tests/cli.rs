use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forgetkit::checkpoint;
use forgetkit::data::{generate_synthetic, SyntheticSpec};
use forgetkit_cli::commands::{report, Overrides};
use forgetkit_cli::csvio::{read_curve, read_metrics};
use forgetkit_cli::{exit_code, UserError, EXIT_INTERNAL, EXIT_USER};
use serde_json::{json, Value};
use tempfile::TempDir;

fn tiny(name: &str, scenario: Value) -> Value {
    json!({
        "name": name,
        "seeds": [0],
        "dataset": {"classes": 6, "dim": 8, "n_per_class": 40, "margin": 6.0},
        "model": {"blocks": 2, "d_model": 16, "d_ff": 32, "heads": 2, "tokens": 4},
        "pretrain": {"epochs": 30, "optimizer": {"kind": "adam", "learning_rate": 0.003}},
        "scenario": scenario,
        "task": {"iterations": 20}
    })
}

fn write_config(dir: &Path, file: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(file);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forgetkit"))
        .args(args)
        .env("FF_LOG_LEVEL", "error")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_names_path() {
    let o = run(&["pretrain", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/cfg.json"));
}

#[test]
fn unknown_key_is_a_user_error() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny("x", json!({"tasks": [[0]]}));
    cfg["sweep"] = json!({"alpah": [0.1]});
    let p = write_config(tmp.path(), "c.json", &cfg);
    let o = run(&["forget", "--config", s(&p), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpah"), "{}", stderr(&o));
}

#[test]
fn scenario_violation_reports_constraint() {
    let tmp = TempDir::new().unwrap();
    let p = write_config(
        tmp.path(),
        "c.json",
        &tiny("x", json!({"kind": "continual", "tasks": [[0, 1], [1]]})),
    );
    let o = run(&["forget", "--config", s(&p), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("class 1"), "{}", stderr(&o));
}

#[test]
fn pretrain_roundtrip_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let p = write_config(tmp.path(), "c.json", &tiny("pt", json!({"tasks": [[0]]})));
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    assert!(run(&["pretrain", "--config", s(&p), "--out", s(&out_a)])
        .status
        .success());
    assert!(run(&["pretrain", "--config", s(&p), "--out", s(&out_b)])
        .status
        .success());
    let dir_a = out_a.join("pt/pretrained/seed-0");
    assert!(dir_a.join("pretrain_log.csv").is_file());
    let (ma, _) = checkpoint::load(&dir_a).unwrap();
    let (mb, _) = checkpoint::load(&out_b.join("pt/pretrained/seed-0")).unwrap();
    assert_eq!(ma.checksum(), mb.checksum());

    let spec = SyntheticSpec {
        classes: 6,
        dim: 8,
        n_per_class: 40,
        margin: 6.0,
    };
    let (_, test) = generate_synthetic(&spec, 0).unwrap();
    let x = test.to_tensor();
    assert_eq!(ma.logits(&x).unwrap(), mb.logits(&x).unwrap());
}

#[test]
fn forget_rows_recover_and_report() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let single = write_config(tmp.path(), "single.json", &tiny("single", json!({"tasks": [[0, 1]]})));
    let o = run(&["forget", "--config", s(&single), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_metrics(&out.join("single/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].acc_o.is_none());
    assert!(out.join("single/loss_log.csv").is_file());

    // Reuse the cached pretrained model through --checkpoint.
    let cont = write_config(
        tmp.path(),
        "cont.json",
        &tiny("cont", json!({"kind": "continual", "tasks": [[0], [1], [2]]})),
    );
    let ckpt = out.join("single/pretrained");
    let o = run(&[
        "forget",
        "--config",
        s(&cont),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_metrics(&out.join("cont/metrics.csv")).unwrap();
    let ids: Vec<u32> = rows.iter().map(|r| r.task_id).collect();
    assert_eq!(ids, [1, 2, 3]);
    assert!(rows[1].acc_o.is_some());

    let model = out.join("single/models/seed-0");
    let rec = tmp.path().join("rec");
    let o = run(&["recover", "--checkpoint", s(&model), "--epochs", "3", "--out", s(&rec)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["recovery_subject.csv", "recovery_masked.csv"] {
        let c = read_curve(&rec.join(f)).unwrap();
        assert_eq!(c.forgotten.len(), 4);
        assert_eq!(c.retained.len(), 4);
        assert!(c
            .forgotten
            .iter()
            .chain(&c.retained)
            .all(|v| v.is_finite() && (0.0..=100.0).contains(v)));
    }

    let rep = tmp.path().join("rep");
    let o = run(&["report", s(&out.join("single")), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let merged = fs::read_to_string(rep.join("report_runs.csv")).unwrap();
    let source = fs::read_to_string(out.join("single/metrics.csv")).unwrap();
    let stripped: Vec<String> = merged
        .lines()
        .map(|l| l.split_once(',').unwrap().1.to_string())
        .collect();
    assert_eq!(stripped.join("\n") + "\n", source);
    assert!(rep.join("report.txt").is_file());
}

#[test]
fn geometry_mismatch_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let p = write_config(tmp.path(), "a.json", &tiny("a", json!({"tasks": [[0]]})));
    assert!(run(&["pretrain", "--config", s(&p), "--out", s(&out)]).status.success());
    let mut other = tiny("b", json!({"tasks": [[0]]}));
    other["model"]["d_ff"] = json!(16);
    let q = write_config(tmp.path(), "b.json", &other);
    let o = run(&[
        "forget",
        "--config",
        s(&q),
        "--checkpoint",
        s(&out.join("a/pretrained")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("geometry"), "{}", stderr(&o));
}

#[test]
fn forget_is_byte_deterministic_and_sweeps() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny("det", json!({"tasks": [[0]]}));
    cfg["seeds"] = json!([0, 1]);
    cfg["sweep"] = json!({"alpha": [0.0, 0.1]});
    let p = write_config(tmp.path(), "c.json", &cfg);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&["forget", "--config", s(&p), "--out", s(&a)]).status.success());
    assert!(run(&["forget", "--config", s(&p), "--out", s(&b)]).status.success());
    for label in ["alpha=0", "alpha=0.1"] {
        for f in ["metrics.csv", "loss_log.csv"] {
            let x = fs::read(a.join("det").join(label).join(f)).unwrap();
            let y = fs::read(b.join("det").join(label).join(f)).unwrap();
            assert_eq!(x, y, "{label}/{f}");
        }
        let rows = read_metrics(&a.join("det").join(label).join("metrics.csv")).unwrap();
        assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), [0, 1]);
        assert!(rows.iter().all(|r| r.wall_ms.is_none()));
    }
}

fn write_rows(dir: &Path, rows: &[(&str, u64, f64)]) {
    fs::create_dir_all(dir).unwrap();
    let mut text = forgetkit_cli::csvio::METRICS_HEADER.join(",") + "\n";
    for (method, seed, acc_r) in rows {
        text += &format!("1,1,{method},{seed},{acc_r},5.0,,,50.0,0.25,0.1,\n");
    }
    fs::write(dir.join("metrics.csv"), text).unwrap();
}

#[test]
fn report_means_and_grouping() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    write_rows(
        &a,
        &[("gslora++", 0, 90.0), ("gslora++", 1, 80.0), ("gslora++", 2, 70.0)],
    );
    write_rows(&b, &[("retrain", 0, 10.0), ("gslora", 0, 60.0)]);
    let rep = report(&[b.clone(), a.clone()], &tmp.path().join("rep")).unwrap();
    let methods: Vec<&str> = rep.summary.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["gslora", "gslora++", "retrain"]);
    let pp = &rep.summary[1];
    assert_eq!(pp.seeds, 3);
    let acc_r = pp.columns[0].unwrap();
    assert!((acc_r.mean - 80.0).abs() < 1e-12);
    assert!((acc_r.std - 10.0).abs() < 1e-12);
    assert!(pp.columns[2].is_none());
    let run_methods: Vec<&str> = rep.runs.iter().map(|r| r.row.method.as_str()).collect();
    assert_eq!(run_methods, ["gslora", "gslora++", "gslora++", "gslora++", "retrain"]);
}

#[test]
fn malformed_metrics_names_file_and_row() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    write_rows(&a, &[("gslora", 0, 90.0), ("gslora", 1, 80.0)]);
    let path = a.join("metrics.csv");
    let text = fs::read_to_string(&path).unwrap().replace("80", "eighty");
    fs::write(&path, text).unwrap();
    let o = run(&["report", s(&a), "--out", s(&tmp.path().join("rep"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("metrics.csv") && err.contains("row 2"), "{err}");

    write_rows(&a, &[("gslora", 0, 140.0)]);
    let err = report(&[a], &tmp.path().join("rep")).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_USER);
    assert!(err.to_string().contains("row 1"));
}

#[test]
fn exit_code_classes() {
    let user: anyhow::Error = UserError("bad".into()).into();
    assert_eq!(exit_code(&user), EXIT_USER);
    let internal: anyhow::Error = forgetkit::Error::NoTrainable.into();
    assert_eq!(exit_code(&internal), EXIT_INTERNAL);
    let invalid: anyhow::Error = forgetkit::Error::InvalidArgument("x".into()).into();
    assert_eq!(exit_code(&invalid.context("while loading")), EXIT_USER);
    let _ = Overrides::default();
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            forgetkit_cli::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
