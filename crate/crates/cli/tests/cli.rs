use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

const CONFIG: &str = r#"
mode = "rr"
seeds = [1]
[data]
path = "ml"
min_item_interactions = 10
[model]
embed_dim = 4
mlp_widths = [16, 8]
[pretrain]
max_epochs = 4
[meta.train]
max_epochs = 3
"#;

fn resus(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resus"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(resus(dir.path(), &["synth", "ml", "--users", "200"]));
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    dir
}

fn report(path: PathBuf) -> Value {
    let v: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert!(v["config"].is_object(), "config echo missing in {}", path.display());
    v["report"].clone()
}

fn metrics(report: &Value) -> Vec<(Value, Value)> {
    report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["logloss"].clone(), r["auc"].clone()))
        .collect()
}

#[test]
fn synthetic_pipeline_emits_stage_report_quickly() {
    let dir = fixture();
    let start = Instant::now();
    let stdout = ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "run", "run"]));
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert!(stdout.contains("resus_rr") && stdout.contains("Cold Start-III"));
    let run = dir.path().join("run");
    for f in ["config.toml", "dataset.bin", "dataset.bin.manifest.json", "summary-rr.json", "summary-rr.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let rep = report(run.join("seed-1/report-rr.json"));
    assert_eq!(rep["stages"].as_array().unwrap().len(), 3);
    assert_eq!(rep["rows"].as_array().unwrap().len(), 30);

    // the config echo alone reruns the experiment to the same report
    let rerun = dir.path().join("rerun");
    std::fs::create_dir(&rerun).unwrap();
    std::fs::copy(run.join("config.toml"), rerun.join("cfg.toml")).unwrap();
    std::fs::create_dir(rerun.join("ml")).unwrap();
    for f in ["users.dat", "movies.dat", "ratings.dat"] {
        std::fs::copy(dir.path().join("ml").join(f), rerun.join("ml").join(f)).unwrap();
    }
    ok(resus(&rerun, &["--config", "cfg.toml", "run"]));
    assert_eq!(
        rep,
        report(rerun.join("run/seed-1/report-rr.json")),
        "identical config and seed must reproduce the report"
    );
}

#[test]
fn beta_zero_reproduces_shared_report() {
    let dir = fixture();
    ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "run", "run"]));
    ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "run", "--beta-override", "0", "evaluate"]));
    let shared = report(dir.path().join("run/seed-1/report-shared.json"));
    let zero = report(dir.path().join("run/seed-1/report-rr-beta0.json"));
    assert_eq!(metrics(&shared), metrics(&zero));
    for (a, b) in shared["stages"].as_array().unwrap().iter().zip(zero["stages"].as_array().unwrap()) {
        assert_eq!(a["auc"], b["auc"]);
        assert_eq!(a["logloss"], b["logloss"]);
    }
}

#[test]
fn timing_batched_beats_per_query() {
    let dir = fixture();
    ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "run", "run"]));
    ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "run", "timing"]));
    let t: Value = serde_json::from_slice(&std::fs::read(dir.path().join("run/seed-1/timing-rr.json")).unwrap()).unwrap();
    assert!(t["test_seconds_batched"].as_f64().unwrap() < t["test_seconds_per_query"].as_f64().unwrap());
    assert_eq!(t["support_encodings_batched"], t["tasks"]);
    assert_eq!(t["support_encodings_per_query"], t["queries"]);
    assert!(t["train_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn ingest_is_byte_identical_on_rerun() {
    let dir = fixture();
    ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "a", "ingest"]));
    ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "b", "ingest"]));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/dataset.bin"), read("b/dataset.bin"));
    assert_eq!(read("a/dataset.bin.manifest.json"), read("b/dataset.bin.manifest.json"));
}

#[test]
fn checkpoint_config_mismatch_is_refused() {
    let dir = fixture();
    ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "run", "--mode", "shared", "run"]));
    let out = resus(dir.path(), &["--config", "cfg.toml", "--out", "run", "--arch", "fm", "meta-train"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config asks for fm"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = resus(dir.path(), &["--out", "run", "ingest"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("ml-1m"));

    std::fs::write(dir.path().join("bad.toml"), "no_such_key = 1\n").unwrap();
    assert_eq!(resus(dir.path(), &["--config", "bad.toml", "print-config"]).status.code(), Some(2));
    assert_eq!(resus(dir.path(), &["--config", "absent.toml", "print-config"]).status.code(), Some(3));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(resus(dir.path(), &["--mode", "nn", "--tau", "45", "print-config"]));
    assert!(text.contains("mode = \"nn\"") && text.contains("tau = 45") && text.contains("lr = 0.001"));
    std::fs::write(dir.path().join("echo.toml"), &text).unwrap();
    assert_eq!(ok(resus(dir.path(), &["--config", "echo.toml", "print-config"])), text);
}

#[test]
fn untimed_tabular_source_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("user,item,weekday,city,label\n");
    let mut state: u64 = 12345;
    for u in 0..80 {
        for _ in 0..25 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let item = (state >> 33) % 20;
            let weekday = (state >> 40) % 7;
            let liked = (item % 2 == u % 2) ^ ((state >> 20) % 5 == 0);
            csv += &format!("u{u},i{item},d{weekday},c{},{}\n", u % 3, if liked { 1 } else { -1 });
        }
    }
    std::fs::write(dir.path().join("apps.csv"), csv).unwrap();
    std::fs::write(
        dir.path().join("cfg.toml"),
        "mode = \"nn\"\n[data]\nformat = \"tabular\"\npath = \"apps.csv\"\nmin_item_interactions = 10\n\
         [model]\nembed_dim = 4\nmlp_widths = [8, 4]\n[episodes]\ntau = 12\n[pretrain]\nmax_epochs = 2\n[meta.train]\nmax_epochs = 2\n",
    )
    .unwrap();
    let stdout = ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "run", "run"]));
    assert!(stdout.contains("resus_nn"));
    let manifest: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("run/dataset.bin.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["format"], "tabular");
    assert_eq!(report(dir.path().join("run/seed-1/report-nn.json"))["rows"].as_array().unwrap().len(), 12);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = fixture();
    ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "t1", "--threads", "1", "run"]));
    ok(resus(dir.path(), &["--config", "cfg.toml", "--out", "t3", "--threads", "3", "run"]));
    let a = report(dir.path().join("t1/seed-1/report-rr.json"));
    let b = report(dir.path().join("t3/seed-1/report-rr.json"));
    assert_eq!(a, b);
}
