use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn fedgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedgraph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/tiny")
}

/// Copies the bundled tiny dataset into `dir` and writes a config with `extra` appended.
fn tiny_setup(dir: &Path, extra: &str) -> PathBuf {
    for f in ["series.csv", "graph.csv"] {
        std::fs::copy(assets().join(f), dir.join(f)).unwrap();
    }
    let base = std::fs::read_to_string(assets().join("config.toml")).unwrap();
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, format!("{base}\n{extra}\n[output]\ndir = \"out\"\n")).unwrap();
    cfg
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn log_lines(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("out/results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_is_deterministic_and_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = fedgraph(&[
            "generate",
            "--nodes",
            "20",
            "--steps",
            "4000",
            "--graph",
            "ring",
            "--seed",
            "0",
            "--out",
            s(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["series.csv", "graph.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let series = std::fs::read_to_string(a.join("series.csv")).unwrap();
    let header = series.lines().nth(1).unwrap();
    assert_eq!(header.split(',').count(), 21);
    assert_eq!(series.lines().count(), 2 + 4000);
    assert!(std::fs::read_to_string(a.join("graph.csv"))
        .unwrap()
        .starts_with("# nodes=20\n"));
}

#[test]
fn generate_missing_rate_matches_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedgraph(&[
        "generate",
        "--nodes",
        "20",
        "--steps",
        "2000",
        "--seed",
        "3",
        "--missing-rate",
        "0.1",
        "--out",
        s(dir.path()),
    ]);
    assert!(o.status.success());
    let series = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    let (mut empty, mut total) = (0usize, 0usize);
    for line in series.lines().skip(2) {
        for field in line.split(',').skip(1) {
            total += 1;
            empty += field.is_empty() as usize;
        }
    }
    let rate = empty as f64 / total as f64;
    assert!((rate - 0.1).abs() <= 0.01, "missing rate {rate}");
}

#[test]
fn bad_flags_exit_1() {
    assert_eq!(
        fedgraph(&["generate", "--nodes", "x", "--steps", "10"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(fedgraph(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fedgraph(&["--help"]).status.code(), Some(0));
}

#[test]
fn tiny_train_then_evaluate_matches_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "");
    let started = Instant::now();
    let o = fedgraph(&["train", s(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(started.elapsed().as_secs() < 60);

    let out = dir.path().join("out");
    assert!(out.join("manifest.json").exists());
    assert!(out.join("timing.jsonl").exists());
    let log = log_lines(dir.path());
    assert_eq!(log.len(), 3);
    assert_eq!(log[2]["kind"], "final");
    assert!(log.iter().all(|r| r.get("wall_time_s").is_none()));

    for split in ["test", "val"] {
        let o = fedgraph(&["evaluate", s(&cfg), "--split", split]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let got: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(got["split"], split);
        for key in ["mae", "mape", "rmse"] {
            let a = got["metrics"][key].as_f64().unwrap();
            let b = log[2][split][key].as_f64().unwrap();
            assert!((a - b).abs() <= 1e-9, "{split}.{key}: {a} vs {b}");
        }
    }
}

#[test]
fn corrupted_checkpoint_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "");
    assert!(fedgraph(&["train", s(&cfg)]).status.success());
    let ck = dir.path().join("out/checkpoints/final/client_0002.fgck");
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[200] ^= 0x40;
    std::fs::write(&ck, bytes).unwrap();
    let o = fedgraph(&["evaluate", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("integrity"));
}

#[test]
fn arch_mismatch_on_evaluate_is_layout_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "");
    assert!(fedgraph(&["train", s(&cfg)]).status.success());
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("hidden_dim = 8", "hidden_dim = 9");
    std::fs::write(&cfg, text).unwrap();
    let o = fedgraph(&["evaluate", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("layout"));
}

#[test]
fn missing_graph_file_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "");
    std::fs::remove_file(dir.path().join("graph.csv")).unwrap();
    let o = fedgraph(&["train", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("graph file"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "schema_version = 1\n[data]\nseries = \"s.csv\"\nserie = \"x\"\n",
    )
    .unwrap();
    let o = fedgraph(&["train", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("serie"));
}

#[test]
fn divergence_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "[run.adam]\nlr = 1e200\n");
    let o = fedgraph(&["train", s(&cfg)]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("client"));
}

#[test]
fn replay_reproduces_final_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "");
    assert!(fedgraph(&["train", s(&cfg)]).status.success());
    let manifest = dir.path().join("out/manifest.json");
    let o = fedgraph(&["train", "--replay", s(&manifest)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("replay reproduces"));

    // tampering with an input is caught before training
    let series = dir.path().join("series.csv");
    let text = std::fs::read_to_string(&series).unwrap();
    std::fs::write(&series, text.replacen("65.", "66.", 1)).unwrap();
    assert_eq!(
        fedgraph(&["train", "--replay", s(&manifest)]).status.code(),
        Some(1)
    );
}

fn final_test(dir: &Path) -> Value {
    log_lines(dir).pop().unwrap()["test"].clone()
}

#[test]
fn fedavg_vs_zero_hop_graph_aggregation() {
    // With several clients the two differ: FedAvg mixes, zero hops keeps local models.
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "");
    assert!(fedgraph(&["train", s(&cfg), "--aggregator", "fedavg"])
        .status
        .success());
    let fedavg = final_test(dir.path());
    assert!(fedgraph(&[
        "train",
        s(&cfg),
        "--aggregator",
        "graphfedavg",
        "--hops",
        "0"
    ])
    .status
    .success());
    assert_ne!(fedavg, final_test(dir.path()));

    // A single client makes them identical.
    let one = tempfile::tempdir().unwrap();
    let o = fedgraph(&[
        "generate",
        "--nodes",
        "1",
        "--steps",
        "600",
        "--seed",
        "2",
        "--out",
        s(one.path()),
    ]);
    assert!(o.status.success());
    let cfg = one.path().join("config.toml");
    std::fs::write(
        &cfg,
        "schema_version = 1\n[data]\nseries = \"series.csv\"\ngraph = \"graph.csv\"\n[run]\nrounds = 2\nlocal_epochs = 1\n[run.arch]\nhidden_dim = 4\n[output]\ndir = \"out\"\n",
    )
    .unwrap();
    assert!(fedgraph(&["train", s(&cfg), "--aggregator", "fedavg"])
        .status
        .success());
    let fedavg = final_test(one.path());
    assert!(fedgraph(&[
        "train",
        s(&cfg),
        "--aggregator",
        "graphfedavg",
        "--hops",
        "0"
    ])
    .status
    .success());
    assert_eq!(fedavg, final_test(one.path()));
}

#[test]
fn dump_params_writes_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "");
    assert!(fedgraph(&["train", s(&cfg), "--dump-params"])
        .status
        .success());
    let csv = std::fs::read_to_string(dir.path().join("out/params/round_0001_after.csv")).unwrap();
    assert!(csv.starts_with("client_id,offset,value\n"));
}

#[test]
fn compare_writes_summary_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "");
    let csv = dir.path().join("cmp.csv");
    let o = fedgraph(&[
        "compare",
        s(&cfg),
        "--methods",
        "fedavg,graphfedavg:1,local_only",
        "--seeds",
        "0,1",
        "--csv",
        s(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("graphfedavg(L=1)") && stdout.contains("gap"));
    assert_eq!(
        std::fs::read_to_string(&csv).unwrap().lines().count(),
        1 + 3 * 2
    );
    assert_eq!(
        fedgraph(&["compare", s(&cfg), "--methods", "gossip"])
            .status
            .code(),
        Some(1)
    );
}
