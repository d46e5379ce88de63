use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage() {
    let o = bgnn(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn fuse_prints_the_fused_architecture() {
    let o = bgnn(&["fuse", "--arch", "C(32)-MP(2,3.4)"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "BC(32,2,3.4)");
    let o = bgnn(&["fuse", "--arch", "C(32)-MP(2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--arch"));
    assert_eq!(bgnn(&["fuse", "--arch", "MP(1,2)"]).status.code(), Some(1));
}

#[test]
fn unknown_flags_and_config_keys_are_usage_errors() {
    assert_eq!(bgnn(&["train", "--epoch", "3"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = bgnn(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bgnn(&[
        "train",
        "--data-root",
        s(&dir.path().join("nowhere")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn bench_writes_a_scaling_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = bgnn(&["bench", "--sizes", "40,400", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "size_vi,size_vo,path,kernel_evals,mac_ops,nodes_materialized,peak_live_values,wall_ms"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[2].starts_with("40,10,fused,40,"), "{}", lines[2]);
    assert!(stdout(&o).contains("ratio"));
    let o = bgnn(&[
        "bench",
        "--arch",
        "C(8)-MP(1,2)-C(8)-MP(2,4)",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn build_graph_from_a_digit() {
    let dir = tempfile::tempdir().unwrap();
    let o = bgnn(&[
        "build-graph",
        "--dataset",
        "mnist",
        "--data-root",
        s(&data_root()),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let graph = std::fs::read_to_string(dir.path().join("graph.txt")).unwrap();
    assert!(graph.starts_with("GRAPH v1 "));
    let nodes: usize = graph.split_whitespace().nth(2).unwrap().parse().unwrap();
    let signal = std::fs::read_to_string(dir.path().join("signal.txt")).unwrap();
    assert_eq!(signal.lines().count(), nodes);
}

#[test]
fn build_graph_from_a_point_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("cloud.xyz");
    std::fs::write(&input, "0 0 0\n0 0 4\n0 0.2 4\n").unwrap();
    let o = bgnn(&[
        "build-graph",
        "--dataset",
        "pointcloud",
        "--input",
        s(&input),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("3 nodes, 2 edges"), "{}", stdout(&o));
}

#[test]
fn train_then_eval_a_digit_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let root = data_root();
    let arch = "BC(16,2,3.4)-BC(32,4,6.8)-BC(64,8,30)-C(128)-D(0.5)-FC(10)";
    let args = [
        "train",
        "--arch",
        arch,
        "--dataset",
        "mnist",
        "--subset",
        "20",
        "--test-size",
        "10",
        "--epochs",
        "1",
        "--seed",
        "0",
        "--data-root",
        s(&root),
        "--out-dir",
        s(&out),
    ];
    let o = bgnn(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["metrics.jsonl", "model.ckpt", "run.json", "settings.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["arch"], arch);
    assert_eq!(meta["seed"], 0);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);

    let o = bgnn(&["eval", "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["split"], "test");
    assert_eq!(metrics["accuracy"], last["accuracy"]);
    assert_eq!(metrics["loss"], last["loss"]);

    let o = bgnn(&[
        "eval",
        "--out-dir",
        s(&out),
        "--checkpoint",
        s(&dir.path().join("none.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("none.ckpt"));
}

#[test]
fn train_an_autoencoder_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ae.json");
    std::fs::write(
        &cfg,
        format!(
            "{{\"task\": \"autoencoder\", \"subset\": 10, \"test_size\": 10, \"epochs\": 3, \"data_root\": {:?}}}",
            s(&data_root())
        ),
    )
    .unwrap();
    let out = dir.path().join("ae");
    let o = bgnn(&[
        "train",
        "--config",
        s(&cfg),
        "--epochs",
        "1",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2, "flag overrides the file's epochs");
    assert!(log.contains("\"mse\""));
    let o = bgnn(&["eval", "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"mse\""));
}

#[test]
fn train_on_synthetic_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let o = bgnn(&[
        "train",
        "--dataset",
        "shapes",
        "--arch",
        "BC(8,0.3,0.5)-GMP-FC(6)",
        "--kernel",
        "gat",
        "--red",
        "mean",
        "--subset",
        "12",
        "--test-size",
        "6",
        "--epochs",
        "1",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let meta = std::fs::read_to_string(dir.path().join("run.json")).unwrap();
    assert!(meta.contains("\"kernel\": \"gat\""), "{meta}");
}

#[test]
fn selftest_passes() {
    let o = bgnn(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(
        stdout(&o)
            .lines()
            .filter(|l| l.starts_with("[PASS]"))
            .count(),
        8
    );
}
