use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 14] = [
    "--set", "epochs=2", "--set", "num_layers=1", "--set", "hidden_dim=8", "--set", "num_heads=2", "--set", "ffn_dim=16", "--set",
    "max_input_len=16", "--set", "seed=3",
];

fn gudn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gudn"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

fn synth(dir: &Path) {
    ok(&gudn(&["gen-synth", "--out", "data", "--L", "8", "--n-train", "40", "--n-test", "10", "--seed", "5"], dir));
}

#[test]
fn synth_train_eval_predict_cluster() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    for f in ["train.jsonl", "test.jsonl", "labels.tsv"] {
        assert!(dir.join("data").join(f).exists());
    }

    let trained: serde_json::Value = serde_json::from_str(&ok(&gudn(&with_tiny(&["train", "--data", "data", "--out", "run"]), dir))).unwrap();
    assert!(dir.join("run/checkpoint.json").exists());
    let evaluated: serde_json::Value =
        serde_json::from_str(&ok(&gudn(&["eval", "--checkpoint", "run/checkpoint.json", "--data", "data"], dir))).unwrap();
    assert_eq!(trained, evaluated, "eval of the saved checkpoint reproduces the training report");

    let lines = ok(&gudn(&["predict", "--checkpoint", "run/checkpoint.json", "--input", "data/test.jsonl", "--top-k", "3"], dir));
    let preds: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(preds.len(), 10);
    assert!(preds.iter().all(|p| p["labels"].as_array().unwrap().len() == 3));

    ok(&gudn(&["cluster", "--data", "data", "--C", "4", "--out", "c/clusters.json"], dir));
    let clusters: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("c/clusters.json")).unwrap()).unwrap();
    assert_eq!(clusters["C"], 4);
    assert_eq!(clusters["assignments"].as_array().unwrap().len(), 8);
}

#[test]
fn ablate_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let table = ok(&gudn(&with_tiny(&["ablate", "--data", "data", "--axes", "mode=FULL|GUD_F", "--out", "abl"]), dir));
    assert!(table.contains("mode=FULL") && table.contains("mode=GUD_F"));
    assert!(dir.join("abl/mode-FULL/run.json").exists());

    ok(&gudn(&["plot-metrics", "--runs", "abl", "--out", "fig.svg"], dir));
    let svg = std::fs::read_to_string(dir.join("fig.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline") && svg.contains("mode-GUD_F"));
    ok(&gudn(&["plot-metrics", "--runs", "abl", "--out", "fig.png"], dir));
    assert_eq!(&std::fs::read(dir.join("fig.png")).unwrap()[1..4], b"PNG");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let code = |args: &[&str]| gudn(args, dir).status.code();

    assert_eq!(code(&["train", "--data", "data", "--out", "r", "--set", "no_such_key=1"]), Some(2));
    assert_eq!(code(&["train", "--data", "data", "--out", "r", "--config", "missing.json"]), Some(2));
    std::fs::write(dir.join("bad.json"), r#"{"epochs": "many"}"#).unwrap();
    assert_eq!(code(&["train", "--data", "data", "--out", "r", "--config", "bad.json"]), Some(2));
    assert_eq!(code(&["ablate", "--data", "data", "--axes", "depth"]), Some(2));

    assert_eq!(code(&["train", "--data", "nowhere", "--out", "r"]), Some(3));
    assert_eq!(code(&["eval", "--checkpoint", "nowhere.json", "--data", "data"]), Some(3));
    std::fs::write(dir.join("data/labels.tsv"), "0\tonly one label\n").unwrap();
    assert_eq!(code(&with_tiny(&["train", "--data", "data", "--out", "r"])), Some(3));

    synth(dir);
    assert_eq!(code(&with_tiny(&["train", "--data", "data", "--out", "r", "--set", "lr=1e300"])), Some(4));
}
