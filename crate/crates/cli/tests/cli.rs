use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn eventlm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eventlm"))
        .args(args)
        .arg("--set")
        .arg(format!("paths.root={}", root.display()))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn assert_ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const TINY: &[&str] = &[
    "--seed",
    "5",
    "-s",
    "synth.num_nodes=200",
    "-s",
    "walk.num_sequences=300",
    "-s",
    "model.d_model=16",
    "-s",
    "model.d_ff=32",
    "-s",
    "model.num_heads=2",
    "-s",
    "train.max_steps=10",
    "-s",
    "train.batch_size=8",
];

fn stage(root: &Path, name: &str) -> Output {
    let mut args = vec![name];
    args.extend_from_slice(TINY);
    eventlm(root, &args)
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&eventlm(dir.path(), &["--help"])), 0);
    assert_eq!(code(&eventlm(dir.path(), &["bogus"])), 1);
    assert_eq!(code(&eventlm(dir.path(), &["sample", "--set", "walk.no_such_field=1"])), 1);
    assert_eq!(code(&eventlm(dir.path(), &["sample", "--set", "walk.max_hops=0"])), 1);
    assert_eq!(code(&eventlm(dir.path(), &["synth-kg", "--relations", "Reason=-1"])), 1);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = eventlm(dir.path(), &["train"]);
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert_eq!(code(&eventlm(dir.path(), &["sample"])), 2);
    assert_eq!(code(&eventlm(dir.path(), &["eval"])), 2);
}

#[test]
fn chain_is_verbalized_with_its_connectives() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("nodes.tsv"),
        "0\t9\tthey speak\n1\t3\tthey have a interest\n2\t2\tthey come there\n",
    )
    .unwrap();
    fs::write(dir.path().join("edges.tsv"), "0\t1\tCondition\t1\n1\t2\tReason\t1\n").unwrap();
    let hops = ["-s", "walk.min_hops=2", "-s", "walk.max_hops=2", "-s", "walk.num_sequences=5"];
    assert_ok(&eventlm(dir.path(), &[&["ingest"][..], &hops].concat()));
    assert_ok(&eventlm(dir.path(), &[&["sample"][..], &hops].concat()));
    assert_ok(&eventlm(dir.path(), &[&["mask"][..], &hops].concat()));
    let text = fs::read_to_string(dir.path().join("sequences.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    for line in lines {
        assert_eq!(line, "they speak if they have a interest because they come there");
    }
}

#[test]
fn full_pipeline_is_deterministic() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            for name in ["synth-kg", "ingest", "sample", "mask", "train", "eval"] {
                assert_ok(&stage(dir.path(), name));
            }
            let files: Vec<Vec<u8>> = ["corpus.jsonl", "instances.jsonl", "model.ckpt", "trace.csv", "eval_report.json"]
                .iter()
                .map(|f| fs::read(dir.path().join(f)).unwrap())
                .collect();
            (dir, files)
        })
        .collect();
    assert_eq!(runs[0].1, runs[1].1);
}

#[test]
fn probe_and_gradcheck_run() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["synth-kg", "sample", "mask", "train"] {
        assert_ok(&stage(dir.path(), name));
    }
    let nodes = fs::read_to_string(dir.path().join("nodes.tsv")).unwrap();
    let texts: Vec<&str> = nodes.lines().take(2).map(|l| l.rsplit('\t').next().unwrap()).collect();
    let query = serde_json::json!({"left": texts[0], "right": texts[1], "k": 14});
    fs::write(dir.path().join("probe_queries.jsonl"), format!("{query}\n")).unwrap();
    let out = stage(dir.path(), "probe");
    assert_ok(&out);
    let line = String::from_utf8(out.stdout).unwrap();
    let record: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(record["ranking"].as_array().map(Vec::len), Some(14), "{record}");

    let out = eventlm(dir.path(), &["gradcheck", "-s", "gradcheck.num_coords=60"]);
    assert_ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
}
