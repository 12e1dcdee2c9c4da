//! Binary-level tests: exit codes, output files, manifests and
//! byte-for-byte reproducibility of reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nestner"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn nestner")
}

fn assert_code(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

const SMALL_CONFIG: &str = r#"{
  "synth": {"num_sentences": 60, "num_classes": 3, "seed": 5, "sentence_len_range": [6, 10]},
  "train": {"max_epochs": 2, "seed": 5, "batch_size": 8}
}"#;

#[test]
fn synth_splits_80_10_10_and_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"synth": {"num_sentences": 1000, "seed": 3}}"#,
    );
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let output = run(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&output, 0);
    }
    // one header line plus one record per sentence
    assert_eq!(line_count(&out_a.join("train.jsonl")), 801);
    assert_eq!(line_count(&out_a.join("dev.jsonl")), 101);
    assert_eq!(line_count(&out_a.join("test.jsonl")), 101);
    assert!(out_a.join("manifest.json").exists());
    for name in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn synth_rejects_bad_config_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"synth": {"zipf_exponent": -1.0}}"#);
    let output = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&output, 2);
}

fn synth_small(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, SMALL_CONFIG);
    let data = dir.join("data");
    let output = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_code(&output, 0);
    (cfg, data)
}

#[test]
fn subsample_is_deterministic_and_validates_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = synth_small(dir.path());
    let train = data.join("train.jsonl");
    let out_a = dir.path().join("sub_a");
    let out_b = dir.path().join("sub_b");
    for out in [&out_a, &out_b] {
        let output = run(&[
            "subsample",
            "--data",
            train.to_str().unwrap(),
            "--fraction",
            "0.5",
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&output, 0);
    }
    assert_eq!(
        fs::read(out_a.join("subsample.jsonl")).unwrap(),
        fs::read(out_b.join("subsample.jsonl")).unwrap()
    );
    assert_eq!(line_count(&out_a.join("subsample.jsonl")), 25); // header + 24

    let bad = run(&[
        "subsample",
        "--data",
        train.to_str().unwrap(),
        "--fraction",
        "1.5",
        "--out",
        dir.path().join("bad").to_str().unwrap(),
    ]);
    assert_code(&bad, 2);
}

#[test]
fn stats_emits_label_count_ratio_table() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = synth_small(dir.path());
    let out = dir.path().join("stats");
    let output = run(&[
        "stats",
        "--data",
        data.join("train.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&output, 0);
    let tsv = fs::read_to_string(out.join("stats.tsv")).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some("label\tcount\tratio"));
    assert_eq!(tsv.lines().count(), 4); // header + three classes
    let hist: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("histograms.json")).unwrap()).unwrap();
    assert!(hist["entity_len_hist"].is_object());
    assert!(hist["sentence_len_hist"].is_object());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn train_then_eval_writes_consistent_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = synth_small(dir.path());
    let run_dir = dir.path().join("run");
    let output = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--train",
        data.join("train.jsonl").to_str().unwrap(),
        "--dev",
        data.join("dev.jsonl").to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&output, 0);
    assert!(run_dir.join("checkpoint.json").exists());
    assert!(run_dir.join("manifest.json").exists());
    assert_eq!(line_count(&run_dir.join("history.jsonl")), 2); // one per epoch

    let eval_dir = dir.path().join("eval");
    let output = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        data.join("test.jsonl").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_code(&output, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    let tp = report["true_positives"].as_u64().unwrap();
    let fn_ = report["false_negatives"].as_u64().unwrap();
    // every gold span is either found or missed
    let test_corpus = fs::read_to_string(data.join("test.jsonl")).unwrap();
    let gold: u64 = test_corpus
        .lines()
        .skip(1)
        .map(|line| {
            serde_json::from_str::<serde_json::Value>(line).unwrap()["entities"]
                .as_array()
                .unwrap()
                .len() as u64
        })
        .sum();
    assert_eq!(tp + fn_, gold);
}

#[test]
fn sweep_single_fraction_matches_plain_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = synth_small(dir.path());
    let sweep_dir = dir.path().join("sweep");
    let output = run(&[
        "sweep-lowresource",
        "--config",
        cfg.to_str().unwrap(),
        "--train",
        data.join("train.jsonl").to_str().unwrap(),
        "--dev",
        data.join("dev.jsonl").to_str().unwrap(),
        "--test",
        data.join("test.jsonl").to_str().unwrap(),
        "--fractions",
        "1.0",
        "--out",
        sweep_dir.to_str().unwrap(),
    ]);
    assert_code(&output, 0);
    let sweep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(sweep_dir.join("sweep.json")).unwrap()).unwrap();
    let columns = sweep["columns"].as_array().unwrap();
    assert_eq!(columns.len(), 1);
    let sweep_f1 = columns[0]["category_f1"].as_f64().unwrap();

    let run_dir = dir.path().join("run");
    run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--train",
        data.join("train.jsonl").to_str().unwrap(),
        "--dev",
        data.join("dev.jsonl").to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    let eval_dir = dir.path().join("eval");
    run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        data.join("test.jsonl").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(sweep_f1, report["f1"].as_f64().unwrap());

    let table = fs::read_to_string(sweep_dir.join("sweep.txt")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("boundary"));
    assert!(table.lines().nth(2).unwrap().starts_with("category"));
}

#[test]
fn report_imbalance_has_sorted_rows_and_footers() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = synth_small(dir.path());
    let run_dir = dir.path().join("run");
    run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--train",
        data.join("train.jsonl").to_str().unwrap(),
        "--dev",
        data.join("dev.jsonl").to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    let out = dir.path().join("imbalance");
    let output = run(&[
        "report-imbalance",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        data.join("test.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&output, 0);
    let imb: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("imbalance.json")).unwrap()).unwrap();
    let rows = imb["per_class"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let ratios: Vec<f64> = rows.iter().map(|r| r["ratio"].as_f64().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
    assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let text = fs::read_to_string(out.join("imbalance.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[lines.len() - 2].starts_with("boundary"));
    assert!(lines[lines.len() - 1].starts_with("all"));
}

#[test]
fn gradcheck_passes_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let output = run(&[
            "gradcheck",
            "--instances",
            "3",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&output, 0);
        let stdout = String::from_utf8_lossy(&output.stdout);
        for component in ["emc", "eiou", "combined", "scorer_chain"] {
            assert!(
                stdout.contains(component),
                "missing {component} in: {stdout}"
            );
        }
    }
    assert_eq!(
        fs::read(out_a.join("gradcheck.json")).unwrap(),
        fs::read(out_b.join("gradcheck.json")).unwrap()
    );
}

#[test]
fn external_vectors_train_eval_and_breakdown_dump() {
    let dir = tempfile::tempdir().unwrap();
    // three hand-written sentences with explicit ids
    let corpus = dir.path().join("corpus.jsonl");
    fs::write(
        &corpus,
        concat!(
            r#"{"labels":["X","Y"]}"#,
            "\n",
            r#"{"id":"s0","tokens":["a","b","c"],"entities":[{"start":0,"end":1,"label":"X"}]}"#,
            "\n",
            r#"{"id":"s1","tokens":["d","e"],"entities":[{"start":1,"end":1,"label":"Y"}]}"#,
            "\n",
            r#"{"id":"s2","tokens":["f","g","h"],"entities":[]}"#,
            "\n",
        ),
    )
    .unwrap();
    // matching fixed vectors, dimension 4
    let vectors = dir.path().join("vectors.jsonl");
    let row = |x: f64| format!("[{x},{},{},{}]", x + 0.1, x - 0.1, x * 0.5);
    fs::write(
        &vectors,
        format!(
            "{}\n{}\n{}\n",
            format_args!(
                r#"{{"id":"s0","vectors":[{},{},{}]}}"#,
                row(0.1),
                row(0.4),
                row(0.9)
            ),
            format_args!(r#"{{"id":"s1","vectors":[{},{}]}}"#, row(-0.3), row(0.7)),
            format_args!(
                r#"{{"id":"s2","vectors":[{},{},{}]}}"#,
                row(0.2),
                row(-0.8),
                row(0.5)
            ),
        ),
    )
    .unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"train": {"max_epochs": 2, "embed_dim": 4, "head_dim": 4, "seed": 3}}"#,
    );
    let run_dir = dir.path().join("run");
    let output = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--train",
        corpus.to_str().unwrap(),
        "--dev",
        corpus.to_str().unwrap(),
        "--vectors",
        vectors.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&output, 0);

    let eval_dir = dir.path().join("eval");
    let output = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--vectors",
        vectors.to_str().unwrap(),
        "--dump-breakdown",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_code(&output, 0);
    let breakdown = fs::read_to_string(eval_dir.join("breakdown.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = breakdown
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 3);
    assert_eq!(records[0]["id"], "s0");
    let terms = &records[0]["classes"]["X"];
    for key in [
        "iou",
        "neg_log_iou",
        "center_term",
        "v",
        "aspect_term",
        "total",
    ] {
        assert!(terms[key].is_number(), "missing {key} in {terms}");
    }
    // the entity-less sentence has an empty class map
    assert!(records[2]["classes"].as_object().unwrap().is_empty());

    // eval without vectors must fail cleanly for an external checkpoint
    let output = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--out",
        dir.path().join("noval").to_str().unwrap(),
    ]);
    assert_code(&output, 2);
}

#[test]
fn missing_input_file_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&[
        "train",
        "--train",
        "/nonexistent/train.jsonl",
        "--dev",
        "/nonexistent/dev.jsonl",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&output, 3);
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    let output = run(&["synth", "--no-such-flag"]);
    assert_code(&output, 2);
}
