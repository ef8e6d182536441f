//! End-to-end exercise of the binary: every subcommand on a reduced
//! dataset, exit-code contracts, and artifact determinism.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pairnn"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Artifacts from one tiny pipeline run, shared across tests.
struct World {
    dir: tempfile::TempDir,
}

impl World {
    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }
    fn users(&self) -> String {
        s(&self.data().join("users.jsonl"))
    }
    fn products(&self) -> String {
        s(&self.data().join("products.jsonl"))
    }
    fn events(&self) -> String {
        s(&self.data().join("events.jsonl"))
    }
    fn vectors(&self) -> String {
        s(&self.dir.path().join("vectors.bin"))
    }
    fn checkpoint(&self) -> String {
        s(&self.dir.path().join("model.ckpt"))
    }
    fn index(&self) -> String {
        s(&self.dir.path().join("index.bin"))
    }
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let w = World { dir };
        run_ok(&[
            "gen-data",
            "--out-dir",
            &s(&w.data()),
            "--n-users",
            "80",
            "--n-products",
            "400",
            "--seed",
            "7",
        ]);
        run_ok(&[
            "train-word2vec",
            "--products",
            &w.products(),
            "--output",
            &w.vectors(),
            "--dim",
            "16",
            "--epochs",
            "2",
            "--seed",
            "7",
        ]);
        run_ok(&[
            "train",
            "--users",
            &w.users(),
            "--products",
            &w.products(),
            "--events",
            &w.events(),
            "--vectors",
            &w.vectors(),
            "--output",
            &w.checkpoint(),
            "--epochs",
            "1",
            "--seed",
            "7",
        ]);
        run_ok(&[
            "index",
            "--products",
            &w.products(),
            "--checkpoint",
            &w.checkpoint(),
            "--vectors",
            &w.vectors(),
            "--output",
            &w.index(),
        ]);
        w
    })
}

#[test]
fn every_stage_leaves_an_artifact_and_a_manifest() {
    let w = world();
    for f in [
        w.data().join("users.jsonl"),
        w.data().join("products.jsonl"),
        w.data().join("events.jsonl"),
        w.data().join("gen-data.manifest.json"),
        PathBuf::from(w.vectors()),
        PathBuf::from(format!("{}.manifest.json", w.vectors())),
        PathBuf::from(w.checkpoint()),
        PathBuf::from(format!("{}.manifest.json", w.checkpoint())),
        PathBuf::from(w.index()),
        PathBuf::from(format!("{}.manifest.json", w.index())),
    ] {
        assert!(f.exists(), "missing {}", f.display());
    }
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(PathBuf::from(format!("{}.manifest.json", w.checkpoint())))
            .unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 4);
    assert!(manifest["config"]["train"]["epochs"].is_u64());
}

#[test]
fn eval_reports_both_splits() {
    let w = world();
    let report = s(&w.dir.path().join("eval.jsonl"));
    let out = run_ok(&[
        "eval",
        "--users",
        &w.users(),
        "--products",
        &w.products(),
        "--events",
        &w.events(),
        "--vectors",
        &w.vectors(),
        "--checkpoint",
        &w.checkpoint(),
        "--output",
        &report,
        "--split",
        "all",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["split"], "train");
    assert_eq!(lines[1]["split"], "val");
    for l in &lines {
        let acc = l["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(l["average_loss"].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(std::fs::read_to_string(&report).unwrap(), stdout);
}

#[test]
fn retrieve_writes_scored_results_for_each_strategy() {
    let w = world();
    for strategy in ["pairnn", "word2vec", "time"] {
        let out_file = s(&w.dir.path().join(format!("results-{strategy}.jsonl")));
        let out = run_ok(&[
            "retrieve",
            "--users",
            &w.users(),
            "--products",
            &w.products(),
            "--index",
            &w.index(),
            "--checkpoint",
            &w.checkpoint(),
            "--vectors",
            &w.vectors(),
            "--user-id",
            "1",
            "--strategy",
            strategy,
            "--m",
            "100",
            "--n",
            "5",
            "--output",
            &out_file,
        ]);
        let stdout = String::from_utf8(out.stdout).unwrap();
        let results: Vec<serde_json::Value> = stdout
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(results.len(), 5, "strategy {strategy}");
        assert!(results.iter().all(|r| r["product_id"].is_u64()));
        assert_eq!(std::fs::read_to_string(&out_file).unwrap(), stdout);
    }
}

#[test]
fn time_strategy_needs_no_trained_artifacts() {
    let w = world();
    let out_file = s(&w.dir.path().join("results-bare.jsonl"));
    run_ok(&[
        "retrieve",
        "--users",
        &w.users(),
        "--products",
        &w.products(),
        "--index",
        &w.index(),
        "--user-id",
        "2",
        "--strategy",
        "time",
        "--m",
        "50",
        "--n",
        "3",
        "--output",
        &out_file,
    ]);
    // pairnn without a checkpoint names the missing artifact instead.
    let out = bin()
        .args([
            "retrieve",
            "--users",
            &w.users(),
            "--products",
            &w.products(),
            "--index",
            &w.index(),
            "--user-id",
            "2",
            "--strategy",
            "pairnn",
            "--m",
            "50",
            "--n",
            "3",
            "--output",
            &out_file,
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("pairnn"), "stderr: {stderr}");
    assert!(stderr.contains("checkpoint"), "stderr: {stderr}");
}

#[test]
fn replay_emits_a_report_with_all_strategies() {
    let w = world();
    let report = s(&w.dir.path().join("replay.jsonl"));
    let out = run_ok(&[
        "replay",
        "--users",
        &w.users(),
        "--products",
        &w.products(),
        "--events",
        &w.events(),
        "--index",
        &w.index(),
        "--checkpoint",
        &w.checkpoint(),
        "--vectors",
        &w.vectors(),
        "--n",
        "20",
        "--m",
        "200",
        "--output",
        &report,
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("recall@20"), "stdout: {stdout}");
    let lines = std::fs::read_to_string(&report).unwrap();
    let records: Vec<serde_json::Value> = lines
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let strategies: Vec<&str> = records
        .iter()
        .filter(|r| r["metric"] == "recall@20")
        .map(|r| r["strategy"].as_str().unwrap())
        .collect();
    assert_eq!(strategies, ["pairnn", "word2vec", "time"]);
    let time_lift = records
        .iter()
        .find(|r| r["strategy"] == "time" && r["metric"] == "lift_vs_time")
        .unwrap();
    assert_eq!(time_lift["value"], 0.0);
}

#[test]
fn gen_data_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        run_ok(&[
            "gen-data",
            "--out-dir",
            &s(d),
            "--n-users",
            "40",
            "--n-products",
            "150",
            "--seed",
            "42",
        ]);
    }
    for f in ["users.jsonl", "products.jsonl", "events.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn usage_errors_exit_2_and_validation_errors_exit_1() {
    let unknown_sub = bin().arg("frobnicate").output().unwrap();
    assert_eq!(unknown_sub.status.code(), Some(2));
    let unknown_flag = bin().args(["gen-data", "--bogus", "1"]).output().unwrap();
    assert_eq!(unknown_flag.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad_value = bin()
        .args([
            "gen-data",
            "--out-dir",
            &s(&dir.path().join("x")),
            "--p-hi",
            "1.5",
        ])
        .output()
        .unwrap();
    assert_eq!(bad_value.status.code(), Some(1));
    let stderr = String::from_utf8(bad_value.stderr).unwrap();
    assert!(stderr.contains("p_hi"), "stderr should name the flag: {stderr}");

    let w = world();
    let m_lt_n = bin()
        .args([
            "retrieve",
            "--users",
            &w.users(),
            "--products",
            &w.products(),
            "--index",
            &w.index(),
            "--user-id",
            "1",
            "--strategy",
            "time",
            "--m",
            "3",
            "--n",
            "10",
            "--output",
            &s(&dir.path().join("r.jsonl")),
        ])
        .output()
        .unwrap();
    assert_eq!(m_lt_n.status.code(), Some(1));
    let stderr = String::from_utf8(m_lt_n.stderr).unwrap();
    assert!(stderr.contains("m must be >= n"), "stderr: {stderr}");
}

#[test]
fn text_modality_trains_without_image_features() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    // Strip image features from every product.
    let stripped = dir.path().join("products-noimg.jsonl");
    let mut lines = String::new();
    for line in std::fs::read_to_string(w.products()).unwrap().lines() {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        v.as_object_mut().unwrap().remove("image_features");
        lines.push_str(&v.to_string());
        lines.push('\n');
    }
    std::fs::write(&stripped, lines).unwrap();

    let ckpt = s(&dir.path().join("text.ckpt"));
    run_ok(&[
        "train",
        "--users",
        &w.users(),
        "--products",
        &stripped.to_str().unwrap().to_string(),
        "--events",
        &w.events(),
        "--vectors",
        &w.vectors(),
        "--output",
        &ckpt,
        "--modality",
        "text",
        "--epochs",
        "0",
    ]);
    // The image-using modality on the same catalog names the gap instead.
    let both = bin()
        .args([
            "train",
            "--users",
            &w.users(),
            "--products",
            stripped.to_str().unwrap(),
            "--events",
            &w.events(),
            "--vectors",
            &w.vectors(),
            "--output",
            &ckpt,
            "--modality",
            "both",
            "--epochs",
            "0",
        ])
        .output()
        .unwrap();
    assert_eq!(both.status.code(), Some(1));
    let stderr = String::from_utf8(both.stderr).unwrap();
    assert!(stderr.contains("image features"), "stderr: {stderr}");
}

#[test]
fn config_file_fills_gaps_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[gen-data]\nn_users = 30\nn_products = 100\nseed = 5\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    run_ok(&[
        "gen-data",
        "--out-dir",
        &s(&out_dir),
        "--config",
        &s(&config),
        "--seed",
        "9",
    ]);
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("gen-data.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["n_users"], 30); // file beats default
    assert_eq!(manifest["config"]["seed"], 9); // flag beats file
    assert_eq!(manifest["seed"], 9);
    // The config file itself is a fingerprinted input.
    assert!(manifest["inputs"]
        .as_object()
        .unwrap()
        .keys()
        .any(|k| k.ends_with("run.toml")));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[gen-data]\nn_userz = 30\n").unwrap();
    let out = bin()
        .args(["gen-data", "--out-dir", &s(&out_dir), "--config", &s(&bad)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn serve_answers_queries_like_retrieve_and_survives_garbage() {
    let w = world();
    let mut child = bin()
        .args([
            "serve",
            "--users",
            &w.users(),
            "--products",
            &w.products(),
            "--index",
            &w.index(),
            "--checkpoint",
            &w.checkpoint(),
            "--vectors",
            &w.vectors(),
            "--port",
            "0",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut banner = String::new();
    stdout.read_line(&mut banner).unwrap();
    let banner: serde_json::Value = serde_json::from_str(&banner).unwrap();
    let addr = banner["listening"].as_str().unwrap().to_string();

    let reference = run_ok(&[
        "retrieve",
        "--users",
        &w.users(),
        "--products",
        &w.products(),
        "--index",
        &w.index(),
        "--checkpoint",
        &w.checkpoint(),
        "--vectors",
        &w.vectors(),
        "--user-id",
        "3",
        "--strategy",
        "pairnn",
        "--m",
        "100",
        "--n",
        "4",
        "--output",
        &s(&w.dir.path().join("ref.jsonl")),
    ]);
    let expected: Vec<serde_json::Value> = String::from_utf8(reference.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();

    let stream = TcpStream::connect(&addr).unwrap();
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    let mut ask = |line: &str| -> serde_json::Value {
        writer.write_all(line.as_bytes()).unwrap();
        writer.write_all(b"\n").unwrap();
        let mut resp = String::new();
        reader.read_line(&mut resp).unwrap();
        serde_json::from_str(&resp).unwrap()
    };

    let good = ask(r#"{"user_id":3,"m":100,"n":4,"strategy":"pairnn"}"#);
    assert_eq!(good["ok"], true);
    assert_eq!(good["results"].as_array().unwrap(), &expected);
    assert!(good["latency_us"].is_u64());

    let bad = ask("{{{{");
    assert_eq!(bad["ok"], false);
    assert!(bad["error"].as_str().unwrap().contains("malformed"));

    let again = ask(r#"{"user_id":3,"m":100,"n":4,"strategy":"time"}"#);
    assert_eq!(again["ok"], true, "server must survive malformed input");

    child.kill().unwrap();
    child.wait().unwrap();
}

#[test]
fn ablation_prints_the_three_row_comparison() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(&[
        "ablation",
        "--users",
        &w.users(),
        "--products",
        &w.products(),
        "--events",
        &w.events(),
        "--vectors",
        &w.vectors(),
        "--out-dir",
        &s(&dir.path().join("ab")),
        "--epochs",
        "1",
        "--seed",
        "7",
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    for label in ["Text only", "Image only", "Text + Image", "Accuracy", "Average Loss"] {
        assert!(stdout.contains(label), "missing {label:?} in:\n{stdout}");
    }
    let records = std::fs::read_to_string(dir.path().join("ab/ablation.jsonl")).unwrap();
    let parsed: Vec<serde_json::Value> = records
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed.len(), 6); // 3 modalities x {accuracy, average_loss}
    for m in ["text", "image", "both"] {
        assert!(
            dir.path().join(format!("ab/ablation-{m}.ckpt")).exists(),
            "checkpoint for {m}"
        );
        assert!(parsed.iter().any(|r| r["strategy"] == m));
    }
}
