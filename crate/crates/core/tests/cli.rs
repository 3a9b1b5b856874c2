use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use isacl::evalkit::EvalReport;
use isacl::gate::{Action, GateResponse};
use isacl::judge::{GatedMlp, JudgeModel};
use isacl::labeler::Provenance;
use isacl::stateio::{self, PoolingMode, StateFileHeader};

fn isacl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_isacl"));
    for var in ["ISACL_MODEL", "ISACL_REFDB", "ISACL_BIND", "ISACL_TAU_OVERRIDE", "ISACL_CONFIG"] {
        c.env_remove(var);
    }
    c
}

fn run(args: &[&str]) -> Output {
    isacl().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["label", "--p", "0.2"]).status.code(), Some(1));
    assert_eq!(run(&["synth", "--out-dir", "/tmp/unused", "--count", "2"]).status.code(), Some(1));
}

#[test]
fn missing_or_corrupt_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.isst");
    std::fs::write(&bogus, b"ISSX not a state file").unwrap();
    let out = run(&["predict", "--model", p(&bogus), "--states", p(&bogus)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["score", "--input", p(&dir.path().join("absent.jsonl")), "--output", p(&bogus)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn full_pipeline_on_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out-dir", p(d), "--count", "300", "--dim", "16", "--seed", "4"]);
    ok(&["score", "--input", p(&d.join("triplets.jsonl")), "--output", p(&d.join("scored.jsonl"))]);
    let scored = stateio::read_triplets(&d.join("scored.jsonl")).unwrap();
    assert!(scored.iter().all(|t| t.rouge_l_f.is_some() && t.rouge_1_f.is_some()));

    ok(&[
        "label",
        "--triplets",
        p(&d.join("scored.jsonl")),
        "--states",
        p(&d.join("states.isst")),
        "--refs",
        p(&d.join("ref_emb.isst")),
        "--with-reference",
        "--p",
        "0.3",
        "--output",
        p(&d.join("labeled.isst")),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("labeled.isst.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["leak"], 90);
    assert_eq!(manifest["non_disclosure"], 90);
    assert_eq!(manifest["provenance"]["with_reference"], true);

    ok(&[
        "build-db",
        "--pairs",
        p(&d.join("pairs.jsonl")),
        "--embeddings",
        p(&d.join("ref_emb.isst")),
        "--keys",
        p(&d.join("input_emb.isst")),
        "--output",
        p(&d.join("refdb.bin")),
    ]);
    let out = ok(&[
        "query-db",
        "--db",
        p(&d.join("refdb.bin")),
        "--from-states",
        p(&d.join("input_emb.isst")),
        "--id",
        "doc00007",
    ]);
    let hit: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(hit["entry_id"], "doc00007");

    ok(&[
        "train",
        "--data",
        p(&d.join("labeled.isst")),
        "--holdout",
        p(&d.join("test.isst")),
        "--epochs",
        "40",
        "--hidden",
        "32",
        "--output",
        p(&d.join("judge.bin")),
    ]);
    let out = ok(&[
        "eval",
        "--model",
        p(&d.join("judge.bin")),
        "--data",
        p(&d.join("test.isst")),
        "--baseline-cmd",
        "echo '{\"latency_seconds\": 0.25}'",
        "--output",
        p(&d.join("report.json")),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy"));
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let report: EvalReport = serde_json::from_value(written["report"].clone()).unwrap();
    assert_eq!(report.total(), 36);
    assert!(report.accuracy > 0.7, "accuracy {}", report.accuracy);
    assert_eq!(written["latency"]["baseline_mean_seconds"], 0.25);

    // retrieval path: the reference embedding comes from the database
    let out = ok(&[
        "predict",
        "--model",
        p(&d.join("judge.bin")),
        "--states",
        p(&d.join("states.isst")),
        "--refdb",
        p(&d.join("refdb.bin")),
        "--queries",
        p(&d.join("input_emb.isst")),
    ]);
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 300);
    assert!(lines.iter().all(|l| l["id"] == l["retrieved_entry_id"]));

    let out = run(&["predict", "--model", p(&d.join("judge.bin")), "--states", p(&d.join("states.isst"))]);
    assert_eq!(out.status.code(), Some(1), "reference model without references is a usage error");
}

#[test]
fn division_sweep_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out-dir", p(d), "--count", "200", "--dim", "8"]);
    ok(&["score", "--input", p(&d.join("triplets.jsonl")), "--output", p(&d.join("scored.jsonl"))]);
    let out = ok(&[
        "sweep",
        "--axis",
        "division-p",
        "--values",
        "0.1,0.3",
        "--triplets",
        p(&d.join("scored.jsonl")),
        "--states",
        p(&d.join("states.isst")),
        "--epochs",
        "10",
        "--hidden",
        "16",
        "--output",
        p(&d.join("sweep.json")),
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("IS-w/oRAG"), "{text}");
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
}

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn_server(cmd: &mut Command) -> Server {
    let mut child = cmd.stderr(Stdio::piped()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.as_mut().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("serving on ").unwrap_or_else(|| panic!("unexpected: {line}")).to_string();
    Server { child, addr }
}

fn ask(addr: &str, line: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(line.as_bytes()).unwrap();
    s.write_all(b"\n").unwrap();
    let mut out = String::new();
    BufReader::new(s).read_line(&mut out).unwrap();
    out
}

fn zero_model(path: &Path) {
    JudgeModel {
        net: GatedMlp::zeros(2, 2),
        tau: 0.5,
        provenance: Provenance::from_header(&StateFileHeader::new("m", -1, PoolingMode::LastToken, 2)),
    }
    .save(path)
    .unwrap();
}

#[test]
fn serve_config_precedence_and_shutdown() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("judge.bin");
    zero_model(&model);
    let config = dir.path().join("serve.toml");
    std::fs::write(&config, format!("model = {:?}\nbind = \"127.0.0.1:0\"\ntau_override = 0.6\n", p(&model))).unwrap();
    let request = r#"{"request_id":"q","state_vector":[0.5,-1]}"#;
    let action = |server: &Server| serde_json::from_str::<GateResponse>(&ask(&server.addr, request)).unwrap().action;

    // file only: tau 0.6 > p = 0.5
    let server = spawn_server(isacl().args(["serve", "--config", p(&config)]));
    assert_eq!(action(&server), Action::Allow);
    drop(server);

    // environment beats the file
    let server = spawn_server(isacl().args(["serve", "--config", p(&config)]).env("ISACL_TAU_OVERRIDE", "0.4"));
    assert_eq!(action(&server), Action::Block);
    drop(server);

    // flags beat the environment
    let mut server = spawn_server(
        isacl()
            .args(["serve", "--config", p(&config), "--tau-override", "0.7"])
            .env("ISACL_TAU_OVERRIDE", "0.4"),
    );
    assert_eq!(action(&server), Action::Allow);
    let bad: serde_json::Value = serde_json::from_str(&ask(&server.addr, "{\"request_id\":\"b\"")).unwrap();
    assert!(bad["error"].is_string());
    assert_eq!(action(&server), Action::Allow, "server survives malformed input");

    let status = Command::new("kill").args(["-TERM", &server.child.id().to_string()]).status().unwrap();
    assert!(status.success());
    assert!(server.child.wait().unwrap().success());
}

#[test]
fn serve_without_model_is_usage_error() {
    let out = run(&["serve", "--bind", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no model"));
}
