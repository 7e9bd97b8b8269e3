use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use medas_core::graph::PipelineGraph;
use serde_json::{json, Value};

fn medas(data: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_medas"));
    c.env_remove("MEDAS_SERVER")
        .env_remove("MEDAS_TOKEN")
        .env_remove("MEDAS_TOOLS_DIR")
        .env("MEDAS_DATA_DIR", data)
        .arg("--quiet");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn bundle(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn write_graph(dir: &Path, name: &str, g: &PipelineGraph) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, g.to_canonical_json()).unwrap();
    p
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(medas(dir.path()).args(["validate", "-p"]).arg(bundle("nuclei-hpo/pipeline.json")));
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));

    let mut g = PipelineGraph::new("cycle");
    g.add_node("a", "medas.debug.add@1.0.0", []);
    g.add_node("b", "medas.debug.add@1.0.0", []);
    g.connect("a.value", "b.x").connect("b.value", "a.x");
    let p = write_graph(dir.path(), "cycle.json", &g);
    let bad = run(medas(dir.path()).args(["validate", "-p"]).arg(&p));
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("CycleDetected"));
    assert!(bad.stdout.is_empty());
}

#[test]
fn run_failure_exits_2_and_second_run_is_all_cache_hits() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = PipelineGraph::new("fails");
    g.add_node("a", "medas.debug.constant@1.0.0", []);
    g.add_node("b", "medas.debug.fail@1.0.0", []);
    g.add_node("c", "medas.debug.add@1.0.0", []);
    g.connect("a.value", "b.x").connect("b.value", "c.x");
    let p = write_graph(dir.path(), "fails.json", &g);
    let out = run(medas(dir.path()).args(["run", "--json", "-p"]).arg(&p));
    assert_eq!(out.status.code(), Some(2));
    let record: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(record["nodes"]["b"]["state"], json!("failed"));
    assert_eq!(record["nodes"]["c"]["state"], json!("skipped_upstream_failure"));

    let mut g = PipelineGraph::new("ok");
    g.add_node("a", "medas.debug.constant@1.0.0", [("value", json!(2.0))]);
    g.add_node("b", "medas.debug.add@1.0.0", []);
    g.connect("a.value", "b.x");
    let p = write_graph(dir.path(), "ok.json", &g);
    let states = |o: &Output| -> Vec<String> {
        stdout(o).lines().map(|l| l.split('\t').nth(1).unwrap().to_string()).collect()
    };
    let first = run(medas(dir.path()).args(["run", "--explain", "--seed", "4", "-p"]).arg(&p));
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(states(&first), ["succeeded", "succeeded"]);
    let second = run(medas(dir.path()).args(["run", "--explain", "--seed", "4", "-p"]).arg(&p));
    assert_eq!(states(&second), ["cache_hit", "cache_hit"]);
    let no_cache = run(medas(dir.path()).args(["run", "--explain", "--no-cache", "--seed", "4", "-p"]).arg(&p));
    assert_eq!(states(&no_cache), ["succeeded", "succeeded"]);
}

#[test]
fn tools_list_and_describe() {
    let dir = tempfile::tempdir().unwrap();
    let list = run(medas(dir.path()).args(["tools", "list"]));
    assert_eq!(list.status.code(), Some(0));
    assert!(stdout(&list).lines().any(|l| l.starts_with("medas.metric.aji@1.0.0\t")));
    let d = run(medas(dir.path()).args(["tools", "describe", "medas.metric.dice"]));
    let spec: Value = serde_json::from_slice(&d.stdout).unwrap();
    assert_eq!(spec["tool_id"], json!("medas.metric.dice"));
    let missing = run(medas(dir.path()).args(["tools", "describe", "medas.nope"]));
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn local_study_and_trials_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = PipelineGraph::new("q");
    g.add_node("a", "medas.debug.constant@1.0.0", []);
    write_graph(dir.path(), "q.json", &g);
    let cfg = json!({
        "name": "q",
        "pipeline": "q.json",
        "space": [ { "name": "a.value", "type": "continuous", "low": 0.0, "high": 1.0 } ],
        "objective": "a.value",
        "budget": 3,
        "strategy": "random"
    });
    std::fs::write(dir.path().join("study.json"), cfg.to_string()).unwrap();
    let out = run(medas(dir.path()).args(["study", "run", "-s"]).arg(dir.path().join("study.json")));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let id = stdout(&out).trim().to_string();
    let trials = run(medas(dir.path()).args(["study", "trials", &id, "--csv"]));
    let text = stdout(&trials);
    assert_eq!(text.lines().next().unwrap(), "trial_id,a.value,y,state");
    assert_eq!(text.lines().count(), 4);
}

struct Service {
    child: Child,
    url: String,
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(data: &Path, gpus: u32) -> Service {
    let tokens = data.join("tokens.json");
    std::fs::create_dir_all(data).unwrap();
    let token_hash = medas_core::sha256_hex(b"cli-token");
    std::fs::write(
        &tokens,
        json!({ "accounts": [ { "account_id": "cli", "token_sha256": token_hash,
                                 "quota": { "cpu_cores": 4, "gpus": gpus, "mem_mb": 8192 } } ] })
        .to_string(),
    )
    .unwrap();
    let _ = std::fs::remove_file(data.join("server.addr"));
    let child = medas(data)
        .args(["serve", "--bind", "127.0.0.1:0"])
        .env("MEDAS_TOKENS_FILE", &tokens)
        .env("MEDAS_INVENTORY", json!({ "total": { "cpu_cores": 4, "gpus": gpus, "mem_mb": 8192 },
                                        "gpu_ids": (0..gpus).map(|i| i.to_string()).collect::<Vec<_>>() }).to_string())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let addr = loop {
        if let Ok(a) = std::fs::read_to_string(data.join("server.addr")) {
            break a;
        }
        assert!(Instant::now() < deadline, "service did not start");
        std::thread::sleep(Duration::from_millis(20));
    };
    Service {
        child,
        url: format!("http://{addr}"),
    }
}

#[test]
fn remote_submit_status_logs_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("server");
    let s = serve(&data, 2);
    let local = dir.path().join("client");
    let remote = |args: &[&str]| {
        run(medas(&local).args(["--server", &s.url, "--token", "cli-token"]).args(args))
    };
    let pipeline = bundle("detection/pipeline.json");
    let pipeline = pipeline.to_str().unwrap();

    let too_big = remote(&["submit", "-p", pipeline, "--gpus", "3"]);
    assert_eq!(too_big.status.code(), Some(4));

    let ok = remote(&["submit", "-p", pipeline, "--gpus", "1", "--cpus", "1", "--mem", "256"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let id = stdout(&ok).trim().to_string();
    assert!(id.parse::<u64>().is_ok(), "{id}");

    let logs = remote(&["task", "logs", &id, "--follow"]);
    assert_eq!(logs.status.code(), Some(0));
    let events: Vec<Value> = stdout(&logs).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(events.iter().any(|e| e["node_id"] == json!("train")));
    let status = remote(&["task", "status", &id]);
    let v: Value = serde_json::from_slice(&status.stdout).unwrap();
    assert_eq!(v["task"]["state"]["state"], json!("Succeeded"));
    assert_eq!(v["nodes"]["detect"]["state"], json!("succeeded"));

    assert_eq!(remote(&["task", "kill", &id]).status.code(), Some(2));

    let bad_token = run(medas(&local).args(["--server", &s.url, "--token", "wrong", "task", "status", &id]));
    assert_eq!(bad_token.status.code(), Some(3));
    let unreachable = run(medas(&local).args(["--server", "http://127.0.0.1:9", "--token", "x", "task", "status", "1"]));
    assert_eq!(unreachable.status.code(), Some(3));
    let no_server = run(medas(&local).args(["task", "status", "1"]));
    assert_eq!(no_server.status.code(), Some(3));
}

#[test]
fn repair_quarantines_corrupt_metadata() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("meta/pipelines")).unwrap();
    std::fs::write(dir.path().join("meta/pipelines/p-x.json"), b"garbage").unwrap();
    let out = run(medas(dir.path()).arg("repair"));
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).lines().count(), 1);
    assert!(!dir.path().join("meta/pipelines/p-x.json").exists());
}
