use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use medas::client::Client;
use medas::logging::read_log;
use medas::service::{self, account, AppState, ServiceConfig, ServiceError, PROTECTED_ROUTES};
use medas_core::graph::PipelineGraph;
use medas_core::scheduler::{Inventory, ResourceRequest};
use medas_core::sha256_hex;
use medas_core::tensor::{encode, Tensor, TensorData};
use serde_json::{json, Value};

const TOKEN: &str = "alice-secret";

struct Server {
    url: String,
    state: Arc<AppState>,
    _rt: tokio::runtime::Runtime,
}

fn config(dir: &Path, gpus: u32, cpus: u32) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.to_path_buf(),
        bind_addr: "127.0.0.1:0".into(),
        inventory: Inventory::with_indexed_gpus(cpus, gpus, 64 * 1024),
        accounts: vec![
            account("alice", TOKEN, ResourceRequest::new(cpus, gpus, 64 * 1024)),
            account("bob", "bob-secret", ResourceRequest::new(1, 0, 1024)),
        ],
        tools_dir: None,
    }
}

fn start(config: ServiceConfig) -> Server {
    let state = AppState::open(config).unwrap();
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = service::router(state.clone());
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server {
        url: format!("http://{addr}"),
        state,
        _rt: rt,
    }
}

impl Server {
    fn client(&self) -> Client {
        Client::new(&self.url, TOKEN)
    }
}

fn constant(value: f64) -> String {
    let mut g = PipelineGraph::new("const");
    g.add_node("a", "medas.debug.constant@1.0.0", [("value", json!(value))]);
    g.add_node("b", "medas.debug.add@1.0.0", [("delta", json!(1.0))]);
    g.connect("a.value", "b.x");
    g.to_canonical_json()
}

fn sleeper(millis: u64) -> String {
    let mut g = PipelineGraph::new("sleep");
    g.add_node("s", "medas.debug.sleep@1.0.0", [("millis", json!(millis))]);
    g.to_canonical_json()
}

fn cycle() -> String {
    let mut g = PipelineGraph::new("cycle");
    g.add_node("a", "medas.debug.add@1.0.0", []);
    g.add_node("b", "medas.debug.add@1.0.0", []);
    g.connect("a.value", "b.x").connect("b.value", "a.x");
    g.to_canonical_json()
}

fn wait_state(c: &Client, id: &str, pred: impl Fn(&str) -> bool) -> Value {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let v = c.task(id).unwrap();
        if pred(v["task"]["state"]["state"].as_str().unwrap()) {
            return v;
        }
        assert!(Instant::now() < deadline, "task {id} stuck in {}", v["task"]["state"]);
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn terminal(s: &str) -> bool {
    matches!(s, "Succeeded" | "Failed" | "Killed")
}

fn raw(url: &str, method: &str, path: &str, token: Option<&str>) -> u16 {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let url = format!("{url}{path}");
    let resp = match (method, token) {
        ("GET", Some(t)) => agent.get(&url).header("Authorization", &format!("Bearer {t}")).call(),
        ("GET", None) => agent.get(&url).call(),
        (_, Some(t)) => agent.post(&url).header("Authorization", &format!("Bearer {t}")).send(b"{}".as_slice()),
        (_, None) => agent.post(&url).send(b"{}".as_slice()),
    };
    resp.unwrap().status().as_u16()
}

#[test]
fn every_route_except_health_requires_a_valid_token() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(config(dir.path(), 0, 2));
    assert_eq!(raw(&s.url, "GET", "/v1/health", None), 200);
    for (method, template) in PROTECTED_ROUTES {
        let path = template.replace("{id}", "1").replace("{hash}", &"0".repeat(64));
        assert_eq!(raw(&s.url, method, &path, None), 401, "{method} {path} without token");
        assert_eq!(raw(&s.url, method, &path, Some("wrong")), 401, "{method} {path} with bad token");
        assert_ne!(raw(&s.url, method, &path, Some(TOKEN)), 401, "{method} {path} with valid token");
    }
}

#[test]
fn cyclic_pipeline_is_rejected_with_cycle_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(config(dir.path(), 0, 2));
    let c = s.client();
    for path in ["/v1/pipelines", "/v1/validate"] {
        let err = c.post_json(path, &serde_json::from_str(&cycle()).unwrap(), None).unwrap_err();
        assert_eq!(err.status(), Some(400));
        let text = err.to_string();
        assert!(text.contains("CycleDetected"), "{path}: {text}");
    }
    let ok = c.post_json("/v1/validate", &serde_json::from_str(&constant(1.0)).unwrap(), None).unwrap();
    assert_eq!(ok["ok"], json!(true));
}

#[test]
fn three_gpus_on_two_gpu_inventory_is_unprocessable() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(config(dir.path(), 2, 2));
    let c = s.client();
    let pid = c.create_pipeline(&constant(1.0)).unwrap();
    let err = c.submit(&pid, ResourceRequest::new(1, 3, 64), 0, None).unwrap_err();
    assert_eq!(err.status(), Some(422));
    assert!(err.to_string().contains("Unsatisfiable"));
    assert_eq!(c.submit("p-missing", ResourceRequest::new(1, 0, 64), 0, None).unwrap_err().status(), Some(404));
}

#[test]
fn stored_pipeline_bytes_hash_to_the_stored_hash_and_listing_paginates() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(config(dir.path(), 0, 2));
    let c = s.client();
    let mut ids = Vec::new();
    for i in 0..1000 {
        ids.push(c.create_pipeline(&constant(i as f64)).unwrap());
    }
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent
        .get(&format!("{}/v1/pipelines/{}", s.url, ids[17]))
        .header("Authorization", &format!("Bearer {TOKEN}"))
        .call()
        .unwrap();
    let header_hash = resp.headers()["x-content-hash"].to_str().unwrap().to_string();
    let body = resp.body_mut().read_to_vec().unwrap();
    assert_eq!(sha256_hex(&body), header_hash);
    assert_eq!(PipelineGraph::from_json(std::str::from_utf8(&body).unwrap()).unwrap().content_hash(), header_hash);

    let collect = |limit: usize| {
        let mut out = Vec::new();
        let mut offset = Some(0u64);
        while let Some(o) = offset {
            let page = c.get_json(&format!("/v1/pipelines?offset={o}&limit={limit}")).unwrap();
            assert_eq!(page["total"], json!(1000));
            for p in page["pipelines"].as_array().unwrap() {
                out.push(p["pipeline_id"].as_str().unwrap().to_string());
            }
            offset = page["next_offset"].as_u64();
        }
        out
    };
    let by_37 = collect(37);
    assert_eq!(by_37, ids);
    assert_eq!(collect(250), by_37);

    let bob = Client::new(&s.url, "bob-secret");
    assert_eq!(bob.get_json("/v1/pipelines").unwrap()["total"], json!(0));
}

#[test]
fn duplicate_task_post_with_same_key_returns_same_task() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(config(dir.path(), 0, 2));
    let c = s.client();
    let pid = c.create_pipeline(&constant(2.0)).unwrap();
    let a = c.submit(&pid, ResourceRequest::new(1, 0, 64), 0, Some("k-1")).unwrap();
    let b = c.submit(&pid, ResourceRequest::new(1, 0, 64), 0, Some("k-1")).unwrap();
    let other = c.submit(&pid, ResourceRequest::new(1, 0, 64), 0, Some("k-2")).unwrap();
    assert_eq!(a["task"]["task_id"], b["task"]["task_id"]);
    assert_ne!(a["task"]["task_id"], other["task"]["task_id"]);
    let listed = c.get_json("/v1/tasks").unwrap();
    assert_eq!(listed["tasks"].as_array().unwrap().len(), 2);
}

#[test]
fn task_runs_to_success_and_log_stream_matches_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(config(dir.path(), 0, 2));
    let c = s.client();
    let mut g = PipelineGraph::new("logs");
    g.add_node("s", "medas.debug.sleep@1.0.0", [("millis", json!(300))]);
    g.add_node("b", "medas.debug.add@1.0.0", [("delta", json!(1.0))]);
    g.connect("s.value", "b.x");
    let pid = c.create_pipeline(&g.to_canonical_json()).unwrap();
    let v = c.submit(&pid, ResourceRequest::new(1, 0, 64), 5, None).unwrap();
    let id = v["task"]["task_id"].to_string();

    let mut streamed = Vec::new();
    c.logs(&id, true, |line| streamed.push(line.to_string())).unwrap();
    let done = wait_state(&c, &id, terminal);
    assert_eq!(done["task"]["state"]["state"], json!("Succeeded"));
    assert_eq!(done["nodes"]["b"]["state"], json!("succeeded"));

    let on_disk = read_log(&s.state.engine().log_path(done["run_id"].as_str().unwrap())).unwrap();
    let streamed: Vec<medas::logging::LogEvent> = streamed.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!streamed.is_empty());
    assert_eq!(streamed, on_disk);
    assert!(streamed.windows(2).all(|w| w[0].ts < w[1].ts));
}

#[test]
fn kill_running_task_then_conflict_and_successor_starts() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(config(dir.path(), 0, 1));
    let c = s.client();
    let pid = c.create_pipeline(&sleeper(30_000)).unwrap();
    let first = c.submit(&pid, ResourceRequest::new(1, 0, 64), 0, None).unwrap();
    let second = c.submit(&pid, ResourceRequest::new(1, 0, 64), 1, None).unwrap();
    assert_eq!(first["task"]["state"]["state"], json!("Running"));
    assert_eq!(second["task"]["state"]["state"], json!("Queued"));
    let a = first["task"]["task_id"].to_string();
    let b = second["task"]["task_id"].to_string();

    let killed = c.kill(&a).unwrap();
    assert_eq!(killed["task"]["state"]["state"], json!("Killed"));
    assert_eq!(c.kill(&a).unwrap_err().status(), Some(409));
    wait_state(&c, &b, |st| st == "Running");
    c.kill(&b).unwrap();
    assert_eq!(c.kill("999").unwrap_err().status(), Some(404));
}

#[test]
fn restart_keeps_terminal_tasks_and_interrupts_running_ones() {
    let dir = tempfile::tempdir().unwrap();
    let (done_id, running_id, queued_id, before) = {
        let s = start(config(dir.path(), 0, 1));
        let c = s.client();
        let quick = c.create_pipeline(&constant(3.0)).unwrap();
        let done = c.submit(&quick, ResourceRequest::new(1, 0, 64), 0, None).unwrap()["task"]["task_id"].to_string();
        wait_state(&c, &done, terminal);
        let slow = c.create_pipeline(&sleeper(60_000)).unwrap();
        let running = c.submit(&slow, ResourceRequest::new(1, 0, 64), 0, None).unwrap()["task"]["task_id"].to_string();
        let queued = c.submit(&quick, ResourceRequest::new(1, 0, 64), 9, None).unwrap()["task"]["task_id"].to_string();
        let before: Value = c.get_json("/v1/tasks").unwrap();
        s.state.abandon();
        (done, running, queued, before)
    };
    let s = start(config(dir.path(), 0, 1));
    let c = s.client();
    let done = c.task(&done_id).unwrap();
    assert_eq!(done["task"], before["tasks"][0]);
    let interrupted = c.task(&running_id).unwrap();
    assert_eq!(interrupted["task"]["state"], json!({ "state": "Failed", "detail": "Interrupted" }));
    let successor = wait_state(&c, &queued_id, terminal);
    assert_eq!(successor["task"]["state"]["state"], json!("Succeeded"));

    let listing = c.get_json("/v1/tasks").unwrap();
    drop(s);
    let s = start(config(dir.path(), 0, 1));
    assert_eq!(s.client().get_json("/v1/tasks").unwrap(), listing);
}

#[test]
fn corrupt_metadata_refuses_to_start_until_repaired() {
    let dir = tempfile::tempdir().unwrap();
    {
        let s = start(config(dir.path(), 0, 1));
        s.client().create_pipeline(&constant(1.0)).unwrap();
    }
    std::fs::write(dir.path().join("meta/tasks.json"), b"{ truncated").unwrap();
    match AppState::open(config(dir.path(), 0, 1)) {
        Err(ServiceError::CorruptMetadata { path, .. }) => assert!(path.ends_with("tasks.json")),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("service started on corrupt metadata"),
    }
    let moved = service::repair(dir.path()).unwrap();
    assert_eq!(moved.len(), 1);
    let s = start(config(dir.path(), 0, 1));
    assert_eq!(s.client().get_json("/v1/pipelines").unwrap()["total"], json!(1));
}

fn multipart(parts: &[(&str, Vec<u8>)]) -> (String, Vec<u8>) {
    let boundary = "medas-test-boundary";
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(
            format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"x\"\r\nContent-Type: application/octet-stream\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

#[test]
fn dataset_upload_returns_manifest_and_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(config(dir.path(), 0, 1));
    let image = encode(&Tensor::new(vec![4, 4], TensorData::F32((0..16).map(|v| v as f32 / 16.0).collect())).unwrap()).unwrap();
    let label = encode(&Tensor::new(vec![4, 4], TensorData::U8((0..16).map(|v| (v % 2) as u8).collect())).unwrap()).unwrap();
    let (ctype, body) = multipart(&[
        ("case-1/image", image.clone()),
        ("case-1/label", label.clone()),
        ("case-2/image", image.clone()),
        ("case-2/label", label.clone()),
    ]);
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent
        .post(&format!("{}/v1/datasets", s.url))
        .header("Authorization", &format!("Bearer {TOKEN}"))
        .header("Content-Type", &ctype)
        .send(&body[..])
        .unwrap();
    assert_eq!(resp.status().as_u16(), 201);
    let v: Value = resp.body_mut().read_json().unwrap();
    assert_eq!(v["items"], json!(2));
    let hash = v["dataset"]["hash"].as_str().unwrap();

    let c = s.client();
    let manifest: Value = serde_json::from_slice(&c.artifact(hash).unwrap()).unwrap();
    assert_eq!(manifest["items"][0]["item_id"], json!("case-1"));
    let image_hash = manifest["items"][0]["roles"]["image"]["hash"].as_str().unwrap();
    assert_eq!(c.artifact(image_hash).unwrap(), image);
    assert_eq!(image_hash, sha256_hex(&image));

    for parts in [
        vec![("no-role", image.clone())],
        vec![("a/image", image.clone()), ("a/label", label), ("b/image", image.clone())],
        vec![("a/image", b"not a tensor".to_vec())],
    ] {
        let (ctype, body) = multipart(&parts);
        let resp = agent
            .post(&format!("{}/v1/datasets", s.url))
            .header("Authorization", &format!("Bearer {TOKEN}"))
            .header("Content-Type", &ctype)
            .send(&body[..])
            .unwrap();
        assert_eq!(resp.status().as_u16(), 400);
    }
}

#[test]
fn study_lifecycle_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(config(dir.path(), 0, 2));
    let c = s.client();
    let pid = c.create_pipeline(&constant(0.0)).unwrap();
    let cfg = json!({
        "name": "quadratic",
        "pipeline": pid,
        "space": [ { "name": "a.value", "type": "continuous", "low": -2.0, "high": 2.0 } ],
        "objective": "b.value",
        "budget": 4,
        "seed": 3,
        "strategy": "random"
    });
    let id = c.create_study(&cfg).unwrap();
    let deadline = Instant::now() + Duration::from_secs(60);
    let summary = loop {
        let v = c.study(&id).unwrap();
        if v["state"] == json!("completed") {
            break v;
        }
        assert!(Instant::now() < deadline, "study stuck: {v}");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(summary["trials"].as_array().unwrap().len(), 4);
    let csv = c.study_trials_csv(&id).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().next().unwrap().contains("a.value"));
    assert_eq!(Client::new(&s.url, "bob-secret").study(&id).unwrap_err().status(), Some(404));
}

#[test]
fn tool_listing_carries_specs_and_lattice() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(config(dir.path(), 0, 1));
    let v = s.client().get_json("/v1/tools").unwrap();
    let tools = v["tools"].as_array().unwrap();
    assert!(tools.iter().any(|t| t["tool_id"] == json!("medas.metric.dice")));
    assert!(tools.iter().all(|t| t["version"].is_string() && t["outputs"].is_array()));
    assert!(v["lattice"]["accepts"].is_object());
}
