//! Pipeline execution.
//!
//! One coordinator thread owns every node state transition and is the only
//! writer of `runs/<run_id>/record.json`. Worker threads run tools and report
//! back over a channel. Each node runs as an [`Chain`] of four steps:
//! `set_params`, `bind`, `run`, `construct`.
//!
//! Node outputs are cached under `cache/<key>.json`, keyed by the tool, its
//! resolved parameters, the input artifact hashes and the node seed.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use medas_core::either::{Chain, Outcome};
use medas_core::graph::{resolve_params, topo_order, validate_graph, GraphError, Node, PipelineGraph, ToolSpec, ValidationReport};
use medas_core::{canonical_json, sha256_hex, Value};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::logging::{FileSink, Level, LogSink, Logger};
use crate::store::{atomic_write, ArtifactStore, StoreError};
use crate::tools::{construct, plug, Backend, Outputs, Registry, ToolContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Blocked,
    Ready,
    Running,
    Succeeded,
    Failed,
    SkippedUpstreamFailure,
    CacheHit,
}

impl NodeState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            NodeState::Succeeded | NodeState::Failed | NodeState::SkippedUpstreamFailure | NodeState::CacheHit
        )
    }

    /// Outputs are available downstream.
    pub fn is_ok(self) -> bool {
        matches!(self, NodeState::Succeeded | NodeState::CacheHit)
    }

    pub fn can_become(self, next: NodeState) -> bool {
        use NodeState::*;
        matches!(
            (self, next),
            (Blocked, Ready)
                | (Blocked, SkippedUpstreamFailure)
                | (Ready, Running)
                | (Ready, CacheHit)
                | (Running, Succeeded)
                | (Running, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub tool: String,
    pub state: NodeState,
    pub cache_key: Option<String>,
    pub started_at: Option<u64>,
    pub ended_at: Option<u64>,
    #[serde(default)]
    pub outputs: BTreeMap<String, Value>,
    pub error: Option<String>,
    /// Chain step that failed.
    pub failed_step: Option<String>,
    /// Set when a cache hit was re-executed as a soundness check.
    pub verified: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub pipeline_hash: String,
    pub seed: u64,
    pub cache: bool,
    pub status: RunStatus,
    pub created_at: u64,
    pub ended_at: Option<u64>,
    /// Log stream file name inside the run directory.
    pub log: String,
    /// Tool invocations performed, not counting cache verification.
    pub executions: usize,
    pub nodes: BTreeMap<String, NodeRecord>,
}

impl RunRecord {
    pub fn node(&self, id: &str) -> Option<&NodeRecord> {
        self.nodes.get(id)
    }

    pub fn is_success(&self) -> bool {
        self.status == RunStatus::Succeeded
    }

    /// Output value of `"<node>.<port>"`.
    pub fn output(&self, slot: &str) -> Option<&Value> {
        let (node, port) = slot.split_once('.')?;
        self.nodes.get(node)?.outputs.get(port)
    }

    /// One line per node: id, state and cache key.
    pub fn explain(&self) -> String {
        let mut out = String::new();
        for (id, n) in &self.nodes {
            out.push_str(&format!(
                "{id}\t{}\t{}\n",
                serde_json::to_value(n.state).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                n.cache_key.as_deref().unwrap_or("-")
            ));
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("pipeline is invalid: {}", summarize(.0))]
    Invalid(ValidationReport),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run record {0} is corrupt: {1}")]
    CorruptRecord(String, String),
}

fn summarize(r: &ValidationReport) -> String {
    r.diagnostics
        .iter()
        .map(|d| format!("{} {:?}: {}", d.subject, d.code, d.message))
        .collect::<Vec<_>>()
        .join("; ")
}

pub struct RunOptions {
    pub max_workers: usize,
    pub cache: bool,
    pub seed: u64,
    /// Fraction of cache hits that are re-executed and compared.
    pub verify_fraction: f64,
    pub run_id: Option<String>,
    pub gpu_ids: Vec<String>,
    pub sinks: Vec<Arc<dyn LogSink>>,
    pub cancel: Arc<AtomicBool>,
    /// Root for per-node working directories; defaults to the run directory.
    pub workdir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        RunOptions {
            max_workers: cores.saturating_sub(1).max(1),
            cache: true,
            seed: 0,
            verify_fraction: 0.0,
            run_id: None,
            gpu_ids: Vec::new(),
            sinks: Vec::new(),
            cancel: Arc::new(AtomicBool::new(false)),
            workdir: None,
        }
    }
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Seed handed to one node, derived from the run seed and the node id.
pub fn node_seed(run_seed: u64, node_id: &str) -> u64 {
    let h = sha256_hex(format!("{run_seed}/{node_id}").as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

fn key_component(v: &Value) -> serde_json::Value {
    match v {
        Value::Artifact { reference, .. } => json!({ "hash": reference.hash }),
        Value::Table(_) | Value::Dataset(_) => json!({ "inline": sha256_hex(canonical_json(v).as_bytes()) }),
        scalar => scalar.to_json_literal().unwrap_or(serde_json::Value::Null),
    }
}

/// SHA-256 over the canonical encoding of tool, parameters, input hashes
/// and seed.
pub fn cache_key(
    tool: &str,
    params: &BTreeMap<String, Value>,
    inputs: &BTreeMap<String, Value>,
    seed: u64,
) -> String {
    let params: BTreeMap<&str, serde_json::Value> = params.iter().map(|(k, v)| (k.as_str(), key_component(v))).collect();
    let inputs: BTreeMap<&str, serde_json::Value> = inputs.iter().map(|(k, v)| (k.as_str(), key_component(v))).collect();
    let body = json!({ "tool": tool, "params": params, "inputs": inputs, "seed": seed });
    sha256_hex(canonical_json(&body).as_bytes())
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    tool: String,
    outputs: BTreeMap<String, Value>,
}

struct Job {
    node: Node,
    spec: ToolSpec,
    backend: Backend,
    inputs: BTreeMap<String, Value>,
    seed: u64,
    verify: bool,
}

struct JobResult {
    node_id: String,
    verify: bool,
    outcome: Result<BTreeMap<String, Value>, (String, String)>,
}

#[derive(Default)]
struct Work {
    params: BTreeMap<String, Value>,
    inputs: BTreeMap<String, Value>,
    raw: Outputs,
    outputs: BTreeMap<String, Value>,
}

/// Artifact store, output cache and run records under one data directory.
pub struct Engine {
    root: PathBuf,
    store: ArtifactStore,
    registry: Registry,
}

impl Engine {
    pub fn open(root: impl Into<PathBuf>, registry: Registry) -> Result<Engine, EngineError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("cache"))?;
        std::fs::create_dir_all(root.join("runs"))?;
        let store = ArtifactStore::open(root.join("store"))?;
        Ok(Engine { root, store, registry })
    }

    pub fn with_store(root: impl Into<PathBuf>, store: ArtifactStore, registry: Registry) -> Result<Engine, EngineError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("cache"))?;
        std::fs::create_dir_all(root.join("runs"))?;
        Ok(Engine { root, store, registry })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn log_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("logs.ndjson")
    }

    pub fn load_record(&self, run_id: &str) -> Result<RunRecord, EngineError> {
        let path = self.run_dir(run_id).join("record.json");
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => EngineError::UnknownRun(run_id.into()),
            _ => EngineError::Io(e),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| EngineError::CorruptRecord(run_id.into(), e.to_string()))
    }

    pub fn validate(&self, g: &PipelineGraph) -> ValidationReport {
        validate_graph(g, self.registry.catalog())
    }

    /// Executes a pipeline. Tool failures are recorded per node; only
    /// invalid pipelines and infrastructure faults are errors.
    pub fn execute(&self, g: &PipelineGraph, opts: &RunOptions) -> Result<RunRecord, EngineError> {
        let report = self.validate(g);
        if !report.is_ok() {
            return Err(EngineError::Invalid(report));
        }
        let run_id = opts.run_id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        let dir = self.run_dir(&run_id);
        std::fs::create_dir_all(&dir)?;
        atomic_write(&dir.join("pipeline.json"), g.to_canonical_json().as_bytes())?;
        let record = RunRecord {
            run_id: run_id.clone(),
            pipeline_hash: g.content_hash(),
            seed: opts.seed,
            cache: opts.cache,
            status: RunStatus::Running,
            created_at: now_millis(),
            ended_at: None,
            log: "logs.ndjson".into(),
            executions: 0,
            nodes: g
                .nodes
                .iter()
                .map(|n| {
                    (
                        n.id.clone(),
                        NodeRecord {
                            tool: n.tool.clone(),
                            state: NodeState::Blocked,
                            cache_key: None,
                            started_at: None,
                            ended_at: None,
                            outputs: BTreeMap::new(),
                            error: None,
                            failed_step: None,
                            verified: None,
                        },
                    )
                })
                .collect(),
        };
        self.drive(g, record, opts)
    }

    /// Continues a run from its persisted record. Nodes that already
    /// produced outputs keep them; every other node is scheduled again.
    pub fn resume(&self, run_id: &str, opts: &RunOptions) -> Result<RunRecord, EngineError> {
        let mut record = self.load_record(run_id)?;
        let body = std::fs::read_to_string(self.run_dir(run_id).join("pipeline.json"))?;
        let g = PipelineGraph::from_json(&body)?;
        for n in record.nodes.values_mut() {
            if !n.state.is_ok() {
                *n = NodeRecord {
                    tool: n.tool.clone(),
                    state: NodeState::Blocked,
                    cache_key: None,
                    started_at: None,
                    ended_at: None,
                    outputs: BTreeMap::new(),
                    error: None,
                    failed_step: None,
                    verified: None,
                };
            }
        }
        record.status = RunStatus::Running;
        record.ended_at = None;
        let opts = RunOptions {
            seed: record.seed,
            run_id: Some(run_id.into()),
            sinks: opts.sinks.clone(),
            cancel: opts.cancel.clone(),
            gpu_ids: opts.gpu_ids.clone(),
            workdir: opts.workdir.clone(),
            ..*opts
        };
        self.drive(&g, record, &opts)
    }

    fn persist(&self, record: &RunRecord) -> Result<(), EngineError> {
        let bytes = serde_json::to_vec_pretty(record).expect("record serializes");
        atomic_write(&self.run_dir(&record.run_id).join("record.json"), &bytes)?;
        Ok(())
    }

    fn transition(&self, record: &mut RunRecord, id: &str, next: NodeState) -> Result<(), EngineError> {
        let node = record.nodes.get_mut(id).expect("node in record");
        assert!(node.state.can_become(next), "illegal transition {:?} -> {next:?} for {id}", node.state);
        node.state = next;
        self.persist(record)
    }

    fn cache_path(&self, key: &str) -> PathBuf {
        self.root.join("cache").join(format!("{key}.json"))
    }

    fn cache_lookup(&self, key: &str) -> Option<BTreeMap<String, Value>> {
        let bytes = std::fs::read(self.cache_path(key)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        let complete = entry.outputs.values().all(|v| match v {
            Value::Artifact { reference, .. } => self.store.contains(&reference.hash),
            _ => true,
        });
        complete.then_some(entry.outputs)
    }

    fn cache_store(&self, key: &str, tool: &str, outputs: &BTreeMap<String, Value>) -> Result<(), EngineError> {
        let entry = CacheEntry {
            tool: tool.into(),
            outputs: outputs.clone(),
        };
        atomic_write(&self.cache_path(key), canonical_json(&entry).as_bytes())?;
        Ok(())
    }

    fn drive(&self, g: &PipelineGraph, mut record: RunRecord, opts: &RunOptions) -> Result<RunRecord, EngineError> {
        let run_id = record.run_id.clone();
        let mut sinks: Vec<Arc<dyn LogSink>> = vec![Arc::new(FileSink::append(&self.log_path(&run_id))?)];
        sinks.extend(opts.sinks.iter().cloned());
        let logger = Logger::new(&run_id, sinks);
        let work_root = opts.workdir.clone().unwrap_or_else(|| self.run_dir(&run_id).join("work"));

        let order = topo_order(g)?;
        let nodes: BTreeMap<&str, &Node> = g.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
        let mut incoming: BTreeMap<&str, Vec<(&str, &str, &str)>> = BTreeMap::new();
        for e in &g.edges {
            let ((src, out), (dst, inp)) = (e.source().expect("validated"), e.target().expect("validated"));
            incoming.entry(dst).or_default().push((inp, src, out));
        }
        self.persist(&record)?;
        logger.info(None, format!("run started: {} nodes", g.nodes.len()));

        let (job_tx, job_rx) = mpsc::channel::<Job>();
        let job_rx = Mutex::new(job_rx);
        let (res_tx, res_rx) = mpsc::channel::<JobResult>();
        let workers = opts.max_workers.max(1);

        std::thread::scope(|scope| -> Result<(), EngineError> {
            for _ in 0..workers {
                let res_tx = res_tx.clone();
                let (job_rx, logger, work_root) = (&job_rx, &logger, &work_root);
                scope.spawn(move || loop {
                    let job = match job_rx.lock().expect("job queue").recv() {
                        Ok(job) => job,
                        Err(_) => break,
                    };
                    let result = self.run_job(job, logger, work_root, opts);
                    if res_tx.send(result).is_err() {
                        break;
                    }
                });
            }
            drop(res_tx);

            let mut pending: Vec<Job> = Vec::new();
            let mut running = 0usize;
            loop {
                for id in &order {
                    let id = id.as_str();
                    if record.nodes[id].state != NodeState::Blocked {
                        continue;
                    }
                    let parents: BTreeSet<&str> =
                        incoming.get(id).map(|v| v.iter().map(|(_, s, _)| *s).collect()).unwrap_or_default();
                    let states: Vec<NodeState> = parents.iter().map(|p| record.nodes[*p].state).collect();
                    if states
                        .iter()
                        .any(|s| matches!(s, NodeState::Failed | NodeState::SkippedUpstreamFailure))
                    {
                        logger.warn(Some(id), "skipped: upstream failure");
                        self.transition(&mut record, id, NodeState::SkippedUpstreamFailure)?;
                        continue;
                    }
                    if !states.iter().all(|s| s.is_ok()) {
                        continue;
                    }
                    let node = nodes[id];
                    let (spec, backend) = self.registry.resolve(&node.tool).expect("validated tool");
                    let mut inputs = BTreeMap::new();
                    for (port, src, out) in incoming.get(id).into_iter().flatten() {
                        if let Some(v) = record.nodes[*src].outputs.get(*out) {
                            inputs.insert(port.to_string(), v.clone());
                        }
                    }
                    let seed = node_seed(record.seed, id);
                    let key = resolve_params(node, spec).ok().map(|p| cache_key(&node.tool, &p, &inputs, seed));
                    record.nodes.get_mut(id).expect("node").cache_key = key.clone();
                    self.transition(&mut record, id, NodeState::Ready)?;
                    let job = Job {
                        node: node.clone(),
                        spec: spec.clone(),
                        backend: backend.clone(),
                        inputs,
                        seed,
                        verify: false,
                    };
                    let hit = key.as_deref().filter(|_| opts.cache).and_then(|k| self.cache_lookup(k));
                    match hit {
                        Some(outputs) => {
                            let now = now_millis();
                            let n = record.nodes.get_mut(id).expect("node");
                            n.outputs = outputs;
                            n.started_at = Some(now);
                            n.ended_at = Some(now);
                            logger.info(Some(id), "cache hit");
                            self.transition(&mut record, id, NodeState::CacheHit)?;
                            if should_verify(key.as_deref().unwrap_or(""), opts.verify_fraction) {
                                pending.push(Job { verify: true, ..job });
                            }
                        }
                        None => pending.push(job),
                    }
                }

                let cancelled = opts.cancel.load(Ordering::SeqCst);
                if cancelled {
                    pending.clear();
                }
                while running < workers && !pending.is_empty() {
                    let job = pending.remove(0);
                    if !job.verify {
                        let n = record.nodes.get_mut(&job.node.id).expect("node");
                        n.started_at = Some(now_millis());
                        record.executions += 1;
                        logger.info(Some(&job.node.id), format!("started {}", job.node.tool));
                        self.transition(&mut record, &job.node.id, NodeState::Running)?;
                    }
                    job_tx.send(job).expect("workers alive");
                    running += 1;
                }
                if running == 0 {
                    break;
                }

                let result = res_rx.recv().expect("workers alive");
                running -= 1;
                let id = result.node_id.as_str();
                if result.verify {
                    let expected = &record.nodes[id].outputs;
                    let same = matches!(&result.outcome, Ok(o) if o == expected);
                    if !same {
                        logger.error(Some(id), "cache verification mismatch");
                    }
                    record.nodes.get_mut(id).expect("node").verified = Some(same);
                    self.persist(&record)?;
                    continue;
                }
                let n = record.nodes.get_mut(id).expect("node");
                n.ended_at = Some(now_millis());
                match result.outcome {
                    Ok(outputs) => {
                        if let Some(k) = n.cache_key.clone() {
                            self.cache_store(&k, &n.tool, &outputs)?;
                        }
                        n.outputs = outputs;
                        logger.info(Some(id), "succeeded");
                        self.transition(&mut record, id, NodeState::Succeeded)?;
                    }
                    Err((step, error)) => {
                        n.error = Some(error.clone());
                        n.failed_step = Some(step.clone());
                        logger.emit(
                            Some(id),
                            Level::Error,
                            error,
                            BTreeMap::from([("step".to_string(), json!(step))]),
                        );
                        self.transition(&mut record, id, NodeState::Failed)?;
                    }
                }
            }
            drop(job_tx);
            Ok(())
        })?;

        let all_ok = record.nodes.values().all(|n| n.state.is_ok());
        record.status = if all_ok {
            RunStatus::Succeeded
        } else if opts.cancel.load(Ordering::SeqCst) {
            RunStatus::Cancelled
        } else {
            RunStatus::Failed
        };
        record.ended_at = Some(now_millis());
        logger.info(None, format!("run finished: {:?}", record.status));
        self.persist(&record)?;
        Ok(record)
    }

    fn run_job(&self, job: Job, logger: &Logger, work_root: &Path, opts: &RunOptions) -> JobResult {
        let Job {
            node,
            spec,
            backend,
            inputs,
            seed,
            verify,
        } = job;
        let store = &self.store;
        let workdir = work_root.join(&node.id);
        let chain = Chain::<Work, String>::new()
            .then("set_params", |mut w: Work| {
                w.params = resolve_params(&node, &spec)?;
                Ok(w)
            })
            .then("bind", |mut w: Work| {
                for port in &spec.inputs {
                    if let Some(v) = inputs.get(&port.name) {
                        w.inputs.insert(port.name.clone(), plug(store, port, v).map_err(|e| e.to_string())?);
                    } else if port.required && !w.params.contains_key(&port.name) {
                        return Err(format!("required input {} is unbound", port.name));
                    }
                }
                Ok(w)
            })
            .then("run", |mut w: Work| {
                std::fs::create_dir_all(&workdir).map_err(|e| e.to_string())?;
                let ctx = ToolContext {
                    store,
                    node_id: node.id.clone(),
                    inputs: std::mem::take(&mut w.inputs),
                    params: std::mem::take(&mut w.params),
                    seed,
                    workdir: workdir.clone(),
                    logger,
                    gpu_ids: opts.gpu_ids.clone(),
                    cancel: opts.cancel.clone(),
                };
                w.raw = self.registry.invoke(&spec, &backend, &ctx).map_err(|e| e.to_string())?;
                Ok(w)
            })
            .then("construct", |mut w: Work| {
                for port in &spec.outputs {
                    let out = w
                        .raw
                        .remove(&port.name)
                        .ok_or_else(|| format!("output {} was declared but not produced", port.name))?;
                    w.outputs
                        .insert(port.name.clone(), construct(store, port, out).map_err(|e| e.to_string())?);
                }
                Ok(w)
            });
        let outcome = match chain.run(Work::default()) {
            Outcome::Success(w) => Ok(w.outputs),
            Outcome::Failure { error, name, .. } => Err((name, error)),
        };
        JobResult {
            node_id: node.id,
            verify,
            outcome,
        }
    }
}

fn should_verify(key: &str, fraction: f64) -> bool {
    if fraction >= 1.0 {
        return true;
    }
    if fraction <= 0.0 || key.len() < 16 {
        return false;
    }
    let v = u64::from_str_radix(&key[..16], 16).unwrap_or(u64::MAX);
    (v as f64 / u64::MAX as f64) < fraction
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_follow_the_lifecycle() {
        use NodeState::*;
        assert!(Blocked.can_become(Ready));
        assert!(Ready.can_become(CacheHit));
        assert!(!Blocked.can_become(Running));
        assert!(!Succeeded.can_become(Failed));
        assert!(!CacheHit.can_become(Running));
    }

    #[test]
    fn cache_key_depends_on_every_component() {
        let p = BTreeMap::from([("k".to_string(), Value::Int(1))]);
        let base = cache_key("a@1.0.0", &p, &BTreeMap::new(), 1);
        assert_eq!(base, cache_key("a@1.0.0", &p, &BTreeMap::new(), 1));
        assert_ne!(base, cache_key("a@1.0.1", &p, &BTreeMap::new(), 1));
        assert_ne!(base, cache_key("a@1.0.0", &BTreeMap::new(), &BTreeMap::new(), 1));
        assert_ne!(base, cache_key("a@1.0.0", &p, &BTreeMap::new(), 2));
    }

    #[test]
    fn node_seeds_differ_per_node() {
        assert_ne!(node_seed(0, "a"), node_seed(0, "b"));
        assert_eq!(node_seed(7, "a"), node_seed(7, "a"));
    }
}
