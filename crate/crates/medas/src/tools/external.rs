//! Subprocess tool protocol.
//!
//! The child receives one canonical JSON request on stdin:
//!
//! ```json
//! {"gpu_ids":[],"inputs":{"image":{"hash":"..","media":"MDTensor","path":"/..","semantic":"Image"},"sigma":0.5},
//!  "outputs":{"result":{"semantic":"Image"}},"params":{"k":3},"seed":42,"tool":"org.x.blur@1.0.0","workdir":"/.."}
//! ```
//!
//! and must print `{"outputs": {port: path-or-literal}, "metrics": [...]?}` on
//! stdout before exiting 0. Artifact outputs are paths to files the child
//! wrote; scalar outputs may be given as JSON literals. Each stderr line is
//! forwarded to the run log.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use medas_core::graph::{ExternalCommand, ToolSpec};
use medas_core::{canonical_json, Value};
use serde_json::{json, Map};

use super::{Output, Outputs, ToolContext, ToolError};
use crate::logging::Level;
use crate::store::sniff;

pub const DEFAULT_TIMEOUT_SECS: u64 = 3600;
const STDERR_TAIL_LINES: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ExternalError {
    #[error("NonZeroExit({code}): {stderr_tail}")]
    NonZeroExit { code: i32, stderr_tail: String },
    #[error("ProtocolViolation: {0}")]
    ProtocolViolation(String),
    #[error("Timeout after {0} s")]
    Timeout(u64),
    #[error("MissingDeclaredOutput: {0}")]
    MissingDeclaredOutput(String),
    #[error("failed to launch {program}: {reason}")]
    Spawn { program: String, reason: String },
}

fn request(spec: &ToolSpec, ctx: &ToolContext) -> Result<serde_json::Value, ToolError> {
    let mut inputs = Map::new();
    for (port, v) in &ctx.inputs {
        let entry = match v {
            Value::Artifact { reference, semantic } => json!({
                "path": ctx.store.object_path(&reference.hash),
                "hash": reference.hash,
                "media": reference.media,
                "semantic": semantic,
            }),
            Value::Table(_) | Value::Dataset(_) => {
                let r = match v {
                    Value::Table(t) => ctx.store.put_table(t)?,
                    Value::Dataset(d) => ctx.store.put_dataset(d)?,
                    _ => unreachable!(),
                };
                json!({
                    "path": ctx.store.object_path(&r.hash),
                    "hash": r.hash,
                    "media": r.media,
                    "semantic": v.semantic(),
                })
            }
            scalar => scalar.to_json_literal().unwrap_or(serde_json::Value::Null),
        };
        inputs.insert(port.clone(), entry);
    }
    let params: Map<String, serde_json::Value> = ctx
        .params
        .iter()
        .filter_map(|(k, v)| Some((k.clone(), v.to_json_literal()?)))
        .collect();
    let outputs: Map<String, serde_json::Value> = spec
        .outputs
        .iter()
        .map(|p| (p.name.clone(), json!({ "semantic": p.semantic })))
        .collect();
    Ok(json!({
        "tool": spec.qualified_id(),
        "params": params,
        "inputs": inputs,
        "outputs": outputs,
        "workdir": ctx.workdir,
        "seed": ctx.seed,
        "gpu_ids": ctx.gpu_ids,
    }))
}

fn resolve_path(workdir: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        workdir.join(p)
    }
}

fn ingest(spec: &ToolSpec, ctx: &ToolContext, stdout: &[u8]) -> Result<Outputs, ToolError> {
    let violation = |m: String| ToolError::External(ExternalError::ProtocolViolation(m));
    let resp: serde_json::Value = serde_json::from_slice(stdout).map_err(|e| violation(e.to_string()))?;
    let outputs = resp
        .get("outputs")
        .and_then(|o| o.as_object())
        .ok_or_else(|| violation("response has no outputs object".into()))?;
    if let Some(metrics) = resp.get("metrics") {
        ctx.logger.emit(
            Some(&ctx.node_id),
            Level::Info,
            "metrics",
            BTreeMap::from([("metrics".to_string(), metrics.clone())]),
        );
    }
    let mut out = Outputs::new();
    for port in &spec.outputs {
        let Some(v) = outputs.get(&port.name) else {
            return Err(ExternalError::MissingDeclaredOutput(port.name.clone()).into());
        };
        let produced = if port.semantic.is_scalar() && !v.is_string() || port.semantic == medas_core::SemanticType::Text && !looks_like_file(&ctx.workdir, v) {
            let lit = Value::from_json_literal(v).ok_or_else(|| violation(format!("output {} is not a literal", port.name)))?;
            Output::Scalar(lit)
        } else {
            let path = v.as_str().ok_or_else(|| violation(format!("output {} must be a path", port.name)))?;
            let bytes = std::fs::read(resolve_path(&ctx.workdir, path))
                .map_err(|_| ExternalError::MissingDeclaredOutput(port.name.clone()))?;
            if port.semantic.is_scalar() {
                let lit: serde_json::Value =
                    serde_json::from_slice(&bytes).map_err(|e| violation(format!("output {}: {e}", port.name)))?;
                Output::Scalar(Value::from_json_literal(&lit).ok_or_else(|| violation(format!("output {}", port.name)))?)
            } else {
                Output::Ref(ctx.store.put(&bytes, sniff(&bytes))?)
            }
        };
        out.insert(port.name.clone(), produced);
    }
    Ok(out)
}

fn looks_like_file(workdir: &Path, v: &serde_json::Value) -> bool {
    v.as_str().is_some_and(|s| resolve_path(workdir, s).is_file())
}

/// Runs an external tool to completion, honouring the timeout and the
/// cancellation flag.
pub fn run_external_tool(spec: &ToolSpec, cmd: &ExternalCommand, ctx: &ToolContext) -> Result<Outputs, ToolError> {
    let req = canonical_json(&request(spec, ctx)?);
    std::fs::create_dir_all(&ctx.workdir).map_err(|e| ToolError::Failed(e.to_string()))?;
    let mut child = Command::new(&cmd.program)
        .args(&cmd.args)
        .current_dir(&ctx.workdir)
        .env("CUDA_VISIBLE_DEVICES", ctx.gpu_ids.join(","))
        .env("MEDAS_WORKDIR", &ctx.workdir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| ExternalError::Spawn {
            program: cmd.program.clone(),
            reason: e.to_string(),
        })?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(req.as_bytes());
    });
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let stderr = child.stderr.take().expect("piped stderr");
    let tail = std::thread::scope(|scope| {
        let pump = scope.spawn(|| {
            let mut tail: Vec<String> = Vec::new();
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                ctx.logger.emit(Some(&ctx.node_id), Level::Info, &line, BTreeMap::new());
                tail.push(line);
                if tail.len() > STDERR_TAIL_LINES {
                    tail.remove(0);
                }
            }
            tail.join("\n")
        });
        let limit = Duration::from_secs(cmd.timeout_secs.unwrap_or(DEFAULT_TIMEOUT_SECS));
        let started = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait().map_err(|e| ToolError::Failed(e.to_string()))? {
                break Ok(status);
            }
            if ctx.cancel.load(Ordering::SeqCst) {
                let _ = child.kill();
                let _ = child.wait();
                break Err(ToolError::Cancelled);
            }
            if started.elapsed() >= limit {
                let _ = child.kill();
                let _ = child.wait();
                break Err(ExternalError::Timeout(limit.as_secs()).into());
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        status.map(|s| (s, pump.join().unwrap_or_default()))
    });
    let _ = writer.join();
    let stdout = reader.join().unwrap_or_default();
    let (status, tail) = tail?;
    if !status.success() {
        return Err(ExternalError::NonZeroExit {
            code: status.code().unwrap_or(-1),
            stderr_tail: tail,
        }
        .into());
    }
    ingest(spec, ctx, &stdout)
}
