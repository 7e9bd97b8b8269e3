//! Blocking HTTP client for the task service.

use std::io::{BufRead, BufReader};

use serde_json::{json, Value};
use ureq::Agent;

use medas_core::scheduler::ResourceRequest;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: Value },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Transport(_) => None,
        }
    }
}

impl From<ureq::Error> for ClientError {
    fn from(e: ureq::Error) -> ClientError {
        ClientError::Transport(e.to_string())
    }
}

pub struct Client {
    base: String,
    token: String,
    agent: Agent,
}

type Resp = ureq::http::Response<ureq::Body>;

impl Client {
    pub fn new(base: &str, token: &str) -> Client {
        let agent: Agent = Agent::config_builder().http_status_as_error(false).build().into();
        Client {
            base: base.trim_end_matches('/').to_string(),
            token: token.to_string(),
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn bearer(&self) -> String {
        format!("Bearer {}", self.token)
    }

    fn check(mut resp: Resp) -> Result<Resp, ClientError> {
        let status = resp.status().as_u16();
        if (200..300).contains(&status) {
            return Ok(resp);
        }
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
        Err(ClientError::Status { status, body })
    }

    fn get(&self, path: &str) -> Result<Resp, ClientError> {
        let resp = self.agent.get(&self.url(path)).header("Authorization", &self.bearer()).call()?;
        Self::check(resp)
    }

    fn post(&self, path: &str, body: &[u8], idempotency_key: Option<&str>) -> Result<Resp, ClientError> {
        let mut req = self
            .agent
            .post(&self.url(path))
            .header("Authorization", &self.bearer())
            .header("Content-Type", "application/json");
        if let Some(k) = idempotency_key {
            req = req.header("Idempotency-Key", k);
        }
        Self::check(req.send(body)?)
    }

    fn json(mut resp: Resp) -> Result<Value, ClientError> {
        resp.body_mut().read_json().map_err(ClientError::from)
    }

    pub fn get_json(&self, path: &str) -> Result<Value, ClientError> {
        Self::json(self.get(path)?)
    }

    pub fn post_json(&self, path: &str, body: &Value, idempotency_key: Option<&str>) -> Result<Value, ClientError> {
        Self::json(self.post(path, body.to_string().as_bytes(), idempotency_key)?)
    }

    pub fn health(&self) -> Result<Value, ClientError> {
        self.get_json("/v1/health")
    }

    /// Stores a pipeline and returns its id.
    pub fn create_pipeline(&self, pipeline_json: &str) -> Result<String, ClientError> {
        let v = Self::json(self.post("/v1/pipelines", pipeline_json.as_bytes(), None)?)?;
        Ok(v["pipeline_id"].as_str().unwrap_or_default().to_string())
    }

    pub fn submit(
        &self,
        pipeline_id: &str,
        request: ResourceRequest,
        seed: u64,
        idempotency_key: Option<&str>,
    ) -> Result<Value, ClientError> {
        let body = json!({ "pipeline_id": pipeline_id, "request": request, "seed": seed });
        self.post_json("/v1/tasks", &body, idempotency_key)
    }

    pub fn task(&self, id: &str) -> Result<Value, ClientError> {
        self.get_json(&format!("/v1/tasks/{id}"))
    }

    pub fn kill(&self, id: &str) -> Result<Value, ClientError> {
        Self::json(self.post(&format!("/v1/tasks/{id}/kill"), b"", None)?)
    }

    /// Calls `on_line` for each ndjson log line as it arrives.
    pub fn logs(&self, id: &str, follow: bool, mut on_line: impl FnMut(&str)) -> Result<(), ClientError> {
        let path = format!("/v1/tasks/{id}/logs{}", if follow { "?follow=1" } else { "" });
        let resp = self.get(&path)?;
        let reader = BufReader::new(resp.into_body().into_reader());
        for line in reader.lines() {
            let line = line.map_err(|e| ClientError::Transport(e.to_string()))?;
            if !line.is_empty() {
                on_line(&line);
            }
        }
        Ok(())
    }

    pub fn create_study(&self, config: &Value) -> Result<String, ClientError> {
        let v = self.post_json("/v1/studies", config, None)?;
        Ok(v["study_id"].as_str().unwrap_or_default().to_string())
    }

    pub fn study(&self, id: &str) -> Result<Value, ClientError> {
        self.get_json(&format!("/v1/studies/{id}"))
    }

    pub fn study_trials_csv(&self, id: &str) -> Result<String, ClientError> {
        let mut resp = self.get(&format!("/v1/studies/{id}/trials"))?;
        resp.body_mut().read_to_string().map_err(ClientError::from)
    }

    pub fn artifact(&self, hash: &str) -> Result<Vec<u8>, ClientError> {
        let mut resp = self.get(&format!("/v1/artifacts/{hash}"))?;
        resp.body_mut().with_config().limit(u64::MAX).read_to_vec().map_err(ClientError::from)
    }
}
