//! Tool contracts, pipeline graphs, the canonical pipeline file format and
//! static validation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_json, sha256_hex};
use crate::scheduler::ResourceRequest;
use crate::semantic::{coerce, SemanticType, Value};

pub const PIPELINE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Input,
    PreProcess,
    Augment,
    Model,
    PostProcess,
    Metric,
    Visualize,
    DatasetMgmt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

/// How an input plug adapts incoming values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CoercionPolicy {
    /// Apply the coercion lattice.
    #[default]
    Lattice,
    /// Accept only the exact declared type.
    Exact,
}

/// How an output constructor materializes a kernel result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MaterializePolicy {
    /// Scalars are kept inline in the run record.
    Inline,
    /// The result is written to the artifact store.
    #[default]
    Store,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortSpec {
    pub name: String,
    pub direction: Direction,
    pub semantic: SemanticType,
    #[serde(default = "yes")]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plug_policy: Option<CoercionPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constructor_policy: Option<MaterializePolicy>,
}

fn yes() -> bool {
    true
}

impl PortSpec {
    pub fn input(name: &str, semantic: SemanticType) -> PortSpec {
        PortSpec {
            name: name.into(),
            direction: Direction::In,
            semantic,
            required: true,
            plug_policy: Some(CoercionPolicy::Lattice),
            constructor_policy: None,
        }
    }

    pub fn optional_input(name: &str, semantic: SemanticType) -> PortSpec {
        PortSpec {
            required: false,
            ..PortSpec::input(name, semantic)
        }
    }

    pub fn output(name: &str, semantic: SemanticType) -> PortSpec {
        let policy = if semantic.is_scalar() {
            MaterializePolicy::Inline
        } else {
            MaterializePolicy::Store
        };
        PortSpec {
            name: name.into(),
            direction: Direction::Out,
            semantic,
            required: true,
            plug_policy: None,
            constructor_policy: Some(policy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub semantic: SemanticType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<serde_json::Value>,
    /// Inclusive numeric bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    /// Allowed values of a `Text` parameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

impl ParamSpec {
    pub fn new(name: &str, semantic: SemanticType, default: serde_json::Value) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            semantic,
            default: (!default.is_null()).then_some(default),
            range: None,
            choices: None,
            description: String::new(),
        }
    }

    pub fn with_range(mut self, low: f64, high: f64) -> ParamSpec {
        self.range = Some([low, high]);
        self
    }

    pub fn with_choices(mut self, choices: &[&str]) -> ParamSpec {
        self.choices = Some(choices.iter().map(|c| c.to_string()).collect());
        self
    }

    pub fn describe(mut self, text: &str) -> ParamSpec {
        self.description = text.into();
        self
    }

    /// Coerces a JSON literal to this parameter's type and checks bounds.
    pub fn bind(&self, literal: &serde_json::Value) -> Result<Value, String> {
        let raw = Value::from_json_literal(literal)
            .ok_or_else(|| format!("parameter {} needs a scalar literal", self.name))?;
        let v = coerce(&raw, self.semantic).map_err(|e| e.to_string())?;
        if let (Some([lo, hi]), Some(x)) = (self.range, v.as_f64()) {
            if !(lo..=hi).contains(&x) {
                return Err(format!("parameter {} = {x} outside [{lo}, {hi}]", self.name));
            }
        }
        if let (Some(choices), Value::Text(t)) = (&self.choices, &v) {
            if !choices.contains(t) {
                return Err(format!("parameter {} = {t:?} not one of {choices:?}", self.name));
            }
        }
        Ok(v)
    }
}

/// External executable backing a tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_id: String,
    pub version: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub inputs: Vec<PortSpec>,
    #[serde(default)]
    pub outputs: Vec<PortSpec>,
    #[serde(default)]
    pub resource_hint: ResourceRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executable: Option<ExternalCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ToolSpecError {
    #[error("invalid tool id {0:?}: expected reverse-dot identifier")]
    InvalidId(String),
    #[error("invalid version {0:?}: expected MAJOR.MINOR.PATCH")]
    InvalidVersion(String),
    #[error("name {0:?} is declared twice")]
    DuplicateName(String),
    #[error("port {0:?} has the wrong direction")]
    WrongDirection(String),
    #[error("default of {name}: {reason}")]
    InvalidDefault { name: String, reason: String },
    #[error("tool {0} is already registered")]
    AlreadyRegistered(String),
}

pub fn is_reverse_dot_id(s: &str) -> bool {
    let segments: Vec<&str> = s.split('.').collect();
    segments.len() >= 2
        && segments.iter().all(|seg| {
            !seg.is_empty()
                && seg.starts_with(|c: char| c.is_ascii_lowercase())
                && seg.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        })
}

pub fn is_semver(s: &str) -> bool {
    let parts: Vec<&str> = s.split('.').collect();
    parts.len() == 3
        && parts
            .iter()
            .all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_digit()))
}

impl ToolSpec {
    pub fn qualified_id(&self) -> String {
        format!("{}@{}", self.tool_id, self.version)
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn input(&self, name: &str) -> Option<&PortSpec> {
        self.inputs.iter().find(|p| p.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&PortSpec> {
        self.outputs.iter().find(|p| p.name == name)
    }

    /// Checks identifier syntax, name uniqueness per namespace and that
    /// every default satisfies its own bounds.
    pub fn check(&self) -> Result<(), ToolSpecError> {
        if !is_reverse_dot_id(&self.tool_id) {
            return Err(ToolSpecError::InvalidId(self.tool_id.clone()));
        }
        if !is_semver(&self.version) {
            return Err(ToolSpecError::InvalidVersion(self.version.clone()));
        }
        // Params and input ports share the binding namespace.
        let mut bindable = BTreeSet::new();
        for name in self
            .params
            .iter()
            .map(|p| &p.name)
            .chain(self.inputs.iter().map(|p| &p.name))
        {
            if !bindable.insert(name) {
                return Err(ToolSpecError::DuplicateName(name.clone()));
            }
        }
        let mut outs = BTreeSet::new();
        for p in &self.outputs {
            if !outs.insert(&p.name) {
                return Err(ToolSpecError::DuplicateName(p.name.clone()));
            }
            if p.direction != Direction::Out {
                return Err(ToolSpecError::WrongDirection(p.name.clone()));
            }
        }
        if let Some(p) = self.inputs.iter().find(|p| p.direction != Direction::In) {
            return Err(ToolSpecError::WrongDirection(p.name.clone()));
        }
        for p in &self.params {
            if let Some(d) = &p.default {
                p.bind(d).map_err(|reason| ToolSpecError::InvalidDefault {
                    name: p.name.clone(),
                    reason,
                })?;
            }
        }
        Ok(())
    }
}

/// Registry of tool contracts keyed by `(tool_id, version)`.
#[derive(Debug, Clone, Default)]
pub struct ToolCatalog {
    specs: BTreeMap<(String, String), ToolSpec>,
}

impl ToolCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: ToolSpec) -> Result<(), ToolSpecError> {
        spec.check()?;
        let key = (spec.tool_id.clone(), spec.version.clone());
        if self.specs.contains_key(&key) {
            return Err(ToolSpecError::AlreadyRegistered(spec.qualified_id()));
        }
        self.specs.insert(key, spec);
        Ok(())
    }

    pub fn get(&self, tool_id: &str, version: &str) -> Option<&ToolSpec> {
        self.specs.get(&(tool_id.to_string(), version.to_string()))
    }

    /// Looks up `"<id>@<version>"`.
    pub fn resolve(&self, qualified: &str) -> Option<&ToolSpec> {
        let (id, version) = qualified.split_once('@')?;
        self.get(id, version)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolSpec> {
        self.specs.values()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    /// `"<tool_id>@<version>"`.
    pub tool: String,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    /// `"<node_id>.<out_port>"`.
    pub from: String,
    /// `"<node_id>.<in_port>"`.
    pub to: String,
}

impl Edge {
    pub fn new(from: &str, to: &str) -> Edge {
        Edge {
            from: from.into(),
            to: to.into(),
        }
    }

    pub fn source(&self) -> Option<(&str, &str)> {
        self.from.split_once('.')
    }

    pub fn target(&self) -> Option<(&str, &str)> {
        self.to.split_once('.')
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineGraph {
    pub name: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct PipelineFile {
    version: u32,
    name: String,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("pipeline JSON is malformed: {0}")]
    Malformed(String),
    #[error("unsupported pipeline format version {0}")]
    UnsupportedVersion(u32),
    #[error("graph contains a cycle through {0}")]
    CycleDetected(String),
}

impl PipelineGraph {
    pub fn new(name: &str) -> Self {
        PipelineGraph {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn add_node(
        &mut self,
        id: &str,
        tool: &str,
        params: impl IntoIterator<Item = (&'static str, serde_json::Value)>,
    ) -> &mut Self {
        self.nodes.push(Node {
            id: id.into(),
            tool: tool.into(),
            params: params.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        });
        self
    }

    pub fn connect(&mut self, from: &str, to: &str) -> &mut Self {
        self.edges.push(Edge::new(from, to));
        self
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Canonical file form: keys sorted, no insignificant whitespace, nodes
    /// ordered by id and edges by `(from, to)`.
    pub fn to_canonical_json(&self) -> String {
        let mut nodes = self.nodes.clone();
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut edges = self.edges.clone();
        edges.sort();
        canonical_json(&PipelineFile {
            version: PIPELINE_FORMAT_VERSION,
            name: self.name.clone(),
            nodes,
            edges,
            metadata: self.metadata.clone(),
        })
    }

    /// SHA-256 of the canonical form.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_canonical_json().as_bytes())
    }

    pub fn from_json(text: &str) -> Result<PipelineGraph, GraphError> {
        let file: PipelineFile =
            serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
        if file.version != PIPELINE_FORMAT_VERSION {
            return Err(GraphError::UnsupportedVersion(file.version));
        }
        Ok(PipelineGraph {
            name: file.name,
            nodes: file.nodes,
            edges: file.edges,
            metadata: file.metadata,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiagnosticCode {
    EmptyPipeline,
    InvalidIdentifier,
    DuplicateNode,
    UnknownTool,
    UnknownNode,
    UnknownPort,
    UnknownParam,
    InvalidParam,
    DuplicateEdge,
    MultipleIncoming,
    TypeMismatch,
    UnboundRequiredPort,
    CycleDetected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// Node id, or `"a.out->b.in"` for an edge.
    pub subject: String,
    pub code: DiagnosticCode,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.diagnostics.is_empty()
    }

    pub fn has(&self, code: DiagnosticCode) -> bool {
        self.diagnostics.iter().any(|d| d.code == code)
    }

    fn push(&mut self, subject: impl Into<String>, code: DiagnosticCode, message: String) {
        self.diagnostics.push(Diagnostic {
            subject: subject.into(),
            code,
            message,
        });
    }
}

fn is_node_id(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Statically checks a graph against the catalog without executing it.
/// An empty report means every graph invariant holds.
pub fn validate_graph(g: &PipelineGraph, catalog: &ToolCatalog) -> ValidationReport {
    use DiagnosticCode::*;
    let mut report = ValidationReport::default();
    if g.nodes.is_empty() {
        report.push(g.name.as_str(), EmptyPipeline, "pipeline has no nodes".into());
    }

    let mut specs: BTreeMap<&str, &ToolSpec> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for node in &g.nodes {
        if !is_node_id(&node.id) {
            report.push(node.id.as_str(), InvalidIdentifier, format!("invalid node id {:?}", node.id));
        }
        if !seen.insert(node.id.as_str()) {
            report.push(node.id.as_str(), DuplicateNode, format!("node id {} is used twice", node.id));
            continue;
        }
        match catalog.resolve(&node.tool) {
            Some(spec) => {
                specs.insert(node.id.as_str(), spec);
            }
            None => report.push(node.id.as_str(), UnknownTool, format!("unknown tool {}", node.tool)),
        }
    }

    for node in &g.nodes {
        let Some(spec) = specs.get(node.id.as_str()) else { continue };
        for (name, literal) in &node.params {
            if let Some(param) = spec.param(name) {
                if let Err(reason) = param.bind(literal) {
                    report.push(node.id.as_str(), InvalidParam, reason);
                }
            } else if let Some(port) = spec.input(name) {
                if !port.semantic.is_scalar() {
                    report.push(
                        node.id.as_str(),
                        TypeMismatch,
                        format!("input {name} of type {} cannot take a literal", port.semantic),
                    );
                    continue;
                }
                let ok = Value::from_json_literal(literal)
                    .map(|v| coerce(&v, port.semantic).is_ok())
                    .unwrap_or(false);
                if !ok {
                    report.push(
                        node.id.as_str(),
                        InvalidParam,
                        format!("literal for input {name} does not coerce to {}", port.semantic),
                    );
                }
            } else {
                report.push(node.id.as_str(), UnknownParam, format!("{} has no parameter {name}", node.tool));
            }
        }
    }

    let mut edge_seen = BTreeSet::new();
    let mut incoming: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    let mut adjacency: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for edge in &g.edges {
        let subject = edge.to_string();
        if !edge_seen.insert((edge.from.as_str(), edge.to.as_str())) {
            report.push(subject, DuplicateEdge, "edge declared twice".into());
            continue;
        }
        let (Some((src, out_port)), Some((dst, in_port))) = (edge.source(), edge.target()) else {
            report.push(subject, InvalidIdentifier, "edge endpoints must be <node>.<port>".into());
            continue;
        };
        let mut resolvable = true;
        for id in [src, dst] {
            if !seen.contains(id) {
                report.push(subject.clone(), UnknownNode, format!("no node {id}"));
                resolvable = false;
            }
        }
        if !resolvable {
            continue;
        }
        adjacency.entry(src).or_default().insert(dst);
        let (Some(src_spec), Some(dst_spec)) = (specs.get(src), specs.get(dst)) else { continue };
        let out = src_spec.output(out_port);
        let inp = dst_spec.input(in_port);
        if out.is_none() {
            report.push(subject.clone(), UnknownPort, format!("{src} has no output {out_port}"));
        }
        if inp.is_none() {
            report.push(subject.clone(), UnknownPort, format!("{dst} has no input {in_port}"));
        }
        let (Some(out), Some(inp)) = (out, inp) else { continue };
        *incoming.entry((dst, in_port)).or_default() += 1;
        let compatible = match inp.plug_policy.unwrap_or_default() {
            CoercionPolicy::Lattice => inp.semantic.accepts(out.semantic),
            CoercionPolicy::Exact => inp.semantic == out.semantic,
        };
        if !compatible {
            report.push(
                subject,
                TypeMismatch,
                format!("{} output cannot feed {} input", out.semantic, inp.semantic),
            );
        }
    }
    for ((dst, port), n) in &incoming {
        if *n > 1 {
            report.push(*dst, MultipleIncoming, format!("input {port} has {n} incoming edges"));
        }
    }

    for node in &g.nodes {
        let Some(spec) = specs.get(node.id.as_str()) else { continue };
        for port in spec.inputs.iter().filter(|p| p.required) {
            let wired = incoming.contains_key(&(node.id.as_str(), port.name.as_str()));
            if !wired && !node.params.contains_key(&port.name) {
                report.push(
                    node.id.as_str(),
                    UnboundRequiredPort,
                    format!("required input {} is not bound", port.name),
                );
            }
        }
    }

    let ids: Vec<&str> = seen.iter().copied().collect();
    if let Err(GraphError::CycleDetected(at)) = kahn(&ids, &adjacency) {
        report.push(at, CycleDetected, "graph is not acyclic".into());
    }
    report
}

fn kahn<'a>(
    ids: &[&'a str],
    adjacency: &BTreeMap<&'a str, BTreeSet<&'a str>>,
) -> Result<Vec<&'a str>, GraphError> {
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|&id| (id, 0)).collect();
    for targets in adjacency.values() {
        for t in targets {
            if let Some(d) = indegree.get_mut(t) {
                *d += 1;
            }
        }
    }
    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| id)
        .collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(id) = ready.pop_first() {
        order.push(id);
        for t in adjacency.get(id).into_iter().flatten() {
            let d = indegree.get_mut(t).expect("edge target exists");
            *d -= 1;
            if *d == 0 {
                ready.insert(t);
            }
        }
    }
    if order.len() < ids.len() {
        let stuck = indegree
            .iter()
            .find(|(id, &d)| d > 0 && !order.contains(id))
            .map(|(id, _)| id.to_string())
            .unwrap_or_default();
        return Err(GraphError::CycleDetected(stuck));
    }
    Ok(order)
}

/// Deterministic topological order; among ready nodes the lexicographically
/// smallest id goes first.
pub fn topo_order(g: &PipelineGraph) -> Result<Vec<String>, GraphError> {
    let ids: Vec<&str> = g.nodes.iter().map(|n| n.id.as_str()).collect();
    let known: BTreeSet<&str> = ids.iter().copied().collect();
    let mut adjacency: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in &g.edges {
        if let (Some((s, _)), Some((t, _))) = (e.source(), e.target()) {
            if known.contains(s) && known.contains(t) {
                adjacency.entry(s).or_default().insert(t);
            }
        }
    }
    Ok(kahn(&ids, &adjacency)?.into_iter().map(String::from).collect())
}

/// Effective parameter values of a node: declared defaults overridden by
/// literals, all coerced to their declared types. Input-port literals are
/// returned under the port name.
pub fn resolve_params(node: &Node, spec: &ToolSpec) -> Result<BTreeMap<String, Value>, String> {
    let mut out = BTreeMap::new();
    for p in &spec.params {
        let literal = node.params.get(&p.name).or(p.default.as_ref());
        if let Some(lit) = literal {
            out.insert(p.name.clone(), p.bind(lit)?);
        }
    }
    for port in spec.inputs.iter().filter(|p| p.semantic.is_scalar()) {
        if let Some(lit) = node.params.get(&port.name) {
            let v = Value::from_json_literal(lit)
                .ok_or_else(|| format!("input {} needs a scalar literal", port.name))?;
            out.insert(port.name.clone(), coerce(&v, port.semantic).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}
