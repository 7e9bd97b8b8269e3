use std::collections::BTreeSet;

use medas::engine::{Engine, NodeState, RunOptions, RunStatus};
use medas::logging::read_log;
use medas::tools::Registry;
use medas_core::graph::PipelineGraph;
use medas_core::Value;
use serde_json::json;

fn chain(delta_on_n3: f64) -> PipelineGraph {
    let mut g = PipelineGraph::new("chain8");
    g.add_node("n1", "medas.debug.constant@1.0.0", [("value", json!(1.0))]);
    for i in 2..=8 {
        let delta = if i == 3 { delta_on_n3 } else { 1.0 };
        g.add_node(&format!("n{i}"), "medas.debug.add@1.0.0", [("delta", json!(delta))]);
        g.connect(&format!("n{}.value", i - 1), &format!("n{i}.x"));
    }
    g
}

fn opts(seed: u64) -> RunOptions {
    RunOptions {
        seed,
        max_workers: 2,
        ..RunOptions::default()
    }
}

fn executed(r: &medas::engine::RunRecord) -> BTreeSet<String> {
    r.nodes.iter().filter(|(_, n)| n.state == NodeState::Succeeded).map(|(k, _)| k.clone()).collect()
}

#[test]
fn identical_rerun_executes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path(), Registry::builtin()).unwrap();
    let first = engine.execute(&chain(1.0), &opts(3)).unwrap();
    assert_eq!(first.status, RunStatus::Succeeded);
    assert_eq!(first.executions, 8);
    assert_eq!(first.output("n8.value"), Some(&Value::Float(8.0)));
    let second = engine.execute(&chain(1.0), &opts(3)).unwrap();
    assert_eq!(second.executions, 0);
    assert!(second.nodes.values().all(|n| n.state == NodeState::CacheHit));
    assert_eq!(second.output("n8.value"), first.output("n8.value"));
}

#[test]
fn mid_chain_change_reexecutes_exactly_the_affected_suffix() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path(), Registry::builtin()).unwrap();
    let base = engine.execute(&chain(1.0), &opts(3)).unwrap();
    let changed = engine.execute(&chain(2.5), &opts(3)).unwrap();

    // Affected set from key propagation: a node is affected iff its own
    // parameters changed or any ancestor is affected.
    let mut affected = BTreeSet::new();
    for i in 1..=8 {
        let own = i == 3;
        let parent = i > 1 && affected.contains(&format!("n{}", i - 1));
        if own || parent {
            affected.insert(format!("n{i}"));
        }
    }
    assert_eq!(executed(&changed), affected);
    assert_eq!(changed.executions, 6);
    for i in 1..=2 {
        let id = format!("n{i}");
        assert_eq!(changed.nodes[&id].cache_key, base.nodes[&id].cache_key);
    }
    assert_eq!(changed.output("n8.value"), Some(&Value::Float(9.5)));
}

#[test]
fn diamond_failure_skips_only_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path(), Registry::builtin()).unwrap();
    let mut g = PipelineGraph::new("diamond");
    g.add_node("a", "medas.debug.constant@1.0.0", [("value", json!(1.0))]);
    g.add_node("b", "medas.debug.fail@1.0.0", []);
    g.add_node("c", "medas.debug.add@1.0.0", []);
    g.add_node("d", "medas.debug.join@1.0.0", []);
    g.connect("a.value", "b.x");
    g.connect("a.value", "c.x");
    g.connect("b.value", "d.a");
    g.connect("c.value", "d.b");
    let r = engine.execute(&g, &opts(0)).unwrap();
    assert_eq!(r.status, RunStatus::Failed);
    assert_eq!(r.nodes["a"].state, NodeState::Succeeded);
    assert_eq!(r.nodes["b"].state, NodeState::Failed);
    assert_eq!(r.nodes["b"].failed_step.as_deref(), Some("run"));
    assert_eq!(r.nodes["c"].state, NodeState::Succeeded);
    assert_eq!(r.nodes["d"].state, NodeState::SkippedUpstreamFailure);

    let log = read_log(&engine.log_path(&r.run_id)).unwrap();
    let err = log
        .iter()
        .find(|e| e.node_id.as_deref() == Some("b") && e.level == medas::logging::Level::Error)
        .expect("error event for b");
    assert!(err.message.contains("deliberate failure"));
    assert!(err.ts <= log.last().unwrap().ts);
}

#[test]
fn forced_verification_reproduces_cached_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path(), Registry::builtin()).unwrap();
    engine.execute(&chain(1.0), &opts(5)).unwrap();
    let verified = engine
        .execute(
            &chain(1.0),
            &RunOptions {
                verify_fraction: 1.0,
                ..opts(5)
            },
        )
        .unwrap();
    assert_eq!(verified.executions, 0);
    assert!(verified.nodes.values().all(|n| n.verified == Some(true)));
}

#[test]
fn seed_changes_every_cache_key() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path(), Registry::builtin()).unwrap();
    engine.execute(&chain(1.0), &opts(1)).unwrap();
    let other = engine.execute(&chain(1.0), &opts(2)).unwrap();
    assert_eq!(other.executions, 8);
}

#[test]
fn no_cache_option_always_executes() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path(), Registry::builtin()).unwrap();
    engine.execute(&chain(1.0), &opts(1)).unwrap();
    let again = engine
        .execute(
            &chain(1.0),
            &RunOptions {
                cache: false,
                ..opts(1)
            },
        )
        .unwrap();
    assert_eq!(again.executions, 8);
}

#[test]
fn record_is_persisted_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path(), Registry::builtin()).unwrap();
    let r = engine.execute(&chain(1.0), &opts(9)).unwrap();
    assert_eq!(engine.load_record(&r.run_id).unwrap(), r);
    let resumed = engine.resume(&r.run_id, &opts(0)).unwrap();
    assert_eq!(resumed.executions, r.executions);
    assert_eq!(resumed.output("n8.value"), r.output("n8.value"));
}

#[test]
fn invalid_pipeline_is_rejected_before_execution() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path(), Registry::builtin()).unwrap();
    let mut g = PipelineGraph::new("loop");
    g.add_node("a", "medas.debug.add@1.0.0", []);
    g.add_node("b", "medas.debug.add@1.0.0", []);
    g.connect("a.value", "b.x");
    g.connect("b.value", "a.x");
    assert!(matches!(engine.execute(&g, &opts(0)), Err(medas::engine::EngineError::Invalid(_))));
}
