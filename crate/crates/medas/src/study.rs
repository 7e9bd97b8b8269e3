//! Hyper-parameter studies over pipeline templates.
//!
//! A study config names a pipeline, a search space whose dimension names
//! are parameter slots (`"<node>.<param>"`), and an objective output slot.
//! Each trial instantiates the template with the suggested values, runs it
//! through the engine and reports the objective back to the optimizer.

use std::path::{Path, PathBuf};

use medas_core::graph::PipelineGraph;
use medas_core::hpo::{Acquisition, Dimension, HpValue, SearchSpace, Strategy, Study, StudySettings, SurrogateKind};
use serde::{Deserialize, Serialize};

use crate::csvio::write_table;
use crate::engine::{Engine, RunOptions};
use crate::store::atomic_write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PipelineSource {
    Path(PathBuf),
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub name: String,
    pub pipeline: PipelineSource,
    pub space: Vec<Dimension>,
    /// Output slot `"<node>.<port>"` holding a numeric score.
    pub objective: String,
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub surrogate: SurrogateKind,
    #[serde(default)]
    pub acquisition: Acquisition,
    #[serde(default = "yes")]
    pub maximize: bool,
    /// Seed passed to every pipeline run.
    #[serde(default)]
    pub run_seed: u64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, thiserror::Error)]
pub enum StudyRunError {
    #[error("study config: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error(transparent)]
    Study(#[from] medas_core::hpo::StudyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<StudyConfig, StudyRunError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: StudyConfig = serde_json::from_str(&text).map_err(|e| StudyRunError::Config(e.to_string()))?;
        if let PipelineSource::Path(p) = &cfg.pipeline {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.pipeline = PipelineSource::Path(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn template(&self) -> Result<PipelineGraph, StudyRunError> {
        let text = match &self.pipeline {
            PipelineSource::Path(p) => std::fs::read_to_string(p)?,
            PipelineSource::Inline(v) => v.to_string(),
        };
        PipelineGraph::from_json(&text).map_err(|e| StudyRunError::Config(e.to_string()))
    }

    pub fn search_space(&self) -> Result<SearchSpace, StudyRunError> {
        SearchSpace::new(self.space.clone()).map_err(|e| StudyRunError::Config(e.to_string()))
    }

    pub fn settings(&self) -> StudySettings {
        StudySettings {
            strategy: self.strategy,
            surrogate: self.surrogate,
            acquisition: self.acquisition,
            seed: self.seed,
            budget: Some(self.budget),
            maximize: self.maximize,
        }
    }

    /// Checks that every slot addresses an existing node and that the
    /// template validates.
    pub fn check(&self, engine: &Engine) -> Result<PipelineGraph, StudyRunError> {
        let g = self.template()?;
        for d in &self.space {
            let (node, _) = d
                .name
                .split_once('.')
                .ok_or_else(|| StudyRunError::Config(format!("slot {} is not <node>.<param>", d.name)))?;
            if g.node(node).is_none() {
                return Err(StudyRunError::Config(format!("slot {} names an unknown node", d.name)));
            }
        }
        if g.node(self.objective.split_once('.').map_or("", |(n, _)| n)).is_none() {
            return Err(StudyRunError::Config(format!("objective {} names an unknown node", self.objective)));
        }
        self.search_space()?;
        let report = engine.validate(&g);
        if !report.is_ok() {
            return Err(crate::engine::EngineError::Invalid(report).into());
        }
        Ok(g)
    }
}

/// Template with the trial's values written into their parameter slots.
pub fn instantiate(template: &PipelineGraph, space: &SearchSpace, x: &[HpValue]) -> PipelineGraph {
    let mut g = template.clone();
    for (name, v) in space.names().zip(x) {
        let (node, param) = name.split_once('.').expect("checked slot");
        if let Some(n) = g.node_mut(node) {
            n.params.insert(param.into(), v.to_json());
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub config: StudyConfig,
    pub study: Study,
    /// Engine run id of each trial, by trial order.
    pub runs: Vec<String>,
}

impl StudyRecord {
    pub fn dir(root: &Path, id: &str) -> PathBuf {
        root.join("studies").join(id)
    }

    pub fn load(root: &Path, id: &str) -> Result<StudyRecord, StudyRunError> {
        let bytes = std::fs::read(Self::dir(root, id).join("study.json"))?;
        serde_json::from_slice(&bytes).map_err(|e| StudyRunError::Config(e.to_string()))
    }

    pub fn save(&self, root: &Path) -> Result<(), StudyRunError> {
        let dir = Self::dir(root, &self.study_id);
        std::fs::create_dir_all(&dir)?;
        atomic_write(&dir.join("study.json"), &serde_json::to_vec_pretty(self).expect("record serializes"))?;
        atomic_write(&dir.join("trials.csv"), &write_table(&self.study.trials_table()))?;
        Ok(())
    }

    pub fn trials_csv(&self) -> String {
        String::from_utf8(write_table(&self.study.trials_table())).expect("CSV is UTF-8")
    }
}

/// Runs all remaining trials of a study, persisting after each one. Failed
/// pipelines and missing objectives mark the trial failed and continue.
pub fn run_study(
    engine: &Engine,
    record: &mut StudyRecord,
    opts: &RunOptions,
    mut on_trial: impl FnMut(&StudyRecord),
) -> Result<(), StudyRunError> {
    let template = record.config.check(engine)?;
    record.save(engine.root())?;
    while !record.study.is_closed() {
        if opts.cancel.load(std::sync::atomic::Ordering::SeqCst) {
            break;
        }
        let trial = record.study.suggest()?.clone();
        record.study.start(trial.trial_id)?;
        let g = instantiate(&template, &record.study.space, &trial.x);
        let run_opts = RunOptions {
            seed: record.config.run_seed,
            run_id: Some(format!("{}-t{}", record.study_id, trial.trial_id)),
            sinks: opts.sinks.clone(),
            cancel: opts.cancel.clone(),
            gpu_ids: opts.gpu_ids.clone(),
            workdir: None,
            ..*opts
        };
        let run = engine.execute(&g, &run_opts)?;
        record.runs.push(run.run_id.clone());
        let y = run.output(&record.config.objective).and_then(|v| v.as_f64());
        match (run.is_success(), y) {
            (true, Some(y)) if y.is_finite() => record.study.tell(trial.trial_id, y)?,
            (true, _) => record.study.fail(trial.trial_id, "objective missing or not finite")?,
            (false, _) => {
                let reason = run
                    .nodes
                    .iter()
                    .find_map(|(id, n)| n.error.as_ref().map(|e| format!("{id}: {e}")))
                    .unwrap_or_else(|| "pipeline failed".into());
                record.study.fail(trial.trial_id, &reason)?;
            }
        }
        record.save(engine.root())?;
        on_trial(record);
    }
    Ok(())
}

/// Creates a study record and runs it to completion.
pub fn run_config(engine: &Engine, config: StudyConfig, opts: &RunOptions) -> Result<StudyRecord, StudyRunError> {
    let space = config.search_space()?;
    let study = Study::new(space, config.settings());
    let mut record = StudyRecord {
        study_id: uuid::Uuid::new_v4().simple().to_string(),
        config,
        study,
        runs: Vec::new(),
    };
    run_study(engine, &mut record, opts, |_| {})?;
    Ok(record)
}
