use std::path::{Path, PathBuf};

use medas::engine::Engine;
use medas::study::{instantiate, StudyConfig};
use medas::tools::Registry;
use medas_core::hpo::Study;

fn bundle(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn check_study(file: &str, budget: usize) -> StudyConfig {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path(), Registry::builtin()).unwrap();
    let cfg = StudyConfig::load(&bundle("nuclei-hpo").join(file)).unwrap();
    assert_eq!(cfg.budget, budget);
    let template = cfg.check(&engine).unwrap();
    let space = cfg.search_space().unwrap();
    let mut study = Study::new(space.clone(), cfg.settings());
    for _ in 0..5 {
        let trial = study.suggest().unwrap().clone();
        let g = instantiate(&template, &space, &trial.x);
        let report = engine.validate(&g);
        assert!(report.is_ok(), "{file}: {:?}", report.diagnostics);
        study.tell(trial.trial_id, 0.5).unwrap();
    }
    cfg
}

#[test]
fn desk_scale_study_config_instantiates_valid_pipelines() {
    check_study("study.json", 10);
}

#[test]
fn reference_scale_study_config_covers_reference_point() {
    let cfg = check_study("study.reference-scale.json", 100);
    let names: Vec<&str> = cfg.space.iter().map(|d| d.name.as_str()).collect();
    assert_eq!(names, ["train.epochs", "train.learning_rate", "train.criterion", "train.model_variant"]);
    let lr = cfg.space.iter().find(|d| d.name == "train.learning_rate").unwrap();
    let json = serde_json::to_value(lr).unwrap();
    let (low, high) = (json["low"].as_f64().unwrap(), json["high"].as_f64().unwrap());
    for reference in [4.081e-3, 4.081e-4] {
        assert!(low <= reference && reference <= high);
    }
    let epochs = serde_json::to_value(&cfg.space[0]).unwrap();
    assert!(epochs["low"].as_i64().unwrap() <= 172 && 172 <= epochs["high"].as_i64().unwrap());
}
