use std::sync::Arc;
use std::thread;

use ensda::config::{ModelName, StudyConfig};
use ensda::reference::run_reference;
use ensda::runner::{run_runner, RunnerExit, RunnerOptions};
use ensda::server::{self, ServerOptions};

fn l96(dir: &std::path::Path, members: usize, runners: usize, parts: usize, shards: usize) -> StudyConfig {
    StudyConfig {
        model: ModelName::Lorenz96,
        n_dynamic: 40,
        members,
        cycles: 3,
        nsteps: 5,
        runners,
        runner_parts: parts,
        server_shards: shards,
        runner_timeout_ms: 5_000,
        work_dir: dir.to_path_buf(),
        ..StudyConfig::default()
    }
}

fn run_in_process(cfg: &StudyConfig) -> String {
    let handle = server::start(cfg.clone(), ServerOptions::default()).unwrap();
    let model: Arc<dyn ensda::models::Model> = Arc::from(cfg.model_spec().build().unwrap());
    let runners: Vec<_> = (1..=cfg.runners as u32)
        .map(|id| {
            let opts = RunnerOptions::from_config(cfg, handle.registry, id);
            let model = model.clone();
            thread::spawn(move || run_runner(model, &opts))
        })
        .collect();
    let result = handle.join().unwrap();
    for r in runners {
        assert_eq!(r.join().unwrap(), RunnerExit::Stopped);
    }
    result.ensemble_hash()
}

#[test]
fn single_runner_matches_reference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = l96(dir.path(), 6, 1, 1, 1);
    assert_eq!(run_in_process(&cfg), run_reference(&cfg).unwrap().ensemble_hash());
}

#[test]
fn several_runners_match_reference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = l96(dir.path(), 9, 3, 1, 1);
    assert_eq!(run_in_process(&cfg), run_reference(&cfg).unwrap().ensemble_hash());
}

#[test]
fn parts_and_shards_match_reference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = l96(dir.path(), 8, 2, 3, 2);
    assert_eq!(run_in_process(&cfg), run_reference(&cfg).unwrap().ensemble_hash());
}

#[test]
fn more_shards_than_parts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = l96(dir.path(), 5, 2, 2, 3);
    assert_eq!(run_in_process(&cfg), run_reference(&cfg).unwrap().ensemble_hash());
}
