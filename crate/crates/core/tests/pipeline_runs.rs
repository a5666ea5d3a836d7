use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use imlx::config::RunConfig;
use imlx::pipeline::{run_pipeline, stage_ensemble, stage_evaluate, stage_predict, stage_preprocess, stage_split, stage_synth, stage_train, RunLayout};

fn small_config(out: &Path, seed: u64) -> RunConfig {
    let text = format!(
        "seed = {seed}\nsynth.count = 120\nsynth.side = 64\ntrain.side = 32\ntrain.hidden = 8\n\
         train.max_epochs = 3\ntrain.patience = 2\nsupport_threshold = 8\nexplain.samples = 3\noutput = {}\n",
        out.display()
    );
    RunConfig::parse(&text, PathBuf::from("."), "small.cfg").unwrap()
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 4);
    let first = run_pipeline(&cfg, Some(1)).unwrap();
    let a = snapshot(dir.path());
    for sub in ["models", "predictions", "ensemble", "results", "explain", "records"] {
        assert!(a.keys().any(|k| k.starts_with(sub)), "{sub} missing");
    }
    let second = run_pipeline(&cfg, None).unwrap();
    let b = snapshot(dir.path());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(b[k] == *v, "{} differs", k.display());
    }
    assert_eq!(first.checkpoints, second.checkpoints);
    assert!(!a.keys().any(|k| k.file_name().unwrap().to_string_lossy().starts_with(".imlx-")));
}

#[test]
fn stage_by_stage_matches_pipeline() {
    let whole = tempfile::tempdir().unwrap();
    run_pipeline(&small_config(whole.path(), 9), Some(1)).unwrap();
    let parts = tempfile::tempdir().unwrap();
    let cfg = small_config(parts.path(), 9);
    let layout = RunLayout::new(parts.path());
    stage_synth(&cfg, &layout).unwrap();
    stage_preprocess(&cfg, &layout, Some(1)).unwrap();
    stage_split(&cfg, &layout).unwrap();
    stage_train(&cfg, &layout, Some(1)).unwrap();
    stage_predict(&cfg, &layout).unwrap();
    stage_ensemble(&cfg, &layout).unwrap();
    stage_evaluate(&cfg, &layout).unwrap();
    let (a, b) = (snapshot(whole.path()), snapshot(parts.path()));
    for (k, v) in &b {
        if !k.starts_with("records") {
            assert!(a[k] == *v, "{} differs", k.display());
        }
    }
}

#[test]
fn missing_predictions_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let layout = RunLayout::new(dir.path());
    stage_synth(&cfg, &layout).unwrap();
    stage_split(&cfg, &layout).unwrap();
    let err = stage_evaluate(&cfg, &layout).unwrap_err();
    assert!(err.to_string().contains("member0.csv"), "{err}");
}

#[test]
fn seed_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 2);
    cfg.seed = None;
    assert!(run_pipeline(&cfg, Some(1)).is_err());
}
