use std::path::Path;

use obliviate::pipeline::{emit_report, paths, run_pipeline, ExperimentConfig, Manifest, RunOptions, Stage, Status};

fn tiny(out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
out_dir = "{}"
[corpus]
scenes = 60
bench_scenes = 80
bench_pairs = 20
heldout_captions = 20
[base]
steps = 40
batch_size = 8
[harvest]
captions = 40
[obliviate]
steps = 10
batch_size = 8
[probe]
scenes = 40
counterfactuals = 8
epochs = 5
[audit]
scenes = 10
[sweep]
alphas = [0.0, 0.05]
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn resume_skips_intact_stages_and_reruns_tampered_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert_eq!(first.ran, Stage::ALL.to_vec());
    let report = std::fs::read(dir.path().join(paths::REPORT)).unwrap();

    let again = run_pipeline(&cfg, RunOptions { resume: true, ..Default::default() }).unwrap();
    assert!(again.ran.is_empty(), "reran {:?}", again.ran);
    assert_eq!(again.skipped, Stage::ALL.to_vec());

    // a damaged checkpoint reruns its stage; the rebuild is byte-identical,
    // so downstream stages still see the same inputs
    let ckpt = dir.path().join(paths::BASE_CKPT);
    let good = std::fs::read(&ckpt).unwrap();
    let mut bytes = good.clone();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let third = run_pipeline(&cfg, RunOptions { resume: true, ..Default::default() }).unwrap();
    assert_eq!(third.ran, vec![Stage::Base]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), good);
    assert_eq!(std::fs::read(dir.path().join(paths::REPORT)).unwrap(), report);

    let mut changed = cfg.clone();
    changed.obliviate.steps = 12;
    let fourth = run_pipeline(&changed, RunOptions { resume: true, ..Default::default() }).unwrap();
    assert_eq!(fourth.ran, vec![Stage::Obliviate, Stage::Eval, Stage::Sweep, Stage::Report]);

    let m = Manifest::open(dir.path()).unwrap();
    assert!(m.entries.iter().all(|e| e.status == Status::Ok));
    assert_eq!(m.entries.len(), first.ran.len() + third.ran.len() + fourth.ran.len());
}

#[test]
fn single_stage_runs_its_dependencies_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let s = run_pipeline(&cfg, RunOptions { stage: Some(Stage::Harvest), resume: false }).unwrap();
    assert_eq!(s.ran, vec![Stage::Corpus, Stage::Base, Stage::Harvest]);
    assert!(dir.path().join(paths::UNLEARN).exists());
    assert!(!dir.path().join(paths::OBLIVIATE_CKPT).exists());

    // a partial run still yields a report, twice over with identical bytes
    emit_report(dir.path()).unwrap();
    let a = std::fs::read(dir.path().join(paths::REPORT)).unwrap();
    emit_report(dir.path()).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join(paths::REPORT)).unwrap());
    assert!(String::from_utf8(a).unwrap().contains("_missing: probe report_"));
}
