use std::fs;

use befuzz_core::bundled::running_example_dir;
use befuzz_core::campaign::{
    load_run, load_traces, load_verdicts, run_pipeline, CampaignConfig, Layout, Manifest, PipelineError,
    PipelineOptions, Stage,
};
use befuzz_core::oracle::{Category, Check};
use befuzz_core::ConfigId;

fn config() -> CampaignConfig {
    CampaignConfig::load(&running_example_dir().join("campaign.toml")).unwrap()
}

fn claude() -> ConfigId {
    ConfigId::new("claude", "claude-haiku-4.5")
}

#[test]
fn running_example_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path().join("camp"));
    let out = run_pipeline(&config(), &layout, &Stage::ALL, &PipelineOptions::default()).unwrap();
    assert_eq!(out.len(), 5);
    assert!(out.iter().all(|o| !o.skipped), "{out:?}");

    let verdicts = load_verdicts(&layout).unwrap();
    assert_eq!(verdicts.len(), 1);
    let v = &verdicts[0];
    assert_eq!(v.case_id, "Test-0001");
    assert_eq!(v.category, Category::CriticalAnomaly);
    let first = &v.evidence[0];
    assert_eq!(first.check, Check::UnexpectedChange);
    assert_eq!(first.step_id.as_deref(), Some("S05"));
    assert_eq!(first.path.as_deref(), Some("repo_under_test/click/tests/test_utils.py"));

    let run = load_run(&layout, &claude(), "Test-0001").unwrap();
    assert!(run.status.is_complete());
    let traces = load_traces(&layout, &claude(), "Test-0001").unwrap();
    assert_eq!(traces.len(), 6);
    assert!(layout.report_text().exists());
}

#[test]
fn second_run_skips_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path().join("camp"));
    let cfg = config();
    run_pipeline(&cfg, &layout, &Stage::ALL, &PipelineOptions::default()).unwrap();
    let before = fs::read(layout.manifest()).unwrap();
    let again = run_pipeline(&cfg, &layout, &Stage::ALL, &PipelineOptions::default()).unwrap();
    assert!(again.iter().all(|o| o.skipped), "{again:?}");
    assert_eq!(before, fs::read(layout.manifest()).unwrap());

    let forced = run_pipeline(
        &cfg,
        &layout,
        &[Stage::Check],
        &PipelineOptions {
            force: true,
            parallel: None,
        },
    )
    .unwrap();
    assert!(!forced[0].skipped);
}

#[test]
fn tampered_output_reruns_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path().join("camp"));
    let cfg = config();
    run_pipeline(&cfg, &layout, &Stage::ALL, &PipelineOptions::default()).unwrap();
    fs::write(layout.verdicts(), "").unwrap();
    let out = run_pipeline(&cfg, &layout, &[Stage::Check, Stage::Report], &PipelineOptions::default()).unwrap();
    assert!(!out[0].skipped);
    assert_eq!(load_verdicts(&layout).unwrap().len(), 1);
    let m = Manifest::load(&layout).unwrap();
    assert!(m.stages.contains_key(&Stage::Report));
}

#[test]
fn report_without_verdicts_names_check() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path().join("camp"));
    let err = run_pipeline(&config(), &layout, &[Stage::Report], &PipelineOptions::default()).unwrap_err();
    match &err {
        PipelineError::InputMissing { producer, .. } => assert_eq!(*producer, Stage::Check),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("befuzz check"));
}

#[test]
fn bad_config_is_exit_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    fs::write(&path, "catalog = \"missing.json\"\nrepo_context = \"x\"\nbase_repo = \"y\"\n").unwrap();
    let err = CampaignConfig::load(&path).unwrap_err();
    assert_eq!(PipelineError::from(err).exit_code(), 2);

    fs::write(&path, "catalog = 3").unwrap();
    assert!(CampaignConfig::load(&path).is_err());
}

#[test]
fn zero_parallel_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path().join("camp"));
    let opts = PipelineOptions {
        force: false,
        parallel: Some(0),
    };
    let err = run_pipeline(&config(), &layout, &[Stage::Compose], &opts).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn advisory_without_endpoint_is_a_config_error() {
    if std::env::var_os("BEFUZZ_LLM_URL").is_some() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path().join("camp"));
    let mut cfg = config();
    run_pipeline(&cfg, &layout, &[Stage::Compose, Stage::Instantiate, Stage::Run], &PipelineOptions::default()).unwrap();
    cfg.advisory = true;
    let err = run_pipeline(&cfg, &layout, &[Stage::Check], &PipelineOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(err.to_string().contains("BEFUZZ_LLM_URL"), "{err}");
}
