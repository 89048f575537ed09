use std::fs;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use befuzz_core::bundled::{self, running_example_dir};
use befuzz_core::campaign::{digest_files, run_pipeline, CampaignConfig, CampaignConfigFile, Layout, PipelineOptions, Stage};
use befuzz_core::labels::ReviewLabel;
use befuzz_core::oracle::Category;
use befuzz_core::report::compute_precision;
use befuzz_service::{router, serve, Campaign, CaseBundle, LabelResponse, ReviewStatus, ServiceError, TriageQueueEntry};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// A campaign with the bundled seeds and cases plus the recorded review
/// verdicts for five configurations, and no labels yet.
fn review_campaign(dir: &Path) -> Layout {
    let ex = running_example_dir();
    let file = CampaignConfigFile {
        catalog: bundled::catalog_path(),
        repo_context: ex.join("repo_context.json"),
        base_repo: ex.join("repo"),
        overlay: None,
        judge: format!("recorded:{}", bundled::decisions_path().display()),
        generator: "template".into(),
        configs: vec![],
        limits: Default::default(),
        ignore: None,
        output_root: None,
        clock: Default::default(),
        oracle: None,
        advisory: false,
        report: None,
    };
    let cfg = CampaignConfig::from_file(file, Path::new("/")).unwrap();
    let layout = Layout::new(dir.join("review"));
    run_pipeline(&cfg, &layout, &[Stage::Compose, Stage::Instantiate], &PipelineOptions::default()).unwrap();
    let fx = bundled::review_fixture().unwrap();
    fs::write(layout.configs_index(), serde_json::to_string(&fx.configs).unwrap()).unwrap();
    let lines: Vec<String> = fx.verdicts.iter().map(|v| serde_json::to_string(v).unwrap()).collect();
    fs::write(layout.verdicts(), lines.join("\n") + "\n").unwrap();
    layout
}

fn app(layout: &Layout) -> Router {
    router(Arc::new(Campaign::open(layout.root()).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn flagged(app: &Router, query: &str) -> Vec<TriageQueueEntry> {
    let (status, body) = call(app, "GET", &format!("/campaigns/review/flagged{query}"), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    serde_json::from_value(body).unwrap()
}

fn label_body(agent: &str, model: &str, category: Option<Category>) -> Value {
    json!({
        "agent": agent,
        "model": model,
        "is_true_anomaly": category.is_some(),
        "confirmed_category": category,
        "reviewer": "r1",
        "timestamp": "2026-02-01T00:00:00Z",
    })
}

#[tokio::test]
async fn queue_holds_exactly_the_flagged_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(&review_campaign(tmp.path()));
    let gemini = flagged(&app, "?agent=gemini&model=gemini-2.5-flash-lite").await;
    assert_eq!(gemini.len(), 327);
    assert!(gemini.iter().all(|e| e.category != Category::NoAnomaly && e.status == ReviewStatus::Pending));
    for w in gemini.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        assert!(a.category.severity() > b.category.severity() || a.category == b.category && a.case_id < b.case_id);
    }
    let all = flagged(&app, "").await;
    assert_eq!(all.len(), 1573);
    let critical = flagged(&app, "?category=critical_anomaly").await;
    assert!(!critical.is_empty() && critical.iter().all(|e| e.category == Category::CriticalAnomaly));
    let (status, _) = call(&app, "GET", "/campaigns/review/flagged?category=bogus", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/campaigns/other/flagged", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn confirming_166_of_277_gives_59_9_percent() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = review_campaign(tmp.path());
    let app = app(&layout);
    let fx = bundled::review_fixture().unwrap();
    let queue = flagged(&app, "?agent=codex&model=gpt-5.1-codex-mini").await;
    assert_eq!(queue.len(), 277);

    let mut last = None;
    for entry in &queue {
        let recorded = fx
            .labels
            .iter()
            .find(|l| l.case_id == entry.case_id && l.config.agent == "codex" && l.config.model == "gpt-5.1-codex-mini")
            .unwrap();
        let body = label_body("codex", "gpt-5.1-codex-mini", recorded.confirmed_category.filter(|_| recorded.is_true_anomaly));
        let (status, resp) = call(&app, "POST", &format!("/cases/{}/label", entry.case_id), Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{resp}");
        last = Some(serde_json::from_value::<LabelResponse>(resp).unwrap());
    }
    let snap = last.unwrap().precision;
    assert_eq!((snap.reported, snap.verified, snap.precision.as_str()), (277, 166, "59.9%"));
    assert_eq!(snap.precision, compute_precision(277, 166).unwrap().render());

    let (status, report) = call(&app, "GET", "/report", None).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    let row = &report["table"]["rows"][0];
    assert_eq!((row["reported"].as_u64(), row["verified"].as_u64()), (Some(277), Some(166)));
    assert_eq!(row["precision"], "59.9%");
    assert_eq!(row["confirmed"]["minor"], 107);

    // Every label was persisted to the campaign's log.
    let text = fs::read_to_string(layout.labels()).unwrap();
    assert_eq!(text.lines().count(), 277);
    let queue = flagged(&app, "?agent=codex&model=gpt-5.1-codex-mini").await;
    assert!(queue.iter().all(|e| e.status == ReviewStatus::Labeled));
}

#[tokio::test]
async fn retraction_supersedes_and_keeps_history() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = review_campaign(tmp.path());
    let app = app(&layout);
    let case = flagged(&app, "?agent=claude&model=claude-3.5-haiku").await[0].case_id.clone();
    let uri = format!("/cases/{case}/label");

    let (_, first) = call(&app, "POST", &uri, Some(label_body("claude", "claude-3.5-haiku", Some(Category::MinorAnomaly)))).await;
    let first: LabelResponse = serde_json::from_value(first).unwrap();
    assert_eq!(first.precision.verified, 1);
    assert!(first.superseded.is_none());

    let (_, second) = call(&app, "POST", &uri, Some(label_body("claude", "claude-3.5-haiku", None))).await;
    let second: LabelResponse = serde_json::from_value(second).unwrap();
    assert_eq!(second.precision.verified, 0);
    assert_eq!(second.superseded.as_ref(), Some(&first.label));

    let (status, bundle) = call(&app, "GET", &format!("/cases/{case}?config=claude/claude-3.5-haiku"), None).await;
    assert_eq!(status, StatusCode::OK);
    let bundle: CaseBundle = serde_json::from_value(bundle).unwrap();
    assert_eq!(bundle.label_history.len(), 2);
    assert_eq!(bundle.label.as_ref(), Some(&second.label));

    // A restarted service replays the same labels and history.
    let restarted = self::app(&layout);
    let (_, again) = call(&restarted, "GET", &format!("/cases/{case}?config=claude/claude-3.5-haiku"), None).await;
    let again: CaseBundle = serde_json::from_value(again).unwrap();
    assert_eq!(again.label_history, bundle.label_history);
    assert_eq!(again.label, bundle.label);
}

#[tokio::test]
async fn invalid_labels_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = review_campaign(tmp.path());
    let app = app(&layout);
    let fx = bundled::review_fixture().unwrap();
    let quiet = fx.verdicts.iter().find(|v| v.category == Category::NoAnomaly).unwrap();
    let (status, body) = call(
        &app,
        "POST",
        &format!("/cases/{}/label", quiet.case_id),
        Some(label_body(&quiet.agent, &quiet.model, Some(Category::MinorAnomaly))),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body["error"].as_str().unwrap().contains("not flagged"));

    let (status, _) =
        call(&app, "POST", "/cases/Test-9999/label", Some(label_body("codex", "gpt-4o-mini", None))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let case = flagged(&app, "?agent=codex&model=gpt-4o-mini").await[0].case_id.clone();
    let mut body = label_body("codex", "gpt-4o-mini", None);
    body["is_true_anomaly"] = json!(true);
    let (status, _) = call(&app, "POST", &format!("/cases/{case}/label"), Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let mut body = label_body("codex", "gpt-4o-mini", Some(Category::NoAnomaly));
    body["is_true_anomaly"] = json!(true);
    let (status, _) = call(&app, "POST", &format!("/cases/{case}/label"), Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(!layout.labels().exists() || fs::read_to_string(layout.labels()).unwrap().is_empty());

    let (status, _) = call(&app, "GET", "/cases/Test-9999?config=codex/gpt-4o-mini", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", &format!("/cases/{case}"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn concurrent_reviewers_resolve_last_write_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = review_campaign(tmp.path());
    let app = app(&layout);
    let case = flagged(&app, "?agent=gemini").await[0].case_id.clone();
    let uri = format!("/cases/{case}/label");
    let mut a = label_body("gemini", "gemini-2.5-flash-lite", Some(Category::CriticalAnomaly));
    a["reviewer"] = json!("alice");
    let mut b = label_body("gemini", "gemini-2.5-flash-lite", None);
    b["reviewer"] = json!("bob");
    let (ra, rb) = tokio::join!(call(&app, "POST", &uri, Some(a)), call(&app, "POST", &uri, Some(b)));
    assert_eq!((ra.0, rb.0), (StatusCode::OK, StatusCode::OK));

    let (_, bundle) = call(&app, "GET", &format!("/cases/{case}?config=gemini/gemini-2.5-flash-lite"), None).await;
    let bundle: CaseBundle = serde_json::from_value(bundle).unwrap();
    let history: Vec<&ReviewLabel> = bundle.label_history.iter().collect();
    assert_eq!(history.len(), 2);
    // Whichever write landed second is the active one; the other is in history.
    assert_eq!(bundle.label.as_ref(), Some(history[1]));
    let reviewers: Vec<&str> = history.iter().map(|l| l.reviewer.as_str()).collect();
    assert!(reviewers.contains(&"alice") && reviewers.contains(&"bob"));
}

#[tokio::test]
async fn running_example_bundle_and_read_only_session() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = CampaignConfig::load(&running_example_dir().join("campaign.toml")).unwrap();
    let layout = Layout::new(tmp.path().join("example"));
    run_pipeline(&cfg, &layout, &Stage::ALL, &PipelineOptions::default()).unwrap();
    let before = digest_files(layout.root(), |_| true).unwrap();

    let app = app(&layout);
    let (status, queue) = call(&app, "GET", "/campaigns/example/flagged", None).await;
    assert_eq!(status, StatusCode::OK);
    let queue: Vec<TriageQueueEntry> = serde_json::from_value(queue).unwrap();
    assert_eq!(queue.len(), 1);
    assert_eq!((queue[0].steps, queue[0].category), (Some(6), Category::CriticalAnomaly));
    assert!(queue[0].unexpected_files >= 1);

    let (status, bundle) = call(&app, "GET", "/cases/Test-0001?config=claude/claude-haiku-4.5", None).await;
    assert_eq!(status, StatusCode::OK);
    let bundle: CaseBundle = serde_json::from_value(bundle).unwrap();
    let ids: Vec<&str> = bundle.traces.iter().map(|t| t.step_id.as_str()).collect();
    assert_eq!(ids, ["S01", "S02", "S03", "S04", "S05", "S06"]);
    let s05 = &bundle.traces[4];
    assert!(!s05.captured_trace.step_prompt.is_empty());
    assert!(s05
        .captured_trace
        .file_change
        .unexpected_changed_files
        .iter()
        .any(|p| p == "repo_under_test/click/tests/test_utils.py"));
    assert_eq!(bundle.diffs.len(), 6);
    assert!(bundle.candidate.is_some() && bundle.run.is_some());
    let (status, _) = call(&app, "GET", "/report", None).await;
    assert_eq!(status, StatusCode::OK);

    assert_eq!(digest_files(layout.root(), |_| true).unwrap(), before);
}

#[tokio::test]
async fn non_loopback_bind_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let err = serve(tmp.path(), "0.0.0.0:0".parse().unwrap()).await.unwrap_err();
    assert!(matches!(err, ServiceError::NonLoopback(_)));
    let err = serve(tmp.path(), "127.0.0.1:0".parse().unwrap()).await.unwrap_err();
    assert!(matches!(err, ServiceError::UnknownCampaign(_)));
}
