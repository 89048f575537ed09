//! Local HTTP API over one campaign directory: the triage queue, per-case
//! evidence bundles, label submission and a live report.
//!
//! Evidence is loaded once at startup and never written. Labels go through
//! the campaign's append-only label log, one writer at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use befuzz_core::campaign::{
    load_case, load_case_index, load_cases, load_configs, load_run, load_traces, load_verdicts, Layout, LoadError,
};
use befuzz_core::executor::{RunRecord, StepTrace};
use befuzz_core::instantiator::CaseCandidate;
use befuzz_core::labels::{LabelError, LabelStore, ReviewLabel};
use befuzz_core::oracle::{Category, Check, Verdict};
use befuzz_core::report::{build_report, compute_precision, CampaignReport, CaseIndex, ReportError, ReportOptions};
use befuzz_core::workspace::FileChangeEvidence;
use befuzz_core::ConfigId;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::RwLock;

pub const DEFAULT_BIND: &str = "127.0.0.1:8734";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no campaign at {0}")]
    UnknownCampaign(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("case {case_id} has no verdict for {config}")]
    NotFound { case_id: String, config: String },
    #[error("{0}")]
    BadRequest(String),
    #[error("case {case_id} is not flagged for {config}; only flagged cases take labels")]
    NotFlagged { case_id: String, config: String },
    #[error("refusing to bind {0}: the service only listens on loopback addresses")]
    NonLoopback(SocketAddr),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownCampaign(_) | ServiceError::NotFound { .. } => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) | ServiceError::Label(LabelError::MissingCategory)
            | ServiceError::Label(LabelError::NoAnomalyCategory)
            | ServiceError::Label(LabelError::EmptyReviewer) => StatusCode::BAD_REQUEST,
            ServiceError::NotFlagged { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Pending,
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageQueueEntry {
    pub case_id: String,
    pub agent: String,
    pub model: String,
    pub category: Category,
    /// None when the run record is missing.
    pub steps: Option<usize>,
    pub unexpected_files: usize,
    pub matched_patterns: usize,
    pub status: ReviewStatus,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct FlaggedFilter {
    pub agent: Option<String>,
    pub model: Option<String>,
    pub category: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiff {
    pub step_id: String,
    pub file_change: FileChangeEvidence,
}

/// Everything a reviewer needs for one (case, configuration).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseBundle {
    pub candidate: Option<CaseCandidate>,
    pub run: Option<RunRecord>,
    pub traces: Vec<StepTrace>,
    pub diffs: Vec<StepDiff>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ReviewLabel>,
    pub label_history: Vec<ReviewLabel>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct LabelRequest {
    #[serde(flatten)]
    pub config: ConfigId,
    pub is_true_anomaly: bool,
    #[serde(default)]
    pub confirmed_category: Option<Category>,
    pub reviewer: String,
    #[serde(default)]
    pub note: String,
    /// Defaults to the server's clock.
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionSnapshot {
    pub agent: String,
    pub model: String,
    pub reported: u64,
    pub verified: u64,
    pub precision: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelResponse {
    pub label: ReviewLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superseded: Option<ReviewLabel>,
    pub precision: PrecisionSnapshot,
}

/// A campaign opened for triage.
pub struct Campaign {
    layout: Layout,
    configs: Vec<ConfigId>,
    cases: u64,
    verdicts: Vec<Verdict>,
    by_key: BTreeMap<(String, ConfigId), usize>,
    steps: BTreeMap<(String, ConfigId), usize>,
    index: CaseIndex,
    labels: RwLock<LabelStore>,
}

impl Campaign {
    pub fn open(root: &Path) -> Result<Campaign, ServiceError> {
        let layout = Layout::new(root);
        if !layout.verdicts().is_file() {
            return Err(ServiceError::UnknownCampaign(root.display().to_string()));
        }
        let verdicts = load_verdicts(&layout)?;
        let configs = load_configs(&layout).unwrap_or_else(|_| {
            let set: BTreeSet<ConfigId> = verdicts.iter().map(config_of).collect();
            set.into_iter().collect()
        });
        let cases = match load_cases(&layout) {
            Ok(c) if !c.is_empty() => c.len() as u64,
            _ => verdicts.iter().map(|v| v.case_id.as_str()).collect::<BTreeSet<_>>().len() as u64,
        };
        let index = load_case_index(&layout).unwrap_or_default();
        let by_key = verdicts
            .iter()
            .enumerate()
            .map(|(i, v)| ((v.case_id.clone(), config_of(v)), i))
            .collect();
        let mut steps = BTreeMap::new();
        for v in verdicts.iter().filter(|v| v.category.is_anomaly()) {
            let config = config_of(v);
            if let Ok(run) = load_run(&layout, &config, &v.case_id) {
                steps.insert((v.case_id.clone(), config), run.steps.len());
            }
        }
        let labels = LabelStore::open(&layout.labels())?;
        Ok(Campaign {
            layout,
            configs,
            cases,
            verdicts,
            by_key,
            steps,
            index,
            labels: RwLock::new(labels),
        })
    }

    pub fn id(&self) -> String {
        self.layout.id()
    }

    fn verdict(&self, case_id: &str, config: &ConfigId) -> Option<&Verdict> {
        self.by_key.get(&(case_id.to_string(), config.clone())).map(|&i| &self.verdicts[i])
    }

    pub async fn flagged(&self, filter: &FlaggedFilter) -> Result<Vec<TriageQueueEntry>, ServiceError> {
        let category = match &filter.category {
            Some(c) => Some(Category::parse(c).ok_or_else(|| ServiceError::BadRequest(format!("unknown category {c:?}")))?),
            None => None,
        };
        let labels = self.labels.read().await;
        let mut out: Vec<TriageQueueEntry> = self
            .verdicts
            .iter()
            .filter(|v| v.category.is_anomaly())
            .filter(|v| filter.agent.as_ref().is_none_or(|a| &v.agent == a))
            .filter(|v| filter.model.as_ref().is_none_or(|m| &v.model == m))
            .filter(|v| category.is_none_or(|c| v.category == c))
            .map(|v| {
                let config = config_of(v);
                let count = |check: Check| v.evidence.iter().filter(|r| r.check == check).count();
                let unexpected: BTreeSet<_> = v
                    .evidence
                    .iter()
                    .filter(|r| r.check == Check::UnexpectedChange)
                    .filter_map(|r| r.path.as_deref())
                    .collect();
                TriageQueueEntry {
                    steps: self.steps.get(&(v.case_id.clone(), config.clone())).copied(),
                    unexpected_files: unexpected.len(),
                    matched_patterns: count(Check::RollbackFailurePattern),
                    status: if labels.active(&v.case_id, &config).is_some() {
                        ReviewStatus::Labeled
                    } else {
                        ReviewStatus::Pending
                    },
                    case_id: v.case_id.clone(),
                    agent: v.agent.clone(),
                    model: v.model.clone(),
                    category: v.category,
                }
            })
            .collect();
        out.sort_by(|a, b| {
            b.category
                .severity()
                .cmp(&a.category.severity())
                .then_with(|| a.case_id.cmp(&b.case_id))
                .then_with(|| (&a.agent, &a.model).cmp(&(&b.agent, &b.model)))
        });
        Ok(out)
    }

    pub async fn case_bundle(&self, case_id: &str, config: &ConfigId) -> Result<CaseBundle, ServiceError> {
        let verdict = self.verdict(case_id, config).cloned().ok_or_else(|| ServiceError::NotFound {
            case_id: case_id.to_string(),
            config: config.to_string(),
        })?;
        let candidate = load_case(&self.layout, case_id).ok();
        let run = load_run(&self.layout, config, case_id).ok();
        let traces = if self.layout.traces_dir(config, case_id).is_dir() {
            load_traces(&self.layout, config, case_id)?
        } else {
            Vec::new()
        };
        let diffs = traces
            .iter()
            .map(|t| StepDiff {
                step_id: t.step_id.clone(),
                file_change: t.captured_trace.file_change.clone(),
            })
            .collect();
        let labels = self.labels.read().await;
        Ok(CaseBundle {
            candidate,
            run,
            traces,
            diffs,
            verdict,
            label: labels.active(case_id, config).cloned(),
            label_history: labels.history_for(case_id, config).into_iter().cloned().collect(),
        })
    }

    pub async fn submit(&self, case_id: &str, req: LabelRequest) -> Result<LabelResponse, ServiceError> {
        let config = req.config.clone();
        let flagged = self.verdict(case_id, &config).map(|v| v.category.is_anomaly());
        match flagged {
            None => {
                return Err(ServiceError::NotFound {
                    case_id: case_id.to_string(),
                    config: config.to_string(),
                })
            }
            Some(false) => {
                return Err(ServiceError::NotFlagged {
                    case_id: case_id.to_string(),
                    config: config.to_string(),
                })
            }
            Some(true) => {}
        }
        let label = ReviewLabel {
            case_id: case_id.to_string(),
            config: config.clone(),
            is_true_anomaly: req.is_true_anomaly,
            confirmed_category: req.confirmed_category,
            reviewer: req.reviewer,
            timestamp: req.timestamp.unwrap_or_else(Utc::now),
            note: req.note,
        };
        let mut labels = self.labels.write().await;
        let superseded = labels.submit(label.clone())?;
        let precision = self.precision_for(&labels, &config)?;
        Ok(LabelResponse {
            label,
            superseded,
            precision,
        })
    }

    fn precision_for(&self, labels: &LabelStore, config: &ConfigId) -> Result<PrecisionSnapshot, ServiceError> {
        let reported = self
            .verdicts
            .iter()
            .filter(|v| v.category.is_anomaly() && &config_of(v) == config)
            .count() as u64;
        let verified = labels
            .active_labels()
            .filter(|l| &l.config == config && l.is_true_anomaly)
            .filter(|l| self.verdict(&l.case_id, config).is_some_and(|v| v.category.is_anomaly()))
            .count() as u64;
        let p = compute_precision(reported, verified)?;
        Ok(PrecisionSnapshot {
            agent: config.agent.clone(),
            model: config.model.clone(),
            reported,
            verified,
            precision: p.render(),
        })
    }

    /// The campaign report over the labels active right now.
    pub async fn report(&self) -> Result<CampaignReport, ServiceError> {
        let labels = self.labels.read().await;
        let active: Vec<&ReviewLabel> = labels.active_labels().collect();
        Ok(build_report(
            &self.configs,
            self.cases,
            &self.verdicts,
            &active,
            &self.index,
            ReportOptions::default(),
        )?)
    }
}

fn config_of(v: &Verdict) -> ConfigId {
    ConfigId::new(&v.agent, &v.model)
}

type AppState = Arc<Campaign>;

async fn flagged(
    State(c): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(filter): Query<FlaggedFilter>,
) -> Result<Json<Vec<TriageQueueEntry>>, ServiceError> {
    if id != c.id() {
        return Err(ServiceError::UnknownCampaign(id));
    }
    Ok(Json(c.flagged(&filter).await?))
}

#[derive(Deserialize)]
struct CaseQuery {
    config: Option<String>,
}

async fn case(
    State(c): State<AppState>,
    UrlPath(case_id): UrlPath<String>,
    Query(q): Query<CaseQuery>,
) -> Result<Json<CaseBundle>, ServiceError> {
    let raw = q.config.ok_or_else(|| ServiceError::BadRequest("missing config=<agent>/<model>".into()))?;
    let config = ConfigId::parse(&raw).ok_or_else(|| ServiceError::BadRequest(format!("bad config {raw:?}")))?;
    Ok(Json(c.case_bundle(&case_id, &config).await?))
}

async fn label(
    State(c): State<AppState>,
    UrlPath(case_id): UrlPath<String>,
    Json(req): Json<LabelRequest>,
) -> Result<Json<LabelResponse>, ServiceError> {
    Ok(Json(c.submit(&case_id, req).await?))
}

async fn report(State(c): State<AppState>) -> Result<Json<CampaignReport>, ServiceError> {
    Ok(Json(c.report().await?))
}

pub fn router(campaign: Arc<Campaign>) -> Router {
    Router::new()
        .route("/campaigns/{id}/flagged", get(flagged))
        .route("/cases/{case_id}", get(case))
        .route("/cases/{case_id}/label", post(label))
        .route("/report", get(report))
        .with_state(campaign)
}

/// Serves `campaign_dir` on `bind` until the process is stopped. There is no
/// authentication, so only loopback addresses are accepted.
pub async fn serve(campaign_dir: &Path, bind: SocketAddr) -> Result<(), ServiceError> {
    if !bind.ip().is_loopback() {
        return Err(ServiceError::NonLoopback(bind));
    }
    let campaign = Arc::new(Campaign::open(campaign_dir)?);
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(campaign = %campaign.id(), addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(campaign)).await?;
    Ok(())
}
