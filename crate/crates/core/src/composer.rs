//! Compatibility screening of pattern × action pairs and seed-template emission.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::catalog::{signal_list, validate_catalog, ActionType, Catalog, CatalogReport, InteractionPattern};
use crate::ids::{action_id_as_string, seed_template_id, ActionId};
use crate::llm::{extract_json_object, TextGenerator};
use crate::validation::ValidationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionSource {
    RuleBased,
    ExternalJudge,
    Recorded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatibilityDecision {
    pub ip_id: String,
    pub action_id: ActionId,
    pub insertable: bool,
    pub coherent: bool,
    pub observable: bool,
    pub rationale: String,
    pub source: DecisionSource,
}

impl CompatibilityDecision {
    pub fn compatible(&self) -> bool {
        self.insertable && self.coherent && self.observable
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JudgeError {
    #[error("judge unreachable: {0}")]
    Unreachable(String),
    #[error("malformed judge reply after {attempts} attempts: {last}")]
    Malformed { attempts: usize, last: String },
    #[error("no recorded decision for ({ip_id}, {action_id})")]
    NotRecorded { ip_id: String, action_id: ActionId },
    #[error("recorded as undecided: {0}")]
    Undecided(String),
}

/// Decides whether a pattern can host an action.
pub trait CompatibilityJudge: Sync {
    fn version(&self) -> String;
    fn judge(
        &self,
        pattern: &InteractionPattern,
        action: &ActionType,
    ) -> Result<CompatibilityDecision, JudgeError>;
}

/// Offline judge: category membership decides insertion and coherence, a
/// non-empty failure-signal list decides observability.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleJudge;

impl CompatibilityJudge for RuleJudge {
    fn version(&self) -> String {
        "rules-v1".into()
    }

    fn judge(
        &self,
        pattern: &InteractionPattern,
        action: &ActionType,
    ) -> Result<CompatibilityDecision, JudgeError> {
        let hosted = pattern
            .compatible_action_categories
            .contains(&action.action_category);
        let observable = !action.observable_failure_signal.is_empty();
        let mut reasons = Vec::new();
        if hosted {
            reasons.push(format!("category {:?} is hosted by the workflow", action.action_category));
        } else {
            reasons.push(format!(
                "category {:?} is not hosted by the workflow; inserting it would introduce a different task dependency",
                action.action_category
            ));
        }
        if observable {
            reasons.push("failure signals are observable".into());
        } else {
            reasons.push("action declares no observable failure signal".into());
        }
        Ok(CompatibilityDecision {
            ip_id: pattern.ip_id.clone(),
            action_id: action.action_id.clone(),
            insertable: hosted,
            coherent: hosted,
            observable,
            rationale: reasons.join("; "),
            source: DecisionSource::RuleBased,
        })
    }
}

/// Query template sent to the text-generation endpoint. This is our own
/// wording; the reply must be a JSON object with the four keys below.
pub const JUDGE_PROMPT_TEMPLATE: &str = "\
You screen test-seed candidates for behavioral fuzzing of coding agents.
Decide whether the ACTION can be combined with the WORKFLOW. Answer three questions:
1. insertable: does the workflow offer a natural point where the stressed operation can be inserted?
2. coherent: does the combination form a coherent task sequence rather than unrelated steps?
3. observable: would the targeted anomaly stay observable through execution traces, file states, or generated artifacts?

WORKFLOW ({ip_id}): {pattern}
Skeleton steps: {steps}

ACTION ({action_id}, {category}): {description}
Stressed operation: {stressed}
Target anomaly surface: {surface}
Observable failure signals: {signals}

Reply with one JSON object only:
{\"insertable\": true|false, \"coherent\": true|false, \"observable\": true|false, \"rationale\": \"<one sentence>\"}";

pub fn render_judge_prompt(pattern: &InteractionPattern, action: &ActionType) -> String {
    JUDGE_PROMPT_TEMPLATE
        .replace("{ip_id}", &pattern.ip_id)
        .replace("{pattern}", &pattern.description)
        .replace("{steps}", &pattern.seq_skeleton_steps.join("; "))
        .replace("{action_id}", action.action_id.as_str())
        .replace("{category}", &action.action_category)
        .replace("{description}", &action.description)
        .replace("{stressed}", &action.stressed_operation)
        .replace("{surface}", &action.target_anomaly_surface)
        .replace("{signals}", &action.observable_failure_signal.join(", "))
}

/// Judge backed by a text-generation endpoint.
pub struct ExternalJudge<G> {
    generator: G,
    retries: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgeReply {
    insertable: bool,
    coherent: bool,
    observable: bool,
    #[serde(default)]
    rationale: String,
}

impl<G: TextGenerator> ExternalJudge<G> {
    pub const DEFAULT_RETRIES: usize = 3;

    pub fn new(generator: G) -> Self {
        ExternalJudge {
            generator,
            retries: Self::DEFAULT_RETRIES,
        }
    }

    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }
}

impl<G: TextGenerator> CompatibilityJudge for ExternalJudge<G> {
    fn version(&self) -> String {
        format!("external-v1:{}", self.generator.model())
    }

    fn judge(
        &self,
        pattern: &InteractionPattern,
        action: &ActionType,
    ) -> Result<CompatibilityDecision, JudgeError> {
        let prompt = render_judge_prompt(pattern, action);
        let attempts = self.retries + 1;
        let mut last = String::new();
        let mut transport_failures = 0;
        for _ in 0..attempts {
            let reply = match self.generator.complete(&prompt) {
                Ok(r) => r,
                Err(e) => {
                    transport_failures += 1;
                    last = e.to_string();
                    continue;
                }
            };
            let parsed = extract_json_object(&reply)
                .ok_or_else(|| "no JSON object in reply".to_string())
                .and_then(|obj| serde_json::from_str::<JudgeReply>(obj).map_err(|e| e.to_string()));
            match parsed {
                Ok(r) => {
                    return Ok(CompatibilityDecision {
                        ip_id: pattern.ip_id.clone(),
                        action_id: action.action_id.clone(),
                        insertable: r.insertable,
                        coherent: r.coherent,
                        observable: r.observable,
                        rationale: r.rationale,
                        source: DecisionSource::ExternalJudge,
                    })
                }
                Err(e) => last = e,
            }
        }
        if transport_failures == attempts {
            Err(JudgeError::Unreachable(last))
        } else {
            Err(JudgeError::Malformed { attempts, last })
        }
    }
}

/// Replays a recorded decision log keyed by `(ip_id, action_id)` for one
/// judge version. Pairs missing from the log go to the optional fallback judge
/// and the answer is kept for the rest of the run.
pub struct RecordedJudge<'a> {
    version: String,
    entries: HashMap<(String, ActionId), Screening>,
    fallback: Option<&'a dyn CompatibilityJudge>,
    fresh: Mutex<Vec<DecisionEntry>>,
}

impl<'a> RecordedJudge<'a> {
    /// Builds from log entries. When `version` is `None` the version of the
    /// first entry is used; entries of other versions are ignored.
    pub fn from_log(log: &DecisionLog, version: Option<&str>) -> Self {
        let version = version
            .map(str::to_string)
            .or_else(|| log.entries.first().map(|e| e.judge_version.clone()))
            .unwrap_or_else(|| "recorded".into());
        let entries = log
            .entries
            .iter()
            .filter(|e| e.judge_version == version)
            .map(|e| ((e.ip_id.clone(), e.action_id.clone()), e.screening.clone()))
            .collect();
        RecordedJudge {
            version,
            entries,
            fallback: None,
            fresh: Mutex::new(Vec::new()),
        }
    }

    pub fn with_fallback(mut self, judge: &'a dyn CompatibilityJudge) -> Self {
        self.fallback = Some(judge);
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decisions obtained from the fallback judge during this run.
    pub fn fresh_decisions(&self) -> Vec<DecisionEntry> {
        self.fresh.lock().unwrap().clone()
    }
}

impl CompatibilityJudge for RecordedJudge<'_> {
    fn version(&self) -> String {
        self.version.clone()
    }

    fn judge(
        &self,
        pattern: &InteractionPattern,
        action: &ActionType,
    ) -> Result<CompatibilityDecision, JudgeError> {
        let key = (pattern.ip_id.clone(), action.action_id.clone());
        match self.entries.get(&key) {
            Some(Screening::Decided {
                insertable,
                coherent,
                observable,
                rationale,
                ..
            }) => Ok(CompatibilityDecision {
                ip_id: key.0,
                action_id: key.1,
                insertable: *insertable,
                coherent: *coherent,
                observable: *observable,
                rationale: rationale.clone(),
                source: DecisionSource::Recorded,
            }),
            Some(Screening::Undecided { reason }) => Err(JudgeError::Undecided(reason.clone())),
            None => match self.fallback {
                Some(judge) => {
                    let result = screen_pair(pattern, action, judge);
                    self.fresh
                        .lock()
                        .unwrap()
                        .push(DecisionEntry::from_result(pattern, action, &judge.version(), &result));
                    result
                }
                None => Err(JudgeError::NotRecorded {
                    ip_id: key.0,
                    action_id: key.1,
                }),
            },
        }
    }
}

/// Screens one pair. The returned decision always carries a rationale.
pub fn screen_pair(
    pattern: &InteractionPattern,
    action: &ActionType,
    judge: &dyn CompatibilityJudge,
) -> Result<CompatibilityDecision, JudgeError> {
    let mut d = judge.judge(pattern, action)?;
    if d.rationale.trim().is_empty() {
        d.rationale = format!(
            "insertable={}, coherent={}, observable={}",
            d.insertable, d.coherent, d.observable
        );
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Screening {
    Decided {
        insertable: bool,
        coherent: bool,
        observable: bool,
        rationale: String,
        source: DecisionSource,
    },
    Undecided {
        reason: String,
    },
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionEntry {
    pub ip_id: String,
    pub action_id: ActionId,
    pub judge_version: String,
    #[serde(flatten)]
    pub screening: Screening,
}

impl DecisionEntry {
    fn from_result(
        pattern: &InteractionPattern,
        action: &ActionType,
        judge_version: &str,
        result: &Result<CompatibilityDecision, JudgeError>,
    ) -> Self {
        let screening = match result {
            Ok(d) => Screening::Decided {
                insertable: d.insertable,
                coherent: d.coherent,
                observable: d.observable,
                rationale: d.rationale.clone(),
                source: d.source,
            },
            Err(e) => Screening::Undecided {
                reason: e.to_string(),
            },
        };
        DecisionEntry {
            ip_id: pattern.ip_id.clone(),
            action_id: action.action_id.clone(),
            judge_version: judge_version.to_string(),
            screening,
        }
    }

    pub fn is_compatible(&self) -> bool {
        matches!(
            self.screening,
            Screening::Decided {
                insertable: true,
                coherent: true,
                observable: true,
                ..
            }
        )
    }

    pub fn is_undecided(&self) -> bool {
        matches!(self.screening, Screening::Undecided { .. })
    }
}

#[derive(Debug, Error)]
pub enum DecisionLogError {
    #[error("cannot read decision log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("decision log {path} line {line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Append-only record of screening decisions, one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecisionLog {
    pub entries: Vec<DecisionEntry>,
}

impl DecisionLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn compatible_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_compatible()).count()
    }

    pub fn undecided_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_undecided()).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("decision serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str, origin: &Path) -> Result<Self, DecisionLogError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(line).map_err(|source| DecisionLogError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                source,
            })?;
            entries.push(e);
        }
        Ok(DecisionLog { entries })
    }

    pub fn load(path: &Path) -> Result<Self, DecisionLogError> {
        let io = |source| DecisionLogError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = fs::File::open(path).map_err(io)?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(io)?);
            text.push('\n');
        }
        Self::parse_jsonl(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<(), DecisionLogError> {
        crate::fsutil::write_atomic(path, self.to_jsonl().as_bytes()).map_err(|source| {
            DecisionLogError::Io {
                path: path.to_path_buf(),
                source,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionBody {
    #[serde(rename = "IP_id")]
    pub ip_id: String,
    #[serde(rename = "Interaction_Pattern")]
    pub interaction_pattern: String,
    pub seq_skeleton_steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedAction {
    #[serde(with = "action_id_as_string")]
    pub action_id: ActionId,
    pub stressed_operation: String,
    pub target_anomaly_surface: String,
    #[serde(serialize_with = "joined_signals", deserialize_with = "signal_list")]
    pub observable_failure_signal: Vec<String>,
    pub baseline_prompt: String,
    pub typical_fuzz_direction: Vec<String>,
}

fn joined_signals<S: Serializer>(v: &[String], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&v.join(" / "))
}

/// A compatible pattern × action pair ready for instantiation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTemplate {
    pub seed_template_id: String,
    pub interaction_body: InteractionBody,
    pub action: SeedAction,
}

impl SeedTemplate {
    pub fn from_pair(id: String, pattern: &InteractionPattern, action: &ActionType) -> Self {
        SeedTemplate {
            seed_template_id: id,
            interaction_body: InteractionBody {
                ip_id: pattern.ip_id.clone(),
                interaction_pattern: pattern.description.clone(),
                seq_skeleton_steps: pattern.seq_skeleton_steps.clone(),
            },
            action: SeedAction {
                action_id: action.action_id.clone(),
                stressed_operation: action.stressed_operation.clone(),
                target_anomaly_surface: action.target_anomaly_surface.clone(),
                observable_failure_signal: action.observable_failure_signal.clone(),
                baseline_prompt: action.baseline_prompt.clone(),
                typical_fuzz_direction: action.typical_fuzz_direction.clone(),
            },
        }
    }

    /// 1-based seed number.
    pub fn number(&self) -> Option<usize> {
        self.seed_template_id.parse().ok()
    }
}

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("catalog violates invariants: {0}")]
    InvalidCatalog(CatalogReport),
}

#[derive(Debug, Clone)]
pub struct Composition {
    pub seeds: Vec<SeedTemplate>,
    pub log: DecisionLog,
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} decisions, {} seeds, {} undecided",
            self.log.len(),
            self.seeds.len(),
            self.log.undecided_count()
        )
    }
}

/// Screens every pattern × action pair and numbers the compatible ones in
/// (pattern, action) order. Screening runs in parallel; numbering does not
/// depend on completion order.
pub fn compose_seeds(catalog: &Catalog, judge: &dyn CompatibilityJudge) -> Result<Composition, ComposeError> {
    let report = validate_catalog(catalog);
    let hard: Vec<_> = report.iter().filter(|f| f.rule.is_hard()).cloned().collect();
    if !hard.is_empty() {
        return Err(ComposeError::InvalidCatalog(ValidationReport::from_findings(hard)));
    }

    let patterns = catalog.sorted_patterns();
    let actions = catalog.sorted_actions();
    let pairs: Vec<(&InteractionPattern, &ActionType)> = patterns
        .iter()
        .flat_map(|p| actions.iter().map(move |a| (*p, *a)))
        .collect();

    let version = judge.version();
    let results: Vec<_> = pairs
        .par_iter()
        .map(|(p, a)| screen_pair(p, a, judge))
        .collect();

    let mut seeds = Vec::new();
    let mut entries = Vec::with_capacity(pairs.len());
    for ((p, a), result) in pairs.iter().zip(&results) {
        if let Ok(d) = result {
            if d.compatible() {
                seeds.push(SeedTemplate::from_pair(seed_template_id(seeds.len() + 1), p, a));
            }
        }
        entries.push(DecisionEntry::from_result(p, a, &version, result));
    }
    Ok(Composition {
        seeds,
        log: DecisionLog { entries },
    })
}
