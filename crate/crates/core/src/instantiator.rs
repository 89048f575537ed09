//! Seed template → repository-grounded case candidate.
//!
//! Generators are untrusted: whatever text they return is parsed against a
//! fixed schema and validated here before a candidate is accepted.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::catalog::placeholders;
use crate::composer::SeedTemplate;
use crate::ids::{case_id_for_seed, step_id};
use crate::llm::{extract_json_object, TextGenerator};
use crate::paths::{check_relative, is_under};
use crate::validation::{Finding, ValidationReport};

pub const DEFAULT_MAX_STEPS: usize = 10;
pub const DEFAULT_ATTEMPTS: usize = 3;

/// Repository facts handed to the generator for grounding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoContext {
    pub repo_name: String,
    /// Mount point inside the workspace, e.g. `repo_under_test/click`.
    pub repo_root: String,
    #[serde(default)]
    pub salient_paths: Vec<String>,
    #[serde(default)]
    pub runnable_commands: Vec<String>,
}

#[derive(Debug, Error)]
pub enum RepoContextError {
    #[error("cannot read repo context {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed repo context {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("repo context path {path:?} rejected: {reason}")]
    BadPath { path: String, reason: String },
}

impl RepoContext {
    pub fn validate(&self) -> Result<(), RepoContextError> {
        for p in std::iter::once(&self.repo_root).chain(&self.salient_paths) {
            check_relative(p).map_err(|v| RepoContextError::BadPath {
                path: p.clone(),
                reason: v.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RepoContextError> {
        let text = fs::read_to_string(path).map_err(|source| RepoContextError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ctx: RepoContext = serde_json::from_str(&text).map_err(|source| RepoContextError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        ctx.validate()?;
        Ok(ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionStep {
    pub step_id: String,
    pub instruction: String,
}

/// An executable, repository-grounded instruction sequence with declared
/// file expectations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseCandidate {
    pub case_id: String,
    #[serde(deserialize_with = "int_or_numeric_string")]
    pub candidate_id: u64,
    #[serde(default)]
    pub seed_template_id: String,
    pub instruction_sequence: Vec<InstructionStep>,
    #[serde(default)]
    pub rollback_steps: Vec<String>,
    #[serde(default)]
    pub rollback_failure_patterns: Vec<String>,
    #[serde(default)]
    pub post_rollback_verification_steps: Vec<String>,
    #[serde(default)]
    pub expected_new_files: Vec<String>,
    #[serde(default)]
    pub expected_modified_files: Vec<String>,
}

fn int_or_numeric_string<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Int(n) => Ok(n),
        Raw::Str(s) => s.trim().parse().map_err(serde::de::Error::custom),
    }
}

impl CaseCandidate {
    pub fn step(&self, id: &str) -> Option<&InstructionStep> {
        self.instruction_sequence.iter().find(|s| s.step_id == id)
    }

    /// Union of expected new and modified files.
    pub fn expected_artifacts(&self) -> impl Iterator<Item = &String> {
        self.expected_new_files.iter().chain(&self.expected_modified_files)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateRule {
    StepBound,
    StepIdSequence,
    EmptyInstruction,
    DanglingStepRef,
    ForbiddenPath,
    OverlappingExpectations,
    EmptyCaseId,
}

impl fmt::Display for CandidateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CandidateRule::StepBound => "step-bound",
            CandidateRule::StepIdSequence => "step-id-sequence",
            CandidateRule::EmptyInstruction => "empty-instruction",
            CandidateRule::DanglingStepRef => "dangling-step-ref",
            CandidateRule::ForbiddenPath => "forbidden-path",
            CandidateRule::OverlappingExpectations => "overlapping-expectations",
            CandidateRule::EmptyCaseId => "empty-case-id",
        };
        f.write_str(s)
    }
}

pub type CandidateReport = ValidationReport<CandidateRule>;

pub fn validate_candidate(candidate: &CaseCandidate, max_steps: usize) -> CandidateReport {
    let mut findings = Vec::new();
    let n = candidate.instruction_sequence.len();

    if candidate.case_id.trim().is_empty() {
        findings.push(Finding::new(CandidateRule::EmptyCaseId, "case_id", "case_id is empty"));
    }
    if n == 0 || n > max_steps {
        findings.push(Finding::new(
            CandidateRule::StepBound,
            "instruction_sequence",
            format!("{n} steps, allowed 1..={max_steps}"),
        ));
    }
    for (i, step) in candidate.instruction_sequence.iter().enumerate() {
        let want = step_id(i + 1);
        if step.step_id != want {
            findings.push(Finding::new(
                CandidateRule::StepIdSequence,
                "instruction_sequence",
                format!("position {} has {:?}, expected {want:?}", i + 1, step.step_id),
            ));
        }
        if step.instruction.trim().is_empty() {
            findings.push(Finding::new(
                CandidateRule::EmptyInstruction,
                "instruction_sequence",
                format!("{} has no instruction", step.step_id),
            ));
        }
    }

    let ids: BTreeSet<&str> = candidate.instruction_sequence.iter().map(|s| s.step_id.as_str()).collect();
    for (field, refs) in [
        ("rollback_steps", &candidate.rollback_steps),
        ("post_rollback_verification_steps", &candidate.post_rollback_verification_steps),
    ] {
        for r in refs {
            if !ids.contains(r.as_str()) {
                findings.push(Finding::new(
                    CandidateRule::DanglingStepRef,
                    field,
                    format!("{r} is not in instruction_sequence"),
                ));
            }
        }
    }

    for (field, paths) in [
        ("expected_new_files", &candidate.expected_new_files),
        ("expected_modified_files", &candidate.expected_modified_files),
    ] {
        for p in paths {
            if let Err(v) = check_relative(p) {
                findings.push(Finding::new(CandidateRule::ForbiddenPath, field, format!("{p:?}: {v}")));
            }
        }
    }

    let new: BTreeSet<&String> = candidate.expected_new_files.iter().collect();
    for p in candidate.expected_modified_files.iter().filter(|p| new.contains(p)) {
        findings.push(Finding::new(
            CandidateRule::OverlappingExpectations,
            "expected_new_files",
            format!("{p:?} is also in expected_modified_files"),
        ));
    }

    ValidationReport::from_findings(findings)
}

/// What a generator gets to see for one seed.
#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub seed: &'a SeedTemplate,
    pub ctx: &'a RepoContext,
    pub max_steps: usize,
    /// 1-based attempt number.
    pub attempt: usize,
    /// Why the previous attempt was rejected.
    pub feedback: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeneratorError {
    #[error("generator unavailable: {0}")]
    Unavailable(String),
    #[error("cannot bind placeholder {0}")]
    Unbound(String),
}

/// Produces one text document describing a case candidate.
pub trait TaskGenerator: Sync {
    fn name(&self) -> String;
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, GeneratorError>;
}

/// Schema the generator output must satisfy. Ids are assigned by the
/// instantiator; any ids present in the output are ignored.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratedCase {
    #[serde(default, rename = "case_id")]
    _case_id: Option<serde_json::Value>,
    #[serde(default, rename = "candidate_id")]
    _candidate_id: Option<serde_json::Value>,
    #[serde(default, rename = "seed_template_id")]
    _seed_template_id: Option<serde_json::Value>,
    instruction_sequence: Vec<InstructionStep>,
    #[serde(default)]
    rollback_steps: Vec<String>,
    #[serde(default)]
    rollback_failure_patterns: Vec<String>,
    #[serde(default)]
    post_rollback_verification_steps: Vec<String>,
    #[serde(default)]
    expected_new_files: Vec<String>,
    #[serde(default)]
    expected_modified_files: Vec<String>,
    /// Accepted as an alias: entries not already declared count as new files.
    #[serde(default)]
    expected_artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "kebab-case")]
pub enum AttemptError {
    Generator(String),
    Parse(String),
    Schema(String),
}

impl fmt::Display for AttemptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttemptError::Generator(s) => write!(f, "generator error: {s}"),
            AttemptError::Parse(s) => write!(f, "unparseable output: {s}"),
            AttemptError::Schema(s) => write!(f, "schema violation: {s}"),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[error("instantiation of seed {seed_template_id} failed after {} attempts", attempts.len())]
pub struct InstantiationFailure {
    pub seed_template_id: String,
    pub generator: String,
    pub attempts: Vec<AttemptError>,
}

#[derive(Debug, Clone, Copy)]
pub struct InstantiateOptions {
    pub max_steps: usize,
    pub attempts: usize,
}

impl Default for InstantiateOptions {
    fn default() -> Self {
        InstantiateOptions {
            max_steps: DEFAULT_MAX_STEPS,
            attempts: DEFAULT_ATTEMPTS,
        }
    }
}

fn parse_generated(text: &str, seed: &SeedTemplate) -> Result<CaseCandidate, AttemptError> {
    let trimmed = text.trim();
    let body = if trimmed.starts_with('{') {
        trimmed
    } else {
        extract_json_object(text).ok_or_else(|| AttemptError::Parse("no JSON object found".into()))?
    };
    let g: GeneratedCase = serde_json::from_str(body).map_err(|e| AttemptError::Parse(e.to_string()))?;
    let mut expected_new_files = g.expected_new_files;
    for p in g.expected_artifacts {
        if !expected_new_files.contains(&p) && !g.expected_modified_files.contains(&p) {
            expected_new_files.push(p);
        }
    }
    Ok(CaseCandidate {
        case_id: case_id_for_seed(&seed.seed_template_id),
        candidate_id: seed.number().unwrap_or(0) as u64,
        seed_template_id: seed.seed_template_id.clone(),
        instruction_sequence: g.instruction_sequence,
        rollback_steps: g.rollback_steps,
        rollback_failure_patterns: g.rollback_failure_patterns,
        post_rollback_verification_steps: g.post_rollback_verification_steps,
        expected_new_files,
        expected_modified_files: g.expected_modified_files,
    })
}

/// Expands one seed into a validated candidate, retrying rejected generator
/// output up to the attempt budget.
pub fn instantiate(
    seed: &SeedTemplate,
    ctx: &RepoContext,
    generator: &dyn TaskGenerator,
    opts: InstantiateOptions,
) -> Result<CaseCandidate, InstantiationFailure> {
    let mut errors = Vec::new();
    let mut feedback = None;
    for attempt in 1..=opts.attempts.max(1) {
        let request = GenerationRequest {
            seed,
            ctx,
            max_steps: opts.max_steps,
            attempt,
            feedback: feedback.take(),
        };
        let err = match generator.generate(&request) {
            Err(e) => AttemptError::Generator(e.to_string()),
            Ok(text) => match parse_generated(&text, seed) {
                Err(e) => e,
                Ok(candidate) => {
                    let report = validate_candidate(&candidate, opts.max_steps);
                    if report.is_empty() {
                        return Ok(candidate);
                    }
                    AttemptError::Schema(report.to_string())
                }
            },
        };
        feedback = Some(err.to_string());
        errors.push(err);
    }
    Err(InstantiationFailure {
        seed_template_id: seed.seed_template_id.clone(),
        generator: generator.name(),
        attempts: errors,
    })
}

/// Deterministic offline generator: binds skeleton placeholders from a fixed
/// table and adds action-side steps only when the action calls for them.
///
/// | placeholder | binding |
/// |---|---|
/// | `<COMMAND>` | first runnable command |
/// | `<OUTPUT_FILE>` | `output/result.txt` |
/// | `<OUTPUT_META>` | `output/result.meta.json` |
/// | `<AUX_FILE>` | `output/aux.txt` |
/// | `<INPUT_FILE>`, `<FILE>` | first salient path with an extension |
/// | `<WORKDIR>` | repository mount point |
#[derive(Debug, Default, Clone, Copy)]
pub struct TemplateGenerator;

pub const OUTPUT_FILE_BINDING: &str = "output/result.txt";
pub const OUTPUT_META_BINDING: &str = "output/result.meta.json";
pub const AUX_FILE_BINDING: &str = "output/aux.txt";
pub const TOOL_LOG: &str = "logs/tool.log";
pub const DEFAULT_ROLLBACK_PATTERNS: &[&str] = &["not found", "permission denied"];

impl TemplateGenerator {
    fn bind(token: &str, ctx: &RepoContext) -> Result<String, GeneratorError> {
        let first_file = || {
            ctx.salient_paths
                .iter()
                .find(|p| {
                    Path::new(p.as_str())
                        .extension()
                        .is_some_and(|e| !e.is_empty())
                })
                .cloned()
        };
        let bound = match token {
            "<COMMAND>" => ctx.runnable_commands.first().cloned(),
            "<OUTPUT_FILE>" => Some(OUTPUT_FILE_BINDING.to_string()),
            "<OUTPUT_META>" => Some(OUTPUT_META_BINDING.to_string()),
            "<AUX_FILE>" => Some(AUX_FILE_BINDING.to_string()),
            "<INPUT_FILE>" | "<FILE>" => first_file(),
            "<WORKDIR>" => Some(ctx.repo_root.clone()),
            _ => None,
        };
        bound.ok_or_else(|| GeneratorError::Unbound(token.to_string()))
    }

    pub fn fill(seed: &SeedTemplate, ctx: &RepoContext) -> Result<CaseCandidate, GeneratorError> {
        let mut steps = Vec::new();
        let mut outputs: Vec<String> = Vec::new();
        for template in &seed.interaction_body.seq_skeleton_steps {
            let mut text = template.clone();
            for token in placeholders(template) {
                let value = Self::bind(token, ctx)?;
                if is_under(&value, "output") && !outputs.contains(&value) {
                    outputs.push(value.clone());
                }
                text = text.replace(token, &value);
            }
            steps.push(text);
        }

        let action = &seed.action;
        let haystack = format!("{} {}", action.stressed_operation, action.target_anomaly_surface).to_lowercase();
        let wants_rollback = ["rollback", "roll back", "undo", "restore", "cleanup"]
            .iter()
            .any(|k| haystack.contains(k));
        let wants_log = ["logging", "log "].iter().any(|k| haystack.contains(k)) || haystack.ends_with("log");

        let mut rollback_steps = Vec::new();
        let mut verification_steps = Vec::new();
        let mut rollback_failure_patterns = Vec::new();
        let mut expected_new = outputs.clone();
        let mut expected_modified = Vec::new();

        if wants_rollback {
            let victim = outputs.first().cloned().unwrap_or_else(|| OUTPUT_FILE_BINDING.to_string());
            steps.push(format!("Rollback the output by deleting {victim}"));
            rollback_steps.push(step_id(steps.len()));
            expected_new.retain(|p| p != &victim);
            match expected_new.first() {
                Some(kept) => steps.push(format!("Verify {kept} still exists")),
                None => steps.push(format!("Verify {victim} no longer exists")),
            }
            verification_steps.push(step_id(steps.len()));
            rollback_failure_patterns = DEFAULT_ROLLBACK_PATTERNS.iter().map(|s| s.to_string()).collect();
        }
        if wants_log {
            steps.push(format!("Append a one-line summary of the outcome to {TOOL_LOG}"));
            expected_modified.push(TOOL_LOG.to_string());
        }

        Ok(CaseCandidate {
            case_id: case_id_for_seed(&seed.seed_template_id),
            candidate_id: seed.number().unwrap_or(0) as u64,
            seed_template_id: seed.seed_template_id.clone(),
            instruction_sequence: steps
                .into_iter()
                .enumerate()
                .map(|(i, instruction)| InstructionStep {
                    step_id: step_id(i + 1),
                    instruction,
                })
                .collect(),
            rollback_steps,
            rollback_failure_patterns,
            post_rollback_verification_steps: verification_steps,
            expected_new_files: expected_new,
            expected_modified_files: expected_modified,
        })
    }
}

impl TaskGenerator for TemplateGenerator {
    fn name(&self) -> String {
        "template-v1".into()
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        let c = Self::fill(request.seed, request.ctx)?;
        Ok(serde_json::to_string(&c).expect("candidate serializes"))
    }
}

/// Query template for the external generator.
pub const GENERATOR_PROMPT_TEMPLATE: &str = "\
You write one executable multi-step task for testing a coding agent inside a repository workspace.

SEED TEMPLATE:
{seed}

REPOSITORY CONTEXT:
{ctx}

Rules:
- Return strict JSON only, one object with keys: instruction_sequence, rollback_steps,
  rollback_failure_patterns, post_rollback_verification_steps, expected_new_files, expected_modified_files.
- instruction_sequence is a list of {\"step_id\": \"S01\", \"instruction\": \"...\"}, consecutive ids, at most {max_steps} steps.
- Bind every placeholder to concrete repository paths, commands, or artifact locations.
- Add rollback or expected-file fields only when the action requires them.
- Every path must be workspace-relative: no absolute paths, no `..`.
{feedback}";

pub struct ExternalGenerator<G> {
    generator: G,
}

impl<G: TextGenerator> ExternalGenerator<G> {
    pub fn new(generator: G) -> Self {
        ExternalGenerator { generator }
    }
}

impl<G: TextGenerator> TaskGenerator for ExternalGenerator<G> {
    fn name(&self) -> String {
        format!("external-v1:{}", self.generator.model())
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        let feedback = request
            .feedback
            .as_ref()
            .map(|f| format!("\nYour previous answer was rejected: {f}\n"))
            .unwrap_or_default();
        let prompt = GENERATOR_PROMPT_TEMPLATE
            .replace("{seed}", &serde_json::to_string_pretty(request.seed).expect("seed serializes"))
            .replace("{ctx}", &serde_json::to_string_pretty(request.ctx).expect("ctx serializes"))
            .replace("{max_steps}", &request.max_steps.to_string())
            .replace("{feedback}", &feedback);
        self.generator
            .complete(&prompt)
            .map_err(|e| GeneratorError::Unavailable(e.to_string()))
    }
}

/// Replays generator output saved as `<dir>/<case_id>.json`.
#[derive(Debug, Clone)]
pub struct RecordedGenerator {
    dir: PathBuf,
}

impl RecordedGenerator {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RecordedGenerator { dir: dir.into() }
    }
}

impl TaskGenerator for RecordedGenerator {
    fn name(&self) -> String {
        format!("recorded:{}", self.dir.display())
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        let path = self
            .dir
            .join(format!("{}.json", case_id_for_seed(&request.seed.seed_template_id)));
        fs::read_to_string(&path).map_err(|e| GeneratorError::Unavailable(format!("{}: {e}", path.display())))
    }
}
