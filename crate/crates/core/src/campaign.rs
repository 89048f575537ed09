//! Campaign configuration, on-disk layout, stage manifest and the pipeline
//! driver that ties the stages together.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::catalog::load_catalog;
use crate::clock::{Clock, ReplayClock, SystemClock};
use crate::composer::{compose_seeds, CompatibilityJudge, DecisionLog, ExternalJudge, RecordedJudge, RuleJudge, SeedTemplate};
use crate::executor::{
    run_case, AgentAdapter, Limits, Redactor, RunEnv, RunRecord, ScriptedAdapter, StepTrace, SubprocessAdapter,
    DEFAULT_PER_STEP_SECONDS,
};
use crate::fsutil::{file_digest, sha256_hex, to_json_pretty, write_atomic, write_json};
use crate::ids::{natural_cmp, ConfigId};
use crate::instantiator::{
    instantiate, CaseCandidate, ExternalGenerator, InstantiateOptions, InstantiationFailure, RecordedGenerator,
    RepoContext, TaskGenerator, TemplateGenerator, DEFAULT_MAX_STEPS,
};
use crate::labels::{LabelError, LabelStore};
use crate::llm::ChatCompletionsClient;
use crate::oracle::{classify_run, AdvisoryChecker, OracleConfig, Verdict};
use crate::report::{build_report, render_text, CaseIndex, Origin, ReportOptions};
use crate::workspace::{ChangeScope, EvidenceStore, ProvisionSpec, Workspace, DEFAULT_IGNORE};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Compose,
    Instantiate,
    Run,
    Check,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Compose, Stage::Instantiate, Stage::Run, Stage::Check, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Compose => "compose",
            Stage::Instantiate => "instantiate",
            Stage::Run => "run",
            Stage::Check => "check",
            Stage::Report => "report",
        }
    }

    /// Bumped when a stage's output format or semantics change.
    pub fn version(self) -> &'static str {
        match self {
            Stage::Compose => "compose-1",
            Stage::Instantiate => "instantiate-1",
            Stage::Run => "run-1",
            Stage::Check => "check-1",
            Stage::Report => "report-1",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JudgeSpec {
    Rules,
    External,
    Recorded(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeneratorSpec {
    Template,
    External,
    Recorded(PathBuf),
}

fn parse_spec(s: &str) -> Option<(&str, Option<&str>)> {
    match s.split_once(':') {
        Some((kind, rest)) => Some((kind, Some(rest))),
        None => Some((s, None)),
    }
}

impl JudgeSpec {
    pub fn parse(s: &str, base: &Path) -> Result<Self, ConfigError> {
        match parse_spec(s) {
            Some(("rules", None)) => Ok(JudgeSpec::Rules),
            Some(("external", None)) => Ok(JudgeSpec::External),
            Some(("recorded", Some(p))) if !p.is_empty() => Ok(JudgeSpec::Recorded(base.join(p))),
            _ => Err(ConfigError::Invalid(format!("judge {s:?}: expected rules, external or recorded:<path>"))),
        }
    }

    fn describe(&self) -> String {
        match self {
            JudgeSpec::Rules => "rules".into(),
            JudgeSpec::External => "external".into(),
            JudgeSpec::Recorded(p) => format!("recorded:{}", p.display()),
        }
    }
}

impl GeneratorSpec {
    pub fn parse(s: &str, base: &Path) -> Result<Self, ConfigError> {
        match parse_spec(s) {
            Some(("template", None)) => Ok(GeneratorSpec::Template),
            Some(("external", None)) => Ok(GeneratorSpec::External),
            Some(("recorded", Some(p))) if !p.is_empty() => Ok(GeneratorSpec::Recorded(base.join(p))),
            _ => Err(ConfigError::Invalid(format!(
                "generator {s:?}: expected template, external or recorded:<dir>"
            ))),
        }
    }

    fn describe(&self) -> String {
        match self {
            GeneratorSpec::Template => "template".into(),
            GeneratorSpec::External => "external".into(),
            GeneratorSpec::Recorded(p) => format!("recorded:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    System,
    /// Fixed timestamps so reruns are byte-identical.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub agent: String,
    pub model: String,
    /// `subprocess` (default) or `scripted:<transcript dir>`.
    #[serde(default = "default_adapter")]
    pub adapter: String,
}

fn default_adapter() -> String {
    "subprocess".into()
}

impl AgentConfig {
    pub fn id(&self) -> ConfigId {
        ConfigId::new(&self.agent, &self.model)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsConfig {
    #[serde(default = "default_per_step")]
    pub per_step_seconds: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_parallel")]
    pub parallel: usize,
}

fn default_per_step() -> u64 {
    DEFAULT_PER_STEP_SECONDS
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

fn default_parallel() -> usize {
    4
}

impl Default for LimitsConfig {
    fn default() -> Self {
        LimitsConfig {
            per_step_seconds: default_per_step(),
            max_steps: default_max_steps(),
            parallel: default_parallel(),
        }
    }
}

/// On-disk campaign configuration (TOML). Relative paths resolve against
/// the directory holding the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfigFile {
    pub catalog: PathBuf,
    pub repo_context: PathBuf,
    pub base_repo: PathBuf,
    #[serde(default)]
    pub overlay: Option<PathBuf>,
    #[serde(default = "default_judge")]
    pub judge: String,
    #[serde(default = "default_generator")]
    pub generator: String,
    #[serde(default)]
    pub configs: Vec<AgentConfig>,
    #[serde(default)]
    pub limits: LimitsConfig,
    #[serde(default)]
    pub ignore: Option<Vec<String>>,
    #[serde(default)]
    pub output_root: Option<PathBuf>,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    /// Also ask the external text-generation endpoint to review each bundle.
    #[serde(default)]
    pub advisory: bool,
    #[serde(default)]
    pub report: Option<ReportSection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default = "default_top")]
    pub top: usize,
    #[serde(default)]
    pub per_config: bool,
}

fn default_top() -> usize {
    10
}

fn default_judge() -> String {
    "rules".into()
}

fn default_generator() -> String {
    "template".into()
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub catalog: PathBuf,
    pub repo_context: PathBuf,
    pub base_repo: PathBuf,
    pub overlay: Option<PathBuf>,
    pub judge: JudgeSpec,
    pub generator: GeneratorSpec,
    pub configs: Vec<AgentConfig>,
    pub limits: LimitsConfig,
    pub ignore: Vec<String>,
    pub output_root: Option<PathBuf>,
    pub clock: ClockMode,
    pub oracle: OracleConfig,
    pub advisory: bool,
    pub report: ReportOptions,
    /// Directory relative paths were resolved against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{what} {path} does not exist")]
    MissingPath { what: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

impl CampaignConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: CampaignConfigFile = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_file(file, &base)
    }

    pub fn from_file(file: CampaignConfigFile, base: &Path) -> Result<Self, ConfigError> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let configs = file
            .configs
            .into_iter()
            .map(|mut c| {
                if let Some(dir) = c.adapter.strip_prefix("scripted:") {
                    c.adapter = format!("scripted:{}", resolve(Path::new(dir)).display());
                }
                c
            })
            .collect();
        let report = file.report.unwrap_or(ReportSection {
            top: default_top(),
            per_config: false,
        });
        let cfg = CampaignConfig {
            catalog: resolve(&file.catalog),
            repo_context: resolve(&file.repo_context),
            base_repo: resolve(&file.base_repo),
            overlay: file.overlay.as_deref().map(resolve),
            judge: JudgeSpec::parse(&file.judge, base)?,
            generator: GeneratorSpec::parse(&file.generator, base)?,
            configs,
            limits: file.limits,
            ignore: file
                .ignore
                .unwrap_or_else(|| DEFAULT_IGNORE.iter().map(|s| s.to_string()).collect()),
            output_root: file.output_root.as_deref().map(resolve),
            clock: file.clock,
            oracle: file.oracle.unwrap_or_default(),
            advisory: file.advisory,
            report: ReportOptions {
                top: report.top,
                per_config: report.per_config,
            },
            base_dir: base.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let must_exist = [
            ("catalog", Some(&self.catalog)),
            ("repo context", Some(&self.repo_context)),
            ("base repository", Some(&self.base_repo)),
            ("overlay", self.overlay.as_ref()),
        ];
        for (what, path) in must_exist {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError::MissingPath { what, path: p.clone() });
                }
            }
        }
        if let JudgeSpec::Recorded(p) = &self.judge {
            if !p.exists() {
                return Err(ConfigError::MissingPath {
                    what: "recorded decision log",
                    path: p.clone(),
                });
            }
        }
        if let GeneratorSpec::Recorded(p) = &self.generator {
            if !p.is_dir() {
                return Err(ConfigError::MissingPath {
                    what: "recorded generator directory",
                    path: p.clone(),
                });
            }
        }
        if self.limits.per_step_seconds == 0 || self.limits.max_steps == 0 || self.limits.parallel == 0 {
            return Err(ConfigError::Invalid("limits must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.configs {
            if c.agent.is_empty() || c.model.is_empty() {
                return Err(ConfigError::Invalid("agent and model must be non-empty".into()));
            }
            if !seen.insert(c.id().slug()) {
                return Err(ConfigError::Invalid(format!("duplicate configuration {}", c.id())));
            }
            build_adapter(c)?;
        }
        Ok(())
    }

    pub fn config_ids(&self) -> Vec<ConfigId> {
        self.configs.iter().map(AgentConfig::id).collect()
    }
}

pub fn build_adapter(c: &AgentConfig) -> Result<Box<dyn AgentAdapter>, ConfigError> {
    if let Some(dir) = c.adapter.strip_prefix("scripted:") {
        return Ok(Box::new(ScriptedAdapter::from_dir(dir).named(&c.agent, &c.model)));
    }
    if c.adapter != "subprocess" {
        return Err(ConfigError::Invalid(format!("adapter {:?}: expected subprocess or scripted:<dir>", c.adapter)));
    }
    SubprocessAdapter::for_agent(&c.agent, &c.model)
        .map(|a| Box::new(a) as Box<dyn AgentAdapter>)
        .ok_or_else(|| ConfigError::Invalid(format!("no subprocess adapter for agent {:?}", c.agent)))
}

fn redactor_for(c: &AgentConfig) -> Redactor {
    let base = Redactor::default().with_env_values(["BEFUZZ_LLM_API_KEY"]);
    match SubprocessAdapter::for_agent(&c.agent, &c.model) {
        Some(a) if c.adapter == "subprocess" => base.with_env_values(&a.spec().credential_env),
        _ => base,
    }
}

/// Paths inside a campaign directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn id(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn seeds_dir(&self) -> PathBuf {
        self.root.join("seeds")
    }
    pub fn seed(&self, id: &str) -> PathBuf {
        self.seeds_dir().join(format!("{id}.json"))
    }
    pub fn decisions(&self) -> PathBuf {
        self.root.join("decisions.jsonl")
    }
    pub fn cases_dir(&self) -> PathBuf {
        self.root.join("cases")
    }
    pub fn case(&self, case_id: &str) -> PathBuf {
        self.cases_dir().join(format!("{case_id}.json"))
    }
    pub fn instantiation_failures(&self) -> PathBuf {
        self.root.join("instantiation_failures.jsonl")
    }
    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }
    pub fn config_dir(&self, config: &ConfigId) -> PathBuf {
        self.runs_dir().join(config.slug())
    }
    pub fn run_dir(&self, config: &ConfigId, case_id: &str) -> PathBuf {
        self.config_dir(config).join(case_id)
    }
    pub fn run_record(&self, config: &ConfigId, case_id: &str) -> PathBuf {
        self.run_dir(config, case_id).join("run.json")
    }
    pub fn traces_dir(&self, config: &ConfigId, case_id: &str) -> PathBuf {
        self.run_dir(config, case_id).join("traces")
    }
    pub fn verdict(&self, config: &ConfigId, case_id: &str) -> PathBuf {
        self.run_dir(config, case_id).join("verdict.json")
    }
    pub fn not_run(&self, config: &ConfigId, case_id: &str) -> PathBuf {
        self.run_dir(config, case_id).join("not_run.json")
    }
    pub fn verdicts(&self) -> PathBuf {
        self.root.join("verdicts.jsonl")
    }
    pub fn check_errors(&self) -> PathBuf {
        self.root.join("check_errors.jsonl")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.jsonl")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn report_json(&self) -> PathBuf {
        self.report_dir().join("report.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.report_dir().join("report.txt")
    }
    pub fn configs_index(&self) -> PathBuf {
        self.root.join("configs.json")
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| LoadError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| LoadError::Parse {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(io::Error::other)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn sorted_json_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e),
    };
    files.sort_by(|a, b| natural_cmp(&a.to_string_lossy(), &b.to_string_lossy()));
    Ok(files)
}

pub fn load_seeds(layout: &Layout) -> Result<Vec<SeedTemplate>, LoadError> {
    let files = sorted_json_files(&layout.seeds_dir()).map_err(|source| LoadError::Io {
        path: layout.seeds_dir(),
        source,
    })?;
    files.iter().map(|p| read_json(p)).collect()
}

pub fn load_cases(layout: &Layout) -> Result<Vec<CaseCandidate>, LoadError> {
    let files = sorted_json_files(&layout.cases_dir()).map_err(|source| LoadError::Io {
        path: layout.cases_dir(),
        source,
    })?;
    files.iter().map(|p| read_json(p)).collect()
}

pub fn load_case(layout: &Layout, case_id: &str) -> Result<CaseCandidate, LoadError> {
    read_json(&layout.case(case_id))
}

pub fn load_run(layout: &Layout, config: &ConfigId, case_id: &str) -> Result<RunRecord, LoadError> {
    read_json(&layout.run_record(config, case_id))
}

/// Persisted step traces, in step order.
pub fn load_traces(layout: &Layout, config: &ConfigId, case_id: &str) -> Result<Vec<StepTrace>, LoadError> {
    let dir = layout.traces_dir(config, case_id);
    let files = sorted_json_files(&dir).map_err(|source| LoadError::Io { path: dir, source })?;
    files.iter().map(|p| read_json(p)).collect()
}

pub fn load_verdicts(layout: &Layout) -> Result<Vec<Verdict>, LoadError> {
    read_jsonl(&layout.verdicts())
}

pub fn load_configs(layout: &Layout) -> Result<Vec<ConfigId>, LoadError> {
    read_json(&layout.configs_index())
}

/// case_id → (ip_id, action_id), through each case's seed.
pub fn load_case_index(layout: &Layout) -> Result<CaseIndex, LoadError> {
    let seeds: BTreeMap<String, SeedTemplate> = load_seeds(layout)?
        .into_iter()
        .map(|s| (s.seed_template_id.clone(), s))
        .collect();
    let mut index = CaseIndex::new();
    for c in load_cases(layout)? {
        if let Some(s) = seeds.get(&c.seed_template_id) {
            index.insert(
                c.case_id.clone(),
                Origin {
                    ip_id: s.interaction_body.ip_id.clone(),
                    action_id: s.action.action_id.clone(),
                },
            );
        }
    }
    Ok(index)
}

/// Relative path → sha256 for files under `root` accepted by `keep`.
pub fn digest_files(root: &Path, keep: impl Fn(&str) -> bool) -> io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if !root.exists() {
        return Ok(out);
    }
    if root.is_file() {
        out.insert(String::new(), file_digest(root)?);
        return Ok(out);
    }
    for item in WalkDir::new(root).follow_links(false).min_depth(1) {
        let item = item.map_err(io::Error::from)?;
        if item.file_type().is_dir() {
            continue;
        }
        let rel = item
            .path()
            .strip_prefix(root)
            .expect("walk stays under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if keep(&rel) {
            let digest = if item.file_type().is_symlink() {
                sha256_hex(fs::read_link(item.path())?.to_string_lossy().as_bytes())
            } else {
                file_digest(item.path())?
            };
            out.insert(rel, digest);
        }
    }
    Ok(out)
}

pub fn digest_map(map: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in map {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn digest_tree(root: &Path) -> io::Result<String> {
    Ok(digest_map(&digest_files(root, |_| true)?))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub version: String,
    pub inputs: BTreeMap<String, String>,
    /// Relative artifact path → digest.
    pub outputs: BTreeMap<String, String>,
    pub completed_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub stages: BTreeMap<Stage, StageEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            manifest_version: MANIFEST_VERSION,
            stages: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn load(layout: &Layout) -> Result<Self, LoadError> {
        if !layout.manifest().exists() {
            return Ok(Manifest::default());
        }
        read_json(&layout.manifest())
    }

    pub fn save(&self, layout: &Layout) -> io::Result<()> {
        write_json(&layout.manifest(), self)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} needs {needs}; run `befuzz {producer}` first")]
    InputMissing {
        stage: Stage,
        needs: String,
        producer: Stage,
    },
    #[error("stage {stage} failed: {detail}")]
    Stage { stage: Stage, detail: String },
}

impl PipelineError {
    /// 2 for configuration errors, 1 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }

    fn stage(stage: Stage, detail: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            detail: detail.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub summary: String,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub force: bool,
    /// Overrides `limits.parallel`.
    pub parallel: Option<usize>,
}

/// Runs `stages` in pipeline order over the campaign at `layout`.
pub fn run_pipeline(
    config: &CampaignConfig,
    layout: &Layout,
    stages: &[Stage],
    opts: &PipelineOptions,
) -> Result<Vec<StageOutcome>, PipelineError> {
    config.validate()?;
    if opts.parallel == Some(0) {
        return Err(ConfigError::Invalid("--parallel must be positive".into()).into());
    }
    fs::create_dir_all(layout.root()).map_err(|e| ConfigError::Io {
        path: layout.root().to_path_buf(),
        source: e,
    })?;
    let mut ordered: Vec<Stage> = stages.to_vec();
    ordered.sort();
    ordered.dedup();

    let mut outcomes = Vec::new();
    for stage in ordered {
        let mut manifest = Manifest::load(layout).map_err(|e| PipelineError::stage(stage, e))?;
        let inputs = stage_inputs(stage, config, layout)?;
        if !opts.force {
            if let Some(prev) = manifest.stages.get(&stage) {
                let current = stage_outputs(stage, layout).map_err(|e| PipelineError::stage(stage, e))?;
                if prev.version == stage.version() && prev.inputs == inputs && prev.outputs == current {
                    outcomes.push(StageOutcome {
                        stage,
                        skipped: true,
                        summary: "up to date".into(),
                    });
                    continue;
                }
            }
        }
        // Invalidate before running so a failed stage never looks complete.
        manifest.stages.remove(&stage);
        manifest.save(layout).map_err(|e| PipelineError::stage(stage, e))?;

        let summary = match stage {
            Stage::Compose => compose_stage(config, layout)?,
            Stage::Instantiate => instantiate_stage(config, layout, opts)?,
            Stage::Run => run_stage(config, layout, opts)?,
            Stage::Check => check_stage(config, layout)?,
            Stage::Report => report_stage(config, layout)?,
        };
        let outputs = stage_outputs(stage, layout).map_err(|e| PipelineError::stage(stage, e))?;
        manifest.stages.insert(
            stage,
            StageEntry {
                version: stage.version().into(),
                inputs,
                outputs,
                completed_at: (config.clock == ClockMode::System).then(Utc::now),
            },
        );
        manifest.save(layout).map_err(|e| PipelineError::stage(stage, e))?;
        outcomes.push(StageOutcome {
            stage,
            skipped: false,
            summary,
        });
    }
    Ok(outcomes)
}

fn require(stage: Stage, path: &Path, producer: Stage) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::InputMissing {
            stage,
            needs: path.display().to_string(),
            producer,
        })
    }
}

fn stage_inputs(
    stage: Stage,
    config: &CampaignConfig,
    layout: &Layout,
) -> Result<BTreeMap<String, String>, PipelineError> {
    let io = |e: io::Error| PipelineError::stage(stage, e);
    let mut m = BTreeMap::new();
    match stage {
        Stage::Compose => {
            m.insert("catalog".into(), file_digest(&config.catalog).map_err(io)?);
            m.insert("judge".into(), config.judge.describe());
            if let JudgeSpec::Recorded(p) = &config.judge {
                m.insert("judge_log".into(), file_digest(p).map_err(io)?);
            }
        }
        Stage::Instantiate => {
            require(stage, &layout.seeds_dir(), Stage::Compose)?;
            m.insert("seeds".into(), digest_map(&stage_outputs(Stage::Compose, layout).map_err(io)?));
            m.insert("repo_context".into(), file_digest(&config.repo_context).map_err(io)?);
            m.insert("generator".into(), config.generator.describe());
            m.insert("max_steps".into(), config.limits.max_steps.to_string());
            if let GeneratorSpec::Recorded(p) = &config.generator {
                m.insert("generator_replies".into(), digest_tree(p).map_err(io)?);
            }
        }
        Stage::Run => {
            require(stage, &layout.cases_dir(), Stage::Instantiate)?;
            m.insert("cases".into(), digest_map(&stage_outputs(Stage::Instantiate, layout).map_err(io)?));
            m.insert("base_repo".into(), digest_tree(&config.base_repo).map_err(io)?);
            if let Some(o) = &config.overlay {
                m.insert("overlay".into(), digest_tree(o).map_err(io)?);
            }
            m.insert("configs".into(), serde_json::to_string(&config.configs).expect("configs serialize"));
            for c in &config.configs {
                if let Some(dir) = c.adapter.strip_prefix("scripted:") {
                    m.insert(format!("transcripts:{}", c.id().slug()), digest_tree(Path::new(dir)).map_err(io)?);
                }
            }
            m.insert("per_step_seconds".into(), config.limits.per_step_seconds.to_string());
            m.insert("ignore".into(), config.ignore.join(","));
            m.insert("clock".into(), format!("{:?}", config.clock));
        }
        Stage::Check => {
            require(stage, &layout.configs_index(), Stage::Run)?;
            m.insert("runs".into(), digest_map(&stage_outputs(Stage::Run, layout).map_err(io)?));
            m.insert("cases".into(), digest_map(&stage_outputs(Stage::Instantiate, layout).map_err(io)?));
            m.insert("oracle".into(), serde_json::to_string(&config.oracle).expect("oracle config serializes"));
            m.insert("advisory".into(), config.advisory.to_string());
        }
        Stage::Report => {
            require(stage, &layout.verdicts(), Stage::Check)?;
            m.insert("verdicts".into(), file_digest(&layout.verdicts()).map_err(io)?);
            if layout.labels().exists() {
                m.insert("labels".into(), file_digest(&layout.labels()).map_err(io)?);
            }
            m.insert("cases".into(), digest_map(&stage_outputs(Stage::Instantiate, layout).map_err(io)?));
            m.insert("seeds".into(), digest_map(&stage_outputs(Stage::Compose, layout).map_err(io)?));
            m.insert(
                "options".into(),
                format!("top={} per_config={}", config.report.top, config.report.per_config),
            );
        }
    }
    Ok(m)
}

/// Artifacts a stage owns, relative to the campaign root.
pub fn stage_outputs(stage: Stage, layout: &Layout) -> io::Result<BTreeMap<String, String>> {
    let prefixed = |prefix: &str, m: BTreeMap<String, String>| -> BTreeMap<String, String> {
        m.into_iter()
            .map(|(k, v)| if k.is_empty() { (prefix.to_string(), v) } else { (format!("{prefix}/{k}"), v) })
            .collect()
    };
    Ok(match stage {
        Stage::Compose => {
            let mut m = prefixed("seeds", digest_files(&layout.seeds_dir(), |_| true)?);
            m.extend(prefixed("decisions.jsonl", digest_files(&layout.decisions(), |_| true)?));
            m
        }
        Stage::Instantiate => {
            let mut m = prefixed("cases", digest_files(&layout.cases_dir(), |_| true)?);
            m.extend(prefixed(
                "instantiation_failures.jsonl",
                digest_files(&layout.instantiation_failures(), |_| true)?,
            ));
            m
        }
        Stage::Run => {
            let mut m = prefixed(
                "runs",
                digest_files(&layout.runs_dir(), |rel| {
                    rel.ends_with("/run.json")
                        || rel.ends_with("/not_run.json")
                        || rel.contains("/traces/")
                        || rel.ends_with("/evidence/index.json")
                })?,
            );
            m.extend(prefixed("configs.json", digest_files(&layout.configs_index(), |_| true)?));
            m
        }
        Stage::Check => {
            let mut m = prefixed("runs", digest_files(&layout.runs_dir(), |rel| rel.ends_with("/verdict.json"))?);
            m.extend(prefixed("verdicts.jsonl", digest_files(&layout.verdicts(), |_| true)?));
            m.extend(prefixed("check_errors.jsonl", digest_files(&layout.check_errors(), |_| true)?));
            m
        }
        Stage::Report => prefixed("report", digest_files(&layout.report_dir(), |_| true)?),
    })
}

fn reset_dir(dir: &Path) -> io::Result<()> {
    match fs::remove_dir_all(dir) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
        _ => {}
    }
    fs::create_dir_all(dir)
}

fn compose_stage(config: &CampaignConfig, layout: &Layout) -> Result<String, PipelineError> {
    let st = Stage::Compose;
    let catalog = load_catalog(&config.catalog).map_err(|e| PipelineError::stage(st, e))?;
    let composition = match &config.judge {
        JudgeSpec::Rules => compose_seeds(&catalog, &RuleJudge),
        JudgeSpec::Recorded(path) => {
            let log = DecisionLog::load(path).map_err(|e| PipelineError::stage(st, e))?;
            compose_seeds(&catalog, &RecordedJudge::from_log(&log, None))
        }
        JudgeSpec::External => {
            let client = ChatCompletionsClient::from_env().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let external = ExternalJudge::new(client);
            // Earlier answers from the same judge version are replayed, not re-asked.
            let cached = if layout.decisions().exists() {
                DecisionLog::load(&layout.decisions()).map_err(|e| PipelineError::stage(st, e))?
            } else {
                DecisionLog::default()
            };
            let version = external.version();
            let judge = RecordedJudge::from_log(&cached, Some(&version)).with_fallback(&external);
            compose_seeds(&catalog, &judge)
        }
    }
    .map_err(|e| PipelineError::stage(st, e))?;

    reset_dir(&layout.seeds_dir()).map_err(|e| PipelineError::stage(st, e))?;
    for seed in &composition.seeds {
        write_json(&layout.seed(&seed.seed_template_id), seed).map_err(|e| PipelineError::stage(st, e))?;
    }
    composition
        .log
        .save(&layout.decisions())
        .map_err(|e| PipelineError::stage(st, e))?;
    Ok(composition.to_string())
}

fn thread_pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool builds")
}

fn instantiate_stage(config: &CampaignConfig, layout: &Layout, opts: &PipelineOptions) -> Result<String, PipelineError> {
    let st = Stage::Instantiate;
    let seeds = load_seeds(layout).map_err(|e| PipelineError::stage(st, e))?;
    let ctx = RepoContext::load(&config.repo_context).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let generator: Box<dyn TaskGenerator> = match &config.generator {
        GeneratorSpec::Template => Box::new(TemplateGenerator),
        GeneratorSpec::Recorded(dir) => Box::new(RecordedGenerator::new(dir)),
        GeneratorSpec::External => Box::new(ExternalGenerator::new(
            ChatCompletionsClient::from_env().map_err(|e| ConfigError::Invalid(e.to_string()))?,
        )),
    };
    let inst_opts = InstantiateOptions {
        max_steps: config.limits.max_steps,
        ..Default::default()
    };
    let parallel = opts.parallel.unwrap_or(config.limits.parallel);
    let results: Vec<Result<CaseCandidate, InstantiationFailure>> = thread_pool(parallel).install(|| {
        seeds
            .par_iter()
            .map(|s| instantiate(s, &ctx, generator.as_ref(), inst_opts))
            .collect()
    });

    reset_dir(&layout.cases_dir()).map_err(|e| PipelineError::stage(st, e))?;
    let mut failures = Vec::new();
    let mut ok = 0;
    for r in results {
        match r {
            Ok(c) => {
                write_json(&layout.case(&c.case_id), &c).map_err(|e| PipelineError::stage(st, e))?;
                ok += 1;
            }
            Err(f) => failures.push(f),
        }
    }
    write_jsonl(&layout.instantiation_failures(), &failures).map_err(|e| PipelineError::stage(st, e))?;
    Ok(format!("{ok} cases, {} instantiation failures", failures.len()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NotRun {
    pub case_id: String,
    pub reason: String,
}

fn case_digest_marker(dir: &Path) -> PathBuf {
    dir.join("case.sha256")
}

fn run_one(
    config: &CampaignConfig,
    layout: &Layout,
    agent: &AgentConfig,
    adapter: &dyn AgentAdapter,
    case: &CaseCandidate,
    case_digest: &str,
    runtime: &tokio::runtime::Runtime,
) -> Result<bool, String> {
    let id = agent.id();
    let dir = layout.run_dir(&id, &case.case_id);
    let marker = case_digest_marker(&dir);
    if layout.run_record(&id, &case.case_id).exists() && fs::read_to_string(&marker).ok().as_deref() == Some(case_digest) {
        return Ok(false);
    }
    reset_dir(&dir).map_err(|e| e.to_string())?;

    let clock: Box<dyn Clock> = match config.clock {
        ClockMode::System => Box::new(SystemClock),
        ClockMode::Replay => Box::new(ReplayClock::new()),
    };
    let repo_name = RepoContext::load(&config.repo_context)
        .map(|c| c.repo_name)
        .map_err(|e| e.to_string())?;
    let spec = ProvisionSpec {
        case_id: &case.case_id,
        base_repo: &config.base_repo,
        repo_name: &repo_name,
        overlay: config.overlay.as_deref(),
    };
    let ws = match Workspace::provision(&dir.join("workspace"), &spec, clock.now()) {
        Ok(ws) => ws,
        Err(e) => {
            let nr = NotRun {
                case_id: case.case_id.clone(),
                reason: e.to_string(),
            };
            write_json(&layout.not_run(&id, &case.case_id), &nr).map_err(|e| e.to_string())?;
            return Ok(true);
        }
    };
    let evidence = EvidenceStore::new(dir.join("evidence"));
    let traces = layout.traces_dir(&id, &case.case_id);
    let redactor = redactor_for(agent);
    let env = RunEnv {
        clock: clock.as_ref(),
        redactor: &redactor,
        scope: ChangeScope::new(ws.repo_mount.clone()).with_ignore(config.ignore.clone()),
        limits: Limits {
            per_step: Duration::from_secs(config.limits.per_step_seconds),
        },
        evidence: Some(&evidence),
        traces_dir: Some(&traces),
    };
    let record = runtime
        .block_on(run_case(case, adapter, &ws, &env))
        .map_err(|e| e.to_string())?;
    write_json(&layout.run_record(&id, &case.case_id), &record).map_err(|e| e.to_string())?;
    write_atomic(&marker, case_digest.as_bytes()).map_err(|e| e.to_string())?;
    Ok(true)
}

fn run_stage(config: &CampaignConfig, layout: &Layout, opts: &PipelineOptions) -> Result<String, PipelineError> {
    let st = Stage::Run;
    let cases = load_cases(layout).map_err(|e| PipelineError::stage(st, e))?;
    let mut digests = BTreeMap::new();
    for c in &cases {
        digests.insert(
            c.case_id.clone(),
            file_digest(&layout.case(&c.case_id)).map_err(|e| PipelineError::stage(st, e))?,
        );
    }
    write_json(&layout.configs_index(), &config.config_ids()).map_err(|e| PipelineError::stage(st, e))?;

    let parallel = opts.parallel.unwrap_or(config.limits.parallel).max(1);
    let mut executed = 0usize;
    let mut errors = Vec::new();
    for agent in &config.configs {
        let adapter = build_adapter(agent)?;
        if opts.force {
            reset_dir(&layout.config_dir(&agent.id())).map_err(|e| PipelineError::stage(st, e))?;
        }
        let next = AtomicUsize::new(0);
        let done = AtomicUsize::new(0);
        let failed = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..parallel.min(cases.len().max(1)) {
                scope.spawn(|| {
                    let runtime = tokio::runtime::Builder::new_current_thread()
                        .enable_all()
                        .build()
                        .expect("tokio runtime builds");
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(case) = cases.get(i) else { break };
                        match run_one(config, layout, agent, adapter.as_ref(), case, &digests[&case.case_id], &runtime) {
                            Ok(true) => {
                                done.fetch_add(1, Ordering::SeqCst);
                            }
                            Ok(false) => {}
                            Err(e) => failed.lock().unwrap().push(format!("{} {}: {e}", agent.id(), case.case_id)),
                        }
                    }
                });
            }
        });
        executed += done.into_inner();
        errors.extend(failed.into_inner().unwrap());
    }
    if !errors.is_empty() {
        errors.sort();
        return Err(PipelineError::stage(st, errors.join("; ")));
    }
    Ok(format!(
        "{executed} runs executed across {} configurations",
        config.configs.len()
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckError {
    pub case_id: String,
    pub agent: String,
    pub model: String,
    pub error: String,
}

fn check_stage(config: &CampaignConfig, layout: &Layout) -> Result<String, PipelineError> {
    let st = Stage::Check;
    let configs = load_configs(layout).map_err(|e| PipelineError::stage(st, e))?;
    let cases = load_cases(layout).map_err(|e| PipelineError::stage(st, e))?;
    let advisor = if config.advisory {
        let client = ChatCompletionsClient::from_env().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Some(AdvisoryChecker::new(client))
    } else {
        None
    };
    let mut verdicts = Vec::new();
    let mut errors = Vec::new();
    for id in &configs {
        for case in &cases {
            if layout.not_run(id, &case.case_id).exists() {
                continue;
            }
            let path = layout.verdict(id, &case.case_id);
            let classified = load_run(layout, id, &case.case_id).map_err(|e| e.to_string()).and_then(|run| {
                let mut v = classify_run(&run, case, &config.oracle).map_err(|e| e.to_string())?;
                if let Some(a) = &advisor {
                    a.review(&run, case, &mut v);
                }
                Ok(v)
            });
            match classified {
                Ok(v) => {
                    write_json(&path, &v).map_err(|e| PipelineError::stage(st, e))?;
                    verdicts.push(v);
                }
                Err(error) => {
                    let _ = fs::remove_file(&path);
                    errors.push(CheckError {
                        case_id: case.case_id.clone(),
                        agent: id.agent.clone(),
                        model: id.model.clone(),
                        error,
                    })
                }
            }
        }
    }
    write_jsonl(&layout.verdicts(), &verdicts).map_err(|e| PipelineError::stage(st, e))?;
    write_jsonl(&layout.check_errors(), &errors).map_err(|e| PipelineError::stage(st, e))?;
    let flagged = verdicts.iter().filter(|v| v.category.is_anomaly()).count();
    if !errors.is_empty() {
        return Err(PipelineError::stage(
            st,
            format!("{} bundles could not be classified; see {}", errors.len(), layout.check_errors().display()),
        ));
    }
    Ok(format!("{} verdicts, {flagged} flagged", verdicts.len()))
}

fn report_stage(config: &CampaignConfig, layout: &Layout) -> Result<String, PipelineError> {
    let st = Stage::Report;
    let verdicts = load_verdicts(layout).map_err(|e| PipelineError::stage(st, e))?;
    let labels = LabelStore::open(&layout.labels()).map_err(|e: LabelError| PipelineError::stage(st, e))?;
    let index = load_case_index(layout).map_err(|e| PipelineError::stage(st, e))?;
    let configs = load_configs(layout).unwrap_or_else(|_| config.config_ids());
    let cases = load_cases(layout).map_err(|e| PipelineError::stage(st, e))?.len() as u64;
    let active: Vec<_> = labels.active_labels().collect();
    let report = build_report(&configs, cases, &verdicts, &active, &index, config.report)
        .map_err(|e| PipelineError::stage(st, e))?;
    fs::create_dir_all(layout.report_dir()).map_err(|e| PipelineError::stage(st, e))?;
    write_atomic(&layout.report_json(), to_json_pretty(&report).as_bytes()).map_err(|e| PipelineError::stage(st, e))?;
    write_atomic(&layout.report_text(), render_text(&report).as_bytes()).map_err(|e| PipelineError::stage(st, e))?;
    Ok(format!(
        "{} reported, {} verified, precision {}",
        report.table.totals.reported, report.table.totals.verified, report.table.totals.precision
    ))
}
