//! Shared domain vocabulary: tasks, examples, candidates, run configuration
//! and the per-epoch audit record.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::engine::MetaPromptSet;
use crate::evaluator::ScoredCandidate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    MacroF1,
    Meteor,
}

impl MetricKind {
    pub fn short_name(self) -> &'static str {
        match self {
            Self::MacroF1 => "f1",
            Self::Meteor => "METEOR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Ordered label set; empty for generation tasks.
    #[serde(default)]
    pub labels: Vec<String>,
    pub metric: MetricKind,
    /// The dataset-provided baseline prompt the search starts from.
    pub instruction_seed: String,
}

impl TaskSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match (self.kind, self.labels.is_empty()) {
            (TaskKind::Classification, true) => {
                out.push("classification tasks need a non-empty label set".to_string())
            }
            (TaskKind::Generation, false) => {
                out.push("generation tasks must not declare labels".to_string())
            }
            _ => {}
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                out.push(format!("duplicate label {l:?}"));
            }
        }
        let metric_fits = matches!(
            (self.metric, self.kind),
            (MetricKind::MacroF1, TaskKind::Classification) | (MetricKind::Meteor, TaskKind::Generation)
        );
        if !metric_fits {
            out.push("metric/kind mismatch".to_string());
        }
        if self.instruction_seed.trim().is_empty() {
            out.push("instruction_seed must not be empty".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: String,
    pub output: String,
}

/// A validated collection of examples bound to one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub task_name: String,
    pub examples: Vec<Example>,
    pub source_path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Seed,
    Variation,
    ExampleEmbedded,
    Compressed,
    Distilled,
    FinalVariation,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Seed,
        Stage::Variation,
        Stage::ExampleEmbedded,
        Stage::Compressed,
        Stage::Distilled,
        Stage::FinalVariation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Seed => "seed",
            Self::Variation => "variation",
            Self::ExampleEmbedded => "example_embedded",
            Self::Compressed => "compressed",
            Self::Distilled => "distilled",
            Self::FinalVariation => "final_variation",
        }
    }

    /// Stable small integer used when deriving per-call seeds.
    pub fn code(self) -> u64 {
        self as u64
    }
}

/// Candidate identity: `(epoch, stage, gen_index)`. The derived ordering is
/// the selection tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CandidateId {
    pub epoch: u32,
    pub stage: Stage,
    pub gen_index: u32,
}

impl fmt::Display for CandidateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}:{}:{}", self.epoch, self.stage.as_str(), self.gen_index)
    }
}

impl FromStr for CandidateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed candidate id {s:?}");
        let mut parts = s.split(':');
        let (Some(e), Some(st), Some(g), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let epoch = e.strip_prefix('e').and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        let stage = Stage::ALL
            .into_iter()
            .find(|x| x.as_str() == st)
            .ok_or_else(bad)?;
        let gen_index = g.parse().map_err(|_| bad())?;
        Ok(Self {
            epoch,
            stage,
            gen_index,
        })
    }
}

impl Serialize for CandidateId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CandidateId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub text: String,
    pub epoch: u32,
    pub stage: Stage,
    pub gen_index: u32,
    pub parent_ids: Vec<CandidateId>,
    pub score: Option<f64>,
}

impl PromptCandidate {
    pub fn seed(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            epoch: 0,
            stage: Stage::Seed,
            gen_index: 0,
            parent_ids: Vec::new(),
            score: None,
        }
    }

    pub fn id(&self) -> CandidateId {
        CandidateId {
            epoch: self.epoch,
            stage: self.stage,
            gen_index: self.gen_index,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }
}

/// Evaluation subset size: a fixed count or the whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSubsetSize {
    All,
    Count(usize),
}

impl Serialize for EvalSubsetSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::All => s.serialize_str("all"),
            Self::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for EvalSubsetSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(Self::Count(n)),
            Raw::Word(w) if w == "all" => Ok(Self::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "eval_subset_size must be a positive integer or \"all\", got {w:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[serde(rename = "http_openai_compatible")]
    HttpOpenAiCompatible,
    ScriptedMock,
}

/// How a mock rule selects requests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Contains(String),
    StartsWith(String),
    Exact(String),
    /// A regular expression; anchor it with `^`/`$` as needed.
    Regex(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchTarget {
    #[default]
    User,
    System,
    /// System text, a newline, then the user text.
    Both,
}

/// One scripted response rule. The k-th request matched by a rule receives
/// `responses[min(k, len - 1)]`; `{h}` in a response expands to a stable
/// 8-hex-digit hash of the request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub matcher: Matcher,
    #[serde(default)]
    pub target: MatchTarget,
    #[serde(deserialize_with = "one_or_many")]
    pub responses: Vec<String>,
}

impl MockRule {
    pub fn new(matcher: Matcher, response: impl Into<String>) -> Self {
        Self {
            matcher,
            target: MatchTarget::User,
            responses: alloc::vec![response.into()],
        }
    }

    pub fn on(mut self, target: MatchTarget) -> Self {
        self.target = target;
        self
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(String),
        Many(Vec<String>),
    }
    let v = match Raw::deserialize(d)? {
        Raw::One(s) => alloc::vec![s],
        Raw::Many(v) => v,
    };
    if v.is_empty() {
        return Err(serde::de::Error::custom("a mock rule needs at least one response"));
    }
    Ok(v)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Artificial per-call latency.
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default = "defaults::model")]
    pub model: String,
    #[serde(default = "defaults::api_key_env")]
    pub api_key_env: String,
    #[serde(default = "defaults::timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "defaults::retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "defaults::retry_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default)]
    pub cache_dir: Option<String>,
    #[serde(default)]
    pub mock: MockScript,
}

impl BackendConfig {
    pub fn scripted(rules: Vec<MockRule>) -> Self {
        Self {
            kind: BackendKind::ScriptedMock,
            base_url: None,
            model: defaults::model(),
            api_key_env: defaults::api_key_env(),
            timeout_ms: defaults::timeout_ms(),
            retry_limit: defaults::retry_limit(),
            retry_backoff_ms: defaults::retry_backoff_ms(),
            cache_dir: None,
            mock: MockScript {
                rules,
                latency_ms: 0,
            },
        }
    }

    pub fn http(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpOpenAiCompatible,
            base_url: Some(base_url.into()),
            model: model.into(),
            ..Self::scripted(Vec::new())
        }
    }
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::scripted(Vec::new())
    }
}

mod defaults {
    use alloc::string::{String, ToString};

    pub fn model() -> String {
        "default".to_string()
    }
    pub fn api_key_env() -> String {
        "LLM_API_KEY".to_string()
    }
    pub fn timeout_ms() -> u64 {
        60_000
    }
    pub fn retry_limit() -> u32 {
        3
    }
    pub fn retry_backoff_ms() -> u64 {
        500
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Candidates produced by each variation stage (N).
    pub n_candidates: usize,
    /// Training examples shown to each candidate during example embedding (K).
    pub k_examples: usize,
    pub epochs: u32,
    /// Temperature for all meta-prompt calls.
    pub gen_temperature: f64,
    /// Temperature for task predictions.
    pub eval_temperature: f64,
    pub eval_subset_size: EvalSubsetSize,
    pub seed: u64,
    pub max_in_flight: usize,
    pub meta_max_tokens: u32,
    pub task_max_tokens: u32,
    /// Sentence cap written into the default compression meta-prompt.
    pub compress_sentence_limit: usize,
    /// Overrides the default meta-prompt templates.
    pub templates: Option<MetaPromptSet>,
    /// When set, `optimize` also scores the seed prompt with this many demonstrations.
    pub few_shot_baseline: Option<usize>,
    pub backend: BackendConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_candidates: 4,
            k_examples: 5,
            epochs: 3,
            gen_temperature: 0.7,
            eval_temperature: 0.0,
            eval_subset_size: EvalSubsetSize::Count(100),
            seed: 0,
            max_in_flight: 4,
            meta_max_tokens: 1024,
            task_max_tokens: 256,
            compress_sentence_limit: 4,
            templates: None,
            few_shot_baseline: None,
            backend: BackendConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn meta_prompts(&self) -> MetaPromptSet {
        self.templates
            .clone()
            .unwrap_or_else(|| MetaPromptSet::with_sentence_limit(self.compress_sentence_limit))
    }
}

/// Every violated invariant of `config` and `task`, in a fixed order. An empty
/// list means the run may start.
pub fn validate_config(config: &RunConfig, task: &TaskSpec) -> Vec<String> {
    let mut out = Vec::new();
    let positive: [(&str, u64); 7] = [
        ("n_candidates", config.n_candidates as u64),
        ("k_examples", config.k_examples as u64),
        ("epochs", u64::from(config.epochs)),
        ("max_in_flight", config.max_in_flight as u64),
        ("meta_max_tokens", u64::from(config.meta_max_tokens)),
        ("task_max_tokens", u64::from(config.task_max_tokens)),
        ("compress_sentence_limit", config.compress_sentence_limit as u64),
    ];
    for (name, v) in positive {
        if v == 0 {
            out.push(format!("{name} must be ≥ 1"));
        }
    }
    if config.eval_subset_size == EvalSubsetSize::Count(0) {
        out.push("eval_subset_size must be ≥ 1".to_string());
    }
    if config.few_shot_baseline == Some(0) {
        out.push("few_shot_baseline must be ≥ 1".to_string());
    }
    for (name, t) in [
        ("gen_temperature", config.gen_temperature),
        ("eval_temperature", config.eval_temperature),
    ] {
        if !(0.0..=2.0).contains(&t) {
            out.push(format!("{name} must lie in [0, 2]"));
        }
    }
    let backend = &config.backend;
    if backend.kind == BackendKind::HttpOpenAiCompatible && backend.base_url.is_none() {
        out.push("backend.base_url is required for http_openai_compatible".to_string());
    }
    if backend.model.trim().is_empty() {
        out.push("backend.model must not be empty".to_string());
    }
    if let Some(t) = &config.templates {
        out.extend(t.violations());
    }
    out.extend(task.violations());
    out
}

/// Candidate id and score as entered into an epoch's selection pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub candidate_id: CandidateId,
    pub score: f64,
}

/// Seed-prompt scoring performed before the first epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub scored: ScoredCandidate,
    pub llm_calls: u64,
    pub cache_hits: u64,
}

/// Audit trail of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub incumbent_in: PromptCandidate,
    pub stage_outputs: BTreeMap<Stage, Vec<PromptCandidate>>,
    /// The selection pool: the incoming incumbent followed by every newly scored candidate.
    pub scored: Vec<ScoreEntry>,
    /// Per-example outcomes of the newly scored candidates.
    pub evaluations: Vec<ScoredCandidate>,
    pub incumbent_out: PromptCandidate,
    /// Requests issued during the epoch (meta and task), cached or not.
    pub llm_calls: u64,
    pub cache_hits: u64,
    pub meta_calls: u64,
    pub task_calls: u64,
    /// Extra meta calls caused by empty completions.
    pub fallback_reasks: u64,
    /// Present on the first epoch only.
    pub seed_evaluation: Option<SeedEvaluation>,
}

impl EpochRecord {
    pub fn stage(&self, stage: Stage) -> &[PromptCandidate] {
        self.stage_outputs.get(&stage).map_or(&[], Vec::as_slice)
    }
}
