//! Scoring a prompt on a dataset: task-prompt construction, answer
//! extraction, metric computation and candidate selection.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, MetricError};
use crate::llm::{CallStats, LanguageModel, LlmRequest, Purpose};
use crate::metrics;
use crate::model::{CandidateId, Example, RunConfig, ScoreEntry, TaskKind, TaskSpec};
use crate::sampling::{derive_seed, fnv1a, sample_with_seed};

/// What happened on one evaluated example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub example_id: String,
    pub raw_output: String,
    /// Matched label (classification) or trimmed output (generation).
    pub extracted: String,
    /// `None` means the output named no label.
    pub matched_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate_id: CandidateId,
    pub score: f64,
    pub outcomes: Vec<EvalOutcome>,
}

/// How examples are presented to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalMode {
    ZeroShot,
    /// Demonstrations placed before the target input.
    FewShot(Vec<Example>),
}

/// Baseline presentation requested by the caller; few-shot demonstrations are
/// drawn per example from the training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    FewShot(usize),
}

impl PromptMode {
    pub fn label(&self) -> String {
        match self {
            Self::ZeroShot => "zero-shot".into(),
            Self::FewShot(n) => format!("few-shot:{n}"),
        }
    }
}

/// Request parameters shared by every task prediction in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl EvalSettings {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            model: config.backend.model.clone(),
            temperature: config.eval_temperature,
            max_tokens: config.task_max_tokens,
            seed: config.seed,
        }
    }
}

pub fn label_directive(labels: &[String]) -> String {
    format!("Answer with exactly one of: {}.", labels.join(", "))
}

/// Builds the task-prediction request for one example. The prompt is the
/// system message; classification tasks get the label directive appended.
pub fn build_task_prompt(
    prompt: &str,
    example: &Example,
    task: &TaskSpec,
    mode: &EvalMode,
    settings: &EvalSettings,
) -> Result<LlmRequest, EngineError> {
    let system = match task.kind {
        TaskKind::Classification => format!("{prompt}\n\n{}", label_directive(&task.labels)),
        TaskKind::Generation => prompt.to_string(),
    };
    let user = match mode {
        EvalMode::ZeroShot => example.input.clone(),
        EvalMode::FewShot(shots) => {
            if let Some(s) = shots.iter().find(|s| s.id == example.id) {
                return Err(EngineError::Precondition(format!(
                    "few-shot demonstration {:?} is the evaluated example",
                    s.id
                )));
            }
            let mut user = String::new();
            for s in shots {
                user.push_str(&format!("Input: {}\nOutput: {}\n\n", s.input, s.output));
            }
            user.push_str(&example.input);
            user
        }
    };
    Ok(LlmRequest {
        system: Some(system),
        user,
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
        seed: None,
        model: settings.model.clone(),
        purpose: Purpose::TaskPrediction,
    })
}

fn normalize(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(char::is_alphanumeric)
}

fn first_whole_word(haystack: &str, needle: &str) -> Option<usize> {
    haystack.match_indices(needle).map(|(p, _)| p).find(|&p| {
        let before = haystack[..p].chars().next_back();
        let after = haystack[p + needle.len()..].chars().next();
        !is_word_char(before) && !is_word_char(after)
    })
}

/// Maps a raw model output to a label:
/// 1. the normalized output equals a normalized label;
/// 2. otherwise the label with the earliest whole-word occurrence wins, ties
///    going to the label listed first;
/// 3. otherwise `None`.
pub fn extract_label(raw: &str, labels: &[String]) -> Option<String> {
    let norm = normalize(raw);
    let normalized: Vec<String> = labels.iter().map(|l| normalize(l)).collect();
    if let Some(i) = normalized.iter().position(|l| !l.is_empty() && *l == norm) {
        return Some(labels[i].clone());
    }
    normalized
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .filter_map(|(i, l)| first_whole_word(&norm, l).map(|p| (p, i)))
        .min()
        .map(|(_, i)| labels[i].clone())
}

fn outcome(task: &TaskSpec, example: &Example, raw: String) -> EvalOutcome {
    match task.kind {
        TaskKind::Classification => {
            let matched = extract_label(&raw, &task.labels);
            EvalOutcome {
                example_id: example.id.clone(),
                extracted: matched.clone().unwrap_or_default(),
                matched_label: matched,
                raw_output: raw,
            }
        }
        TaskKind::Generation => EvalOutcome {
            example_id: example.id.clone(),
            extracted: raw.trim().to_string(),
            matched_label: None,
            raw_output: raw,
        },
    }
}

/// Recomputes the task metric from stored outcomes. `eval_set` supplies the
/// gold outputs and must be aligned with `outcomes`.
pub fn score_outcomes(task: &TaskSpec, eval_set: &[Example], outcomes: &[EvalOutcome]) -> Result<f64, MetricError> {
    match task.kind {
        TaskKind::Classification => metrics::macro_f1(
            outcomes
                .iter()
                .zip(eval_set)
                .map(|(o, e)| (o.matched_label.as_deref(), e.output.as_str())),
            &task.labels,
        ),
        TaskKind::Generation => {
            if outcomes.is_empty() {
                return Ok(0.0);
            }
            let total: f64 = outcomes
                .iter()
                .zip(eval_set)
                .map(|(o, e)| metrics::meteor(&o.extracted, &e.output))
                .sum();
            Ok(total / outcomes.len() as f64)
        }
    }
}

/// Scores `prompt` on `eval_set`. Few-shot demonstrations come from
/// `train`, excluding the evaluated example, via a stream keyed on its id.
#[allow(clippy::too_many_arguments)]
pub fn score_prompt<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &str,
    candidate_id: CandidateId,
    eval_set: &[Example],
    train: &[Example],
    task: &TaskSpec,
    settings: &EvalSettings,
    mode: PromptMode,
) -> Result<(ScoredCandidate, CallStats), EngineError> {
    if eval_set.is_empty() {
        return Err(EngineError::Precondition("evaluation set is empty".into()));
    }
    let requests = eval_set
        .iter()
        .map(|ex| {
            let eval_mode = match mode {
                PromptMode::ZeroShot => EvalMode::ZeroShot,
                PromptMode::FewShot(n) => {
                    let pool: Vec<Example> = train.iter().filter(|t| t.id != ex.id).cloned().collect();
                    let seed = derive_seed(settings.seed, "few-shot", &[fnv1a(ex.id.as_bytes())]);
                    EvalMode::FewShot(sample_with_seed(&pool, n, seed)?)
                }
            };
            build_task_prompt(prompt, ex, task, &eval_mode, settings)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let responses = model.complete_batch(&requests)?;
    let stats = CallStats {
        task_calls: requests.len() as u64,
        cache_hits: responses.iter().filter(|r| r.from_cache).count() as u64,
        ..CallStats::default()
    };
    let outcomes: Vec<EvalOutcome> = responses
        .into_iter()
        .zip(eval_set)
        .map(|(r, ex)| outcome(task, ex, r.text))
        .collect();
    let score = score_outcomes(task, eval_set, &outcomes)?;
    Ok((
        ScoredCandidate {
            candidate_id,
            score,
            outcomes,
        },
        stats,
    ))
}

/// Something that can enter the selection pool.
pub trait Ranked {
    fn candidate_id(&self) -> CandidateId;
    fn score(&self) -> f64;
}

impl Ranked for ScoredCandidate {
    fn candidate_id(&self) -> CandidateId {
        self.candidate_id
    }
    fn score(&self) -> f64 {
        self.score
    }
}

impl Ranked for ScoreEntry {
    fn candidate_id(&self) -> CandidateId {
        self.candidate_id
    }
    fn score(&self) -> f64 {
        self.score
    }
}

/// Index of the highest-scoring entry; ties go to the smallest candidate id
/// (earliest epoch, then stage order, then generation index).
pub fn select_best<R: Ranked>(pool: &[R]) -> Result<usize, EngineError> {
    (0..pool.len())
        .max_by(|&a, &b| {
            pool[a]
                .score()
                .total_cmp(&pool[b].score())
                .then_with(|| pool[b].candidate_id().cmp(&pool[a].candidate_id()))
        })
        .ok_or_else(|| EngineError::Precondition("selection pool is empty".into()))
}

/// The ranking used by [`select_best`], exposed for callers that sort pools.
pub fn rank_order<R: Ranked>(a: &R, b: &R) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.candidate_id().cmp(&b.candidate_id()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MetricKind, Stage};
    use alloc::vec;

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn sentiment() -> TaskSpec {
        TaskSpec {
            name: "sst-2".into(),
            kind: TaskKind::Classification,
            labels: labels(&["positive", "negative"]),
            metric: MetricKind::MacroF1,
            instruction_seed: "Classify sentiment.".into(),
        }
    }

    fn ex(id: &str, input: &str, output: &str) -> Example {
        Example {
            id: id.into(),
            input: input.into(),
            output: output.into(),
        }
    }

    fn settings() -> EvalSettings {
        EvalSettings {
            model: "m".into(),
            temperature: 0.0,
            max_tokens: 256,
            seed: 0,
        }
    }

    #[test]
    fn extraction_cascade() {
        let pn = labels(&["positive", "negative"]);
        assert_eq!(extract_label("Positive.", &pn).as_deref(), Some("positive"));
        assert_eq!(extract_label("  \"NEGATIVE\" ", &pn).as_deref(), Some("negative"));
        assert_eq!(extract_label("I cannot decide", &pn), None);
        let nli = labels(&["entailment", "neutral", "contradiction"]);
        assert_eq!(
            extract_label("The answer is: entailment, not contradiction", &nli).as_deref(),
            Some("entailment")
        );
        assert_eq!(
            extract_label("contradiction rather than entailment", &nli).as_deref(),
            Some("contradiction")
        );
    }

    #[test]
    fn extraction_requires_whole_words() {
        let pn = labels(&["positive", "negative"]);
        assert_eq!(extract_label("nonpositive vibes", &pn), None);
        assert_eq!(extract_label("it's negative-ish", &pn).as_deref(), Some("negative"));
    }

    #[test]
    fn extraction_position_tie_prefers_label_order() {
        let l = labels(&["good job", "good"]);
        assert_eq!(extract_label("a good job overall", &l).as_deref(), Some("good job"));
        let l = labels(&["good", "good job"]);
        assert_eq!(extract_label("a good job overall", &l).as_deref(), Some("good"));
    }

    #[test]
    fn zero_shot_prompt_shape() {
        let req = build_task_prompt(
            "Classify sentiment.",
            &ex("1", "great movie", "positive"),
            &sentiment(),
            &EvalMode::ZeroShot,
            &settings(),
        )
        .unwrap();
        let system = req.system.unwrap();
        assert!(system.starts_with("Classify sentiment."));
        assert!(system.ends_with("Answer with exactly one of: positive, negative."));
        assert_eq!(req.user, "great movie");
        assert_eq!(req.purpose, Purpose::TaskPrediction);
    }

    #[test]
    fn few_shot_prompt_shape() {
        let shots = vec![
            ex("a", "fine film", "positive"),
            ex("b", "dull", "negative"),
            ex("c", "loved it", "positive"),
        ];
        let req = build_task_prompt(
            "p",
            &ex("t", "target text", "positive"),
            &sentiment(),
            &EvalMode::FewShot(shots),
            &settings(),
        )
        .unwrap();
        assert_eq!(req.user.matches("Input: ").count(), 3);
        assert_eq!(req.user.matches("Output: ").count(), 3);
        assert!(req.user.ends_with("\n\ntarget text"));
    }

    #[test]
    fn few_shot_rejects_overlap() {
        let target = ex("t", "x", "positive");
        let err = build_task_prompt("p", &target, &sentiment(), &EvalMode::FewShot(vec![target.clone()]), &settings());
        assert!(matches!(err, Err(EngineError::Precondition(_))));
    }

    fn id(epoch: u32, stage: Stage, gen_index: u32) -> CandidateId {
        CandidateId {
            epoch,
            stage,
            gen_index,
        }
    }

    fn entry(cid: CandidateId, score: f64) -> ScoreEntry {
        ScoreEntry {
            candidate_id: cid,
            score,
        }
    }

    #[test]
    fn selection_examples() {
        let pool = [
            entry(id(1, Stage::FinalVariation, 0), 0.4),
            entry(id(1, Stage::FinalVariation, 1), 0.9),
            entry(id(1, Stage::FinalVariation, 2), 0.7),
        ];
        assert_eq!(select_best(&pool).unwrap(), 1);
        let tie = [
            entry(id(1, Stage::FinalVariation, 0), 0.8),
            entry(id(1, Stage::Distilled, 0), 0.8),
        ];
        assert_eq!(select_best(&tie).unwrap(), 1);
        assert_eq!(select_best(&pool[..1]).unwrap(), 0);
        assert!(select_best::<ScoreEntry>(&[]).is_err());
    }

    #[test]
    fn incumbent_wins_ties() {
        let pool = [
            entry(id(1, Stage::FinalVariation, 3), 0.5),
            entry(id(2, Stage::Distilled, 0), 0.5),
            entry(id(2, Stage::FinalVariation, 0), 0.5),
        ];
        assert_eq!(select_best(&pool).unwrap(), 0);
    }
}
