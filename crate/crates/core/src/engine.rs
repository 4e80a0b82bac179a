//! The five-stage search epoch and the outer optimization loop.
//!
//! Each epoch starts from the incumbent prompt and runs, strictly in order:
//!
//! 1. **Variation**: N rewrites of the incumbent.
//! 2. **Example embedding**: each rewrite is revised by the model after it
//!    studies K training examples drawn independently for that rewrite.
//! 3. **Compression**: each revised prompt is condensed to a few sentences.
//! 4. **Aggregation**: the compressed prompts are merged into one distilled prompt.
//! 5. **Final variation**: N rewrites of the distilled prompt.
//!
//! The distilled prompt and the final rewrites are scored; the incumbent
//! keeps its cached score and competes with them. The best of that pool is
//! the next epoch's incumbent.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{BatchError, EngineError, GatewayError};
use crate::evaluator::{score_prompt, select_best, EvalSettings, PromptMode, ScoredCandidate};
use crate::llm::{CallStats, LanguageModel, LlmRequest, Purpose};
use crate::model::{
    validate_config, CandidateId, EpochRecord, Example, PromptCandidate, RunConfig, ScoreEntry,
    SeedEvaluation, Stage, TaskKind, TaskSpec,
};
use crate::sampling::{derive_seed, freeze_eval_subset, sample_examples};

const PROMPT: &str = "prompt";
const PROMPTS: &str = "prompts";
const EXAMPLES: &str = "examples";
const TASK_HINT: &str = "task_hint";

/// Meta-prompt templates, one per transforming stage. Placeholders are
/// `{prompt}`, `{prompts}`, `{examples}` and the optional `{task_hint}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaPromptSet {
    pub variation_template: String,
    pub embed_template: String,
    pub compress_template: String,
    pub aggregate_template: String,
}

impl Default for MetaPromptSet {
    fn default() -> Self {
        Self::with_sentence_limit(4)
    }
}

impl MetaPromptSet {
    pub fn with_sentence_limit(sentences: usize) -> Self {
        Self {
            variation_template: "Rewrite the following prompt to approach the task from a different angle \
                while preserving its goal. Output only the rewritten prompt.\n\nPrompt: {prompt}"
                .to_string(),
            embed_template: "Here is a prompt and labeled examples of its task. Identify the underlying \
                principles needed to solve these examples and revise the prompt to incorporate them \
                without mentioning the specific examples. Output only the revised prompt.\n\n\
                Prompt: {prompt}\n\nExamples:\n{examples}"
                .to_string(),
            compress_template: format!(
                "Condense the following prompt into at most {sentences} sentences, keeping the task \
                 objective and the key solving principles. Output only the condensed prompt.\n\n\
                 Prompt: {{prompt}}"
            ),
            aggregate_template: "Merge the following prompts into one prompt that captures all of their \
                distinct ideas without redundancy. Output only the merged prompt.\n\nPrompts:\n{prompts}"
                .to_string(),
        }
    }

    /// Each template must use exactly its own placeholders.
    pub fn violations(&self) -> Vec<String> {
        let specs: [(&str, &str, &[&str]); 4] = [
            ("variation_template", &self.variation_template, &[PROMPT]),
            ("embed_template", &self.embed_template, &[PROMPT, EXAMPLES]),
            ("compress_template", &self.compress_template, &[PROMPT]),
            ("aggregate_template", &self.aggregate_template, &[PROMPTS]),
        ];
        let mut out = Vec::new();
        for (name, text, required) in specs {
            for p in [PROMPT, PROMPTS, EXAMPLES] {
                let present = text.contains(&format!("{{{p}}}"));
                match (required.contains(&p), present) {
                    (true, false) => out.push(format!("{name} is missing {{{p}}}")),
                    (false, true) => out.push(format!("{name} must not use {{{p}}}")),
                    _ => {}
                }
            }
        }
        out
    }
}

/// Single-pass placeholder substitution; substituted text is never rescanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = tail.find('}').and_then(|close| {
            let name = &tail[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn format_examples(examples: &[Example]) -> String {
    examples
        .iter()
        .map(|e| format!("Input: {}\nExpected output: {}", e.input, e.output))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn numbered(texts: &[&str]) -> String {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Request seed for the meta call that creates `id`. Re-asks after an empty
/// completion use `attempt = 1`, which keeps them cache-distinct.
pub fn meta_call_seed(run_seed: u64, id: CandidateId, attempt: u64) -> u64 {
    derive_seed(
        run_seed,
        "meta",
        &[u64::from(id.epoch), id.stage.code(), u64::from(id.gen_index), attempt],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best: PromptCandidate,
    pub epochs: Vec<EpochRecord>,
    pub total_llm_calls: u64,
    pub total_cache_hits: u64,
    pub config_snapshot: RunConfig,
}

/// Receives each completed epoch before the next one starts.
pub trait EpochSink {
    /// Returning [`EngineError::Halted`] stops the run cleanly.
    fn epoch_completed(&mut self, record: &EpochRecord) -> Result<(), EngineError>;
}

impl EpochSink for () {
    fn epoch_completed(&mut self, _: &EpochRecord) -> Result<(), EngineError> {
        Ok(())
    }
}

impl EpochSink for Vec<EpochRecord> {
    fn epoch_completed(&mut self, record: &EpochRecord) -> Result<(), EngineError> {
        self.push(record.clone());
        Ok(())
    }
}

struct MetaJob {
    user: String,
    id: CandidateId,
    parents: Vec<CandidateId>,
    fallback: String,
}

/// One optimization run over a fixed task, training set and configuration.
pub struct DistillEngine<'a, M: LanguageModel + ?Sized> {
    model: &'a M,
    task: &'a TaskSpec,
    train: &'a [Example],
    config: &'a RunConfig,
    templates: MetaPromptSet,
    eval_set: Vec<Example>,
    settings: EvalSettings,
    stats: Cell<CallStats>,
}

impl<'a, M: LanguageModel + ?Sized> DistillEngine<'a, M> {
    pub fn new(
        model: &'a M,
        task: &'a TaskSpec,
        train: &'a [Example],
        config: &'a RunConfig,
    ) -> Result<Self, EngineError> {
        let violations = validate_config(config, task);
        if !violations.is_empty() {
            return Err(EngineError::Precondition(violations.join("; ")));
        }
        if train.is_empty() {
            return Err(EngineError::Precondition("training set is empty".into()));
        }
        let eval_set = freeze_eval_subset(train, config.eval_subset_size, config.seed)?;
        Ok(Self {
            model,
            task,
            train,
            config,
            templates: config.meta_prompts(),
            eval_set,
            settings: EvalSettings::from_config(config),
            stats: Cell::new(CallStats::default()),
        })
    }

    pub fn eval_set(&self) -> &[Example] {
        &self.eval_set
    }

    pub fn templates(&self) -> &MetaPromptSet {
        &self.templates
    }

    /// Counters accumulated since construction.
    pub fn stats(&self) -> CallStats {
        self.stats.get()
    }

    fn bump(&self, f: impl FnOnce(&mut CallStats)) {
        let mut s = self.stats.get();
        f(&mut s);
        self.stats.set(s);
    }

    fn task_hint(&self) -> String {
        match self.task.kind {
            TaskKind::Classification => format!(
                "Task: {}. Allowed answers: {}.",
                self.task.name,
                self.task.labels.join(", ")
            ),
            TaskKind::Generation => format!("Task: {}.", self.task.name),
        }
    }

    pub fn meta_seed(&self, id: CandidateId, attempt: u64) -> u64 {
        meta_call_seed(self.config.seed, id, attempt)
    }

    fn meta_request(&self, user: &str, id: CandidateId, attempt: u64) -> LlmRequest {
        LlmRequest {
            system: None,
            user: user.to_string(),
            temperature: self.config.gen_temperature,
            max_tokens: self.config.meta_max_tokens,
            seed: Some(self.meta_seed(id, attempt)),
            model: self.config.backend.model.clone(),
            purpose: Purpose::MetaGeneration,
        }
    }

    /// Issues one meta call per job. An empty completion is re-asked once
    /// with a fresh seed; a second empty answer falls back to the job's
    /// fallback text.
    fn run_meta(&self, jobs: Vec<MetaJob>) -> Result<Vec<PromptCandidate>, EngineError> {
        let requests: Vec<LlmRequest> = jobs.iter().map(|j| self.meta_request(&j.user, j.id, 0)).collect();
        let first = self.model.complete_each(&requests);
        self.bump(|s| s.meta_calls += requests.len() as u64);

        let mut texts: Vec<Option<String>> = Vec::with_capacity(jobs.len());
        for (index, r) in first.into_iter().enumerate() {
            texts.push(self.accept(index, r)?);
        }
        let retry: Vec<usize> = (0..jobs.len()).filter(|&i| texts[i].is_none()).collect();
        if !retry.is_empty() {
            let again: Vec<LlmRequest> = retry
                .iter()
                .map(|&i| self.meta_request(&jobs[i].user, jobs[i].id, 1))
                .collect();
            let second = self.model.complete_each(&again);
            self.bump(|s| {
                s.meta_calls += again.len() as u64;
                s.fallback_reasks += again.len() as u64;
            });
            for (&i, r) in retry.iter().zip(second) {
                texts[i] = Some(self.accept(i, r)?.unwrap_or_else(|| jobs[i].fallback.clone()));
            }
        }
        Ok(jobs
            .into_iter()
            .zip(texts)
            .map(|(job, text)| PromptCandidate {
                text: text.unwrap_or(job.fallback),
                epoch: job.id.epoch,
                stage: job.id.stage,
                gen_index: job.id.gen_index,
                parent_ids: job.parents,
                score: None,
            })
            .collect())
    }

    /// `Ok(None)` for an empty completion, the trimmed text otherwise.
    fn accept(
        &self,
        index: usize,
        r: Result<crate::llm::LlmResponse, GatewayError>,
    ) -> Result<Option<String>, EngineError> {
        match r {
            Ok(resp) => {
                if resp.from_cache {
                    self.bump(|s| s.cache_hits += 1);
                }
                let t = resp.text.trim();
                Ok((!t.is_empty()).then(|| t.to_string()))
            }
            Err(GatewayError::EmptyCompletion) => Ok(None),
            Err(source) => Err(BatchError { index, source }.into()),
        }
    }

    /// Stage 1 or 5: `n` independent rewrites of `base`.
    pub fn generate_variations(
        &self,
        base: &PromptCandidate,
        n: usize,
        epoch: u32,
        stage: Stage,
    ) -> Result<Vec<PromptCandidate>, EngineError> {
        if !matches!(stage, Stage::Variation | Stage::FinalVariation) {
            return Err(EngineError::Precondition(format!(
                "variations are produced in the variation stages, not {}",
                stage.as_str()
            )));
        }
        if n == 0 {
            return Err(EngineError::Precondition("n must be ≥ 1".into()));
        }
        if base.text.trim().is_empty() {
            return Err(EngineError::Precondition("base prompt is empty".into()));
        }
        let hint = self.task_hint();
        let user = render(
            &self.templates.variation_template,
            &[(PROMPT, &base.text), (TASK_HINT, &hint)],
        );
        let jobs = (0..n as u32)
            .map(|gen_index| MetaJob {
                user: user.clone(),
                id: CandidateId {
                    epoch,
                    stage,
                    gen_index,
                },
                parents: alloc::vec![base.id()],
                fallback: base.text.clone(),
            })
            .collect();
        self.run_meta(jobs)
    }

    /// The K examples drawn for the variation with `gen_index` in `epoch`.
    pub fn sample_for(&self, epoch: u32, gen_index: u32) -> Result<Vec<Example>, EngineError> {
        sample_examples(
            self.train,
            self.config.k_examples,
            self.config.seed,
            &[u64::from(epoch), u64::from(gen_index)],
        )
    }

    /// Stage 2 for a single candidate.
    pub fn embed_examples(
        &self,
        candidate: &PromptCandidate,
        examples: &[Example],
    ) -> Result<PromptCandidate, EngineError> {
        let mut out = self.embed_all(&[(candidate, examples)])?;
        Ok(out.remove(0))
    }

    /// Stage 2 across candidates, issued as one batch.
    pub fn embed_all(&self, items: &[(&PromptCandidate, &[Example])]) -> Result<Vec<PromptCandidate>, EngineError> {
        let hint = self.task_hint();
        let mut jobs = Vec::with_capacity(items.len());
        for (c, examples) in items {
            if c.stage != Stage::Variation {
                return Err(EngineError::Precondition(format!(
                    "example embedding takes variation candidates, got {}",
                    c.stage.as_str()
                )));
            }
            if examples.len() != self.config.k_examples {
                return Err(EngineError::Precondition(format!(
                    "expected {} examples, got {}",
                    self.config.k_examples,
                    examples.len()
                )));
            }
            let shown = format_examples(examples);
            jobs.push(MetaJob {
                user: render(
                    &self.templates.embed_template,
                    &[(PROMPT, &c.text), (EXAMPLES, &shown), (TASK_HINT, &hint)],
                ),
                id: CandidateId {
                    stage: Stage::ExampleEmbedded,
                    ..c.id()
                },
                parents: alloc::vec![c.id()],
                fallback: c.text.clone(),
            });
        }
        self.run_meta(jobs)
    }

    /// Stage 3 for a single candidate.
    pub fn compress(&self, candidate: &PromptCandidate) -> Result<PromptCandidate, EngineError> {
        let mut out = self.compress_all(core::slice::from_ref(candidate))?;
        Ok(out.remove(0))
    }

    pub fn compress_all(&self, candidates: &[PromptCandidate]) -> Result<Vec<PromptCandidate>, EngineError> {
        let hint = self.task_hint();
        let mut jobs = Vec::with_capacity(candidates.len());
        for c in candidates {
            if c.stage != Stage::ExampleEmbedded {
                return Err(EngineError::Precondition(format!(
                    "compression takes example-embedded candidates, got {}",
                    c.stage.as_str()
                )));
            }
            jobs.push(MetaJob {
                user: render(&self.templates.compress_template, &[(PROMPT, &c.text), (TASK_HINT, &hint)]),
                id: CandidateId {
                    stage: Stage::Compressed,
                    ..c.id()
                },
                parents: alloc::vec![c.id()],
                fallback: c.text.clone(),
            });
        }
        self.run_meta(jobs)
    }

    /// Stage 4: one merged prompt from every compressed candidate. An empty
    /// answer after the re-ask falls back to the first input's text.
    pub fn aggregate(&self, candidates: &[PromptCandidate]) -> Result<PromptCandidate, EngineError> {
        let first = candidates
            .first()
            .ok_or_else(|| EngineError::Precondition("aggregation needs at least one candidate".into()))?;
        if let Some(c) = candidates.iter().find(|c| c.stage != Stage::Compressed) {
            return Err(EngineError::Precondition(format!(
                "aggregation takes compressed candidates, got {}",
                c.stage.as_str()
            )));
        }
        let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
        let listed = numbered(&texts);
        let hint = self.task_hint();
        let job = MetaJob {
            user: render(&self.templates.aggregate_template, &[(PROMPTS, &listed), (TASK_HINT, &hint)]),
            id: CandidateId {
                epoch: first.epoch,
                stage: Stage::Distilled,
                gen_index: 0,
            },
            parents: candidates.iter().map(PromptCandidate::id).collect(),
            fallback: first.text.clone(),
        };
        Ok(self.run_meta(alloc::vec![job])?.remove(0))
    }

    /// Scores a candidate zero-shot on the frozen evaluation subset.
    pub fn score(&self, candidate: &PromptCandidate) -> Result<ScoredCandidate, EngineError> {
        self.score_text(&candidate.text, candidate.id(), PromptMode::ZeroShot)
    }

    /// Scores the task's seed prompt under `mode` (the baseline rows).
    pub fn score_seed_prompt(&self, mode: PromptMode) -> Result<ScoredCandidate, EngineError> {
        self.score_text(&self.task.instruction_seed, PromptCandidate::seed("").id(), mode)
    }

    fn score_text(&self, text: &str, id: CandidateId, mode: PromptMode) -> Result<ScoredCandidate, EngineError> {
        let (scored, stats) = score_prompt(
            self.model,
            text,
            id,
            &self.eval_set,
            self.train,
            self.task,
            &self.settings,
            mode,
        )?;
        self.bump(|s| s.absorb(stats));
        Ok(scored)
    }

    /// One full epoch starting from a scored incumbent.
    pub fn run_epoch(&self, incumbent: &PromptCandidate, epoch: u32) -> Result<EpochRecord, EngineError> {
        let incumbent_score = incumbent
            .score
            .ok_or_else(|| EngineError::Precondition("incumbent has no score".into()))?;
        let before = self.stats();
        let n = self.config.n_candidates;

        let variations = self.generate_variations(incumbent, n, epoch, Stage::Variation)?;
        let samples = variations
            .iter()
            .map(|v| self.sample_for(epoch, v.gen_index))
            .collect::<Result<Vec<_>, _>>()?;
        let items: Vec<(&PromptCandidate, &[Example])> =
            variations.iter().zip(&samples).map(|(v, s)| (v, s.as_slice())).collect();
        let embedded = self.embed_all(&items)?;
        let compressed = self.compress_all(&embedded)?;
        let mut distilled = self.aggregate(&compressed)?;
        let mut finals = self.generate_variations(&distilled, n, epoch, Stage::FinalVariation)?;

        let mut evaluations = Vec::with_capacity(n + 1);
        evaluations.push(self.score(&distilled)?);
        for f in &finals {
            evaluations.push(self.score(f)?);
        }
        distilled.score = Some(evaluations[0].score);
        for (f, e) in finals.iter_mut().zip(&evaluations[1..]) {
            f.score = Some(e.score);
        }

        let mut scored = alloc::vec![ScoreEntry {
            candidate_id: incumbent.id(),
            score: incumbent_score,
        }];
        scored.extend(evaluations.iter().map(|e| ScoreEntry {
            candidate_id: e.candidate_id,
            score: e.score,
        }));
        let winner = scored[select_best(&scored)?].candidate_id;
        let incumbent_out = if winner == incumbent.id() {
            incumbent.clone()
        } else if winner == distilled.id() {
            distilled.clone()
        } else {
            finals
                .iter()
                .find(|f| f.id() == winner)
                .cloned()
                .ok_or_else(|| EngineError::Precondition("selected candidate is missing".into()))?
        };

        let mut stage_outputs = BTreeMap::new();
        stage_outputs.insert(Stage::Variation, variations);
        stage_outputs.insert(Stage::ExampleEmbedded, embedded);
        stage_outputs.insert(Stage::Compressed, compressed);
        stage_outputs.insert(Stage::Distilled, alloc::vec![distilled]);
        stage_outputs.insert(Stage::FinalVariation, finals);

        let after = self.stats();
        let meta_calls = after.meta_calls - before.meta_calls;
        let task_calls = after.task_calls - before.task_calls;
        Ok(EpochRecord {
            epoch,
            incumbent_in: incumbent.clone(),
            stage_outputs,
            scored,
            evaluations,
            incumbent_out,
            llm_calls: meta_calls + task_calls,
            cache_hits: after.cache_hits - before.cache_hits,
            meta_calls,
            task_calls,
            fallback_reasks: after.fallback_reasks - before.fallback_reasks,
            seed_evaluation: None,
        })
    }

    /// Runs every remaining epoch. `completed` holds epochs persisted by an
    /// earlier, interrupted run (`1..=k`, in order); the run continues at
    /// `k + 1` and draws the same streams an uninterrupted run would.
    pub fn optimize(
        &self,
        completed: Vec<EpochRecord>,
        sink: &mut dyn EpochSink,
    ) -> Result<OptimizationResult, EngineError> {
        for (i, r) in completed.iter().enumerate() {
            if r.epoch != i as u32 + 1 {
                return Err(EngineError::Precondition(format!(
                    "persisted epochs are not contiguous: found epoch {} at position {}",
                    r.epoch,
                    i + 1
                )));
            }
        }
        if completed.len() as u32 > self.config.epochs {
            return Err(EngineError::Precondition("more epochs persisted than configured".into()));
        }
        let mut epochs = completed;
        let (mut incumbent, mut pending_seed) = match epochs.last() {
            Some(last) => (last.incumbent_out.clone(), None),
            None => {
                let before = self.stats();
                let scored = self.score_seed_prompt(PromptMode::ZeroShot)?;
                let after = self.stats();
                let seed = PromptCandidate::seed(self.task.instruction_seed.clone()).with_score(scored.score);
                let eval = SeedEvaluation {
                    scored,
                    llm_calls: after.total() - before.total(),
                    cache_hits: after.cache_hits - before.cache_hits,
                };
                (seed, Some(eval))
            }
        };
        for epoch in (epochs.len() as u32 + 1)..=self.config.epochs {
            let mut record = self.run_epoch(&incumbent, epoch)?;
            record.seed_evaluation = pending_seed.take();
            sink.epoch_completed(&record)?;
            incumbent = record.incumbent_out.clone();
            epochs.push(record);
        }
        let seed_calls = epochs
            .first()
            .and_then(|e| e.seed_evaluation.as_ref())
            .map_or((0, 0), |s| (s.llm_calls, s.cache_hits));
        Ok(OptimizationResult {
            best: incumbent,
            total_llm_calls: seed_calls.0 + epochs.iter().map(|e| e.llm_calls).sum::<u64>(),
            total_cache_hits: seed_calls.1 + epochs.iter().map(|e| e.cache_hits).sum::<u64>(),
            epochs,
            config_snapshot: self.config.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_templates_are_valid() {
        assert!(MetaPromptSet::default().violations().is_empty());
        assert!(MetaPromptSet::default().compress_template.contains("at most 4 sentences"));
        assert!(MetaPromptSet::with_sentence_limit(2)
            .compress_template
            .contains("at most 2 sentences"));
    }

    #[test]
    fn template_placeholder_rules() {
        let t = MetaPromptSet {
            variation_template: "Rewrite {prompts}".into(),
            aggregate_template: "Merge {prompts} using {examples}".into(),
            ..MetaPromptSet::default()
        };
        assert_eq!(
            t.violations(),
            alloc::vec![
                "variation_template is missing {prompt}",
                "variation_template must not use {prompts}",
                "aggregate_template must not use {examples}",
            ]
        );
    }

    #[test]
    fn render_is_single_pass() {
        let out = render("A {prompt} B {task_hint} {unknown} {", &[("prompt", "{task_hint}"), ("task_hint", "T")]);
        assert_eq!(out, "A {task_hint} B T {unknown} {");
    }

    #[test]
    fn examples_block_format() {
        let ex = [
            Example {
                id: "1".into(),
                input: "great".into(),
                output: "positive".into(),
            },
            Example {
                id: "2".into(),
                input: "bad".into(),
                output: "negative".into(),
            },
        ];
        assert_eq!(
            format_examples(&ex),
            "Input: great\nExpected output: positive\n\nInput: bad\nExpected output: negative"
        );
        assert_eq!(numbered(&["a", "b"]), "1. a\n2. b");
    }
}
