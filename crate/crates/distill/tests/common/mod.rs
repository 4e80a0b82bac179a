#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use std::collections::BTreeMap;

use distill::run::{Baselines, ConfigFile, FewShotBaseline, RunManifest, RunStatus};
use distill_core::model::{ScoreEntry, SeedEvaluation};
use distill_core::{
    BackendConfig, CandidateId, EpochRecord, EvalSubsetSize, Matcher, MatchTarget, MetricKind, MockRule,
    PromptCandidate, RunConfig, ScoredCandidate, Stage, TaskKind, TaskSpec,
};

/// One request as seen by the stub server.
#[derive(Debug, Clone)]
pub struct Seen {
    pub headers: Vec<(String, String)>,
    pub body: serde_json::Value,
}

/// Plain HTTP/1.1 stub that answers each connection with the next scripted
/// `(status, body)`; the last entry repeats.
pub struct StubServer {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    _handle: JoinHandle<()>,
}

pub fn chat_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

impl StubServer {
    pub fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let handle = std::thread::spawn(move || {
            let mut k = 0usize;
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = Vec::new();
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    continue;
                }
                loop {
                    line.clear();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some((name, value)) = l.split_once(':') {
                        headers.push((name.trim().to_ascii_lowercase(), value.trim().to_string()));
                    }
                }
                let len: usize = headers
                    .iter()
                    .find(|(n, _)| n == "content-length")
                    .map_or(0, |(_, v)| v.parse().unwrap());
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Seen {
                    headers,
                    body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
                });
                let (status, text) = script[k.min(script.len() - 1)].clone();
                k += 1;
                let reply = format!(
                    "HTTP/1.1 {status} Scripted\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
                let _ = stream.flush();
            }
        });
        Self {
            url,
            seen,
            _handle: handle,
        }
    }

    pub fn hits(&self) -> usize {
        self.seen.lock().unwrap().len()
    }
}

pub fn sentiment_task() -> TaskSpec {
    TaskSpec {
        name: "toy-sentiment".into(),
        kind: TaskKind::Classification,
        labels: vec!["positive".into(), "negative".into()],
        metric: MetricKind::MacroF1,
        instruction_seed: "Classify the sentiment of the review.".into(),
    }
}

const GOOD: [&str; 6] = ["great", "lovely", "superb", "delightful", "moving", "wonderful"];
const BAD: [&str; 6] = ["dull", "awful", "tedious", "clumsy", "boring", "dreadful"];

/// `n` reviews; each input contains one sentiment word that decides the label.
pub fn sentiment_jsonl(n: usize) -> String {
    let mut out = String::new();
    for i in 0..n {
        let (word, label) = if i % 2 == 0 {
            (GOOD[i / 2 % GOOD.len()], "positive")
        } else {
            (BAD[i / 2 % BAD.len()], "negative")
        };
        out.push_str(
            &serde_json::json!({"id": format!("r{i:02}"), "input": format!("Review {i}: a {word} film."), "output": label})
                .to_string(),
        );
        out.push('\n');
    }
    out
}

/// Scripted behaviours for whole-run tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Every prompt predicts "negative".
    Plain,
    /// The third final variation of the first epoch reads the sentiment
    /// word and is always right; everything else predicts "negative".
    UniqueWinner,
    /// The seed prompt is always right; every new prompt answers with no label.
    Regression,
}

pub const WINNER: &str = "WINNER";

/// Rules that answer one review correctly when the system prompt starts with `prefix`.
fn oracle_for(prefix: &str) -> Vec<MockRule> {
    let good = GOOD.join("|");
    vec![
        MockRule::new(
            Matcher::Regex(format!("(?s)^{prefix}.*\\nReview \\d+: a ({good}) film\\.$")),
            "positive",
        )
        .on(MatchTarget::Both),
        MockRule::new(Matcher::StartsWith(prefix.into()), "negative").on(MatchTarget::System),
    ]
}

pub fn mock_rules(scenario: Scenario) -> Vec<MockRule> {
    let mut rules = Vec::new();
    match scenario {
        Scenario::Plain => {}
        Scenario::UniqueWinner => {
            rules.extend(oracle_for(WINNER));
            rules.push(MockRule {
                matcher: Matcher::Regex("(?s)^Rewrite.*Prompt: Distilled".into()),
                target: MatchTarget::User,
                responses: vec![
                    "Final {h}: weigh the overall tone.".into(),
                    "Final {h}: consider the reviewer's mood.".into(),
                    format!("{WINNER} {{h}}: the adjective alone decides the label."),
                    "Final {h}: summarize, then decide.".into(),
                ],
            });
        }
        Scenario::Regression => rules.extend(oracle_for("Classify the sentiment")),
    }
    let fallback = if scenario == Scenario::Regression { "unsure" } else { "negative" };
    rules.extend([
        MockRule::new(Matcher::StartsWith("Rewrite".into()), "Variant {h}: decide whether the review is positive or negative."),
        MockRule::new(Matcher::StartsWith("Here is a prompt".into()), "Embedded {h}: look for the evaluative adjective."),
        MockRule::new(Matcher::StartsWith("Condense".into()), "Compressed {h}: judge the adjective."),
        MockRule::new(Matcher::StartsWith("Merge".into()), "Distilled {h}: the adjective decides the label."),
        MockRule::new(Matcher::StartsWith("Review".into()), fallback),
    ]);
    rules
}

pub fn mock_config(epochs: u32, eval: usize, seed: u64) -> RunConfig {
    RunConfig {
        n_candidates: 4,
        k_examples: 5,
        epochs,
        eval_subset_size: EvalSubsetSize::Count(eval),
        seed,
        max_in_flight: 3,
        backend: BackendConfig::scripted(mock_rules(Scenario::Plain)),
        ..RunConfig::default()
    }
}

/// Writes `config.json` and `data.jsonl` into `dir`.
pub fn write_inputs(dir: &Path, task: &TaskSpec, config: &RunConfig, n_examples: usize) -> (PathBuf, PathBuf) {
    let cfg = dir.join("config.json");
    let data = dir.join("data.jsonl");
    std::fs::write(
        &cfg,
        serde_json::to_string_pretty(&ConfigFile {
            task: task.clone(),
            config: config.clone(),
        })
        .unwrap(),
    )
    .unwrap();
    std::fs::write(&data, sentiment_jsonl(n_examples)).unwrap();
    (cfg, data)
}

/// The only entry of `out`.
pub fn single_run_dir(out: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "expected one run directory in {}", out.display());
    dirs.pop().unwrap()
}

/// Runs the CLI in-process and returns (exit, stdout, stderr).
pub fn cli(args: &[&str], opts: &distill::cli::Options) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("distill").chain(args.iter().copied());
    let code = distill::cli::run(argv, opts, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn candidate(epoch: u32, stage: Stage, gen_index: u32, text: &str, score: f64, parents: Vec<CandidateId>) -> PromptCandidate {
    PromptCandidate {
        text: text.into(),
        epoch,
        stage,
        gen_index,
        parent_ids: parents,
        score: Some(score),
    }
}

fn synthetic_epoch(epoch: u32, incumbent: &PromptCandidate, scores: [f64; 5], winner: usize, text: &str) -> EpochRecord {
    let distilled = candidate(epoch, Stage::Distilled, 0, "Distilled.", scores[0], vec![]);
    let finals: Vec<PromptCandidate> = (0..4)
        .map(|g| candidate(epoch, Stage::FinalVariation, g, &format!("Final {g}."), scores[g as usize + 1], vec![distilled.id()]))
        .collect();
    let mut pool = vec![distilled.clone()];
    pool.extend(finals.iter().cloned());
    let mut out = pool[winner].clone();
    out.text = text.into();
    let mut scored = vec![ScoreEntry {
        candidate_id: incumbent.id(),
        score: incumbent.score.unwrap(),
    }];
    scored.extend(pool.iter().map(|c| ScoreEntry {
        candidate_id: c.id(),
        score: c.score.unwrap(),
    }));
    let mut stage_outputs = BTreeMap::new();
    stage_outputs.insert(Stage::Distilled, vec![distilled]);
    stage_outputs.insert(Stage::FinalVariation, finals);
    EpochRecord {
        epoch,
        incumbent_in: incumbent.clone(),
        stage_outputs,
        scored,
        evaluations: vec![],
        incumbent_out: out,
        llm_calls: 217,
        cache_hits: 0,
        meta_calls: 17,
        task_calls: 200,
        fallback_reasks: 0,
        seed_evaluation: None,
    }
}

/// A hand-built two-epoch sst-2 run: baseline 0.6135, few-shot 0.9328, optimized 0.9484.
pub fn synthetic_sst2() -> (RunManifest, Vec<EpochRecord>, Baselines) {
    let task = TaskSpec {
        name: "sst-2".into(),
        kind: TaskKind::Classification,
        labels: vec!["positive".into(), "negative".into()],
        metric: MetricKind::MacroF1,
        instruction_seed: "Classify the sentiment of the review.".into(),
    };
    let seed = PromptCandidate::seed(task.instruction_seed.clone()).with_score(0.6135);
    let mut e1 = synthetic_epoch(1, &seed, [0.8502, 0.7710, 0.8893, 0.9011, 0.6020], 3, "Judge the overall opinion of the review.");
    e1.seed_evaluation = Some(SeedEvaluation {
        scored: ScoredCandidate {
            candidate_id: seed.id(),
            score: 0.6135,
            outcomes: vec![],
        },
        llm_calls: 100,
        cache_hits: 0,
    });
    let e2 = synthetic_epoch(
        2,
        &e1.incumbent_out.clone(),
        [0.9484, 0.9105, 0.8990, 0.9302, 0.8877],
        0,
        "Decide whether the review expresses positive or negative sentiment, judging the overall opinion rather than isolated words.",
    );
    let manifest = RunManifest {
        run_id: "20250101T000000Z-000000".into(),
        created_at: "2025-01-01T00:00:00Z".into(),
        config: RunConfig {
            epochs: 2,
            ..RunConfig::default()
        },
        task,
        status: RunStatus::Completed,
        completed_epochs: 2,
        data_path: "sst2.jsonl".into(),
        data_fingerprint: "0000000000000000".into(),
        error: None,
    };
    let baselines = Baselines {
        few_shot: Some(FewShotBaseline { n: 3, score: 0.9328 }),
    };
    (manifest, vec![e1, e2], baselines)
}
