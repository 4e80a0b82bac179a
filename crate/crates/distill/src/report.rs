//! Machine (`report.json`) and human (`report.txt`) summaries of a run.

use distill_core::{CandidateId, EpochRecord, MetricKind};
use serde::{Deserialize, Serialize};

use crate::run::{Baselines, FewShotBaseline, RunManifest, RunStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPrompt {
    pub candidate_id: CandidateId,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: u32,
    pub incumbent_in: f64,
    /// Highest score among the candidates created in this epoch.
    pub best_new: f64,
    pub incumbent_out: f64,
    pub selected: CandidateId,
}

/// Everything in a report is a pure function of the persisted records, so
/// two identical runs produce identical bytes. Run ids, timestamps and cache
/// counters are left out on purpose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub metric: MetricKind,
    pub status: RunStatus,
    pub epochs_planned: u32,
    pub epochs_completed: u32,
    pub baseline_prompt: Option<f64>,
    pub few_shot: Option<FewShotBaseline>,
    pub optimized: Option<f64>,
    pub best: Option<BestPrompt>,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Requests issued for seed scoring and all epochs, cached or not.
    pub total_llm_calls: u64,
}

pub fn build_report(manifest: &RunManifest, epochs: &[EpochRecord], baselines: &Baselines) -> RunReport {
    let baseline_prompt = epochs
        .first()
        .and_then(|e| e.seed_evaluation.as_ref().map(|s| s.scored.score).or(e.incumbent_in.score));
    let best = epochs.last().map(|e| BestPrompt {
        candidate_id: e.incumbent_out.id(),
        text: e.incumbent_out.text.clone(),
        score: e.incumbent_out.score.unwrap_or(f64::NAN),
    });
    let trajectory = epochs
        .iter()
        .map(|e| TrajectoryPoint {
            epoch: e.epoch,
            incumbent_in: e.incumbent_in.score.unwrap_or(f64::NAN),
            best_new: e.scored.iter().skip(1).map(|s| s.score).fold(f64::NEG_INFINITY, f64::max),
            incumbent_out: e.incumbent_out.score.unwrap_or(f64::NAN),
            selected: e.incumbent_out.id(),
        })
        .collect();
    let seed_calls = epochs
        .first()
        .and_then(|e| e.seed_evaluation.as_ref())
        .map_or(0, |s| s.llm_calls);
    RunReport {
        task: manifest.task.name.clone(),
        metric: manifest.task.metric,
        status: manifest.status,
        epochs_planned: manifest.config.epochs,
        epochs_completed: epochs.len() as u32,
        baseline_prompt,
        few_shot: baselines.few_shot,
        optimized: best.as_ref().map(|b| b.score),
        best,
        trajectory,
        total_llm_calls: seed_calls + epochs.iter().map(|e| e.llm_calls).sum::<u64>(),
    }
}

fn score(x: f64) -> String {
    format!("{x:.4}")
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            line.push_str(cell);
            if c + 1 < r.len() {
                line.extend(std::iter::repeat_n(' ', widths[c] - cell.chars().count() + 2));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Method-by-dataset table, then each run's trajectory and best prompt.
pub fn render_text(reports: &[RunReport]) -> String {
    let mut rows = vec![std::iter::once("Method".to_string())
        .chain(reports.iter().map(|r| format!("{}, {}", r.task, r.metric.short_name())))
        .collect::<Vec<_>>()];
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), score);
    rows.push(
        std::iter::once("Baseline prompt".to_string())
            .chain(reports.iter().map(|r| cell(r.baseline_prompt)))
            .collect(),
    );
    let mut shots: Vec<usize> = reports.iter().filter_map(|r| r.few_shot.map(|f| f.n)).collect();
    shots.sort_unstable();
    shots.dedup();
    for n in shots {
        rows.push(
            std::iter::once(format!("Few shot: n = {n}"))
                .chain(reports.iter().map(|r| cell(r.few_shot.filter(|f| f.n == n).map(|f| f.score))))
                .collect(),
        );
    }
    rows.push(
        std::iter::once("Optimized".to_string())
            .chain(reports.iter().map(|r| cell(r.optimized)))
            .collect(),
    );
    let mut out = table(&rows);

    for r in reports {
        let status = match r.status {
            RunStatus::Running => "running",
            RunStatus::Completed => "completed",
            RunStatus::Failed => "failed",
        };
        out.push_str(&format!(
            "\n{}: {status}, {} of {} epochs, {} LLM calls\n",
            r.task, r.epochs_completed, r.epochs_planned, r.total_llm_calls
        ));
        let mut t = vec![["Epoch", "Incumbent in", "Best new", "Incumbent out", "Selected"]
            .map(String::from)
            .to_vec()];
        for p in &r.trajectory {
            t.push(vec![
                p.epoch.to_string(),
                score(p.incumbent_in),
                score(p.best_new),
                score(p.incumbent_out),
                p.selected.to_string(),
            ]);
        }
        out.push_str(&table(&t));
        if let Some(b) = &r.best {
            out.push_str(&format!(
                "\nBest prompt ({}, {} {}):\n{}\n",
                b.candidate_id,
                r.metric.short_name(),
                score(b.score),
                b.text.trim_end()
            ));
        }
    }
    out
}
