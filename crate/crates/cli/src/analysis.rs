//! `evaluate` and `analyze-changes`: reports over saved results.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use emosim::dialogue::{ExperimentTable, FixedContextCase, ResultRow};
use emosim::domain::{StrategyPool, Valence};
use emosim::emotion::LabelPool;
use emosim::Engine;
use emosim::genesis::Topic;
use emosim::groupsim::{DecisionPair, PairedRunSet};
use emosim::metrics::{
    classify_decision_change_judged, decision_change_rate, decision_change_rate_with, discussion_stats, emotion_strategy_flow, evaluate_fixed_context, flow_input,
    DiscussionStats, RunStats,
};

use crate::dialogue::{report_csv, report_text};
use crate::group::{failed_runs, GroupTopics};
use crate::output::{read_stamped, RunDir};

fn emit(out: Option<&Path>, hash: &str, seed: u64, text: &str, csv: &str) -> Result<()> {
    print!("{text}");
    if let Some(dir) = out {
        let run = RunDir::create(Some(dir), dir, hash, seed)?;
        run.write_text("report.txt", text)?;
        run.write_csv("report.csv", csv)?;
    }
    Ok(())
}

pub fn evaluate(results: &Path, annotations: &Path, out: Option<&Path>) -> Result<()> {
    let (hash, seed, rows) = read_stamped::<ResultRow>(results)?;
    let cases: Vec<FixedContextCase> =
        emosim::persist::read_jsonl(annotations).with_context(|| format!("cannot load {}", annotations.display()))?;
    if cases.iter().all(|c| c.human_choice().is_none()) {
        bail!("{} has no annotated strategies", annotations.display());
    }
    let table = ExperimentTable::from_rows(rows);
    let pool = StrategyPool::default();
    let acc = evaluate_fixed_context(&table, &cases, &pool);
    let flow = emotion_strategy_flow(&flow_input(&table), &LabelPool::default(), &pool);
    emit(out, &hash, seed, &report_text(&table, &acc, &flow), &report_csv(&table, &acc))
}

pub fn analyze_changes(paired_runs: &Path, out: Option<&Path>, engine: Option<&Engine>) -> Result<()> {
    let (hash, seed, sets) = read_stamped::<PairedRunSet>(paired_runs)?;
    let topics = match engine {
        Some(_) => sibling_topics(paired_runs)?,
        None => Vec::new(),
    };
    let judge = engine.map(|engine| Judge {
        engine,
        topics: &topics,
    });
    let (text, csv) = change_report(&sets, judge)?;
    emit(out, &hash, seed, &text, &csv)
}

/// Topics from the group.json written next to `paired_runs`, if any.
fn sibling_topics(paired_runs: &Path) -> Result<Vec<Topic>> {
    let path = paired_runs.with_file_name("group.json");
    if !path.exists() {
        tracing::warn!(path = %path.display(), "no group file, judging without step text");
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let file: GroupTopics = serde_json::from_str(&text).with_context(|| format!("invalid {}", path.display()))?;
    Ok(file.topics)
}

/// Model used to settle decisions that differ only in wording.
#[derive(Clone, Copy)]
pub struct Judge<'a> {
    pub engine: &'a Engine,
    pub topics: &'a [Topic],
}

impl Judge<'_> {
    fn step(&self, p: &DecisionPair) -> String {
        self.topics
            .iter()
            .find(|t| t.title() == p.topic)
            .and_then(|t| t.steps().get(p.before.step_index))
            .cloned()
            .unwrap_or_else(|| format!("{} (step {})", p.topic, p.before.step_index + 1))
    }
}

struct StatsRow {
    name: &'static str,
    stats: Option<DiscussionStats>,
    runs: usize,
}

/// Discussion length and target-member frequency. The baseline row tracks,
/// for every self-emotion run, the member that run targeted.
fn stats_rows(sets: &[PairedRunSet]) -> Vec<StatsRow> {
    let mut baseline = Vec::new();
    let mut rows = Vec::new();
    for (name, valence) in [("positive", Valence::Positive), ("negative", Valence::Negative)] {
        let mut runs = Vec::new();
        for set in sets.iter().filter(|s| s.valence == valence) {
            for rec in set.runs.iter().filter_map(|r| r.record.as_ref()) {
                let target = rec.se_assignment.target_member.as_deref();
                runs.push(RunStats::from_record(rec, target));
                if let Some(base) = &set.baseline.record {
                    baseline.push(RunStats::from_record(base, target));
                }
            }
        }
        rows.push(StatsRow {
            name,
            stats: discussion_stats(&runs).ok(),
            runs: runs.len(),
        });
    }
    rows.insert(
        0,
        StatsRow {
            name: "baseline",
            stats: discussion_stats(&baseline).ok(),
            runs: baseline.len(),
        },
    );
    rows
}

pub fn change_report(sets: &[PairedRunSet], judge: Option<Judge>) -> Result<(String, String)> {
    let pairs: Vec<_> = sets.iter().flat_map(PairedRunSet::pairs).collect();
    let report = match judge {
        Some(j) => decision_change_rate_with(&pairs, None, |p| {
            classify_decision_change_judged(&p.before, &p.after, &j.step(p), j.engine)
        }),
        None => decision_change_rate(&pairs, None),
    }
    .context("cannot compute decision change rates")?;
    let mut text = report.to_text_table();
    if judge.is_some() {
        text.push_str("reworded decisions judged by model\n");
    }
    let stats = stats_rows(sets);
    let _ = writeln!(text, "\n{:<10} {:>5} {:>10} {:>10}", "runs", "n", "avg_len", "target_freq");
    for r in &stats {
        let (len, freq) = r.stats.map_or_else(
            || ("-".to_string(), "-".to_string()),
            |s| (format!("{:.2}", s.avg_length), format!("{:.2}", s.target_frequency)),
        );
        let _ = writeln!(text, "{:<10} {:>5} {len:>10} {freq:>10}", r.name, r.runs);
    }
    let failed = failed_runs(sets);
    if failed > 0 {
        let _ = writeln!(text, "\nruns with errors: {failed}");
    }
    Ok((text, report.to_csv()))
}
