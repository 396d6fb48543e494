//! `simulate-group`: paired baseline / self-emotion discussions.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use emosim::domain::Valence;
use emosim::genesis::{generate_group, generate_topic_steps, GroupMember, Topic};
use emosim::groupsim::{run_experiment, Decision, DiscussionRecord, PairedRunSet};
use emosim::seeds::derive_seed;

use crate::analysis;
use crate::Session;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub topic: String,
    pub valence: Valence,
    pub run_index: usize,
    /// Seed of this discussion, derived from the run seed.
    pub discussion_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<DiscussionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionLine {
    pub topic: String,
    pub valence: Valence,
    pub run_index: usize,
    #[serde(flatten)]
    pub decision: Decision,
}

#[derive(Debug, Clone, Serialize)]
struct GroupFile<'a> {
    members: &'a [GroupMember],
    topics: &'a [Topic],
}

#[derive(Debug, Clone, Deserialize)]
pub struct GroupTopics {
    pub topics: Vec<Topic>,
}

fn valence_index(v: Valence) -> u64 {
    match v {
        Valence::Positive => 0,
        Valence::Negative => 1,
        Valence::Neutral => 2,
    }
}

pub fn run(s: &Session) -> Result<()> {
    let c = &s.loaded.config;
    let g = c.group.as_ref().context("config has no [group] block")?;
    let members: Vec<GroupMember> = match &g.members_path {
        Some(p) => {
            let path = s.loaded.resolve(p);
            let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid members file {}", path.display()))?
        }
        None => generate_group(g.description.as_deref().unwrap_or_default(), g.size, &s.engine)
            .context("group generation failed")?,
    };
    let topics: Vec<Topic> = g
        .topics
        .iter()
        .map(|t| match &t.steps {
            Some(steps) => Topic::new(&t.title, steps.clone()).map_err(anyhow::Error::from),
            None => generate_topic_steps(&t.title, &s.engine)
                .with_context(|| format!("step generation failed for {:?}", t.title)),
        })
        .collect::<Result<_>>()?;
    s.run.write_json("group.json", &GroupFile {
        members: &members,
        topics: &topics,
    })?;

    let mut sets = Vec::new();
    for (ti, topic) in topics.iter().enumerate() {
        for &valence in &g.valences {
            let seed = derive_seed(c.seed, &[ti as u64, valence_index(valence)]);
            tracing::info!(topic = topic.title(), %valence, "running discussions");
            sets.push(run_experiment(&members, topic, g.n_runs, valence, &s.engine, seed, &g.discussion)?);
        }
    }

    let mut transcripts = Vec::new();
    let mut decisions = Vec::new();
    for set in &sets {
        for outcome in std::iter::once(&set.baseline).chain(&set.runs) {
            if let Some(rec) = &outcome.record {
                decisions.extend(rec.decisions.iter().map(|d| DecisionLine {
                    topic: set.topic.clone(),
                    valence: set.valence,
                    run_index: outcome.run_index,
                    decision: d.clone(),
                }));
            }
            transcripts.push(TranscriptLine {
                topic: set.topic.clone(),
                valence: set.valence,
                run_index: outcome.run_index,
                discussion_seed: outcome.seed,
                record: outcome.record.clone(),
                error: outcome.error.clone(),
            });
        }
    }
    s.run.write_jsonl("transcripts.jsonl", &transcripts)?;
    s.run.write_jsonl("decisions.jsonl", &decisions)?;
    s.run.write_jsonl("paired_runs.jsonl", &sets)?;

    let judge = g.judge_changes.then_some(analysis::Judge {
        engine: &s.engine,
        topics: &topics,
    });
    let (text, csv) = analysis::change_report(&sets, judge)?;
    s.run.write_text("report.txt", &text)?;
    s.run.write_csv("report.csv", &csv)?;
    Ok(())
}

/// Discussions that ended with an error.
pub fn failed_runs(sets: &[PairedRunSet]) -> usize {
    sets.iter()
        .flat_map(|s| std::iter::once(&s.baseline).chain(&s.runs))
        .filter(|r| r.error.is_some())
        .count()
}
