//! Step-wise group discussions. A hidden manager picks each next speaker,
//! members answer under their goals (and possibly self-emotion), and the
//! leader decides when a step has reached a decision.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{SelfEmotion, Transcript, Utterance, Valence};
use crate::emotion::{self, EmotionError};
use crate::engine::Engine;
use crate::gateway::GatewayError;
use crate::genesis::{GroupMember, GroupRole, Topic};
use crate::seeds::derive_seed;
use crate::templates::{bindings, TemplateError};

/// Reserved id of the scheduler; never a speaker.
pub const MANAGER_ID: &str = "manager";

#[derive(Debug, thiserror::Error)]
pub enum GroupError {
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("turn budget of {budget} exhausted at step {step_index}")]
    GlobalBudgetExceeded {
        budget: usize,
        step_index: usize,
        record: Box<DiscussionRecord>,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Emotion(#[from] EmotionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Agreement,
    Delegation,
    Vote,
    SingleAgent,
    CompromisedAgreement,
}

impl Resolution {
    pub fn as_str(self) -> &'static str {
        match self {
            Resolution::Agreement => "agreement",
            Resolution::Delegation => "delegation",
            Resolution::Vote => "vote",
            Resolution::SingleAgent => "single agent",
            Resolution::CompromisedAgreement => "compromised agreement",
        }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        Ok(match norm.as_str() {
            "agreement" | "agreed" | "consensus" => Resolution::Agreement,
            "delegation" | "delegated" => Resolution::Delegation,
            "vote" | "voting" | "majority vote" | "majority" => Resolution::Vote,
            "single agent" | "single" | "individual" => Resolution::SingleAgent,
            "compromised agreement" | "compromise" | "compromised" => Resolution::CompromisedAgreement,
            _ => return Err(format!("unknown resolution {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub step_index: usize,
    pub summary: String,
    pub resolution: Resolution,
    pub decided_by: Vec<String>,
}

impl Decision {
    pub fn new(
        step_index: usize,
        summary: &str,
        resolution: Resolution,
        decided_by: Vec<String>,
    ) -> Result<Self, GroupError> {
        let summary = summary.trim();
        if summary.is_empty() {
            return Err(GroupError::InvalidInput("decision summary is empty".into()));
        }
        Ok(Decision {
            step_index,
            summary: summary.to_string(),
            resolution,
            decided_by,
        })
    }
}

/// Which member (if any) carries self-emotion during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SEAssignment {
    pub target_member: Option<String>,
    pub self_emotion: Option<SelfEmotion>,
}

impl SEAssignment {
    pub fn none() -> Self {
        SEAssignment::default()
    }

    pub fn to(member_id: &str, self_emotion: SelfEmotion) -> Self {
        SEAssignment {
            target_member: Some(member_id.to_string()),
            self_emotion: Some(self_emotion),
        }
    }

    pub fn validate(&self, group: &[GroupMember]) -> Result<(), GroupError> {
        match (&self.target_member, &self.self_emotion) {
            (None, None) => Ok(()),
            (Some(id), Some(_)) if group.iter().any(|m| &m.id == id) => Ok(()),
            (Some(id), Some(_)) => Err(GroupError::InvalidInput(format!("target {id:?} is not in the group"))),
            _ => Err(GroupError::InvalidInput(
                "target member and self-emotion must be set together".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Continue,
    Agreed { summary: String, resolution: Resolution },
    ForcedDelegation { summary: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscussionConfig {
    /// Manager turns per step before the decision is forced to delegation.
    pub max_rounds: usize,
    /// Global budget is this many turns per topic step.
    pub budget_per_step: usize,
    /// Utterances shown to the manager and to members.
    pub history_window: usize,
}

impl Default for DiscussionConfig {
    fn default() -> Self {
        DiscussionConfig {
            max_rounds: 12,
            budget_per_step: 12,
            history_window: 16,
        }
    }
}

impl DiscussionConfig {
    pub fn validate(&self) -> Result<(), GroupError> {
        if self.max_rounds == 0 || self.budget_per_step == 0 || self.history_window == 0 {
            return Err(GroupError::InvalidInput(
                "max_rounds, budget_per_step and history_window must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscussionState {
    pub group: Vec<GroupMember>,
    pub topic: Topic,
    pub step_index: usize,
    pub history: Transcript,
    pub decisions: Vec<Decision>,
    pub rounds_in_step: usize,
    /// Times each member was given the floor in the current step.
    pub turns_this_step: BTreeMap<String, usize>,
}

/// Checks the single-leader rule and id uniqueness.
pub fn validate_group(group: &[GroupMember]) -> Result<(), GroupError> {
    if group.len() < 2 {
        return Err(GroupError::InvalidGroup(format!("{} members, need at least 2", group.len())));
    }
    let leaders = group.iter().filter(|m| m.role == GroupRole::Leader).count();
    if leaders != 1 {
        return Err(GroupError::InvalidGroup(format!("{leaders} leaders, need exactly 1")));
    }
    let mut ids: Vec<&str> = group.iter().map(|m| m.id.as_str()).collect();
    if ids.contains(&MANAGER_ID) {
        return Err(GroupError::InvalidGroup(format!("member id {MANAGER_ID:?} is reserved")));
    }
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != group.len() {
        return Err(GroupError::InvalidGroup("duplicate member ids".into()));
    }
    Ok(())
}

impl DiscussionState {
    pub fn new(group: Vec<GroupMember>, topic: Topic, id: impl Into<String>) -> Result<Self, GroupError> {
        validate_group(&group)?;
        let mut history = Transcript::new(id);
        history.set_meta("topic", topic.title());
        Ok(DiscussionState {
            group,
            topic,
            step_index: 0,
            history,
            decisions: Vec::new(),
            rounds_in_step: 0,
            turns_this_step: BTreeMap::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.step_index >= self.topic.steps().len()
    }

    pub fn current_step(&self) -> Option<&str> {
        self.topic.steps().get(self.step_index).map(String::as_str)
    }

    pub fn leader(&self) -> &GroupMember {
        self.group
            .iter()
            .find(|m| m.role == GroupRole::Leader)
            .expect("validated group has a leader")
    }

    pub fn member(&self, id: &str) -> Option<&GroupMember> {
        self.group.iter().find(|m| m.id == id)
    }

    pub fn step_utterances(&self) -> impl Iterator<Item = &Utterance> {
        let step = self.step_index;
        self.history.utterances.iter().filter(move |u| u.step_index == Some(step))
    }

    fn recent(&self, window: usize) -> &[Utterance] {
        let u = &self.history.utterances;
        &u[u.len().saturating_sub(window)..]
    }

    /// Records the decision for the current step and moves to the next one.
    pub fn record_decision(&mut self, decision: Decision) {
        debug_assert_eq!(decision.step_index, self.step_index);
        self.decisions.push(decision);
        self.step_index += 1;
        self.rounds_in_step = 0;
        self.turns_this_step.clear();
    }

    pub fn check_invariants(&self, cfg: &DiscussionConfig) -> Result<(), String> {
        if self.step_index > self.topic.steps().len() {
            return Err("step index past the last step".into());
        }
        if self.decisions.len() != self.step_index {
            return Err(format!("{} decisions at step {}", self.decisions.len(), self.step_index));
        }
        if self.decisions.iter().enumerate().any(|(i, d)| d.step_index != i) {
            return Err("decision step indices out of order".into());
        }
        if self.rounds_in_step > cfg.max_rounds {
            return Err("rounds in step exceed max_rounds".into());
        }
        if self.history.utterances.iter().any(|u| u.speaker_id == MANAGER_ID) {
            return Err("manager appears in the transcript".into());
        }
        if self.group.iter().filter(|m| m.role == GroupRole::Leader).count() != 1 {
            return Err("leader count changed".into());
        }
        Ok(())
    }
}

fn render_history(utterances: &[Utterance]) -> String {
    if utterances.is_empty() {
        return "(nothing yet)".into();
    }
    utterances
        .iter()
        .map(|u| format!("{}: {}", u.role_tag, u.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_roster(group: &[GroupMember]) -> String {
    group
        .iter()
        .map(|m| format!("- {} ({}, {})", m.profile.name, m.position, m.role))
        .collect::<Vec<_>>()
        .join("\n")
}

fn normalize(s: &str) -> String {
    let lowered = s
        .to_lowercase()
        .replace(['*', '"', '\'', '`', '[', ']', '<', '>'], " ");
    let words: Vec<&str> = lowered
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '!' | '?')))
        .filter(|w| !w.is_empty())
        .collect();
    let words = match words.first() {
        Some(&"the") => &words[1..],
        _ => &words[..],
    };
    words.join(" ")
}

/// Resolves a manager answer such as `next: structural engineer` to a member id.
pub fn parse_next_speaker(text: &str, group: &[GroupMember]) -> Option<String> {
    let re = Regex::new(r"(?im)^\s*(?:\*\*)?next(?:\s+speaker)?(?:\*\*)?\s*:(?:\*\*)?\s*(.+)$").expect("static regex");
    let answer = normalize(&re.captures(text)?[1]);
    if answer.is_empty() {
        return None;
    }
    let keys = |m: &GroupMember| {
        [&m.position, &m.profile.name, &m.profile.first_name, &m.id]
            .into_iter()
            .map(|k| normalize(k))
            .filter(|k| !k.is_empty())
            .collect::<Vec<_>>()
    };
    let exact: Vec<&GroupMember> = group.iter().filter(|m| keys(m).contains(&answer)).collect();
    if let [m] = exact[..] {
        return Some(m.id.clone());
    }
    if !exact.is_empty() {
        return None;
    }
    let padded = format!(" {answer} ");
    let loose: Vec<&GroupMember> = group
        .iter()
        .filter(|m| {
            [&m.position, &m.profile.name]
                .into_iter()
                .map(|k| normalize(k))
                .any(|k| !k.is_empty() && padded.contains(&format!(" {k} ")))
        })
        .collect();
    match loose[..] {
        [m] => Some(m.id.clone()),
        _ => None,
    }
}

/// Member given the floor least often this step; ties go to roster order.
pub fn fallback_speaker(state: &DiscussionState) -> String {
    state
        .group
        .iter()
        .min_by_key(|m| state.turns_this_step.get(&m.id).copied().unwrap_or(0))
        .expect("group is nonempty")
        .id
        .clone()
}

/// Asks the hidden manager for the next speaker. Unusable answers (and
/// gateway failures) fall back to [`fallback_speaker`].
pub fn next_speaker(state: &DiscussionState, engine: &Engine, cfg: &DiscussionConfig) -> String {
    let prompt = engine.templates.render(
        "next_speaker",
        &bindings([
            ("topic", state.topic.title().to_string()),
            ("step", state.current_step().unwrap_or_default().to_string()),
            ("roster", render_roster(&state.group)),
            ("history", render_history(state.recent(cfg.history_window))),
        ]),
    );
    let answer = prompt
        .map_err(GroupError::from)
        .and_then(|p| Ok(engine.ask("next_speaker", p, engine.settings.judge_temperature)?));
    match answer {
        Ok(text) => match parse_next_speaker(&text, &state.group) {
            Some(id) => return id,
            None => tracing::warn!(completion = %text, "manager answer names no member, using fallback"),
        },
        Err(e) => tracing::warn!(error = %e, "manager call failed, using fallback"),
    }
    fallback_speaker(state)
}

fn render_decisions(state: &DiscussionState) -> String {
    if state.decisions.is_empty() {
        return "(none yet)".into();
    }
    state
        .decisions
        .iter()
        .map(|d| {
            let step = state.topic.steps().get(d.step_index).map_or("", String::as_str);
            format!("Step {} ({step}): {} [{}]", d.step_index + 1, d.summary, d.resolution)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn strip_speaker_prefix(text: &str, member: &GroupMember) -> String {
    let t = text.trim();
    for prefix in [&member.profile.name, &member.profile.first_name, &member.position] {
        if prefix.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix(prefix.as_str()) {
            if let Some(rest) = rest.trim_start().strip_prefix(':') {
                return rest.trim().to_string();
            }
        }
    }
    t.to_string()
}

/// One message from `member`, attributed to them and tagged with the step.
pub fn member_respond(
    member: &GroupMember,
    state: &DiscussionState,
    engine: &Engine,
    cfg: &DiscussionConfig,
) -> Result<Utterance, GroupError> {
    let se = member
        .self_emotion
        .as_ref()
        .map(|s| format!("{}\n", s.rendered()))
        .unwrap_or_default();
    let prompt = engine.templates.render(
        "member_response",
        &bindings([
            ("name", member.profile.name.clone()),
            ("position", member.position.clone()),
            ("role", member.role.to_string()),
            ("goal", member.goal.clone()),
            ("self_emotion", se),
            ("topic", state.topic.title().to_string()),
            ("step", state.current_step().unwrap_or_default().to_string()),
            ("decisions", render_decisions(state)),
            ("history", render_history(state.recent(cfg.history_window))),
        ]),
    )?;
    let text = engine.ask("member_response", prompt, engine.settings.temperature)?;
    let text = strip_speaker_prefix(&text, member);
    if text.is_empty() {
        return Err(GatewayError::BodyRead("empty member response".into()).into());
    }
    let mut u = Utterance::new(&member.id, &member.profile.name, &text, state.history.len());
    u.step_index = Some(state.step_index);
    Ok(u)
}

/// Parses the leader's verdict line. `None` when no verdict is recognizable.
pub fn parse_verdict(text: &str) -> Option<Verdict> {
    let agreed = Regex::new(r"(?i)^\s*(?:\*\*)?agreed(?:\*\*)?\s*:(?:\*\*)?\s*(.*?)\s*(?:\(\s*resolution\s*:\s*([^)]*)\))?\s*\.?\s*$")
        .expect("static regex");
    let delegated = Regex::new(r"(?i)^\s*(?:\*\*)?delegated(?:\*\*)?\s*:(?:\*\*)?\s*(.*?)\s*\.?\s*$").expect("static regex");
    let cont = Regex::new(r"(?i)^\s*(?:\*\*)?continue(?:\*\*)?\s*\.?\s*$").expect("static regex");
    for line in text.lines() {
        if cont.is_match(line) {
            return Some(Verdict::Continue);
        }
        if let Some(c) = agreed.captures(line) {
            let summary = c[1].trim().trim_end_matches('.').trim().to_string();
            if summary.is_empty() {
                return None;
            }
            let resolution = match c.get(2) {
                Some(r) => r.as_str().parse().ok()?,
                None => Resolution::Agreement,
            };
            return Some(Verdict::Agreed { summary, resolution });
        }
        if let Some(c) = delegated.captures(line) {
            let summary = c[1].trim().to_string();
            if summary.is_empty() {
                return None;
            }
            return Some(Verdict::Agreed {
                summary,
                resolution: Resolution::Delegation,
            });
        }
    }
    None
}

fn forced(state: &DiscussionState) -> Verdict {
    Verdict::ForcedDelegation {
        summary: format!(
            "no agreement on \"{}\" after {} rounds; decision delegated",
            state.current_step().unwrap_or_default(),
            state.rounds_in_step
        ),
    }
}

/// Leader judgement for the current step. Once `rounds_in_step` reaches
/// `max_rounds`, anything short of a decision becomes a forced delegation.
pub fn check_agreement(state: &DiscussionState, engine: &Engine, cfg: &DiscussionConfig) -> Result<Verdict, GroupError> {
    let timed_out = state.rounds_in_step >= cfg.max_rounds;
    let step_history: Vec<Utterance> = state.step_utterances().cloned().collect();
    if step_history.is_empty() {
        return Ok(if timed_out { forced(state) } else { Verdict::Continue });
    }
    let members = state
        .group
        .iter()
        .map(|m| format!("- {} ({}): goal: {}", m.profile.name, m.position, m.goal))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = engine.templates.render(
        "agreement_check",
        &bindings([
            ("topic", state.topic.title().to_string()),
            ("step", state.current_step().unwrap_or_default().to_string()),
            ("members", members),
            ("history", render_history(&step_history)),
        ]),
    )?;
    let text = engine.ask("agreement_check", prompt, engine.settings.judge_temperature)?;
    let verdict = parse_verdict(&text).unwrap_or_else(|| {
        tracing::warn!(completion = %text, "unparseable leader verdict, continuing");
        Verdict::Continue
    });
    Ok(match verdict {
        Verdict::Continue if timed_out => forced(state),
        v => v,
    })
}

/// A discussion transcript together with its per-step decisions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscussionRecord {
    #[serde(flatten)]
    pub transcript: Transcript,
    pub decisions: Vec<Decision>,
    pub se_assignment: SEAssignment,
}

fn decided_by(state: &DiscussionState, resolution: Resolution) -> Vec<String> {
    let leader = state.leader().id.clone();
    if resolution == Resolution::Delegation {
        return vec![leader];
    }
    let spoke: Vec<&str> = state.step_utterances().map(|u| u.speaker_id.as_str()).collect();
    let mut ids: Vec<String> = state
        .group
        .iter()
        .filter(|m| spoke.contains(&m.id.as_str()))
        .map(|m| m.id.clone())
        .collect();
    if ids.is_empty() {
        ids.push(leader);
    }
    ids
}

/// Runs the discussion to its last step. The manager picks a speaker, the
/// speaker answers, and the leader judges after every full cycle of
/// `|group|` turns, whenever the leader has just spoken, and at `max_rounds`.
pub fn run_discussion(
    group: &[GroupMember],
    topic: &Topic,
    se: &SEAssignment,
    engine: &Engine,
    seed: u64,
    cfg: &DiscussionConfig,
) -> Result<DiscussionRecord, GroupError> {
    cfg.validate()?;
    validate_group(group)?;
    se.validate(group)?;
    let mut members = group.to_vec();
    for m in &mut members {
        m.self_emotion = match &se.target_member {
            Some(t) if *t == m.id => se.self_emotion.clone(),
            _ => None,
        };
    }
    let mut state = DiscussionState::new(members, topic.clone(), format!("discussion-{seed:016x}"))?;
    for m in &state.group.clone() {
        state.history.register_speaker(&m.id);
    }
    state.history.set_meta("seed", seed.to_string());
    state.history.set_meta("se_target", se.target_member.clone().unwrap_or_else(|| "none".into()));
    state.history.set_meta(
        "se_valence",
        se.self_emotion.as_ref().map_or("none", |s| s.valence().as_str()),
    );

    let budget = cfg.budget_per_step * topic.steps().len();
    let mut turns_total = 0;
    let mut since_check = 0;
    while !state.is_finished() {
        if turns_total >= budget {
            let step_index = state.step_index;
            let leader = state.leader().id.clone();
            while !state.is_finished() {
                let d = Decision::new(
                    state.step_index,
                    "turn budget exhausted; decision delegated",
                    Resolution::Delegation,
                    vec![leader.clone()],
                )?;
                state.record_decision(d);
            }
            return Err(GroupError::GlobalBudgetExceeded {
                budget,
                step_index,
                record: Box::new(finish(state, se)),
            });
        }
        let speaker_id = next_speaker(&state, engine, cfg);
        *state.turns_this_step.entry(speaker_id.clone()).or_default() += 1;
        state.rounds_in_step += 1;
        turns_total += 1;
        since_check += 1;
        let speaker = state.member(&speaker_id).expect("speaker comes from roster").clone();
        match member_respond(&speaker, &state, engine, cfg) {
            Ok(u) => {
                state.history.utterances.push(u);
            }
            Err(GroupError::Gateway(e)) => {
                tracing::warn!(member = %speaker.id, error = %e, "member passes the turn");
            }
            Err(e) => return Err(e),
        }
        let due = since_check >= state.group.len()
            || speaker.role == GroupRole::Leader
            || state.rounds_in_step >= cfg.max_rounds;
        if !due {
            continue;
        }
        since_check = 0;
        let verdict = match check_agreement(&state, engine, cfg) {
            Ok(v) => v,
            Err(GroupError::Gateway(e)) => {
                tracing::warn!(error = %e, "leader call failed, continuing");
                if state.rounds_in_step >= cfg.max_rounds {
                    forced(&state)
                } else {
                    Verdict::Continue
                }
            }
            Err(e) => return Err(e),
        };
        let (summary, resolution) = match verdict {
            Verdict::Continue => continue,
            Verdict::Agreed { summary, resolution } => (summary, resolution),
            Verdict::ForcedDelegation { summary } => (summary, Resolution::Delegation),
        };
        let by = decided_by(&state, resolution);
        let d = Decision::new(state.step_index, &summary, resolution, by)?;
        state.record_decision(d);
    }
    debug_assert!(state.check_invariants(cfg).is_ok());
    Ok(finish(state, se))
}

fn finish(state: DiscussionState, se: &SEAssignment) -> DiscussionRecord {
    DiscussionRecord {
        transcript: state.history,
        decisions: state.decisions,
        se_assignment: se.clone(),
    }
}

/// Decisions for one step from a baseline run and a self-emotion run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionPair {
    pub topic: String,
    pub valence: Valence,
    pub run_index: usize,
    pub before: Decision,
    pub after: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    /// 0 is the baseline; self-emotion runs count from 1.
    pub run_index: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<DiscussionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunOutcome {
    fn from_result(run_index: usize, seed: u64, result: Result<DiscussionRecord, GroupError>) -> Self {
        let (record, error) = match result {
            Ok(r) => (Some(r), None),
            Err(GroupError::GlobalBudgetExceeded { record, .. }) => {
                (Some(*record), Some("turn budget exhausted".to_string()))
            }
            Err(e) => (None, Some(e.to_string())),
        };
        RunOutcome {
            run_index,
            seed,
            record,
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedRunSet {
    pub topic: String,
    pub valence: Valence,
    pub baseline: RunOutcome,
    pub runs: Vec<RunOutcome>,
}

impl PairedRunSet {
    /// Step-aligned (baseline, run) decision pairs, skipping failed runs.
    pub fn pairs(&self) -> Vec<DecisionPair> {
        let Some(base) = &self.baseline.record else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for run in &self.runs {
            let Some(rec) = &run.record else { continue };
            for (before, after) in base.decisions.iter().zip(&rec.decisions) {
                out.push(DecisionPair {
                    topic: self.topic.clone(),
                    valence: self.valence,
                    run_index: run.run_index,
                    before: before.clone(),
                    after: after.clone(),
                });
            }
        }
        out
    }

    pub fn records(&self) -> impl Iterator<Item = &DiscussionRecord> {
        std::iter::once(&self.baseline)
            .chain(&self.runs)
            .filter_map(|r| r.record.as_ref())
    }
}

/// One baseline discussion without self-emotion, then `n_runs` discussions
/// where a random member carries a random event of `valence`. Runs execute
/// one after another so scripted backends see a fixed request order.
pub fn run_experiment(
    group: &[GroupMember],
    topic: &Topic,
    n_runs: usize,
    valence: Valence,
    engine: &Engine,
    seed: u64,
    cfg: &DiscussionConfig,
) -> Result<PairedRunSet, GroupError> {
    if n_runs == 0 {
        return Err(GroupError::InvalidInput("n_runs must be at least 1".into()));
    }
    if valence == Valence::Neutral {
        return Err(GroupError::InvalidInput("valence must be positive or negative".into()));
    }
    validate_group(group)?;
    cfg.validate()?;

    let base_seed = derive_seed(seed, &[0]);
    let baseline = RunOutcome::from_result(
        0,
        base_seed,
        run_discussion(group, topic, &SEAssignment::none(), engine, base_seed, cfg),
    );
    let runs = (1..=n_runs)
        .map(|i| {
            let run_seed = derive_seed(seed, &[i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
            let target = &group[rng.gen_range(0..group.len())];
            let result = emotion::generate_random_event(&target.profile, engine, Some(valence))
                .map_err(GroupError::from)
                .and_then(|se| {
                    run_discussion(group, topic, &SEAssignment::to(&target.id, se), engine, run_seed, cfg)
                });
            RunOutcome::from_result(i, run_seed, result)
        })
        .collect();
    Ok(PairedRunSet {
        topic: topic.title().to_string(),
        valence,
        baseline,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AgentProfile, EmotionLabel};
    use crate::gateway::{MockBackend, ScriptMatcher};
    use std::sync::Arc;

    const POSITIONS: [&str; 6] = [
        "project manager",
        "structural engineer",
        "architect",
        "environmental consultant",
        "financial analyst",
        "community liaison",
    ];

    fn group() -> Vec<GroupMember> {
        POSITIONS
            .iter()
            .enumerate()
            .map(|(i, pos)| GroupMember {
                id: format!("m{}", i + 1),
                profile: serde_json::from_value::<AgentProfile>(serde_json::json!({
                    "name": format!("Person{i} Surname"), "age": 30 + i as u32,
                    "description": "Has worked on many bridges."
                }))
                .unwrap(),
                role: if i == 0 { GroupRole::Leader } else { GroupRole::Member },
                position: pos.to_string(),
                goal: format!("represent the {pos} view"),
                self_emotion: None,
            })
            .collect()
    }

    fn topic(n: usize) -> Topic {
        Topic::new("Build a bridge", (1..=n).map(|i| format!("Decide item {i}")).collect()).unwrap()
    }

    fn state() -> DiscussionState {
        DiscussionState::new(group(), topic(2), "t").unwrap()
    }

    fn mock(manager: &[&str], member: &[&str], leader: &[&str]) -> Engine {
        let m = MockBackend::new();
        let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        m.register_cycle(ScriptMatcher::tag("next_speaker").unwrap(), v(manager)).unwrap();
        m.register_cycle(ScriptMatcher::tag("member_response").unwrap(), v(member)).unwrap();
        m.register_cycle(ScriptMatcher::tag("agreement_check").unwrap(), v(leader)).unwrap();
        Engine::new(Arc::new(m))
    }

    #[test]
    fn manager_names_position() {
        assert_eq!(parse_next_speaker("next: structural engineer", &group()).as_deref(), Some("m2"));
        assert_eq!(parse_next_speaker("Next: The Architect.", &group()).as_deref(), Some("m3"));
        assert_eq!(parse_next_speaker("next: Person4 Surname", &group()).as_deref(), Some("m5"));
        assert_eq!(
            parse_next_speaker("I think\nnext: the financial analyst, because money", &group()).as_deref(),
            Some("m5")
        );
        assert_eq!(parse_next_speaker("next: manager", &group()), None);
        assert_eq!(parse_next_speaker("the engineer should go", &group()), None);
    }

    #[test]
    fn manager_call_uses_roster_match() {
        let e = mock(&["next: structural engineer"], &["x"], &["CONTINUE"]);
        assert_eq!(next_speaker(&state(), &e, &DiscussionConfig::default()), "m2");
    }

    #[test]
    fn unparseable_manager_falls_back_to_first_member() {
        let e = mock(&["whoever"], &["x"], &["CONTINUE"]);
        assert_eq!(next_speaker(&state(), &e, &DiscussionConfig::default()), "m1");
    }

    #[test]
    fn fallback_round_robin_is_even() {
        let mut s = state();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..12 {
            let id = fallback_speaker(&s);
            *s.turns_this_step.entry(id.clone()).or_default() += 1;
            *counts.entry(id).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        assert!(counts.values().all(|&c| c == 2));
    }

    #[test]
    fn verdict_grammar() {
        assert_eq!(
            parse_verdict("AGREED: use Kotlin (resolution: agreement)"),
            Some(Verdict::Agreed {
                summary: "use Kotlin".into(),
                resolution: Resolution::Agreement
            })
        );
        assert_eq!(parse_verdict("CONTINUE"), Some(Verdict::Continue));
        assert_eq!(
            parse_verdict("Agreed: spend $20 for dinner (resolution: compromised agreement)."),
            Some(Verdict::Agreed {
                summary: "spend $20 for dinner".into(),
                resolution: Resolution::CompromisedAgreement
            })
        );
        assert_eq!(
            parse_verdict("AGREED: option A (resolution: single agent)").map(|v| match v {
                Verdict::Agreed { resolution, .. } => resolution,
                _ => unreachable!(),
            }),
            Some(Resolution::SingleAgent)
        );
        assert!(matches!(
            parse_verdict("DELEGATED: budget to the analyst"),
            Some(Verdict::Agreed {
                resolution: Resolution::Delegation,
                ..
            })
        ));
        assert_eq!(parse_verdict("We are close."), None);
        assert_eq!(parse_verdict("AGREED: x (resolution: telepathy)"), None);
    }

    #[test]
    fn timeout_forces_delegation() {
        let e = mock(&["x"], &["x"], &["CONTINUE"]);
        let mut s = state();
        s.rounds_in_step = 12;
        let mut u = Utterance::new("m2", "Person1 Surname", "hello", 0);
        u.step_index = Some(0);
        s.history.utterances.push(u);
        assert!(matches!(
            check_agreement(&s, &e, &DiscussionConfig::default()).unwrap(),
            Verdict::ForcedDelegation { .. }
        ));
        s.rounds_in_step = 3;
        assert_eq!(check_agreement(&s, &e, &DiscussionConfig::default()).unwrap(), Verdict::Continue);
    }

    #[test]
    fn member_prompt_carries_goal_step_and_self_emotion() {
        let m = Arc::new(MockBackend::new());
        m.register_cycle(ScriptMatcher::Any, vec!["Person1: We should use steel.".into()]).unwrap();
        let e = Engine::new(m.clone());
        let mut member = group()[1].clone();
        member.self_emotion = Some(
            emotion::render_label_emotion(
                "Person1",
                &EmotionLabel {
                    label: "angry".into(),
                    valence: Valence::Negative,
                },
            )
            .unwrap(),
        );
        let u = member_respond(&member, &state(), &e, &DiscussionConfig::default()).unwrap();
        assert_eq!(u.text, "We should use steel.");
        assert_eq!(u.speaker_id, "m2");
        assert_eq!(u.step_index, Some(0));
        let prompt = m.requests()[0].prompt_text();
        for needle in ["represent the structural engineer view", "structural engineer", "Decide item 1", "Person1 is feeling angry right now."] {
            assert!(prompt.contains(needle), "{needle}");
        }
    }

    #[test]
    fn one_step_immediate_agreement() {
        let e = mock(&["next: project manager"], &["Let's do it."], &["AGREED: go ahead (resolution: agreement)"]);
        let r = run_discussion(&group(), &topic(1), &SEAssignment::none(), &e, 1, &DiscussionConfig::default()).unwrap();
        assert_eq!(r.transcript.utterances.len(), 1);
        assert_eq!(r.decisions.len(), 1);
        assert_eq!(r.decisions[0].resolution, Resolution::Agreement);
        assert_eq!(r.decisions[0].decided_by, ["m1"]);
    }

    #[test]
    fn never_agreeing_forces_every_step_at_max_rounds() {
        let e = mock(&["nobody"], &["Hmm."], &["CONTINUE"]);
        let cfg = DiscussionConfig::default();
        let r = run_discussion(&group(), &topic(3), &SEAssignment::none(), &e, 2, &cfg).unwrap();
        assert_eq!(r.decisions.len(), 3);
        for (i, d) in r.decisions.iter().enumerate() {
            assert_eq!(d.resolution, Resolution::Delegation);
            let n = r.transcript.utterances.iter().filter(|u| u.step_index == Some(i)).count();
            assert_eq!(n, cfg.max_rounds);
        }
    }

    #[test]
    fn member_gateway_failure_passes_turn() {
        let m = MockBackend::new();
        m.register_cycle(ScriptMatcher::tag("next_speaker").unwrap(), vec!["next: architect".into()]).unwrap();
        m.register_cycle(ScriptMatcher::tag("agreement_check").unwrap(), vec!["AGREED: done".into()]).unwrap();
        let e = Engine::new(Arc::new(m));
        let cfg = DiscussionConfig {
            max_rounds: 4,
            ..Default::default()
        };
        let r = run_discussion(&group(), &topic(1), &SEAssignment::none(), &e, 0, &cfg).unwrap();
        assert!(r.transcript.utterances.is_empty());
        assert_eq!(r.decisions[0].resolution, Resolution::Delegation);
    }

    #[test]
    fn budget_exhaustion_keeps_transcript() {
        let e = mock(&["nobody"], &["Hmm."], &["CONTINUE"]);
        let cfg = DiscussionConfig {
            max_rounds: 12,
            budget_per_step: 5,
            history_window: 16,
        };
        match run_discussion(&group(), &topic(2), &SEAssignment::none(), &e, 0, &cfg) {
            Err(GroupError::GlobalBudgetExceeded { record, step_index, .. }) => {
                assert_eq!(step_index, 0);
                assert_eq!(record.transcript.utterances.len(), 10);
                assert_eq!(record.decisions.len(), 2);
                assert!(record.decisions.iter().all(|d| d.resolution == Resolution::Delegation));
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn se_assignment_applies_to_target_only_and_is_logged() {
        let e = mock(&["next: architect"], &["Fine."], &["AGREED: fine"]);
        let se = emotion::render_label_emotion(
            "Person2",
            &EmotionLabel {
                label: "joyful".into(),
                valence: Valence::Positive,
            },
        )
        .unwrap();
        let assignment = SEAssignment::to("m3", se);
        let r = run_discussion(&group(), &topic(1), &assignment, &e, 5, &DiscussionConfig::default()).unwrap();
        assert_eq!(r.transcript.metadata["se_target"], "m3");
        assert_eq!(r.transcript.metadata["se_valence"], "positive");
        assert!(SEAssignment::to("m9", assignment.self_emotion.clone().unwrap())
            .validate(&group())
            .is_err());
    }

    #[test]
    fn rejects_groups_without_single_leader() {
        let mut g = group();
        g[1].role = GroupRole::Leader;
        assert!(matches!(validate_group(&g), Err(GroupError::InvalidGroup(_))));
        g[1].role = GroupRole::Member;
        g[0].role = GroupRole::Member;
        assert!(validate_group(&g).is_err());
    }

    #[test]
    fn experiment_pairs_baseline_with_each_run() {
        let m = MockBackend::new();
        m.register_cycle(ScriptMatcher::tag("next_speaker").unwrap(), vec!["next: project manager".into()]).unwrap();
        m.register_cycle(ScriptMatcher::tag("member_response").unwrap(), vec!["ok".into()]).unwrap();
        m.register_cycle(
            ScriptMatcher::tag("agreement_check").unwrap(),
            vec!["AGREED: plan A".into(), "AGREED: plan B".into()],
        )
        .unwrap();
        m.register_cycle(
            ScriptMatcher::tag("random_event").unwrap(),
            vec!["label: sad; event: the dog ran away".into()],
        )
        .unwrap();
        let e = Engine::new(Arc::new(m));
        let set = run_experiment(&group(), &topic(2), 3, Valence::Negative, &e, 9, &DiscussionConfig::default()).unwrap();
        assert_eq!(set.runs.len(), 3);
        assert!(set.runs.iter().all(|r| r.error.is_none()));
        assert!(set
            .runs
            .iter()
            .all(|r| r.record.as_ref().unwrap().se_assignment.self_emotion.as_ref().unwrap().valence()
                == Valence::Negative));
        assert_eq!(set.pairs().len(), 6);
        assert!(run_experiment(&group(), &topic(2), 0, Valence::Negative, &e, 9, &DiscussionConfig::default()).is_err());
    }
}
