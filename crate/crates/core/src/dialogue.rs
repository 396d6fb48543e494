//! Fixed-context strategy selection: take the opening of a recorded
//! conversation, have the agent choose strategies from the pool and continue
//! the dialogue, with or without self-emotion.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{strategy_from_name, EmotionLabel, SelfEmotion, StrategyChoice, StrategyPool, Transcript, Utterance};
use crate::emotion::{self, EmotionError};
use crate::engine::Engine;
use crate::gateway::GatewayError;
use crate::genesis::{render_utterances, ProfilePair};
use crate::seeds::derive_seed;
use crate::templates::{bindings, TemplateError};

#[derive(Debug, thiserror::Error)]
pub enum DialogueError {
    #[error("conversation has no utterances")]
    EmptyConversation,
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid case {id}: {reason}")]
    InvalidCase { id: String, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Emotion(#[from] EmotionError),
}

/// First three utterances when the conversation is longer than three,
/// otherwise only the first.
pub fn extract_context(conv: &Transcript) -> Result<Vec<Utterance>, DialogueError> {
    let n = match conv.utterances.len() {
        0 => return Err(DialogueError::EmptyConversation),
        len if len > 3 => 3,
        _ => 1,
    };
    Ok(conv.utterances[..n].to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawCase")]
pub struct FixedContextCase {
    pub source_conversation: Transcript,
    pub context: Vec<Utterance>,
    /// Emotion annotated for the friend (the conversation's opener).
    pub friend_emotion: EmotionLabel,
    pub profiles: ProfilePair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_emotion: Option<SelfEmotion>,
}

#[derive(Deserialize)]
struct RawCase {
    source_conversation: Transcript,
    #[serde(default)]
    context: Vec<Utterance>,
    friend_emotion: EmotionLabel,
    profiles: ProfilePair,
    #[serde(default)]
    self_emotion: Option<SelfEmotion>,
}

impl TryFrom<RawCase> for FixedContextCase {
    type Error = DialogueError;

    fn try_from(raw: RawCase) -> Result<Self, Self::Error> {
        let mut case = FixedContextCase::new(raw.source_conversation, raw.friend_emotion, raw.profiles)?;
        if !raw.context.is_empty() {
            case.context = raw.context;
        }
        case.self_emotion = raw.self_emotion;
        case.validate()?;
        Ok(case)
    }
}

impl FixedContextCase {
    pub fn new(
        source_conversation: Transcript,
        friend_emotion: EmotionLabel,
        profiles: ProfilePair,
    ) -> Result<Self, DialogueError> {
        let context = extract_context(&source_conversation)?;
        Ok(FixedContextCase {
            source_conversation,
            context,
            friend_emotion,
            profiles,
            self_emotion: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.source_conversation.id
    }

    /// Annotated strategies of the first agent reply after the context.
    pub fn human_choice(&self) -> Option<StrategyChoice> {
        self.source_conversation.utterances[self.context.len()..]
            .iter()
            .find(|u| u.speaker_id == "me")
            .and_then(|u| u.strategies.clone())
            .filter(|c| !c.is_empty())
    }

    pub fn validate(&self) -> Result<(), DialogueError> {
        let is_prefix = !self.context.is_empty()
            && self.context.len() <= self.source_conversation.utterances.len()
            && self.context[..] == self.source_conversation.utterances[..self.context.len()];
        if !is_prefix {
            return Err(DialogueError::InvalidCase {
                id: self.id().to_string(),
                reason: "context is not a prefix of the source conversation".into(),
            });
        }
        Ok(())
    }
}

/// Strategies and dialogue lines parsed from a completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub choice: StrategyChoice,
    pub utterances: Vec<Utterance>,
    /// Strategy names that matched nothing in the pool.
    pub dropped: Vec<String>,
}

/// Parses the `STRATEGIES:` / `DIALOGUE:` answer grammar.
///
/// Unknown strategy names are dropped (an all-unknown list is a format
/// error). Dialogue lines are `me:` or `friend:` (`you:` counts as `me`);
/// unlabeled lines continue the previous utterance and consecutive lines
/// from one speaker are merged.
pub fn parse_model_output(text: &str, pool: &StrategyPool) -> Result<ParsedOutput, DialogueError> {
    let strategies_re = Regex::new(r"(?i)^\s*(?:\*\*)?strateg(?:y|ies)(?:\*\*)?\s*:(?:\*\*)?(.*)$").expect("static regex");
    let dialogue_re = Regex::new(r"(?i)^\s*(?:\*\*)?dialogue(?:\*\*)?\s*:(?:\*\*)?(.*)$").expect("static regex");
    let speaker_re =
        Regex::new(r"(?i)^\s*(?:[-*]\s+)?(?:\*\*)?(me|you|friend)(?:\*\*)?\s*:(?:\*\*)?\s*(.*)$").expect("static regex");

    let lines: Vec<&str> = text.lines().collect();
    let strat_line = lines
        .iter()
        .position(|l| strategies_re.is_match(l))
        .ok_or_else(|| DialogueError::Format("missing STRATEGIES section".into()))?;
    let dialogue_line = lines
        .iter()
        .position(|l| dialogue_re.is_match(l))
        .ok_or_else(|| DialogueError::Format("missing DIALOGUE section".into()))?;

    let raw_list = strategies_re.captures(lines[strat_line]).expect("matched")[1].trim().to_string();
    let sep = if raw_list.contains(';') { ';' } else { ',' };
    let names: Vec<&str> = raw_list
        .split(sep)
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(DialogueError::Format("empty strategy list".into()));
    }
    let mut choice = StrategyChoice::new();
    let mut dropped = Vec::new();
    for name in names {
        match strategy_from_name(name, pool) {
            Ok(s) => {
                choice.insert(s);
            }
            Err(_) => {
                tracing::warn!(strategy = name, "dropping unknown strategy");
                dropped.push(name.to_string());
            }
        }
    }
    if choice.is_empty() {
        return Err(DialogueError::Format(format!(
            "no known strategies in {raw_list:?}"
        )));
    }

    let mut utterances: Vec<Utterance> = Vec::new();
    let inline = dialogue_re.captures(lines[dialogue_line]).expect("matched")[1].to_string();
    let body = std::iter::once(inline.as_str()).chain(
        lines
            .iter()
            .enumerate()
            .skip(dialogue_line + 1)
            .filter(|(i, _)| *i != strat_line)
            .map(|(_, l)| *l),
    );
    for line in body {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = speaker_re.captures(line) {
            let tag = match c[1].to_lowercase().as_str() {
                "friend" => "friend",
                _ => "me",
            };
            let text = c[2].trim();
            match utterances.last_mut() {
                Some(prev) if prev.speaker_id == tag => {
                    if !text.is_empty() {
                        prev.text.push(' ');
                        prev.text.push_str(text);
                    }
                }
                _ => utterances.push(Utterance::new(tag, tag, text, utterances.len())),
            }
        } else if let Some(prev) = utterances.last_mut() {
            prev.text.push(' ');
            prev.text.push_str(line);
        }
    }
    utterances.retain(|u| !u.text.trim().is_empty());
    for (i, u) in utterances.iter_mut().enumerate() {
        u.text = u.text.trim().to_string();
        u.turn_index = i;
    }
    if utterances.is_empty() {
        return Err(DialogueError::Format("DIALOGUE section has no utterances".into()));
    }
    Ok(ParsedOutput {
        choice,
        utterances,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContinuationResult {
    pub choice: StrategyChoice,
    pub continuation: Vec<Utterance>,
    pub raw_completion: String,
    pub filtered: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_strategies: Vec<String>,
}

/// The conversation prompt; the with-self-emotion template places the
/// rendered self-emotion ahead of the dialogue context.
pub fn build_conversation_prompt(case: &FixedContextCase, engine: &Engine) -> Result<String, DialogueError> {
    let common = [
        ("me_profile", case.profiles.me.to_field_block()),
        ("friend_profile", case.profiles.friend.to_field_block()),
        ("friend_emotion", case.friend_emotion.label.clone()),
        ("strategies", engine.strategies.describe()),
        ("context", render_utterances(&case.context)),
    ];
    Ok(match &case.self_emotion {
        None => engine.templates.render("conversation_no_se", &bindings(common))?,
        Some(se) => {
            let mut b = bindings(common);
            b.insert("self_emotion", se.rendered().to_string());
            engine.templates.render("conversation_with_se", &b)?
        }
    })
}

/// Asks for strategies plus a continuation. A malformed answer is retried
/// once; a second malformed answer yields a filtered result.
pub fn continue_conversation(case: &FixedContextCase, engine: &Engine) -> Result<ContinuationResult, DialogueError> {
    let prompt = build_conversation_prompt(case, engine)?;
    let mut raw = String::new();
    for attempt in 0..2 {
        raw = engine.ask("conversation", prompt.clone(), engine.settings.temperature)?;
        match parse_model_output(&raw, &engine.strategies) {
            Ok(mut parsed) => {
                let offset = case.context.len();
                let choice = parsed.choice.clone();
                for u in &mut parsed.utterances {
                    u.turn_index += offset;
                }
                if let Some(first_me) = parsed.utterances.iter_mut().find(|u| u.speaker_id == "me") {
                    first_me.strategies = Some(choice.clone());
                }
                return Ok(ContinuationResult {
                    choice,
                    continuation: parsed.utterances,
                    raw_completion: raw,
                    filtered: false,
                    dropped_strategies: parsed.dropped,
                });
            }
            Err(e) => tracing::warn!(case = case.id(), attempt, error = %e, "malformed conversation output"),
        }
    }
    Ok(ContinuationResult {
        choice: StrategyChoice::new(),
        continuation: Vec::new(),
        raw_completion: raw,
        filtered: true,
        dropped_strategies: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMode {
    None,
    Label,
    RandomEvent,
    ProfileEvent,
}

impl SeMode {
    pub const ALL: [SeMode; 4] = [SeMode::None, SeMode::Label, SeMode::RandomEvent, SeMode::ProfileEvent];

    pub fn as_str(self) -> &'static str {
        match self {
            SeMode::None => "none",
            SeMode::Label => "label",
            SeMode::RandomEvent => "random_event",
            SeMode::ProfileEvent => "profile_event",
        }
    }
}

impl fmt::Display for SeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SeMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| format!("unknown self-emotion mode {s:?}"))
    }
}

/// Self-emotion for the agent ("me") under `mode`.
pub fn self_emotion_for(
    case: &FixedContextCase,
    mode: SeMode,
    engine: &Engine,
    seed: u64,
) -> Result<Option<SelfEmotion>, DialogueError> {
    let me = &case.profiles.me;
    Ok(match mode {
        SeMode::None => None,
        SeMode::Label => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let label = emotion::sample_label(&engine.labels, &mut rng);
            Some(emotion::render_label_emotion(me.display_name(), &label)?)
        }
        SeMode::RandomEvent => Some(emotion::generate_random_event(me, engine, None)?),
        SeMode::ProfileEvent => Some(emotion::generate_profile_event(me, engine, None)?),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRow {
    pub case_id: String,
    pub mode: SeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_emotion: Option<SelfEmotion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ContinuationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResultRow {
    pub fn is_filtered(&self) -> bool {
        self.result.as_ref().is_some_and(|r| r.filtered)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: SeMode,
    pub total: usize,
    pub completed: usize,
    pub filtered: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentTable {
    /// Case-major, then mode order; independent of completion order.
    pub rows: Vec<ResultRow>,
    pub summary: Vec<ModeSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    /// Upper bound on concurrently running cases.
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seed: 0, jobs: 1 }
    }
}

fn run_one(case: &FixedContextCase, mode: SeMode, engine: &Engine, seed: u64) -> ResultRow {
    let mut row = ResultRow {
        case_id: case.id().to_string(),
        mode,
        self_emotion: None,
        result: None,
        error: None,
    };
    let outcome = (|| {
        let se = match (mode, &case.self_emotion) {
            (SeMode::None, _) => None,
            (_, Some(se)) if style_matches(mode, se) => Some(se.clone()),
            _ => self_emotion_for(case, mode, engine, seed)?,
        };
        let mut case = case.clone();
        case.self_emotion = se.clone();
        row.self_emotion = se;
        continue_conversation(&case, engine)
    })();
    match outcome {
        Ok(r) => row.result = Some(r),
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn style_matches(mode: SeMode, se: &SelfEmotion) -> bool {
    use crate::domain::SelfEmotionStyle as S;
    matches!(
        (mode, se.style()),
        (SeMode::Label, S::RandomLabel) | (SeMode::RandomEvent, S::RandomEvent) | (SeMode::ProfileEvent, S::ProfileEvent)
    )
}

/// Runs every case under every mode. Per-case failures are recorded in the
/// row and never abort the batch.
pub fn run_fixed_context_experiment(
    cases: &[FixedContextCase],
    modes: &[SeMode],
    engine: &Engine,
    opts: RunOptions,
) -> Result<ExperimentTable, DialogueError> {
    if cases.is_empty() {
        return Err(DialogueError::InvalidCase {
            id: String::new(),
            reason: "no cases".into(),
        });
    }
    let mut modes = modes.to_vec();
    modes.sort();
    modes.dedup();
    let tasks: Vec<(usize, SeMode)> = (0..cases.len())
        .flat_map(|c| modes.iter().map(move |m| (c, *m)))
        .collect();
    let seed_of = |c: usize, m: SeMode| derive_seed(opts.seed, &[c as u64, m as u64]);

    let rows: Vec<ResultRow> = if opts.jobs <= 1 {
        tasks
            .iter()
            .map(|&(c, m)| run_one(&cases[c], m, engine, seed_of(c, m)))
            .collect()
    } else {
        let slots: Mutex<Vec<Option<ResultRow>>> = Mutex::new(vec![None; tasks.len()]);
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..opts.jobs.min(tasks.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&(c, m)) = tasks.get(i) else { break };
                    let row = run_one(&cases[c], m, engine, seed_of(c, m));
                    slots.lock().expect("slot lock")[i] = Some(row);
                });
            }
        });
        slots
            .into_inner()
            .expect("slot lock")
            .into_iter()
            .map(|r| r.expect("every task ran"))
            .collect()
    };

    Ok(ExperimentTable::from_rows(rows))
}

impl ExperimentTable {
    /// Table with a summary line for every mode present in `rows`.
    pub fn from_rows(rows: Vec<ResultRow>) -> Self {
        let mut modes: Vec<SeMode> = rows.iter().map(|r| r.mode).collect();
        modes.sort();
        modes.dedup();
        let summary = modes
            .iter()
            .map(|&mode| {
                let of_mode: Vec<&ResultRow> = rows.iter().filter(|r| r.mode == mode).collect();
                ModeSummary {
                    mode,
                    total: of_mode.len(),
                    completed: of_mode.iter().filter(|r| r.result.as_ref().is_some_and(|x| !x.filtered)).count(),
                    filtered: of_mode.iter().filter(|r| r.is_filtered()).count(),
                    errors: of_mode.iter().filter(|r| r.error.is_some()).count(),
                }
            })
            .collect();
        ExperimentTable { rows, summary }
    }
}
