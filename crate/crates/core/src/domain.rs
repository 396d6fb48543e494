//! Core vocabulary shared by every pipeline: profiles, emotion labels,
//! self-emotion values, the dialogue-strategy pool and transcripts.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Schema tag written into every transcript's metadata.
pub const SCHEMA_VERSION: &str = "emosim/1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("strategy pool is empty")]
    EmptyPool,
    #[error("duplicate strategy {0:?} in pool")]
    DuplicateStrategy(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid self-emotion: {0}")]
    InvalidSelfEmotion(String),
    #[error("invalid transcript {id}: {reason}")]
    InvalidTranscript { id: String, reason: String },
}

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

/// A speaker's identity and backstory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile")]
pub struct AgentProfile {
    pub name: String,
    pub first_name: String,
    pub last_name: String,
    pub age: u32,
    pub innate: Vec<String>,
    pub occupation: String,
    pub origin: String,
    pub gender: String,
    /// Past-experience narrative; seeds profile-event self-emotion.
    pub description: String,
}

#[derive(Deserialize)]
struct RawProfile {
    name: String,
    #[serde(default)]
    first_name: String,
    #[serde(default)]
    last_name: String,
    age: u32,
    #[serde(default)]
    innate: Vec<String>,
    #[serde(default)]
    occupation: String,
    #[serde(default)]
    origin: String,
    #[serde(default)]
    gender: String,
    #[serde(default)]
    description: String,
}

impl TryFrom<RawProfile> for AgentProfile {
    type Error = DomainError;

    fn try_from(raw: RawProfile) -> Result<Self, Self::Error> {
        let mut profile = AgentProfile {
            name: raw.name,
            first_name: raw.first_name,
            last_name: raw.last_name,
            age: raw.age,
            innate: raw.innate,
            occupation: raw.occupation,
            origin: raw.origin,
            gender: raw.gender,
            description: raw.description,
        };
        profile.fill_name_parts();
        profile.validate()?;
        Ok(profile)
    }
}

impl AgentProfile {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.name.trim().is_empty() {
            return Err(DomainError::InvalidProfile("name is empty".into()));
        }
        if !(1..=120).contains(&self.age) {
            return Err(DomainError::InvalidProfile(format!(
                "age {} outside [1, 120]",
                self.age
            )));
        }
        Ok(())
    }

    /// Derives first/last name from the full name when either is missing.
    pub fn fill_name_parts(&mut self) {
        let mut parts = self.name.split_whitespace();
        if self.first_name.trim().is_empty() {
            self.first_name = parts.next().unwrap_or_default().to_string();
        }
        if self.last_name.trim().is_empty() {
            let rest: Vec<&str> = self.name.split_whitespace().skip(1).collect();
            self.last_name = rest.join(" ");
        }
    }

    /// Name used inside rendered self-emotion sentences.
    pub fn display_name(&self) -> &str {
        if self.first_name.trim().is_empty() {
            self.name.trim()
        } else {
            self.first_name.trim()
        }
    }

    /// Labeled-field block, the same layout the profile parser accepts.
    pub fn to_field_block(&self) -> String {
        format!(
            "Name: {}\nAge: {}\nInnate: {}\nOccupation: {}\nOrigin: {}\nGender: {}\nDescription: {}",
            self.name,
            self.age,
            self.innate.join(", "),
            self.occupation,
            self.origin,
            self.gender,
            self.description
        )
    }
}

// ---------------------------------------------------------------------------
// Emotion labels and self-emotion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Valence {
    Positive,
    Negative,
    Neutral,
}

impl Valence {
    pub fn as_str(self) -> &'static str {
        match self {
            Valence::Positive => "positive",
            Valence::Negative => "negative",
            Valence::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Valence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Valence {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" => Ok(Valence::Positive),
            "negative" | "neg" => Ok(Valence::Negative),
            "neutral" => Ok(Valence::Neutral),
            other => Err(format!("unknown valence {other:?}")),
        }
    }
}

/// An emotion label drawn from a configured pool, with the pool's valence.
///
/// Construct through [`crate::emotion::LabelPool::get`] so the valence
/// always comes from the pool's map.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmotionLabel {
    pub label: String,
    pub valence: Valence,
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelfEmotionStyle {
    RandomLabel,
    RandomEvent,
    ProfileEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSelfEmotion")]
pub struct SelfEmotion {
    style: SelfEmotionStyle,
    label: EmotionLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    event: Option<String>,
    rendered: String,
}

#[derive(Deserialize)]
struct RawSelfEmotion {
    style: SelfEmotionStyle,
    label: EmotionLabel,
    #[serde(default)]
    event: Option<String>,
    rendered: String,
}

impl TryFrom<RawSelfEmotion> for SelfEmotion {
    type Error = DomainError;

    fn try_from(raw: RawSelfEmotion) -> Result<Self, Self::Error> {
        SelfEmotion::new(raw.style, raw.label, raw.event, raw.rendered)
    }
}

impl SelfEmotion {
    pub fn new(
        style: SelfEmotionStyle,
        label: EmotionLabel,
        event: Option<String>,
        rendered: String,
    ) -> Result<Self, DomainError> {
        match (style, &event) {
            (SelfEmotionStyle::RandomLabel, Some(_)) => {
                return Err(DomainError::InvalidSelfEmotion(
                    "label-style self-emotion cannot carry an event".into(),
                ))
            }
            (SelfEmotionStyle::RandomEvent | SelfEmotionStyle::ProfileEvent, None) => {
                return Err(DomainError::InvalidSelfEmotion(
                    "event-style self-emotion requires an event".into(),
                ))
            }
            _ => {}
        }
        if rendered.trim().is_empty() {
            return Err(DomainError::InvalidSelfEmotion("rendered sentence is empty".into()));
        }
        if !rendered.contains(&label.label) {
            return Err(DomainError::InvalidSelfEmotion(format!(
                "rendered sentence does not mention label {:?}",
                label.label
            )));
        }
        Ok(SelfEmotion {
            style,
            label,
            event,
            rendered,
        })
    }

    pub fn style(&self) -> SelfEmotionStyle {
        self.style
    }

    pub fn label(&self) -> &EmotionLabel {
        &self.label
    }

    pub fn valence(&self) -> Valence {
        self.label.valence
    }

    pub fn event(&self) -> Option<&str> {
        self.event.as_deref()
    }

    pub fn rendered(&self) -> &str {
        &self.rendered
    }
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

/// One dialogue strategy. Serialized as its display name; identity is the id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Strategy {
    id: String,
    display_name: String,
}

impl Strategy {
    pub fn new(display_name: &str) -> Self {
        let display_name = display_name.trim().trim_end_matches(['.', ';', ':']).trim();
        Strategy {
            id: normalize_name(display_name).replace(' ', "_"),
            display_name: display_name.to_string(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn display_name(&self) -> &str {
        &self.display_name
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_name)
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.display_name)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        if name.trim().is_empty() {
            return Err(serde::de::Error::custom("empty strategy name"));
        }
        Ok(Strategy::new(&name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub strategy: Strategy,
    pub example: String,
}

const DEFAULT_STRATEGIES: &str = include_str!("../assets/strategies.tsv");

/// The ordered strategy pool. Declaration order fixes multi-hot positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyPool {
    entries: Vec<PoolEntry>,
}

impl Default for StrategyPool {
    fn default() -> Self {
        StrategyPool::parse_tsv(DEFAULT_STRATEGIES).expect("bundled strategy pool is valid")
    }
}

impl StrategyPool {
    pub fn new(entries: Vec<PoolEntry>) -> Result<Self, DomainError> {
        if entries.is_empty() {
            return Err(DomainError::EmptyPool);
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.strategy.id == e.strategy.id) {
                return Err(DomainError::DuplicateStrategy(e.strategy.display_name.clone()));
            }
        }
        Ok(StrategyPool { entries })
    }

    /// One strategy per line: `display name<TAB>example utterance`. Lines
    /// starting with `#` are comments.
    pub fn parse_tsv(text: &str) -> Result<Self, DomainError> {
        let entries = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|line| {
                let (name, example) = line.split_once('\t').unwrap_or((line, ""));
                PoolEntry {
                    strategy: Strategy::new(name),
                    example: example.trim().to_string(),
                }
            })
            .collect();
        StrategyPool::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn strategies(&self) -> impl Iterator<Item = &Strategy> {
        self.entries.iter().map(|e| &e.strategy)
    }

    pub fn position(&self, strategy: &Strategy) -> Option<usize> {
        self.entries.iter().position(|e| e.strategy.id == strategy.id)
    }

    pub fn contains(&self, strategy: &Strategy) -> bool {
        self.position(strategy).is_some()
    }

    /// Pool rendered for prompts: one `- Name (e.g. "example")` per line.
    pub fn describe(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                if e.example.is_empty() {
                    format!("- {}", e.strategy.display_name)
                } else {
                    format!("- {} (e.g. \"{}\")", e.strategy.display_name, e.example)
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn normalize_name(s: &str) -> String {
    let trimmed = s
        .trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() && c != '/' && c != ')');
    trimmed
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn name_tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_subsequence(needle: &[String], hay: &[String]) -> bool {
    if needle.is_empty() {
        return false;
    }
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Resolves a model- or annotator-written strategy name against the pool.
///
/// Exact match after lowercasing, trimming and stripping terminal
/// punctuation; otherwise the unique entry whose token sequence contains the
/// input's tokens in order (or is contained by them).
pub fn strategy_from_name(name: &str, pool: &StrategyPool) -> Result<Strategy, DomainError> {
    let wanted = normalize_name(name);
    if wanted.is_empty() {
        return Err(DomainError::UnknownStrategy(name.to_string()));
    }
    if let Some(e) = pool
        .entries
        .iter()
        .find(|e| normalize_name(&e.strategy.display_name) == wanted)
    {
        return Ok(e.strategy.clone());
    }
    let input = name_tokens(&wanted);
    let mut hits = pool.entries.iter().filter(|e| {
        let pool_tokens = name_tokens(&e.strategy.display_name);
        is_subsequence(&input, &pool_tokens) || is_subsequence(&pool_tokens, &input)
    });
    match (hits.next(), hits.next()) {
        (Some(e), None) => Ok(e.strategy.clone()),
        _ => Err(DomainError::UnknownStrategy(name.to_string())),
    }
}

/// An insertion-ordered set of strategies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrategyChoice {
    strategies: Vec<Strategy>,
}

impl StrategyChoice {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a strategy; returns false when it was already present.
    pub fn insert(&mut self, strategy: Strategy) -> bool {
        if self.strategies.contains(&strategy) {
            return false;
        }
        self.strategies.push(strategy);
        true
    }

    pub fn contains(&self, strategy: &Strategy) -> bool {
        self.strategies.contains(strategy)
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Strategy> {
        self.strategies.iter()
    }

    pub fn is_subset_of(&self, pool: &StrategyPool) -> bool {
        self.strategies.iter().all(|s| pool.contains(s))
    }

    /// Resolves each name through [`strategy_from_name`].
    pub fn from_names<I, S>(names: I, pool: &StrategyPool) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut choice = StrategyChoice::new();
        for n in names {
            choice.insert(strategy_from_name(n.as_ref(), pool)?);
        }
        Ok(choice)
    }
}

impl FromIterator<Strategy> for StrategyChoice {
    fn from_iter<T: IntoIterator<Item = Strategy>>(iter: T) -> Self {
        let mut c = StrategyChoice::new();
        for s in iter {
            c.insert(s);
        }
        c
    }
}

/// Binary multi-hot encoding in pool declaration order.
pub fn multi_hot(choice: &StrategyChoice, pool: &StrategyPool) -> Vec<u8> {
    pool.strategies()
        .map(|s| u8::from(choice.contains(s)))
        .collect()
}

// ---------------------------------------------------------------------------
// Transcripts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker_id: String,
    pub role_tag: String,
    pub text: String,
    pub turn_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategies: Option<StrategyChoice>,
    /// Discussion step the utterance belongs to (group transcripts only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_index: Option<usize>,
}

impl Utterance {
    pub fn new(speaker_id: &str, role_tag: &str, text: &str, turn_index: usize) -> Self {
        Utterance {
            speaker_id: speaker_id.to_string(),
            role_tag: role_tag.to_string(),
            text: text.to_string(),
            turn_index,
            strategies: None,
            step_index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub metadata: BTreeMap<String, String>,
}

impl Transcript {
    pub fn new(id: impl Into<String>) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("schema".to_string(), SCHEMA_VERSION.to_string());
        metadata.insert("speakers".to_string(), String::new());
        Transcript {
            id: id.into(),
            utterances: Vec::new(),
            metadata,
        }
    }

    pub fn speakers(&self) -> Vec<&str> {
        self.metadata
            .get("speakers")
            .map(|s| s.split(',').filter(|p| !p.is_empty()).collect())
            .unwrap_or_default()
    }

    pub fn register_speaker(&mut self, speaker_id: &str) {
        if self.speakers().contains(&speaker_id) {
            return;
        }
        let entry = self.metadata.entry("speakers".to_string()).or_default();
        if !entry.is_empty() {
            entry.push(',');
        }
        entry.push_str(speaker_id);
    }

    /// Appends an utterance with the next turn index, registering its speaker.
    pub fn push(&mut self, speaker_id: &str, role_tag: &str, text: &str) -> &mut Utterance {
        self.register_speaker(speaker_id);
        let idx = self.utterances.len();
        self.utterances
            .push(Utterance::new(speaker_id, role_tag, text, idx));
        self.utterances.last_mut().expect("just pushed")
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let fail = |reason: String| DomainError::InvalidTranscript {
            id: self.id.clone(),
            reason,
        };
        let speakers = self.speakers();
        for (i, u) in self.utterances.iter().enumerate() {
            if u.turn_index != i {
                return Err(fail(format!("turn index {} at position {i}", u.turn_index)));
            }
            if u.text.trim().is_empty() {
                return Err(fail(format!("empty utterance at turn {i}")));
            }
            if !speakers.contains(&u.speaker_id.as_str()) {
                return Err(fail(format!("unregistered speaker {:?}", u.speaker_id)));
            }
        }
        Ok(())
    }
}
