//! World creation: speaker profiles for a conversation, group rosters and
//! topic step plans, each parsed from a structured completion.

use std::collections::BTreeMap;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{AgentProfile, DomainError, SelfEmotion, Utterance};
use crate::engine::Engine;
use crate::gateway::GatewayError;
use crate::templates::{bindings, TemplateError};

#[derive(Debug, thiserror::Error)]
pub enum GenesisError {
    #[error("profile parse error: {0}")]
    ProfileParse(String),
    #[error("group parse error: {0}")]
    GroupParse(String),
    #[error("topic parse error: {0}")]
    TopicParse(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupRole {
    Leader,
    Member,
}

impl fmt::Display for GroupRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupRole::Leader => "leader",
            GroupRole::Member => "member",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMember {
    pub id: String,
    pub profile: AgentProfile,
    pub role: GroupRole,
    /// Occupational function within the group, e.g. "structural engineer".
    pub position: String,
    pub goal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_emotion: Option<SelfEmotion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTopic")]
pub struct Topic {
    title: String,
    steps: Vec<String>,
}

#[derive(Deserialize)]
struct RawTopic {
    title: String,
    steps: Vec<String>,
}

impl TryFrom<RawTopic> for Topic {
    type Error = GenesisError;

    fn try_from(raw: RawTopic) -> Result<Self, Self::Error> {
        Topic::new(&raw.title, raw.steps)
    }
}

impl Topic {
    pub fn new(title: &str, steps: Vec<String>) -> Result<Self, GenesisError> {
        if title.trim().is_empty() {
            return Err(GenesisError::TopicParse("empty title".into()));
        }
        if steps.is_empty() {
            return Err(GenesisError::TopicParse("no steps".into()));
        }
        for (i, s) in steps.iter().enumerate() {
            if s.trim().is_empty() {
                return Err(GenesisError::TopicParse(format!("step {} is empty", i + 1)));
            }
            if steps[..i].iter().any(|o| o.trim().eq_ignore_ascii_case(s.trim())) {
                return Err(GenesisError::TopicParse(format!("duplicate step {s:?}")));
            }
        }
        Ok(Topic {
            title: title.trim().to_string(),
            steps,
        })
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn steps(&self) -> &[String] {
        &self.steps
    }
}

/// The two speakers of a conversation: the friend who opens it and the
/// agent ("me") who answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfilePair {
    pub friend: AgentProfile,
    pub me: AgentProfile,
}

// ---------------------------------------------------------------------------
// Labeled-field block parsing
// ---------------------------------------------------------------------------

const KNOWN_FIELDS: [&str; 13] = [
    "name",
    "first name",
    "last name",
    "age",
    "innate",
    "occupation",
    "origin",
    "gender",
    "description",
    "role",
    "position",
    "goal",
    "background",
];

type Block = BTreeMap<String, String>;

/// Splits a completion into labeled-field blocks; each `Name:` line opens a
/// new block. Unlabeled lines directly after a field extend that field.
fn parse_blocks(text: &str) -> Vec<Block> {
    let field = Regex::new(r"^\s*(?:[-*]\s+)?(?:\*\*)?([A-Za-z][A-Za-z ]*?)(?:\*\*)?\s*:(?:\*\*)?\s*(.*)$")
        .expect("static regex");
    let mut blocks: Vec<Block> = Vec::new();
    let mut last_key: Option<String> = None;
    for line in text.lines() {
        if line.trim().is_empty() {
            last_key = None;
            continue;
        }
        let known = field.captures(line).and_then(|c| {
            let key = c[1].trim().to_lowercase();
            KNOWN_FIELDS
                .contains(&key.as_str())
                .then(|| (key, c[2].trim().trim_matches('*').trim().to_string()))
        });
        match known {
            Some((key, value)) => {
                if key == "name" || blocks.is_empty() {
                    blocks.push(Block::new());
                }
                let block = blocks.last_mut().expect("block exists");
                block.entry(key.clone()).or_insert(value);
                last_key = Some(key);
            }
            None => {
                if let (Some(key), Some(block)) = (&last_key, blocks.last_mut()) {
                    let v = block.get_mut(key).expect("field recorded");
                    if !v.is_empty() {
                        v.push(' ');
                    }
                    v.push_str(line.trim());
                }
            }
        }
    }
    blocks.retain(|b| b.contains_key("name"));
    blocks
}

fn required<'a>(block: &'a Block, key: &str) -> Result<&'a str, String> {
    block
        .get(key)
        .map(String::as_str)
        .filter(|v| !v.trim().is_empty())
        .ok_or_else(|| format!("missing {key} field"))
}

fn parse_age(value: &str) -> Result<u32, String> {
    let digits: String = value
        .trim()
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(char::is_ascii_digit)
        .collect();
    digits
        .parse()
        .map_err(|_| format!("unparseable age {value:?}"))
}

fn split_traits(value: &str) -> Vec<String> {
    value
        .split([',', ';'])
        .map(|t| t.trim().trim_end_matches('.').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

fn profile_from_block(block: &Block) -> Result<AgentProfile, String> {
    let mut p = AgentProfile {
        name: required(block, "name")?.to_string(),
        first_name: block.get("first name").cloned().unwrap_or_default(),
        last_name: block.get("last name").cloned().unwrap_or_default(),
        age: parse_age(required(block, "age")?)?,
        innate: split_traits(required(block, "innate")?),
        occupation: required(block, "occupation")?.to_string(),
        origin: required(block, "origin")?.to_string(),
        gender: required(block, "gender")?.to_string(),
        description: required(block, "description")?.to_string(),
    };
    p.fill_name_parts();
    p.validate().map_err(|e: DomainError| e.to_string())?;
    Ok(p)
}

/// Parses every profile block in a completion, in order.
pub fn parse_profiles(text: &str) -> Result<Vec<AgentProfile>, GenesisError> {
    let blocks = parse_blocks(text);
    if blocks.is_empty() {
        return Err(GenesisError::ProfileParse("no profile blocks".into()));
    }
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| profile_from_block(b).map_err(|e| GenesisError::ProfileParse(format!("block {}: {e}", i + 1))))
        .collect()
}

fn parse_profile_pair(text: &str) -> Result<ProfilePair, GenesisError> {
    let mut profiles = parse_profiles(text)?;
    if profiles.len() != 2 {
        return Err(GenesisError::ProfileParse(format!(
            "expected 2 profiles, found {}",
            profiles.len()
        )));
    }
    let me = profiles.pop().expect("two profiles");
    let friend = profiles.pop().expect("two profiles");
    Ok(ProfilePair { friend, me })
}

/// `"<role_tag>: <text>"` per line.
pub fn render_utterances(utterances: &[Utterance]) -> String {
    utterances
        .iter()
        .map(|u| format!("{}: {}", u.role_tag, u.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Profiles for the two people of a conversation, friend first.
pub fn generate_speaker_profiles(context: &[Utterance], engine: &Engine) -> Result<ProfilePair, GenesisError> {
    if context.is_empty() {
        return Err(GenesisError::InvalidInput("empty conversation context".into()));
    }
    let prompt = engine
        .templates
        .render("profile_generation", &bindings([("conversation", render_utterances(context))]))?;
    engine.ask_parsed("profile_generation", prompt, engine.settings.temperature, parse_profile_pair)
}

// ---------------------------------------------------------------------------
// Groups
// ---------------------------------------------------------------------------

/// Recorded when a parsed roster did not have exactly one leader.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleConstraintViolation {
    pub leaders_found: usize,
    pub promoted: String,
}

impl fmt::Display for RoleConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} leaders parsed; {} kept as the only leader",
            self.leaders_found, self.promoted
        )
    }
}

/// Enforces exactly one leader: when the roster has zero or several, the
/// first listed member becomes leader and everyone else a member.
pub fn repair_roles(members: &mut [GroupMember]) -> Option<RoleConstraintViolation> {
    let leaders = members.iter().filter(|m| m.role == GroupRole::Leader).count();
    if leaders == 1 || members.is_empty() {
        return None;
    }
    for (i, m) in members.iter_mut().enumerate() {
        m.role = if i == 0 { GroupRole::Leader } else { GroupRole::Member };
    }
    Some(RoleConstraintViolation {
        leaders_found: leaders,
        promoted: members[0].id.clone(),
    })
}

pub fn parse_group(text: &str, size: usize) -> Result<Vec<GroupMember>, GenesisError> {
    let blocks = parse_blocks(text);
    if blocks.len() != size {
        return Err(GenesisError::GroupParse(format!(
            "expected {size} member blocks, found {}",
            blocks.len()
        )));
    }
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| member_from_block(i, b).map_err(|e| GenesisError::GroupParse(format!("block {}: {e}", i + 1))))
        .collect()
}

fn member_from_block(index: usize, block: &Block) -> Result<GroupMember, String> {
    let position = required(block, "position")?.to_string();
    let role = if required(block, "role")?.to_lowercase().contains("leader") {
        GroupRole::Leader
    } else {
        GroupRole::Member
    };
    let description = block
        .get("background")
        .or_else(|| block.get("description"))
        .cloned()
        .unwrap_or_default();
    let mut profile = AgentProfile {
        name: required(block, "name")?.to_string(),
        first_name: block.get("first name").cloned().unwrap_or_default(),
        last_name: block.get("last name").cloned().unwrap_or_default(),
        age: parse_age(required(block, "age")?)?,
        innate: block.get("innate").map(|v| split_traits(v)).unwrap_or_default(),
        occupation: block.get("occupation").cloned().unwrap_or_else(|| position.clone()),
        origin: block.get("origin").cloned().unwrap_or_default(),
        gender: block.get("gender").cloned().unwrap_or_default(),
        description,
    };
    profile.fill_name_parts();
    profile.validate().map_err(|e| e.to_string())?;
    Ok(GroupMember {
        id: format!("m{}", index + 1),
        profile,
        role,
        position,
        goal: required(block, "goal")?.to_string(),
        self_emotion: None,
    })
}

/// Creates `size` members for the described group, exactly one of them the
/// leader (repaired if the completion disagrees).
pub fn generate_group(description: &str, size: usize, engine: &Engine) -> Result<Vec<GroupMember>, GenesisError> {
    if size < 2 {
        return Err(GenesisError::InvalidInput(format!("group size {size} < 2")));
    }
    if description.trim().is_empty() {
        return Err(GenesisError::InvalidInput("empty group description".into()));
    }
    let prompt = engine.templates.render(
        "group_profile",
        &bindings([("description", description.trim().to_string()), ("size", size.to_string())]),
    )?;
    let mut members = engine.ask_parsed("group_profile", prompt, engine.settings.temperature, |t| {
        parse_group(t, size)
    })?;
    if let Some(v) = repair_roles(&mut members) {
        tracing::warn!(violation = %v, "repaired group roles");
    }
    Ok(members)
}

// ---------------------------------------------------------------------------
// Topics
// ---------------------------------------------------------------------------

/// Parses a numbered list, inline (`1. a 2. b`) or one item per line.
/// Numbers must run 1, 2, 3, ...; text before `1.` is ignored.
pub fn parse_numbered_steps(text: &str) -> Result<Vec<String>, GenesisError> {
    let marker = Regex::new(r"(?:^|\s)(\d{1,3})[.)]\s+").expect("static regex");
    let mut cuts: Vec<(usize, usize)> = Vec::new();
    let mut expected = 1;
    for c in marker.captures_iter(text) {
        let n: usize = c[1].parse().expect("digits");
        if n == expected {
            let m = c.get(0).expect("whole match");
            cuts.push((m.start(), m.end()));
            expected += 1;
        }
    }
    if cuts.is_empty() {
        return Err(GenesisError::TopicParse("no numbered steps".into()));
    }
    let steps = cuts
        .iter()
        .enumerate()
        .map(|(i, (_, start))| {
            let stop = cuts.get(i + 1).map_or(text.len(), |c| c.0);
            let segment = text[*start..stop].lines().next().unwrap_or_default();
            segment
                .trim()
                .trim_end_matches([',', ';', '.'])
                .trim()
                .trim_matches('*')
                .trim()
                .to_string()
        })
        .collect();
    Ok(steps)
}

pub fn generate_topic_steps(title: &str, engine: &Engine) -> Result<Topic, GenesisError> {
    if title.trim().is_empty() {
        return Err(GenesisError::InvalidInput("empty topic title".into()));
    }
    let prompt = engine
        .templates
        .render("topic_steps", &bindings([("title", title.trim().to_string())]))?;
    engine.ask_parsed("topic_steps", prompt, engine.settings.temperature, |t| {
        Topic::new(title, parse_numbered_steps(t)?)
    })
}
