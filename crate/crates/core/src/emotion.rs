//! Self-emotion in three representation styles: a bare label, a label with
//! a generated triggering event, and a label with an event recalled from the
//! agent's profile.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use regex::Regex;

use crate::domain::{AgentProfile, DomainError, EmotionLabel, SelfEmotion, SelfEmotionStyle, Valence};
use crate::engine::Engine;
use crate::gateway::GatewayError;
use crate::templates::{bindings, TemplateError};

#[derive(Debug, thiserror::Error)]
pub enum EmotionError {
    #[error("cannot parse emotion completion: {0}")]
    Parse(String),
    #[error("label {0:?} is not in the label pool")]
    LabelOutOfPool(String),
    #[error("profile of {0} has no description")]
    MissingDescription(String),
    #[error("speaker name is empty")]
    EmptyName,
    #[error("no labels with valence {0}")]
    NoLabels(Valence),
    #[error("label pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

const DEFAULT_LABELS: &str = include_str!("../assets/emotion_labels.csv");

/// Emotion labels with their valence. Order is file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPool {
    labels: Vec<EmotionLabel>,
}

impl Default for LabelPool {
    fn default() -> Self {
        LabelPool::parse(DEFAULT_LABELS).expect("bundled label pool is valid")
    }
}

impl LabelPool {
    pub fn new(labels: Vec<EmotionLabel>) -> Result<Self, EmotionError> {
        if labels.is_empty() {
            return Err(EmotionError::Pool("pool is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if l.label.trim().is_empty() || l.label != normalize_label(&l.label) {
                return Err(EmotionError::Pool(format!("label {:?} is not normalized", l.label)));
            }
            if !seen.insert(l.label.as_str()) {
                return Err(EmotionError::Pool(format!("duplicate label {:?}", l.label)));
            }
        }
        Ok(LabelPool { labels })
    }

    /// `label,valence` rows; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, EmotionError> {
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, valence) = line
                .split_once(',')
                .ok_or_else(|| EmotionError::Pool(format!("line {}: expected label,valence", n + 1)))?;
            let valence: Valence = valence
                .parse()
                .map_err(|e| EmotionError::Pool(format!("line {}: {e}", n + 1)))?;
            labels.push(EmotionLabel {
                label: normalize_label(label),
                valence,
            });
        }
        LabelPool::new(labels)
    }

    pub fn load(path: &Path) -> Result<Self, EmotionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EmotionError::Pool(format!("{}: {e}", path.display())))?;
        LabelPool::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[EmotionLabel] {
        &self.labels
    }

    pub fn get(&self, label: &str) -> Option<EmotionLabel> {
        let wanted = normalize_label(label);
        self.labels.iter().find(|l| l.label == wanted).cloned()
    }

    pub fn valence_of(&self, label: &str) -> Option<Valence> {
        self.get(label).map(|l| l.valence)
    }

    /// Sub-pool restricted to one valence.
    pub fn with_valence(&self, valence: Valence) -> Result<LabelPool, EmotionError> {
        let labels: Vec<_> = self
            .labels
            .iter()
            .filter(|l| l.valence == valence)
            .cloned()
            .collect();
        if labels.is_empty() {
            return Err(EmotionError::NoLabels(valence));
        }
        Ok(LabelPool { labels })
    }

    /// Exact match after normalization; otherwise the single pool label that
    /// occurs as a whole token of the input.
    pub fn resolve(&self, text: &str) -> Result<EmotionLabel, EmotionError> {
        if let Some(l) = self.get(text) {
            return Ok(l);
        }
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric() && c != '-')
            .filter(|t| !t.is_empty())
            .map(normalize_label)
            .collect();
        let mut hits: Vec<&EmotionLabel> = self
            .labels
            .iter()
            .filter(|l| tokens.contains(&l.label))
            .collect();
        hits.dedup();
        match hits.as_slice() {
            [one] => Ok((*one).clone()),
            _ => Err(EmotionError::LabelOutOfPool(text.trim().to_string())),
        }
    }

    fn prompt_list(&self) -> String {
        self.labels
            .iter()
            .map(|l| l.label.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn normalize_label(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c == '"' || c == '\'')
        .trim()
        .to_lowercase()
}

/// Uniform draw from the pool.
pub fn sample_label<R: Rng + ?Sized>(pool: &LabelPool, rng: &mut R) -> EmotionLabel {
    pool.labels[rng.gen_range(0..pool.labels.len())].clone()
}

/// `"<name> is feeling <label> right now."`
pub fn render_label_emotion(name: &str, label: &EmotionLabel) -> Result<SelfEmotion, EmotionError> {
    let name = name.trim();
    if name.is_empty() {
        return Err(EmotionError::EmptyName);
    }
    let rendered = format!("{name} is feeling {} right now.", label.label);
    Ok(SelfEmotion::new(SelfEmotionStyle::RandomLabel, label.clone(), None, rendered)?)
}

/// Fields parsed from a `label: ...; event: ...[; context: ...]` completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFields {
    pub label: String,
    pub event: String,
    pub context: Option<String>,
}

pub fn parse_event_completion(text: &str) -> Result<EventFields, EmotionError> {
    let key = Regex::new(r"(?i)\b(label|emotion|event|context)\s*:").expect("static regex");
    let marks: Vec<(usize, usize, String)> = key
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            (m.start(), m.end(), c[1].to_lowercase())
        })
        .collect();
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    for (i, (_, end, name)) in marks.iter().enumerate() {
        let stop = marks.get(i + 1).map_or(text.len(), |m| m.0);
        let value = text[*end..stop]
            .trim()
            .trim_end_matches(';')
            .trim()
            .trim_matches('"')
            .trim()
            .to_string();
        let name = if name == "emotion" { "label".to_string() } else { name.clone() };
        fields.entry(name).or_insert(value);
    }
    let label = fields
        .remove("label")
        .filter(|v| !v.is_empty())
        .ok_or_else(|| EmotionError::Parse("missing label field".into()))?;
    let event = fields
        .remove("event")
        .map(|e| clean_clause(&e))
        .filter(|v| !v.is_empty())
        .ok_or_else(|| EmotionError::Parse("missing event field".into()))?;
    let context = fields
        .remove("context")
        .map(|c| clean_clause(&c))
        .filter(|c| !c.is_empty() && !c.eq_ignore_ascii_case("none"));
    Ok(EventFields { label, event, context })
}

/// Trims whitespace and terminal periods so the renderer adds exactly one.
fn clean_clause(s: &str) -> String {
    let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut s = s.trim_end_matches(['.', ' ']).to_string();
    for lead in ["because ", "after recalling ", "recalling "] {
        if s.len() > lead.len() && s[..lead.len()].eq_ignore_ascii_case(lead) {
            s = s[lead.len()..].to_string();
        }
    }
    s
}

fn pool_for(pool: &LabelPool, valence: Option<Valence>) -> Result<LabelPool, EmotionError> {
    match valence {
        Some(v) => pool.with_valence(v),
        None => Ok(pool.clone()),
    }
}

fn valence_hint(valence: Option<Valence>) -> String {
    valence
        .map(|v| format!("The emotion must be a {v} one."))
        .unwrap_or_default()
}

/// Label plus a generated event that caused it.
pub fn generate_random_event(
    profile: &AgentProfile,
    engine: &Engine,
    valence: Option<Valence>,
) -> Result<SelfEmotion, EmotionError> {
    profile.validate()?;
    let pool = pool_for(&engine.labels, valence)?;
    let prompt = engine.templates.render(
        "random_event",
        &bindings([
            ("profile", profile.to_field_block()),
            ("labels", pool.prompt_list()),
            ("valence_hint", valence_hint(valence)),
        ]),
    )?;
    let name = profile.display_name().to_string();
    engine.ask_parsed("random_event", prompt, engine.settings.temperature, |text| {
        random_event_from_completion(&name, text, &pool)
    })
}

pub fn random_event_from_completion(
    name: &str,
    completion: &str,
    pool: &LabelPool,
) -> Result<SelfEmotion, EmotionError> {
    let fields = parse_event_completion(completion)?;
    let label = pool.resolve(&fields.label)?;
    let rendered = format!("{name} is feeling {} because {}.", label.label, fields.event);
    Ok(SelfEmotion::new(
        SelfEmotionStyle::RandomEvent,
        label,
        Some(fields.event),
        rendered,
    )?)
}

/// Label plus an event recalled from the profile's past experience.
pub fn generate_profile_event(
    profile: &AgentProfile,
    engine: &Engine,
    valence: Option<Valence>,
) -> Result<SelfEmotion, EmotionError> {
    profile.validate()?;
    if profile.description.trim().is_empty() {
        return Err(EmotionError::MissingDescription(profile.name.clone()));
    }
    let pool = pool_for(&engine.labels, valence)?;
    let prompt = engine.templates.render(
        "profile_event",
        &bindings([
            ("profile", profile.to_field_block()),
            ("description", profile.description.clone()),
            ("labels", pool.prompt_list()),
            ("valence_hint", valence_hint(valence)),
        ]),
    )?;
    let name = profile.display_name().to_string();
    engine.ask_parsed("profile_event", prompt, engine.settings.temperature, |text| {
        profile_event_from_completion(&name, text, &pool)
    })
}

pub fn profile_event_from_completion(
    name: &str,
    completion: &str,
    pool: &LabelPool,
) -> Result<SelfEmotion, EmotionError> {
    let fields = parse_event_completion(completion)?;
    let label = pool.resolve(&fields.label)?;
    let rendered = match &fields.context {
        Some(ctx) => format!(
            "{name} is feeling {} after recalling {}, even though {ctx}.",
            label.label, fields.event
        ),
        None => format!("{name} is feeling {} after recalling {}.", label.label, fields.event),
    };
    Ok(SelfEmotion::new(
        SelfEmotionStyle::ProfileEvent,
        label,
        Some(fields.event),
        rendered,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, ScriptMatcher};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn table2_pool() -> LabelPool {
        LabelPool::parse("excited,positive\nupset,negative\nworried,negative\nmotivated,positive\n").unwrap()
    }

    fn sophia() -> AgentProfile {
        AgentProfile {
            name: "Sophia Turner".into(),
            first_name: "Sophia".into(),
            last_name: "Turner".into(),
            age: 29,
            innate: vec!["diligent".into()],
            occupation: "Project manager".into(),
            origin: "USA".into(),
            gender: "female".into(),
            description: "Sophia once led a team and made a huge mistake.".into(),
        }
    }

    fn engine_with(responses: &[&str], pool: LabelPool) -> (Engine, Arc<MockBackend>) {
        let mock = Arc::new(MockBackend::new());
        mock.register_script(ScriptMatcher::Any, responses.iter().map(|s| s.to_string()).collect())
            .unwrap();
        (Engine::new(mock.clone()).with_labels(pool), mock)
    }

    #[test]
    fn bundled_pool_has_32_labels_with_valence() {
        let pool = LabelPool::default();
        assert_eq!(pool.len(), 32);
        assert_eq!(pool.valence_of("proud"), Some(Valence::Positive));
        assert_eq!(pool.valence_of("anxious"), Some(Valence::Negative));
        assert_eq!(pool.valence_of("nostalgic"), Some(Valence::Neutral));
    }

    #[test]
    fn pool_parse_errors() {
        assert!(LabelPool::parse("").is_err());
        assert!(LabelPool::parse("proud").is_err());
        assert!(LabelPool::parse("proud,happyish").is_err());
        assert!(LabelPool::parse("proud,positive\nProud,positive").is_err());
    }

    #[test]
    fn singleton_pool_always_draws_its_label() {
        let pool = LabelPool::parse("proud,positive").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            assert_eq!(sample_label(&pool, &mut rng).label, "proud");
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let pool = LabelPool::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sample_label(&pool, &mut rng).label).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn sampling_is_uniform_within_three_sigma() {
        let pool = LabelPool::parse("a,positive\nb,negative\nc,neutral\nd,positive").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = BTreeMap::new();
        for _ in 0..10_000 {
            *counts.entry(sample_label(&pool, &mut rng).label).or_insert(0usize) += 1;
        }
        // Binomial(10000, 1/4): sigma = sqrt(10000 * 0.25 * 0.75) ~= 43.3
        let sigma = (10_000f64 * 0.25 * 0.75).sqrt();
        assert_eq!(counts.len(), 4);
        for (label, n) in counts {
            assert!((n as f64 - 2500.0).abs() <= 3.0 * sigma, "{label}: {n}");
        }
    }

    #[test]
    fn label_rendering() {
        let pool = table2_pool();
        let se = render_label_emotion("Sophia", &pool.get("excited").unwrap()).unwrap();
        assert_eq!(se.rendered(), "Sophia is feeling excited right now.");
        assert_eq!(se.style(), SelfEmotionStyle::RandomLabel);
        assert!(se.event().is_none());
        let se = render_label_emotion("Sophia", &pool.get("upset").unwrap()).unwrap();
        assert_eq!(se.rendered(), "Sophia is feeling upset right now.");
        let proud = EmotionLabel {
            label: "proud".into(),
            valence: Valence::Positive,
        };
        let se = render_label_emotion("A", &proud).unwrap();
        assert!(se.rendered().contains('A') && se.rendered().contains("proud"));
        assert!(matches!(render_label_emotion(" ", &proud), Err(EmotionError::EmptyName)));
    }

    #[test]
    fn random_event_matches_table_rendering() {
        let (engine, _) = engine_with(
            &["label: excited; event: her promotion has been approved this morning"],
            table2_pool(),
        );
        let se = generate_random_event(&sophia(), &engine, None).unwrap();
        assert_eq!(
            se.rendered(),
            "Sophia is feeling excited because her promotion has been approved this morning."
        );
        assert_eq!(se.event(), Some("her promotion has been approved this morning"));
        assert_eq!(se.valence(), Valence::Positive);
    }

    #[test]
    fn out_of_pool_label_rejected_after_retry() {
        let (engine, mock) = engine_with(
            &["label: ecstatic; event: x happened", "label: ecstatic; event: x happened"],
            table2_pool(),
        );
        assert!(matches!(
            generate_random_event(&sophia(), &engine, None),
            Err(EmotionError::LabelOutOfPool(l)) if l == "ecstatic"
        ));
        assert_eq!(mock.requests().len(), 2);
    }

    #[test]
    fn single_terminal_period() {
        let pool = table2_pool();
        let se = random_event_from_completion("Sophia", "label: upset; event: she lost her keys...  ", &pool)
            .unwrap();
        assert_eq!(se.rendered(), "Sophia is feeling upset because she lost her keys.");
        let se = random_event_from_completion("Sophia", "label: upset\nevent: she lost her keys.", &pool).unwrap();
        assert!(se.rendered().ends_with("keys.") && !se.rendered().ends_with(".."));
    }

    #[test]
    fn token_match_recovers_pool_label() {
        let pool = table2_pool();
        assert_eq!(pool.resolve("Very Excited!").unwrap().label, "excited");
        assert!(pool.resolve("excited but worried").is_err());
    }

    #[test]
    fn profile_event_matches_table_rendering() {
        let (engine, mock) = engine_with(
            &["label: worried; event: a huge mistake she made when asked to be in charge of a team; context: her promotion has been approved this morning"],
            table2_pool(),
        );
        let se = generate_profile_event(&sophia(), &engine, None).unwrap();
        assert_eq!(
            se.rendered(),
            "Sophia is feeling worried after recalling a huge mistake she made when asked to be in charge of a team, even though her promotion has been approved this morning."
        );
        assert_eq!(se.style(), SelfEmotionStyle::ProfileEvent);
        let prompt = mock.requests()[0].prompt_text();
        assert!(prompt.contains("made a huge mistake"));
    }

    #[test]
    fn profile_event_accepts_pool_label() {
        let pool = table2_pool();
        let se = profile_event_from_completion(
            "Sophia",
            "label: motivated; event: that she tried applying to 20 companies before finding her previous job; context:",
            &pool,
        )
        .unwrap();
        assert_eq!(
            se.rendered(),
            "Sophia is feeling motivated after recalling that she tried applying to 20 companies before finding her previous job."
        );
    }

    #[test]
    fn profile_event_requires_description_before_calling() {
        let (engine, mock) = engine_with(&["label: worried; event: x"], table2_pool());
        let mut p = sophia();
        p.description.clear();
        assert!(matches!(
            generate_profile_event(&p, &engine, None),
            Err(EmotionError::MissingDescription(_))
        ));
        assert!(mock.requests().is_empty());
    }

    #[test]
    fn valence_restricts_pool() {
        let (engine, mock) = engine_with(
            &["label: excited; event: a", "label: upset; event: she missed the bus"],
            table2_pool(),
        );
        let se = generate_random_event(&sophia(), &engine, Some(Valence::Negative)).unwrap();
        assert_eq!(se.label().label, "upset");
        let prompt = mock.requests()[0].prompt_text();
        assert!(prompt.contains("upset, worried") && !prompt.contains("excited,"));
    }

    #[test]
    fn missing_fields_are_parse_errors() {
        assert!(matches!(parse_event_completion("event: x"), Err(EmotionError::Parse(_))));
        assert!(matches!(parse_event_completion("label: sad"), Err(EmotionError::Parse(_))));
        assert!(matches!(parse_event_completion(""), Err(EmotionError::Parse(_))));
    }
}
