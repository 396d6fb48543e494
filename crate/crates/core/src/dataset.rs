//! EmpatheticDialogues-style ingestion and seq2seq instruction export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{SelfEmotion, Transcript};

pub const FINAL_INSTRUCTION: &str = "Generate the response.";
pub const DEFAULT_EOS: &str = "</s>";
pub const DEFAULT_TOKEN_BUDGET: usize = 512;
const TOKEN_FACTOR: f64 = 1.3;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("no self-emotion for conversation {0:?}")]
    MissingSelfEmotion(String),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
}

/// Column names of the source CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub conv_id: String,
    pub utterance_idx: String,
    pub speaker_idx: String,
    /// Emotion label of the conversation opener.
    pub emotion: String,
    pub utterance: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            conv_id: "conv_id".into(),
            utterance_idx: "utterance_idx".into(),
            speaker_idx: "speaker_idx".into(),
            emotion: "context".into(),
            utterance: "utterance".into(),
        }
    }
}

impl ColumnMap {
    pub fn from_toml(text: &str) -> Result<Self, DatasetError> {
        toml::from_str(text).map_err(|e| DatasetError::SchemaMismatch(format!("column manifest: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdConversation {
    pub transcript: Transcript,
    pub friend_emotion: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestReport {
    /// In order of first appearance in the file.
    pub conversations: Vec<EdConversation>,
    pub skipped_rows: usize,
}

pub fn ingest_ed(path: &Path, columns: &ColumnMap) -> Result<IngestReport, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::UnreadableFile {
        path: path.to_path_buf(),
        source,
    })?;
    ingest_ed_reader(file, columns)
}

struct Row {
    idx: u64,
    speaker: String,
    emotion: String,
    text: String,
}

/// Groups rows by conversation and orders them by utterance index. The
/// opener is tagged `friend` and the other speaker `me`. Rows with missing
/// fields, an unparseable index or an empty label are skipped and counted.
pub fn ingest_ed_reader<R: Read>(reader: R, columns: &ColumnMap) -> Result<IngestReport, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DatasetError::SchemaMismatch(format!("header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::SchemaMismatch(format!("missing column {name:?}")))
    };
    let (ci, ui, si, ei, ti) = (
        col(&columns.conv_id)?,
        col(&columns.utterance_idx)?,
        col(&columns.speaker_idx)?,
        col(&columns.emotion)?,
        col(&columns.utterance)?,
    );

    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    let mut skipped = 0;
    for record in rdr.records() {
        let Ok(record) = record else {
            skipped += 1;
            continue;
        };
        let field = |i: usize| record.get(i).map(|s| s.trim().replace("_comma_", ","));
        let parsed = (|| {
            let id = field(ci).filter(|s| !s.is_empty())?;
            let idx = field(ui)?.parse::<u64>().ok()?;
            let speaker = field(si).filter(|s| !s.is_empty())?;
            let emotion = field(ei).filter(|s| !s.is_empty())?;
            let text = field(ti).filter(|s| !s.is_empty())?;
            Some((id, Row { idx, speaker, emotion, text }))
        })();
        match parsed {
            Some((id, row)) => {
                if !groups.contains_key(&id) {
                    order.push(id.clone());
                }
                groups.entry(id).or_default().push(row);
            }
            None => skipped += 1,
        }
    }

    let conversations = order
        .into_iter()
        .map(|id| {
            let mut rows = groups.remove(&id).expect("grouped id");
            rows.sort_by_key(|r| r.idx);
            let opener = rows[0].speaker.clone();
            let friend_emotion = rows[0].emotion.clone();
            let mut t = Transcript::new(id);
            t.set_meta("friend_emotion", friend_emotion.clone());
            for r in &rows {
                let tag = if r.speaker == opener { "friend" } else { "me" };
                t.push(tag, tag, &r.text);
            }
            EdConversation {
                transcript: t,
                friend_emotion,
            }
        })
        .collect();
    Ok(IngestReport {
        conversations,
        skipped_rows: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub conversation_id: String,
    pub turn_index: usize,
    pub with_se: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub input: String,
    pub label: String,
    pub meta: InstanceMeta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportOptions {
    pub with_se: bool,
    pub eos_token: String,
    /// History budget in estimated tokens (whitespace tokens x 1.3).
    pub token_budget: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            with_se: false,
            eos_token: DEFAULT_EOS.into(),
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }
}

/// Text with a final period unless it already ends a sentence.
fn sentence(text: &str) -> String {
    let t = text.trim();
    if t.ends_with(['.', '!', '?']) {
        t.to_string()
    } else {
        format!("{t}.")
    }
}

fn estimated_tokens(text: &str) -> f64 {
    text.split_whitespace().count() as f64 * TOKEN_FACTOR
}

/// Serialized history, dropping the oldest turns until it fits the budget.
/// The most recent turn is always kept.
pub fn render_history(turns: &[(&str, &str)], token_budget: usize) -> String {
    let rendered: Vec<String> = turns
        .iter()
        .map(|(who, text)| format!("{who}: {}", sentence(text)))
        .collect();
    let mut start = 0;
    while start + 1 < rendered.len() && estimated_tokens(&rendered[start..].join(" ")) > token_budget as f64 {
        start += 1;
    }
    rendered[start..].join(" ")
}

/// The instruction input for one response.
pub fn render_instruction_input(
    friend_emotion: &str,
    self_emotion: Option<&str>,
    history: &[(&str, &str)],
    token_budget: usize,
) -> String {
    let mut out = format!(
        "I'm having a conversation with my friend. My friend is feeling {}.",
        friend_emotion.trim()
    );
    if let Some(se) = self_emotion {
        out.push(' ');
        out.push_str(&sentence(se));
    }
    out.push(' ');
    out.push_str(&render_history(history, token_budget));
    out.push(' ');
    out.push_str(FINAL_INSTRUCTION);
    out
}

pub fn render_label(utterance: &str, eos_token: &str) -> String {
    format!("me: {} {eos_token}.", sentence(utterance))
}

/// Self-emotion in the first person: "Ann is feeling sad because ..." becomes
/// "I'm feeling sad because ...".
pub fn first_person(se: &SelfEmotion) -> String {
    let r = se.rendered().trim();
    match r.find(" is feeling ") {
        Some(at) => format!("I'm feeling {}", &r[at + " is feeling ".len()..]),
        None => r.to_string(),
    }
}

/// One instance per agent (`me`) turn that has preceding history.
/// `se_lookup` maps conversation ids to a first-person self-emotion sentence
/// and is required when `opts.with_se` is set.
pub fn export_seq2seq(
    conversations: &[EdConversation],
    opts: &ExportOptions,
    se_lookup: &BTreeMap<String, String>,
) -> Result<Vec<TrainingInstance>, DatasetError> {
    let mut out = Vec::new();
    for conv in conversations {
        let id = &conv.transcript.id;
        let se = if opts.with_se {
            Some(
                se_lookup
                    .get(id)
                    .ok_or_else(|| DatasetError::MissingSelfEmotion(id.clone()))?
                    .as_str(),
            )
        } else {
            None
        };
        let turns: Vec<(&str, &str)> = conv
            .transcript
            .utterances
            .iter()
            .map(|u| (u.role_tag.as_str(), u.text.as_str()))
            .collect();
        for (i, u) in conv.transcript.utterances.iter().enumerate().skip(1) {
            if u.role_tag != "me" {
                continue;
            }
            out.push(TrainingInstance {
                input: render_instruction_input(&conv.friend_emotion, se, &turns[..i], opts.token_budget),
                label: render_label(&u.text, &opts.eos_token),
                meta: InstanceMeta {
                    conversation_id: id.clone(),
                    turn_index: u.turn_index,
                    with_se: opts.with_se,
                },
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<TrainingInstance>,
    pub val: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Partition sizes by largest remainder; ties go to the earlier partition.
fn partition_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut sizes = exact.map(|x| x.floor() as usize);
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for i in order {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    sizes
}

/// Splits by conversation so no conversation spans two partitions.
pub fn split(instances: &[TrainingInstance], ratios: [f64; 3], seed: u64) -> Result<(Splits, SplitManifest), DatasetError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(format!("{ratios:?} must be non-negative and sum to 1")));
    }
    let mut ids: Vec<String> = Vec::new();
    for inst in instances {
        if !ids.contains(&inst.meta.conversation_id) {
            ids.push(inst.meta.conversation_id.clone());
        }
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_val, _] = partition_sizes(ids.len(), ratios);
    let part_of: BTreeMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), usize::from(i >= n_train) + usize::from(i >= n_train + n_val)))
        .collect();
    let mut parts: [Vec<TrainingInstance>; 3] = Default::default();
    for inst in instances {
        parts[part_of[inst.meta.conversation_id.as_str()]].push(inst.clone());
    }
    let manifest = SplitManifest {
        seed,
        ratios,
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    let [train, val, test] = parts;
    Ok((Splits { train, val, test }, manifest))
}

/// Two columns, input and label; tabs and newlines become spaces.
pub fn to_tsv(instances: &[TrainingInstance]) -> String {
    let clean = |s: &str| s.replace(['\t', '\n', '\r'], " ");
    instances
        .iter()
        .map(|i| format!("{}\t{}\n", clean(&i.input), clean(&i.label)))
        .collect()
}
