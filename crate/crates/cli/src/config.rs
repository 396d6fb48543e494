//! Run configuration: one TOML document, paths relative to its directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use emosim::dialogue::SeMode;
use emosim::domain::Valence;
use emosim::gateway::BackendConfig;
use emosim::groupsim::DiscussionConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Self-emotion style for dialogue runs and dataset export.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_mode: Option<SeMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_pool_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub backend: BackendConfig,
    #[serde(default)]
    pub generation: GenerationBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_context: Option<FixedContextBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<GroupBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetBlock>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationBlock {
    pub temperature: f64,
    pub judge_temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationBlock {
    fn default() -> Self {
        let s = emosim::GenerationSettings::default();
        GenerationBlock {
            temperature: widen(s.temperature),
            judge_temperature: widen(s.judge_temperature),
            max_tokens: s.max_tokens,
        }
    }
}

/// `0.7f32` as `0.7`, not `0.699999988...`.
fn widen(x: f32) -> f64 {
    (f64::from(x) * 1e6).round() / 1e6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedContextBlock {
    /// JSONL of fixed-context cases.
    pub cases_path: PathBuf,
    /// Defaults to `none` plus the top-level `se_mode`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<SeMode>>,
    #[serde(default = "default_top_k")]
    pub flow_top_k: usize,
}

fn default_top_k() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicBlock {
    pub title: String,
    /// Generated from the title when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupBlock {
    /// Used to generate members when `members_path` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default = "default_group_size")]
    pub size: usize,
    /// JSON array of group members.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members_path: Option<PathBuf>,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default = "default_valences")]
    pub valences: Vec<Valence>,
    pub topics: Vec<TopicBlock>,
    #[serde(default)]
    pub discussion: DiscussionConfig,
    /// Let the judge model decide whether reworded decisions changed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub judge_changes: bool,
}

fn default_group_size() -> usize {
    6
}

fn default_runs() -> usize {
    10
}

fn default_valences() -> Vec<Valence> {
    vec![Valence::Positive, Valence::Negative]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    pub ed_path: PathBuf,
    /// TOML column mapping; the standard column names when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns_path: Option<PathBuf>,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    /// Defaults to true when `se_mode` names a self-emotion style.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_se: Option<bool>,
    /// JSONL of {conversation_id, self_emotion}; generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_emotions_path: Option<PathBuf>,
    #[serde(default = "default_eos")]
    pub eos_token: String,
    #[serde(default = "default_budget")]
    pub token_budget: usize,
}

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_eos() -> String {
    emosim::dataset::DEFAULT_EOS.to_string()
}

fn default_budget() -> usize {
    emosim::dataset::DEFAULT_TOKEN_BUDGET
}

/// A parsed config plus the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    /// Canonical TOML of the config as written.
    pub snapshot: String,
    /// Hash of the experiment definition (backend and output location excluded).
    pub hash: String,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let config: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."));
    let snapshot = toml::to_string(&config).context("serialize config snapshot")?;
    let hash = experiment_hash(&config)?;
    let loaded = Loaded {
        config,
        base_dir,
        snapshot,
        hash,
    };
    validate(&loaded)?;
    Ok(loaded)
}

fn experiment_hash(config: &RunConfig) -> Result<String> {
    let mut value = toml::Value::try_from(config).context("serialize config")?;
    if let Some(t) = value.as_table_mut() {
        t.remove("backend");
        t.remove("output_dir");
    }
    let canonical = toml::to_string(&value).context("serialize config")?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

fn validate(l: &Loaded) -> Result<()> {
    let c = &l.config;
    let mut paths: Vec<(&str, &PathBuf)> = Vec::new();
    paths.extend(c.label_pool_path.iter().map(|p| ("label_pool_path", p)));
    paths.extend(c.template_dir.iter().map(|p| ("template_dir", p)));
    paths.extend(c.backend.script_path.iter().map(|p| ("backend.script_path", p)));
    paths.extend(c.backend.cassette_path.iter().map(|p| ("backend.cassette_path", p)));
    if let Some(f) = &c.fixed_context {
        paths.push(("fixed_context.cases_path", &f.cases_path));
        if f.modes.as_ref().is_some_and(|m| m.is_empty()) {
            bail!("fixed_context.modes is empty");
        }
    }
    if let Some(g) = &c.group {
        paths.extend(g.members_path.iter().map(|p| ("group.members_path", p)));
        if g.members_path.is_none() && g.description.as_deref().is_none_or(|d| d.trim().is_empty()) {
            bail!("group needs either members_path or description");
        }
        if g.topics.is_empty() {
            bail!("group.topics is empty");
        }
        if g.n_runs == 0 {
            bail!("group.n_runs must be at least 1");
        }
        if g.valences.is_empty() || g.valences.contains(&Valence::Neutral) {
            bail!("group.valences must list positive and/or negative");
        }
    }
    if let Some(d) = &c.dataset {
        paths.push(("dataset.ed_path", &d.ed_path));
        paths.extend(d.columns_path.iter().map(|p| ("dataset.columns_path", p)));
        paths.extend(d.self_emotions_path.iter().map(|p| ("dataset.self_emotions_path", p)));
    }
    for (key, p) in paths {
        let full = l.resolve(p);
        if !full.exists() {
            bail!("{key}: {} does not exist", full.display());
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn dialogue_modes(&self) -> Vec<SeMode> {
        if let Some(m) = self.fixed_context.as_ref().and_then(|f| f.modes.clone()) {
            return m;
        }
        let mut modes = vec![SeMode::None];
        if let Some(m) = self.se_mode.filter(|m| *m != SeMode::None) {
            modes.push(m);
        }
        modes
    }
}
