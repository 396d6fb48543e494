//! Evaluation: strategy accuracy, emotion-to-strategy flow counts,
//! decision-change classification and rates, discussion length statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dialogue::{ExperimentTable, FixedContextCase, SeMode};
use crate::domain::{multi_hot, SelfEmotion, StrategyChoice, StrategyPool, Valence};
use crate::emotion::LabelPool;
use crate::engine::Engine;
use crate::groupsim::{Decision, DecisionPair, DiscussionRecord, Resolution};
use crate::templates::bindings;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("accuracy is undefined for an empty strategy choice")]
    UndefinedForEmpty,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("decisions belong to different steps ({before} vs {after})")]
    StepMismatch { before: usize, after: usize },
    #[error("change judgment failed: {0}")]
    Judge(String),
}

impl From<crate::gateway::GatewayError> for MetricsError {
    fn from(e: crate::gateway::GatewayError) -> Self {
        MetricsError::Judge(e.to_string())
    }
}

fn cosine(a: &[u8], b: &[u8]) -> Result<f64, MetricsError> {
    let dot: u64 = a.iter().zip(b).map(|(x, y)| u64::from(*x) * u64::from(*y)).sum();
    let na: u64 = a.iter().map(|x| u64::from(*x) * u64::from(*x)).sum();
    let nb: u64 = b.iter().map(|x| u64::from(*x) * u64::from(*x)).sum();
    if na == 0 || nb == 0 {
        return Err(MetricsError::UndefinedForEmpty);
    }
    Ok(dot as f64 / ((na * nb) as f64).sqrt())
}

/// Cosine similarity of the multi-hot encodings of two choices.
pub fn strategy_accuracy(model: &StrategyChoice, human: &StrategyChoice, pool: &StrategyPool) -> Result<f64, MetricsError> {
    cosine(&multi_hot(model, pool), &multi_hot(human, pool))
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Mean of per-case accuracies in [0, 1], as a percentage with 2 decimals.
pub fn aggregate_accuracy(per_case: &[f64]) -> Result<f64, MetricsError> {
    if per_case.is_empty() {
        return Err(MetricsError::EmptyInput("no accuracies to aggregate".into()));
    }
    Ok(round2(per_case.iter().sum::<f64>() / per_case.len() as f64 * 100.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAccuracy {
    pub mode: SeMode,
    pub scored: usize,
    pub filtered: usize,
    pub errors: usize,
    /// Percentage; `None` when no case could be scored.
    pub accuracy: Option<f64>,
}

/// Scores experiment rows against the human strategies of their cases.
/// Filtered, failed and unannotated cases are excluded from the mean.
pub fn evaluate_fixed_context(
    table: &ExperimentTable,
    cases: &[FixedContextCase],
    pool: &StrategyPool,
) -> Vec<ModeAccuracy> {
    let human: BTreeMap<&str, StrategyChoice> = cases
        .iter()
        .filter_map(|c| c.human_choice().map(|h| (c.id(), h)))
        .collect();
    let mut by_mode: BTreeMap<SeMode, (Vec<f64>, usize, usize)> = BTreeMap::new();
    for row in &table.rows {
        let entry = by_mode.entry(row.mode).or_default();
        match &row.result {
            None => entry.2 += 1,
            Some(r) if r.filtered => entry.1 += 1,
            Some(r) => {
                if let Some(Ok(acc)) = human.get(row.case_id.as_str()).map(|h| strategy_accuracy(&r.choice, h, pool)) {
                    entry.0.push(acc);
                }
            }
        }
    }
    by_mode
        .into_iter()
        .map(|(mode, (scores, filtered, errors))| ModeAccuracy {
            mode,
            scored: scores.len(),
            filtered,
            errors,
            accuracy: aggregate_accuracy(&scores).ok(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Emotion / strategy flow
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowMatrix {
    pub labels: Vec<String>,
    pub strategies: Vec<String>,
    /// `counts[label][strategy]`.
    pub counts: Vec<Vec<u64>>,
}

impl FlowMatrix {
    pub fn get(&self, label: &str, strategy: &str) -> u64 {
        let l = self.labels.iter().position(|x| x == label);
        let s = self.strategies.iter().position(|x| x == strategy);
        match (l, s) {
            (Some(l), Some(s)) => self.counts[l][s],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn label_marginals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn strategy_marginals(&self) -> Vec<u64> {
        (0..self.strategies.len())
            .map(|s| self.counts.iter().map(|r| r[s]).sum())
            .collect()
    }

    /// Keeps the `k_labels` most frequent labels and `k_strategies` most
    /// frequent strategies (ties keep the original order).
    pub fn top_k(&self, k_labels: usize, k_strategies: usize) -> FlowMatrix {
        let pick = |marg: Vec<u64>, k: usize| {
            let mut idx: Vec<usize> = (0..marg.len()).collect();
            idx.sort_by_key(|&i| std::cmp::Reverse(marg[i]));
            idx.truncate(k);
            idx.sort_unstable();
            idx
        };
        let li = pick(self.label_marginals(), k_labels);
        let si = pick(self.strategy_marginals(), k_strategies);
        FlowMatrix {
            labels: li.iter().map(|&i| self.labels[i].clone()).collect(),
            strategies: si.iter().map(|&i| self.strategies[i].clone()).collect(),
            counts: li
                .iter()
                .map(|&l| si.iter().map(|&s| self.counts[l][s]).collect())
                .collect(),
        }
    }

    /// Nonzero cells as (source, target, weight).
    pub fn edges(&self) -> Vec<(String, String, u64)> {
        let mut out = Vec::new();
        for (l, row) in self.counts.iter().enumerate() {
            for (s, &w) in row.iter().enumerate() {
                if w > 0 {
                    out.push((self.labels[l].clone(), self.strategies[s].clone(), w));
                }
            }
        }
        out
    }

    pub fn to_edge_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["source", "target", "weight"]).expect("in-memory write");
        for (s, t, n) in self.edges() {
            w.write_record([s, t, n.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// Counts, for each self-emotion label, how often each strategy was chosen.
/// Labels outside `labels` are appended as extra rows.
pub fn emotion_strategy_flow(
    results: &[(SelfEmotion, StrategyChoice)],
    labels: &LabelPool,
    pool: &StrategyPool,
) -> FlowMatrix {
    let mut row_names: Vec<String> = labels.labels().iter().map(|l| l.label.clone()).collect();
    let strategies: Vec<String> = pool.strategies().map(|s| s.display_name().to_string()).collect();
    let mut counts = vec![vec![0u64; strategies.len()]; row_names.len()];
    for (se, choice) in results {
        let label = &se.label().label;
        let row = match row_names.iter().position(|l| l == label) {
            Some(r) => r,
            None => {
                row_names.push(label.clone());
                counts.push(vec![0; strategies.len()]);
                row_names.len() - 1
            }
        };
        for s in choice.iter() {
            if let Some(col) = pool.position(s) {
                counts[row][col] += 1;
            }
        }
    }
    FlowMatrix {
        labels: row_names,
        strategies,
        counts,
    }
}

/// Flow input from an experiment: every completed row that had self-emotion.
pub fn flow_input(table: &ExperimentTable) -> Vec<(SelfEmotion, StrategyChoice)> {
    table
        .rows
        .iter()
        .filter_map(|r| match (&r.self_emotion, &r.result) {
            (Some(se), Some(res)) if !res.filtered => Some((se.clone(), res.choice.clone())),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Decision changes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DecisionChangeCategory {
    UndecidedChange,
    DecidedChange,
    AuthorityChange,
    MajorityChange,
    DetailsChange,
    CompromiseChange,
    NoChange,
}

impl DecisionChangeCategory {
    pub const ALL: [DecisionChangeCategory; 7] = [
        DecisionChangeCategory::UndecidedChange,
        DecisionChangeCategory::DecidedChange,
        DecisionChangeCategory::AuthorityChange,
        DecisionChangeCategory::MajorityChange,
        DecisionChangeCategory::DetailsChange,
        DecisionChangeCategory::CompromiseChange,
        DecisionChangeCategory::NoChange,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecisionChangeCategory::UndecidedChange => "undecided",
            DecisionChangeCategory::DecidedChange => "decided",
            DecisionChangeCategory::AuthorityChange => "authority",
            DecisionChangeCategory::MajorityChange => "majority",
            DecisionChangeCategory::DetailsChange => "details",
            DecisionChangeCategory::CompromiseChange => "compromise",
            DecisionChangeCategory::NoChange => "no change",
        }
    }
}

/// Lowercased, whitespace-collapsed, without terminal punctuation.
pub fn normalize_summary(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim()
        .to_string()
}

/// Classifies how a step's decision changed between two runs.
///
/// Resolution transitions are checked first; pairs not named by a specific
/// rule fall back to: into delegation is undecided, out of delegation is
/// decided, into a compromise is a compromise, anything else is details.
pub fn classify_decision_change(before: &Decision, after: &Decision) -> Result<DecisionChangeCategory, MetricsError> {
    use DecisionChangeCategory as C;
    use Resolution as R;
    if before.step_index != after.step_index {
        return Err(MetricsError::StepMismatch {
            before: before.step_index,
            after: after.step_index,
        });
    }
    let (b, a) = (before.resolution, after.resolution);
    Ok(match (b, a) {
        (R::Agreement, R::Delegation) => C::UndecidedChange,
        (R::Delegation, R::Agreement) => C::DecidedChange,
        (R::Vote, R::SingleAgent) => C::AuthorityChange,
        (R::SingleAgent, R::Vote) => C::MajorityChange,
        (R::Agreement, R::CompromisedAgreement) => C::CompromiseChange,
        _ if b == a && normalize_summary(&before.summary) == normalize_summary(&after.summary) => C::NoChange,
        _ if b == a => C::DetailsChange,
        (_, R::Delegation) => C::UndecidedChange,
        (R::Delegation, _) => C::DecidedChange,
        (_, R::CompromisedAgreement) => C::CompromiseChange,
        _ => C::DetailsChange,
    })
}

/// `SAME` or `DIFFERENT` as the first word of a judgment.
pub fn parse_judgment(text: &str) -> Result<bool, MetricsError> {
    let word: String = text
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect();
    match word.to_uppercase().as_str() {
        "SAME" => Ok(true),
        "DIFFERENT" => Ok(false),
        _ => Err(MetricsError::Judge(format!("expected SAME or DIFFERENT, got {:?}", text.trim()))),
    }
}

/// Like [`classify_decision_change`], but when only the summaries differ a
/// model decides whether they state the same decision.
pub fn classify_decision_change_judged(
    before: &Decision,
    after: &Decision,
    step: &str,
    engine: &Engine,
) -> Result<DecisionChangeCategory, MetricsError> {
    let rule = classify_decision_change(before, after)?;
    if rule != DecisionChangeCategory::DetailsChange || before.resolution != after.resolution {
        return Ok(rule);
    }
    let prompt = engine
        .templates
        .render(
            "change_judgment",
            &bindings([
                ("step", step.to_string()),
                ("before", before.summary.clone()),
                ("after", after.summary.clone()),
            ]),
        )
        .map_err(|e| MetricsError::Judge(e.to_string()))?;
    let same = engine.ask_parsed("change_judgment", prompt, engine.settings.judge_temperature, parse_judgment)?;
    Ok(if same {
        DecisionChangeCategory::NoChange
    } else {
        DecisionChangeCategory::DetailsChange
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeCount {
    pub changed: usize,
    pub total: usize,
}

impl ChangeCount {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.changed as f64 / self.total as f64 * 100.0)
    }

    fn add(&mut self, changed: bool) {
        self.total += 1;
        self.changed += usize::from(changed);
    }

    fn merged(self, other: ChangeCount) -> ChangeCount {
        ChangeCount {
            changed: self.changed + other.changed,
            total: self.total + other.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicRates {
    pub topic: String,
    pub positive: ChangeCount,
    pub negative: ChangeCount,
}

impl TopicRates {
    /// Positive and negative decisions pooled.
    pub fn all(&self) -> ChangeCount {
        self.positive.merged(self.negative)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRateReport {
    /// In order of first appearance.
    pub topics: Vec<TopicRates>,
    pub overall_positive: Option<f64>,
    pub overall_negative: Option<f64>,
    pub overall_all: Option<f64>,
    pub categories: BTreeMap<DecisionChangeCategory, usize>,
}

/// Mean of the defined rates; `None` if there are none.
pub fn mean_rate(rates: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = rates.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Share of step decisions that changed, per topic and valence. Overall
/// figures are means of the per-topic rates; a topic's "all" rate pools its
/// positive and negative decisions.
pub fn decision_change_rate(pairs: &[DecisionPair], valence: Option<Valence>) -> Result<ChangeRateReport, MetricsError> {
    decision_change_rate_with(pairs, valence, |p| classify_decision_change(&p.before, &p.after))
}

/// [`decision_change_rate`] with a caller-supplied classifier.
pub fn decision_change_rate_with(
    pairs: &[DecisionPair],
    valence: Option<Valence>,
    mut classify: impl FnMut(&DecisionPair) -> Result<DecisionChangeCategory, MetricsError>,
) -> Result<ChangeRateReport, MetricsError> {
    let selected: Vec<&DecisionPair> = pairs
        .iter()
        .filter(|p| valence.is_none_or(|v| p.valence == v))
        .collect();
    if selected.is_empty() {
        return Err(MetricsError::EmptyInput("no decision pairs".into()));
    }
    let mut topics: Vec<TopicRates> = Vec::new();
    let mut categories: BTreeMap<DecisionChangeCategory, usize> =
        DecisionChangeCategory::ALL.iter().map(|c| (*c, 0)).collect();
    for p in selected {
        let cat = classify(p)?;
        *categories.entry(cat).or_default() += 1;
        let idx = match topics.iter().position(|t| t.topic == p.topic) {
            Some(i) => i,
            None => {
                topics.push(TopicRates {
                    topic: p.topic.clone(),
                    positive: ChangeCount::default(),
                    negative: ChangeCount::default(),
                });
                topics.len() - 1
            }
        };
        let changed = cat != DecisionChangeCategory::NoChange;
        match p.valence {
            Valence::Positive => topics[idx].positive.add(changed),
            Valence::Negative => topics[idx].negative.add(changed),
            Valence::Neutral => {}
        }
    }
    Ok(ChangeRateReport {
        overall_positive: mean_rate(topics.iter().map(|t| t.positive.rate())),
        overall_negative: mean_rate(topics.iter().map(|t| t.negative.rate())),
        overall_all: mean_rate(topics.iter().map(|t| t.all().rate())),
        topics,
        categories,
    })
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

impl ChangeRateReport {
    pub fn to_text_table(&self) -> String {
        let width = self
            .topics
            .iter()
            .map(|t| t.topic.len())
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:>width$}  {:>7}  {:>7}  {:>7}", "Topic", "Pos", "Neg", "All");
        for t in &self.topics {
            let _ = writeln!(
                out,
                "{:>width$}  {:>7}  {:>7}  {:>7}",
                t.topic,
                fmt_rate(t.positive.rate()),
                fmt_rate(t.negative.rate()),
                fmt_rate(t.all().rate())
            );
        }
        let _ = writeln!(
            out,
            "{:>width$}  {:>7}  {:>7}  {:>7}",
            "avg.",
            fmt_rate(self.overall_positive),
            fmt_rate(self.overall_negative),
            fmt_rate(self.overall_all)
        );
        out.push('\n');
        let total: usize = self.categories.values().sum();
        for (cat, n) in &self.categories {
            let pct = if total == 0 { 0.0 } else { *n as f64 / total as f64 * 100.0 };
            let _ = writeln!(out, "{:>12}  {n:>5}  {pct:>6.2}%", cat.as_str());
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["topic", "pos", "neg", "all", "pos_changed", "pos_total", "neg_changed", "neg_total"])
            .expect("in-memory write");
        for t in &self.topics {
            w.write_record([
                t.topic.clone(),
                fmt_rate(t.positive.rate()),
                fmt_rate(t.negative.rate()),
                fmt_rate(t.all().rate()),
                t.positive.changed.to_string(),
                t.positive.total.to_string(),
                t.negative.changed.to_string(),
                t.negative.total.to_string(),
            ])
            .expect("in-memory write");
        }
        w.write_record([
            "avg.".to_string(),
            fmt_rate(self.overall_positive),
            fmt_rate(self.overall_negative),
            fmt_rate(self.overall_all),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])
        .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

// ---------------------------------------------------------------------------
// Discussion statistics
// ---------------------------------------------------------------------------

/// Per-step utterance counts of one run and how many of them came from the
/// tracked member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub step_lengths: Vec<usize>,
    pub target_counts: Vec<usize>,
}

impl RunStats {
    /// Tracks `target`, or the run's self-emotion member when `None`.
    pub fn from_record(record: &DiscussionRecord, target: Option<&str>) -> RunStats {
        let target = target.or(record.se_assignment.target_member.as_deref());
        let steps = record.decisions.len();
        let mut step_lengths = vec![0; steps];
        let mut target_counts = vec![0; steps];
        for u in &record.transcript.utterances {
            let Some(s) = u.step_index.filter(|s| *s < steps) else { continue };
            step_lengths[s] += 1;
            if Some(u.speaker_id.as_str()) == target {
                target_counts[s] += 1;
            }
        }
        RunStats {
            step_lengths,
            target_counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscussionStats {
    /// Mean utterances per step before its decision.
    pub avg_length: f64,
    /// Mean utterances per step by the tracked member.
    pub target_frequency: f64,
    pub steps: usize,
}

/// Means over every step of every run.
pub fn discussion_stats(runs: &[RunStats]) -> Result<DiscussionStats, MetricsError> {
    let steps: usize = runs.iter().map(|r| r.step_lengths.len()).sum();
    if steps == 0 {
        return Err(MetricsError::EmptyInput("no discussion steps".into()));
    }
    let len: usize = runs.iter().flat_map(|r| &r.step_lengths).sum();
    let tgt: usize = runs.iter().flat_map(|r| &r.target_counts).sum();
    Ok(DiscussionStats {
        avg_length: len as f64 / steps as f64,
        target_frequency: tgt as f64 / steps as f64,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::EmotionLabel;
    use crate::emotion::render_label_emotion;
    use proptest::prelude::*;

    fn pool() -> StrategyPool {
        StrategyPool::default()
    }

    fn choice(names: &[&str]) -> StrategyChoice {
        StrategyChoice::from_names(names.iter().copied(), &pool()).unwrap()
    }

    fn d(step: usize, summary: &str, r: Resolution) -> Decision {
        Decision::new(step, summary, r, vec!["m1".into()]).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let p = pool();
        assert_eq!(
            strategy_accuracy(&choice(&["Encouraging", "Suggesting"]), &choice(&["Encouraging", "Suggesting"]), &p).unwrap(),
            1.0
        );
        assert_eq!(strategy_accuracy(&choice(&["Rejection"]), &choice(&["Encouraging"]), &p).unwrap(), 0.0);
        let half = strategy_accuracy(&choice(&["Encouraging"]), &choice(&["Encouraging", "Sympathizing"]), &p).unwrap();
        assert!((half - 0.7071067811865475).abs() < 1e-12);
        assert_eq!(
            strategy_accuracy(&StrategyChoice::new(), &choice(&["Encouraging"]), &p),
            Err(MetricsError::UndefinedForEmpty)
        );
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_accuracy(&[1.0, 0.0]).unwrap(), 50.0);
        let col = [33.76, 27.73, 15.00, 33.67, 45.41].map(|x| x / 100.0);
        assert!((aggregate_accuracy(&col).unwrap() - 31.11).abs() < 0.005);
        assert!(aggregate_accuracy(&[]).is_err());
    }

    fn se(label: &str) -> SelfEmotion {
        render_label_emotion(
            "Ann",
            &EmotionLabel {
                label: label.into(),
                valence: Valence::Negative,
            },
        )
        .unwrap()
    }

    #[test]
    fn flow_counts() {
        let labels = LabelPool::default();
        let empty = emotion_strategy_flow(&[], &labels, &pool());
        assert_eq!(empty.total(), 0);
        assert_eq!(empty.counts.len(), 32);

        let three = vec![
            (se("sad"), choice(&["Encouraging"])),
            (se("angry"), choice(&["Rejection"])),
            (se("sad"), choice(&["Suggesting"])),
        ];
        assert_eq!(emotion_strategy_flow(&three, &labels, &pool()).total(), 3);

        let five: Vec<_> = (0..5)
            .map(|_| (se("anxious"), choice(&["Expressing care or concern"])))
            .collect();
        let m = emotion_strategy_flow(&five, &labels, &pool());
        assert_eq!(m.get("anxious", "Expressing care or concern"), 5);
        let top = m.top_k(1, 1);
        assert_eq!(top.labels, ["anxious"]);
        assert_eq!(top.strategies, ["Expressing care or concern"]);
        assert_eq!(m.to_edge_csv(), "source,target,weight\nanxious,Expressing care or concern,5\n");
    }

    #[test]
    fn classification_examples() {
        use DecisionChangeCategory as C;
        use Resolution as R;
        let cases = [
            (d(0, "use React Native", R::Agreement), d(0, "use Kotlin", R::CompromisedAgreement), C::CompromiseChange),
            (d(0, "spend $30 for dinner", R::Agreement), d(0, "spend $20 for dinner", R::Agreement), C::DetailsChange),
            (d(0, "option A", R::Vote), d(0, "option A", R::SingleAgent), C::AuthorityChange),
            (d(0, "option A", R::SingleAgent), d(0, "option A", R::Vote), C::MajorityChange),
            (d(0, "go", R::Agreement), d(0, "delegated", R::Delegation), C::UndecidedChange),
            (d(0, "delegated", R::Delegation), d(0, "go", R::Agreement), C::DecidedChange),
            (d(0, "Use Kotlin.", R::Agreement), d(0, "use  kotlin", R::Agreement), C::NoChange),
            (d(0, "x", R::Vote), d(0, "x", R::Agreement), C::DetailsChange),
        ];
        for (b, a, want) in cases {
            assert_eq!(classify_decision_change(&b, &a).unwrap(), want, "{b:?} -> {a:?}");
        }
        assert_eq!(
            classify_decision_change(&d(0, "a", R::Vote), &d(1, "a", R::Vote)),
            Err(MetricsError::StepMismatch { before: 0, after: 1 })
        );
    }

    fn pairs(topic: &str, valence: Valence, changed: usize, total: usize) -> Vec<DecisionPair> {
        (0..total)
            .map(|i| DecisionPair {
                topic: topic.into(),
                valence,
                run_index: i,
                before: d(0, "plan", Resolution::Agreement),
                after: d(0, if i < changed { "other plan" } else { "plan" }, Resolution::Agreement),
            })
            .collect()
    }

    #[test]
    fn rates_pool_within_topic_and_average_across() {
        let mut ps = pairs("A", Valence::Positive, 1, 2);
        ps.extend(pairs("A", Valence::Negative, 2, 2));
        ps.extend(pairs("B", Valence::Positive, 0, 4));
        let r = decision_change_rate(&ps, None).unwrap();
        assert_eq!(r.topics[0].all().rate(), Some(75.0));
        assert_eq!(r.overall_positive, Some(25.0));
        assert_eq!(r.overall_negative, Some(100.0));
        assert_eq!(r.overall_all, Some(37.5));
        assert_eq!(r.categories[&DecisionChangeCategory::DetailsChange], 3);
        let neg = decision_change_rate(&ps, Some(Valence::Negative)).unwrap();
        assert_eq!(neg.topics.len(), 1);
        assert!(r.to_text_table().contains("avg."));
        assert!(r.to_csv().starts_with("topic,pos,neg,all"));
    }

    #[test]
    fn all_no_change_is_zero() {
        let r = decision_change_rate(&pairs("A", Valence::Positive, 0, 5), None).unwrap();
        assert_eq!(r.overall_positive, Some(0.0));
        assert_eq!(r.overall_all, Some(0.0));
        assert!(decision_change_rate(&[], None).is_err());
    }

    #[test]
    fn stats_examples() {
        let one = RunStats {
            step_lengths: vec![38, 40],
            target_counts: vec![8, 9],
        };
        let s = discussion_stats(&[one]).unwrap();
        assert!((s.avg_length - 39.0).abs() < 1e-9);
        assert!((s.target_frequency - 8.5).abs() < 1e-9);
        let two = [
            RunStats {
                step_lengths: vec![40],
                target_counts: vec![0],
            },
            RunStats {
                step_lengths: vec![60],
                target_counts: vec![0],
            },
        ];
        assert_eq!(discussion_stats(&two).unwrap().avg_length, 50.0);
        let with_zero = RunStats {
            step_lengths: vec![0, 10],
            target_counts: vec![0, 0],
        };
        assert_eq!(discussion_stats(&[with_zero]).unwrap().avg_length, 5.0);
    }

    fn arb_choice() -> impl Strategy<Value = StrategyChoice> {
        proptest::collection::vec(any::<bool>(), 10).prop_map(|bits| {
            let p = pool();
            bits.iter()
                .zip(p.strategies())
                .filter(|(b, _)| **b)
                .map(|(_, s)| s.clone())
                .collect()
        })
    }

    fn arb_resolution() -> impl Strategy<Value = Resolution> {
        prop_oneof![
            Just(Resolution::Agreement),
            Just(Resolution::Delegation),
            Just(Resolution::Vote),
            Just(Resolution::SingleAgent),
            Just(Resolution::CompromisedAgreement),
        ]
    }

    proptest! {
        #[test]
        fn accuracy_properties(a in arb_choice(), b in arb_choice()) {
            let p = pool();
            prop_assume!(!a.is_empty() && !b.is_empty());
            let ab = strategy_accuracy(&a, &b, &p).unwrap();
            let ba = strategy_accuracy(&b, &a, &p).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            let same: std::collections::BTreeSet<_> = a.iter().collect();
            let other: std::collections::BTreeSet<_> = b.iter().collect();
            prop_assert_eq!((ab - 1.0).abs() < 1e-12, same == other);
            prop_assert_eq!(ab == 0.0, same.is_disjoint(&other));
        }

        #[test]
        fn classification_is_total(
            rb in arb_resolution(), ra in arb_resolution(),
            sb in "[a-c]{1,3}", sa in "[a-c]{1,3}",
        ) {
            let b = d(2, &sb, rb);
            let a = d(2, &sa, ra);
            let c = classify_decision_change(&b, &a).unwrap();
            prop_assert_eq!(c, classify_decision_change(&b, &a).unwrap());
            prop_assert_eq!(
                c == DecisionChangeCategory::NoChange,
                rb == ra && normalize_summary(&sb) == normalize_summary(&sa)
            );
        }
    }

    fn judge(responses: &[&str]) -> (Engine, std::sync::Arc<crate::gateway::MockBackend>) {
        use crate::gateway::{MockBackend, ScriptMatcher};
        let mock = std::sync::Arc::new(MockBackend::new());
        mock.register_script(ScriptMatcher::Any, responses.iter().map(|s| s.to_string()).collect())
            .unwrap();
        (Engine::new(mock.clone()), mock)
    }

    #[test]
    fn judgment_parses_first_word() {
        assert!(parse_judgment("SAME").unwrap());
        assert!(parse_judgment("  same, both pick the venue").unwrap());
        assert!(!parse_judgment("**DIFFERENT**").unwrap());
        assert!(parse_judgment("maybe").is_err());
    }

    #[test]
    fn judged_classifier_only_asks_about_summary_changes() {
        let (e, mock) = judge(&["SAME"]);
        let a = d(0, "Pick the hall", Resolution::Agreement);
        let b = d(0, "pick the hall.", Resolution::Agreement);
        let c = d(0, "Book the hall for Friday", Resolution::Agreement);
        let v = d(0, "Pick the hall", Resolution::Delegation);
        assert_eq!(classify_decision_change_judged(&a, &b, "venue", &e).unwrap(), DecisionChangeCategory::NoChange);
        assert_eq!(
            classify_decision_change_judged(&a, &v, "venue", &e).unwrap(),
            DecisionChangeCategory::UndecidedChange
        );
        assert!(mock.requests().is_empty());
        assert_eq!(classify_decision_change_judged(&a, &c, "venue", &e).unwrap(), DecisionChangeCategory::NoChange);
        let reqs = mock.requests();
        assert_eq!(reqs.len(), 1);
        assert_eq!(reqs[0].temperature, e.settings.judge_temperature);
        assert_eq!(reqs[0].request_tag, "change_judgment");
    }

    #[test]
    fn judged_classifier_keeps_real_changes_and_retries_once() {
        let (e, mock) = judge(&["unsure", "DIFFERENT"]);
        let a = d(2, "Pick the hall", Resolution::Vote);
        let c = d(2, "Use the park", Resolution::Vote);
        assert_eq!(
            classify_decision_change_judged(&a, &c, "venue", &e).unwrap(),
            DecisionChangeCategory::DetailsChange
        );
        assert_eq!(mock.requests().len(), 2);
        let (e, _) = judge(&["unsure", "still unsure"]);
        assert!(matches!(classify_decision_change_judged(&a, &c, "venue", &e), Err(MetricsError::Judge(_))));
    }

    #[test]
    fn rate_with_custom_classifier_matches_rule_rate() {
        let pair = DecisionPair {
            topic: "t".into(),
            valence: Valence::Positive,
            run_index: 0,
            before: d(0, "a", Resolution::Agreement),
            after: d(0, "b", Resolution::Agreement),
        };
        let pairs = vec![pair];
        let rule = decision_change_rate(&pairs, None).unwrap();
        let same = decision_change_rate_with(&pairs, None, |p| classify_decision_change(&p.before, &p.after)).unwrap();
        assert_eq!(rule, same);
        let judged = decision_change_rate_with(&pairs, None, |_| Ok(DecisionChangeCategory::NoChange)).unwrap();
        assert_ne!(rule, judged);
    }

}
