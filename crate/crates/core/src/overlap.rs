//! Train/test contamination check: tf-idf neighbours for each benchmark task,
//! an LLM judge that labels each pair, and leak statistics over the labels.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{SamplingConfig, Task};
use crate::gateway::{EndpointConfig, GatewayError};
use crate::pipeline::Services;
use crate::prompting::{render_judge_prompt, ChatTurn};

#[derive(Debug, Error)]
pub enum OverlapError {
    #[error("overlap: no judgments to report on")]
    Empty,
    #[error("overlap: {0}")]
    Gateway(#[from] GatewayError),
    #[error("invalid_input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapCategory {
    Leak,
    SomewhatSimilar,
    SomewhatNotSimilar,
    NotRelated,
}

impl OverlapCategory {
    pub const ALL: [OverlapCategory; 4] =
        [Self::Leak, Self::SomewhatSimilar, Self::SomewhatNotSimilar, Self::NotRelated];

    pub fn score(self) -> f64 {
        match self {
            Self::Leak => 1.0,
            Self::SomewhatSimilar => 0.75,
            Self::SomewhatNotSimilar => 0.25,
            Self::NotRelated => 0.0,
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Self::Leak => "leak",
            Self::SomewhatSimilar => "somewhat similar",
            Self::SomewhatNotSimilar => "somewhat not similar",
            Self::NotRelated => "not related",
        }
    }
}

/// One judged (test, train) pair. The score is always the category's score;
/// deserialising a record where they disagree fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawJudgment")]
pub struct OverlapJudgment {
    pub test_task_id: String,
    pub train_task_id: String,
    pub category: OverlapCategory,
    pub score: f64,
    pub rationale: String,
    /// The judge reply named no category; `category` is the fallback.
    #[serde(default)]
    pub parse_failed: bool,
    /// The two task descriptions are identical after whitespace folding.
    #[serde(default)]
    pub exact_match: bool,
}

#[derive(Deserialize)]
struct RawJudgment {
    test_task_id: String,
    train_task_id: String,
    category: OverlapCategory,
    score: f64,
    rationale: String,
    #[serde(default)]
    parse_failed: bool,
    #[serde(default)]
    exact_match: bool,
}

impl TryFrom<RawJudgment> for OverlapJudgment {
    type Error = String;

    fn try_from(r: RawJudgment) -> Result<Self, String> {
        if r.score != r.category.score() {
            return Err(format!("score {} does not match category {:?}", r.score, r.category));
        }
        Ok(Self {
            test_task_id: r.test_task_id,
            train_task_id: r.train_task_id,
            category: r.category,
            score: r.score,
            rationale: r.rationale,
            parse_failed: r.parse_failed,
            exact_match: r.exact_match,
        })
    }
}

impl OverlapJudgment {
    pub fn new(test_task_id: &str, train_task_id: &str, category: OverlapCategory, rationale: impl Into<String>) -> Self {
        Self {
            test_task_id: test_task_id.to_string(),
            train_task_id: train_task_id.to_string(),
            category,
            score: category.score(),
            rationale: rationale.into(),
            parse_failed: false,
            exact_match: false,
        }
    }
}

fn fold(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Category named in a judge reply. A `Category:` line wins; otherwise the
/// last non-empty line must name one. Matching ignores case and punctuation.
pub fn parse_category(reply: &str) -> Option<OverlapCategory> {
    let named = |line: &str| {
        let line = fold(line);
        // Longest phrases first so "somewhat not similar" is not read as
        // "not ..." or "somewhat similar".
        let mut by_len = OverlapCategory::ALL;
        by_len.sort_by_key(|c| std::cmp::Reverse(c.phrase().len()));
        by_len.into_iter().find(|c| {
            let p = c.phrase();
            line == p || line.starts_with(&format!("{p} ")) || line.ends_with(&format!(" {p}")) || line.contains(&format!(" {p} "))
        })
    };
    let lines: Vec<&str> = reply.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let tagged = lines.iter().rev().find_map(|l| {
        let l = l.trim_start_matches(|c: char| !c.is_alphanumeric());
        l.to_lowercase().starts_with("category").then(|| named(&l["category".len()..]))
    });
    match tagged {
        Some(found) => found,
        None => lines.last().and_then(|l| named(l)),
    }
}

/// Tf-idf vectors over lowercased, punctuation-stripped unigrams and bigrams.
pub struct TfIdfIndex<'a> {
    tasks: Vec<&'a Task>,
    idf: HashMap<String, f64>,
    vectors: Vec<BTreeMap<String, f64>>,
}

fn terms(text: &str) -> Vec<String> {
    let folded = fold(text);
    let words: Vec<&str> = folded.split(' ').filter(|w| !w.is_empty()).collect();
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    out.extend(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out
}

impl<'a> TfIdfIndex<'a> {
    pub fn build(corpus: &'a [Task]) -> Self {
        let docs: Vec<Vec<String>> = corpus.iter().map(|t| terms(&t.instruction)).collect();
        let mut df: HashMap<&str, usize> = HashMap::new();
        for doc in &docs {
            for term in doc.iter().map(String::as_str).collect::<HashSet<_>>() {
                *df.entry(term).or_default() += 1;
            }
        }
        // Smoothed idf, so terms present in every document still count.
        let n = docs.len() as f64;
        let idf: HashMap<String, f64> =
            df.into_iter().map(|(t, d)| (t.to_string(), ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)).collect();
        let mut index = Self { tasks: corpus.iter().collect(), idf, vectors: Vec::new() };
        index.vectors = docs.iter().map(|d| index.vectorize(d)).collect();
        index
    }

    // Ordered maps keep floating-point sums, and so tie-breaking, stable.
    fn vectorize(&self, doc: &[String]) -> BTreeMap<String, f64> {
        let mut v: BTreeMap<String, f64> = BTreeMap::new();
        for term in doc {
            if let Some(idf) = self.idf.get(term) {
                *v.entry(term.clone()).or_default() += idf;
            }
        }
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.values_mut().for_each(|x| *x /= norm);
        }
        v
    }

    /// The `top_k` most similar indexed tasks by cosine similarity, best
    /// first, ties broken by task id.
    pub fn query(&self, text: &str, top_k: usize) -> Vec<(&'a Task, f64)> {
        let q = self.vectorize(&terms(text));
        let mut scored: Vec<(&'a Task, f64)> = self
            .tasks
            .iter()
            .zip(&self.vectors)
            .map(|(t, v)| {
                let dot: f64 = q.iter().filter_map(|(term, x)| v.get(term).map(|y| x * y)).sum();
                (*t, dot.min(1.0))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
        scored.truncate(top_k);
        scored
    }
}

pub fn retrieve_neighbors<'a>(test_task: &Task, train_corpus: &'a [Task], top_k: usize) -> Vec<(&'a Task, f64)> {
    TfIdfIndex::build(train_corpus).query(&test_task.instruction, top_k)
}

fn same_text(a: &str, b: &str) -> bool {
    a.split_whitespace().eq(b.split_whitespace())
}

/// Decoding for judge queries.
pub fn judge_sampling() -> SamplingConfig {
    SamplingConfig::new(0.0, 1)
}

pub async fn judge_pair(
    test_task: &Task,
    train_task: &Task,
    judge: &EndpointConfig,
    services: &Services,
) -> Result<OverlapJudgment, OverlapError> {
    let prompt = render_judge_prompt(test_task, train_task, &services.prompts.overlap_judge);
    let turns = [ChatTurn::user(prompt).expect("judge template is non-empty")];
    let reply = services.gateway.chat(judge, &turns, &judge_sampling()).await?.remove(0);
    let parsed = parse_category(&reply);
    let rationale = reply
        .lines()
        .filter(|l| !l.trim().to_lowercase().starts_with("category"))
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string();
    let mut j = OverlapJudgment::new(&test_task.id, &train_task.id, parsed.unwrap_or(OverlapCategory::NotRelated), rationale);
    j.parse_failed = parsed.is_none();
    j.exact_match = same_text(&test_task.instruction, &train_task.instruction);
    Ok(j)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExactMatch {
    pub test_task_id: String,
    pub train_task_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub test_task_id: String,
    pub train_task_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapAnalysis {
    pub judgments: Vec<OverlapJudgment>,
    /// Every identical (test, train) description pair, judged or not.
    pub exact_matches: Vec<ExactMatch>,
    pub skipped: Vec<SkippedPair>,
    pub partial: bool,
}

/// Exact-text check over the whole training corpus, then judging of the
/// `top_k` retrieved neighbours of every test task.
pub async fn analyze_overlap(
    test_corpus: &[Task],
    train_corpus: &[Task],
    judge: &EndpointConfig,
    top_k: usize,
    services: &Services,
) -> Result<OverlapAnalysis, OverlapError> {
    if train_corpus.is_empty() {
        return Err(OverlapError::InvalidInput("training corpus is empty".into()));
    }
    let mut exact_matches = Vec::new();
    for test in test_corpus {
        for train in train_corpus.iter().filter(|t| same_text(&test.instruction, &t.instruction)) {
            exact_matches.push(ExactMatch { test_task_id: test.id.clone(), train_task_id: train.id.clone() });
        }
    }
    if !exact_matches.is_empty() {
        tracing::warn!("{} exact description matches between test and train", exact_matches.len());
    }

    let index = TfIdfIndex::build(train_corpus);
    let pairs: Vec<(&Task, &Task)> = test_corpus
        .iter()
        .flat_map(|test| index.query(&test.instruction, top_k).into_iter().map(move |(train, _)| (test, train)))
        .collect();
    let results = services
        .map_ordered(pairs.clone(), |(test, train)| judge_pair(test, train, judge, services))
        .await;

    let mut out = OverlapAnalysis { judgments: Vec::new(), exact_matches, skipped: Vec::new(), partial: false };
    for ((test, train), result) in pairs.into_iter().zip(results) {
        let reason = match result {
            Some(Ok(j)) => {
                out.judgments.push(j);
                continue;
            }
            Some(Err(OverlapError::Gateway(e))) if e.is_auth() => return Err(OverlapError::Gateway(e)),
            Some(Err(e)) => e.to_string(),
            None => {
                out.partial = true;
                "cancelled".to_string()
            }
        };
        tracing::warn!("skipped judging {} vs {}: {reason}", test.id, train.id);
        out.skipped.push(SkippedPair { test_task_id: test.id.clone(), train_task_id: train.id.clone(), reason });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub n_test_tasks: usize,
    /// Percentage (0 to 100) of test tasks with a leaked neighbour.
    pub percent_leak: f64,
    /// Mean over test tasks of the best neighbour score.
    pub mean_score: f64,
    /// Best neighbour score per test task, in first-seen order.
    pub per_test: Vec<(String, f64)>,
    pub n_parse_failures: usize,
    #[serde(default)]
    pub exact_matches: Vec<ExactMatch>,
}

fn max_scores(judgments: &[OverlapJudgment]) -> Vec<(String, f64)> {
    let mut order = Vec::new();
    let mut best: HashMap<&str, f64> = HashMap::new();
    for j in judgments {
        let slot = best.entry(&j.test_task_id).or_insert_with(|| {
            order.push(j.test_task_id.clone());
            f64::NEG_INFINITY
        });
        *slot = slot.max(j.score);
    }
    order
        .into_iter()
        .map(|id| {
            let s = best[id.as_str()];
            (id, s)
        })
        .collect()
}

/// Leak percentage and mean similarity, scoring each test task by its most
/// similar judged neighbour.
pub fn overlap_report(judgments: &[OverlapJudgment]) -> Result<OverlapReport, OverlapError> {
    let per_test = max_scores(judgments);
    if per_test.is_empty() {
        return Err(OverlapError::Empty);
    }
    let n = per_test.len() as f64;
    let leaked = per_test.iter().filter(|(_, s)| *s == 1.0).count() as f64;
    let exact: std::collections::BTreeSet<ExactMatch> = judgments
        .iter()
        .filter(|j| j.exact_match)
        .map(|j| ExactMatch { test_task_id: j.test_task_id.clone(), train_task_id: j.train_task_id.clone() })
        .collect();
    Ok(OverlapReport {
        n_test_tasks: per_test.len(),
        percent_leak: 100.0 * leaked / n,
        mean_score: per_test.iter().map(|(_, s)| s).sum::<f64>() / n,
        per_test,
        n_parse_failures: judgments.iter().filter(|j| j.parse_failed).count(),
        exact_matches: exact.into_iter().collect(),
    })
}

impl OverlapReport {
    /// Adds exact matches found outside the judged pairs.
    pub fn with_exact_matches(mut self, more: &[ExactMatch]) -> Self {
        self.exact_matches.extend(more.iter().cloned());
        self.exact_matches.sort();
        self.exact_matches.dedup();
        self
    }
}

/// The benchmark without tasks whose best neighbour was judged a leak.
/// Survivors keep their order; tasks without judgments are kept.
pub fn emit_cleaned_benchmark(benchmark: &[Task], judgments: &[OverlapJudgment]) -> Vec<Task> {
    let best: BTreeMap<String, f64> = max_scores(judgments).into_iter().collect();
    let unjudged = benchmark.iter().filter(|t| !best.contains_key(&t.id)).count();
    if unjudged > 0 {
        tracing::warn!("{unjudged} benchmark tasks have no judgments and are kept");
    }
    benchmark.iter().filter(|t| best.get(&t.id).is_none_or(|s| *s < 1.0)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_scores() {
        let scores: Vec<f64> = OverlapCategory::ALL.iter().map(|c| c.score()).collect();
        assert_eq!(scores, [1.0, 0.75, 0.25, 0.0]);
    }

    #[test]
    fn parses_categories() {
        assert_eq!(parse_category("leak"), Some(OverlapCategory::Leak));
        assert_eq!(parse_category("Somewhat Similar"), Some(OverlapCategory::SomewhatSimilar));
        assert_eq!(parse_category("Same idea.\nCategory: somewhat NOT similar."), Some(OverlapCategory::SomewhatNotSimilar));
        assert_eq!(parse_category("They could leak.\nCategory: not_related"), Some(OverlapCategory::NotRelated));
        assert_eq!(parse_category("**Category:** Leak"), Some(OverlapCategory::Leak));
        assert_eq!(parse_category("no idea"), None);
        assert_eq!(parse_category(""), None);
        assert_eq!(parse_category("Category: unclear"), None);
    }

    #[test]
    fn term_extraction() {
        assert_eq!(terms("Sum, two lists!"), ["sum", "two", "lists", "sum two", "two lists"]);
    }

    #[test]
    fn mismatched_score_is_rejected() {
        let j = OverlapJudgment::new("a", "b", OverlapCategory::SomewhatSimilar, "r");
        let mut v = serde_json::to_value(&j).unwrap();
        assert_eq!(serde_json::from_value::<OverlapJudgment>(v.clone()).unwrap(), j);
        v["score"] = serde_json::json!(0.5);
        assert!(serde_json::from_value::<OverlapJudgment>(v).is_err());
    }
}
