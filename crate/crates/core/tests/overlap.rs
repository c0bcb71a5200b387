mod common;

use std::sync::Arc;

use common::{assert_golden, scenario};
use persd_core::domain::{Task, TaskOrigin};
use persd_core::gateway::{ChatRequest, EndpointConfig, MockBackend};
use persd_core::overlap::{
    analyze_overlap, emit_cleaned_benchmark, judge_pair, overlap_report, retrieve_neighbors, OverlapCategory,
    OverlapError, OverlapJudgment,
};
use persd_core::prompting::{render_judge_prompt, PromptSet};
use proptest::prelude::*;

fn task(id: &str, instruction: &str) -> Task {
    Task {
        id: id.into(),
        instruction: instruction.into(),
        unit_tests: Vec::new(),
        canonical_code: None,
        origin: TaskOrigin::Benchmark,
    }
}

fn judgment(test: &str, train: &str, category: OverlapCategory) -> OverlapJudgment {
    OverlapJudgment::new(test, train, category, "")
}

#[test]
fn category_mapping_is_exact() {
    use OverlapCategory::*;
    let mapped: Vec<(OverlapCategory, f64)> = OverlapCategory::ALL.iter().map(|c| (*c, c.score())).collect();
    assert_eq!(mapped, [(Leak, 1.0), (SomewhatSimilar, 0.75), (SomewhatNotSimilar, 0.25), (NotRelated, 0.0)]);
    for c in OverlapCategory::ALL {
        assert_eq!(judgment("t", "r", c).score, c.score());
    }
}

#[test]
fn four_task_report() {
    use OverlapCategory::*;
    // Each test task has two judged neighbours; its score is the better one.
    let judgments = [
        judgment("t0", "a", Leak),
        judgment("t0", "b", NotRelated),
        judgment("t1", "a", SomewhatNotSimilar),
        judgment("t1", "c", SomewhatSimilar),
        judgment("t2", "b", NotRelated),
        judgment("t2", "c", NotRelated),
        judgment("t3", "a", SomewhatNotSimilar),
        judgment("t3", "d", NotRelated),
    ];
    let r = overlap_report(&judgments).unwrap();
    assert_eq!(r.n_test_tasks, 4);
    assert_eq!(r.percent_leak, 25.0);
    assert_eq!(r.mean_score, 0.5);
    let best: Vec<f64> = r.per_test.iter().map(|(_, s)| *s).collect();
    assert_eq!(best, [1.0, 0.75, 0.0, 0.25]);
}

#[test]
fn report_edge_cases() {
    let none = [judgment("t0", "a", OverlapCategory::NotRelated), judgment("t1", "a", OverlapCategory::NotRelated)];
    let r = overlap_report(&none).unwrap();
    assert_eq!((r.percent_leak, r.mean_score), (0.0, 0.0));
    assert!(matches!(overlap_report(&[]), Err(OverlapError::Empty)));
}

fn benchmark(n: usize) -> Vec<Task> {
    (0..n).map(|i| task(&format!("bench/{i:03}"), &format!("Task number {i}."))).collect()
}

#[test]
fn cleaning_removes_exactly_the_leaked_tasks() {
    let bench = benchmark(306);
    // Tasks 3, 8, 13, ... are leaked: 55 in total, spread through the corpus.
    let leaked: Vec<usize> = (0..55).map(|i| i * 5 + 3).collect();
    let judgments: Vec<OverlapJudgment> = bench
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let best = if leaked.contains(&i) { OverlapCategory::Leak } else { OverlapCategory::SomewhatSimilar };
            [judgment(&t.id, "train/a", OverlapCategory::NotRelated), judgment(&t.id, "train/b", best)]
        })
        .collect();
    let cleaned = emit_cleaned_benchmark(&bench, &judgments);
    assert_eq!(cleaned.len(), 251);
    let expected: Vec<&Task> = bench.iter().enumerate().filter(|(i, _)| !leaked.contains(i)).map(|(_, t)| t).collect();
    assert_eq!(cleaned.iter().collect::<Vec<_>>(), expected);

    let r = overlap_report(&judgments).unwrap();
    assert!((r.percent_leak - 100.0 * 55.0 / 306.0).abs() < 1e-12);
}

#[test]
fn cleaning_extremes() {
    let bench = benchmark(5);
    let none: Vec<_> = bench.iter().map(|t| judgment(&t.id, "x", OverlapCategory::SomewhatSimilar)).collect();
    assert_eq!(emit_cleaned_benchmark(&bench, &none), bench);
    let all: Vec<_> = bench.iter().map(|t| judgment(&t.id, "x", OverlapCategory::Leak)).collect();
    assert!(emit_cleaned_benchmark(&bench, &all).is_empty());
}

#[test]
fn retrieval_examples() {
    let train = vec![
        task("b", "Write a function to reverse a string."),
        task("a", "Write a function to reverse a string."),
        task("c", "Compute the sum of a list of integers."),
    ];
    let hits = retrieve_neighbors(&task("q", "write a function to REVERSE a string"), &train, 2);
    let ids: Vec<&str> = hits.iter().map(|(t, _)| t.id.as_str()).collect();
    assert_eq!(ids, ["a", "b"], "ties go to the smaller id");
    assert!((hits[0].1 - 1.0).abs() < 1e-12);
    assert_eq!(hits[0].1, hits[1].1);

    let one = retrieve_neighbors(&task("q", "reverse"), &train[2..], 2);
    assert_eq!(one.len(), 1);

    let disjoint = retrieve_neighbors(&task("q", "quaternion slerp"), &train, 3);
    assert!(disjoint.iter().all(|(_, s)| *s == 0.0));
    let ids: Vec<&str> = disjoint.iter().map(|(t, _)| t.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

#[test]
fn retrieval_prefers_shared_bigrams() {
    // Same unigrams; only "y" also has the query's word pairs.
    let train = vec![task("x", "the reverse of list"), task("y", "reverse the list of items")];
    let hits = retrieve_neighbors(&task("q", "reverse the list"), &train, 2);
    assert_eq!(hits[0].0.id, "y");
    assert!(hits[0].1 > hits[1].1);
}

#[test]
fn judge_prompt_golden() {
    let prompt = render_judge_prompt(
        &task("test/1", "Write a function to find the shared elements of two lists."),
        &task("train/9", "Return the items that appear in both input lists."),
        &PromptSet::builtin().overlap_judge,
    );
    assert_golden("overlap_judge.txt", &prompt);
}

fn judge_services(reply: &'static str) -> persd_core::pipeline::Services {
    scenario::services_with(Arc::new(MockBackend::default().with_default(reply)))
}

#[tokio::test]
async fn judge_replies_map_to_scores() {
    let (a, b) = (task("t", "Add two numbers."), task("r", "Sum two integers."));
    let judge = EndpointConfig::mock("judge");
    for (reply, category, flagged) in [
        ("leak", OverlapCategory::Leak, false),
        ("Somewhat Similar", OverlapCategory::SomewhatSimilar, false),
        ("Both add numbers.\nCategory: Leak", OverlapCategory::Leak, false),
        ("¯\\_(ツ)_/¯ banana", OverlapCategory::NotRelated, true),
    ] {
        let j = judge_pair(&a, &b, &judge, &judge_services(reply)).await.unwrap();
        assert_eq!((j.category, j.score, j.parse_failed), (category, category.score(), flagged), "{reply}");
    }
    let j = judge_pair(&a, &b, &judge, &judge_services("Both add numbers.\nCategory: Leak")).await.unwrap();
    assert_eq!(j.rationale, "Both add numbers.");
}

#[tokio::test]
async fn exact_matches_are_reported_whatever_the_judge_says() {
    let test = vec![task("test/0", "Reverse a string."), task("test/1", "Add two numbers.")];
    let train = vec![task("train/0", "Reverse  a\nstring."), task("train/1", "Multiply matrices."), task("train/2", "Parse a date.")];
    let services = judge_services("Category: not related");
    let analysis = analyze_overlap(&test, &train, &EndpointConfig::mock("judge"), 2, &services).await.unwrap();
    assert_eq!(analysis.judgments.len(), 4);
    assert_eq!(analysis.exact_matches.len(), 1);
    assert_eq!(analysis.exact_matches[0].train_task_id, "train/0");
    let report = overlap_report(&analysis.judgments).unwrap().with_exact_matches(&analysis.exact_matches);
    assert_eq!(report.percent_leak, 0.0);
    assert_eq!(report.exact_matches, analysis.exact_matches);
}

#[tokio::test]
async fn judging_follows_retrieval() {
    // The judge calls a pair a leak only when the two descriptions share
    // their first word.
    let backend = MockBackend::default().with_responder(|_: &EndpointConfig, request: &ChatRequest| {
        let prompt = &request.turns[0].content;
        let tail = &prompt[prompt.rfind("TEST: ")?..];
        let first = |tag: &str| tail[tail.find(tag)? + tag.len()..].split_whitespace().next().map(str::to_string);
        let same = first("TEST: ")? == first("TRAIN: ")?;
        Some(vec![format!("Category: {}", if same { "leak" } else { "not related" })])
    });
    let services = scenario::services_with(Arc::new(backend));
    let test = vec![task("t0", "Reverse the words in a sentence."), task("t1", "Count primes below n.")];
    let train = vec![
        task("r0", "Reverse the words of a sentence quickly."),
        task("r1", "Sort the words in a sentence."),
        task("r2", "Find primes below n."),
    ];
    let analysis = analyze_overlap(&test, &train, &EndpointConfig::mock("judge"), 2, &services).await.unwrap();
    let pairs: Vec<(&str, &str)> =
        analysis.judgments.iter().map(|j| (j.test_task_id.as_str(), j.train_task_id.as_str())).collect();
    let retrieved: Vec<(&str, &str)> = test
        .iter()
        .flat_map(|t| retrieve_neighbors(t, &train, 2).into_iter().map(move |(r, _)| (t.id.as_str(), r.id.as_str())))
        .collect();
    assert_eq!(pairs, retrieved);
    assert!(pairs.contains(&("t0", "r0")));
    let r = overlap_report(&analysis.judgments).unwrap();
    assert_eq!((r.percent_leak, r.mean_score), (50.0, 0.5));
    assert_eq!(emit_cleaned_benchmark(&test, &analysis.judgments), test[1..]);
}

#[tokio::test]
async fn empty_training_corpus_is_rejected() {
    let err = analyze_overlap(&benchmark(1), &[], &EndpointConfig::mock("judge"), 2, &judge_services("leak")).await;
    assert!(matches!(err, Err(OverlapError::InvalidInput(_))));
}

fn category() -> impl Strategy<Value = OverlapCategory> {
    prop::sample::select(OverlapCategory::ALL.to_vec())
}

proptest! {
    #[test]
    fn report_and_cleaning_agree(cats in prop::collection::vec((0usize..12, category()), 1..80)) {
        let judgments: Vec<OverlapJudgment> =
            cats.iter().enumerate().map(|(i, (t, c))| judgment(&format!("bench/{t:03}"), &format!("train/{i}"), *c)).collect();
        let r = overlap_report(&judgments).unwrap();
        prop_assert!((0.0..=100.0).contains(&r.percent_leak));
        prop_assert!((0.0..=1.0).contains(&r.mean_score));
        prop_assert!(r.per_test.iter().all(|(_, s)| [0.0, 0.25, 0.75, 1.0].contains(s)));
        let bench = benchmark(12);
        let cleaned = emit_cleaned_benchmark(&bench, &judgments);
        let leaked = r.per_test.iter().filter(|(_, s)| *s == 1.0).count();
        prop_assert_eq!(cleaned.len(), bench.len() - leaked);
        prop_assert!((r.percent_leak - 100.0 * leaked as f64 / r.n_test_tasks as f64).abs() < 1e-9);
    }
}
