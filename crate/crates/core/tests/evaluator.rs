mod common;

use std::sync::Arc;

use common::scenario::{self, broken, canonical, corpus, fenced, repaired, task_index};
use persd_core::domain::{AttemptStep, ExecStatus, Task};
use persd_core::evaluator::{
    corpus_hash, pass_at_k, run_inference, run_two_step, EvalConfig, EvalError, EvalReport,
};
use persd_core::gateway::{ChatRequest, EndpointConfig, MockBackend};
use persd_core::prompting::{RefinementTemplate, SeenMode};
use proptest::prelude::*;

/// Fraction of k-subsets of n samples (c of them correct) that contain a
/// correct sample, by enumerating every subset.
fn brute_force(n: u32, c: u32, k: u32) -> f64 {
    let (mut hit, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() != k {
            continue;
        }
        total += 1;
        // Samples 0..c are the correct ones.
        if mask & ((1 << c) - 1) != 0 {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

proptest! {
    #[test]
    fn pass_at_k_matches_subset_enumeration((n, c, k) in (1u32..=8).prop_flat_map(|n| (Just(n), 0..=n, 1..=n))) {
        let got = pass_at_k(n as u64, c as u64, k as u64).unwrap();
        prop_assert!((got - brute_force(n, c, k)).abs() < 1e-12, "n={n} c={c} k={k}: {got}");
    }

    #[test]
    fn pass_at_k_is_monotone((n, c, k) in (2u64..=200).prop_flat_map(|n| (Just(n), 0..n, 1..n))) {
        let p = pass_at_k(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= p);
        prop_assert!(pass_at_k(n, c, k + 1).unwrap() >= p);
    }
}

#[test]
fn pass_at_k_reference_points() {
    assert!((pass_at_k(5, 2, 3).unwrap() - 0.9).abs() < 1e-12);
    assert!((pass_at_k(4, 2, 2).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert!(matches!(pass_at_k(3, 5, 1), Err(EvalError::Domain { .. })));
    assert!(pass_at_k(3, 1, 4).unwrap_err().to_string().starts_with("domain_error"));
}

fn is_refinement_prompt(request: &ChatRequest) -> bool {
    request.turns[0].content.contains("### Previous attempt")
}

/// Student that answers tasks 0..12 wrongly and repairs tasks below
/// `repairs` when shown its own failure.
fn student_backend(repairs: usize) -> MockBackend {
    MockBackend::default().with_responder(move |_: &EndpointConfig, request: &ChatRequest| {
        let i = task_index(&request.turns[0].content)?;
        let code = if is_refinement_prompt(request) {
            if i < repairs {
                repaired(i)
            } else {
                broken(i)
            }
        } else if i < scenario::N_STUDENT_FAILS {
            broken(i)
        } else {
            canonical(i)
        };
        Some(vec![fenced(&code)])
    })
}

fn config(n: u32, k: Vec<u32>) -> EvalConfig {
    EvalConfig { n_samples: n, k_values: k, ..EvalConfig::pass1() }
}

fn student() -> EndpointConfig {
    scenario::student()
}

#[tokio::test]
async fn one_step_scores_hidden_tests() {
    let services = scenario::services_with(Arc::new(student_backend(0)));
    let run = run_inference(&corpus(), &student(), &config(4, vec![1, 4]), &services).await.unwrap();
    let r = &run.report;
    assert_eq!(r.tasks.len(), scenario::N_TASKS);
    assert_eq!(run.samples.len(), 4 * scenario::N_TASKS);
    for (i, t) in r.tasks.iter().enumerate() {
        let expected = if i < scenario::N_STUDENT_FAILS { 0 } else { 4 };
        assert_eq!((t.n, t.c_step1, t.c_step2), (4, expected, None), "{}", t.task_id);
    }
    let solved = (scenario::N_TASKS - scenario::N_STUDENT_FAILS) as f64 / scenario::N_TASKS as f64;
    assert!((r.pass_at_k_step1[&1] - solved).abs() < 1e-12);
    assert!((r.pass_at_k_step1[&4] - solved).abs() < 1e-12);
    assert!(r.pass_at_k_step2.is_none());
    assert_eq!(r.corpus_hash, corpus_hash(&corpus()));
    assert!(run.samples.iter().all(|s| s.step2.is_none() && s.step1.step == AttemptStep::One));
}

#[tokio::test]
async fn mixed_samples_use_the_unbiased_estimator() {
    // Task 0 alternates right and wrong answers, so c = 2 of n = 4.
    let backend = MockBackend::default().with_responder(|_: &EndpointConfig, request: &ChatRequest| {
        let i = task_index(&request.turns[0].content)?;
        Some(vec![fenced(&canonical(i)), fenced(&broken(i))])
    });
    let services = scenario::services_with(Arc::new(backend));
    let tasks = &corpus()[..1];
    let run = run_inference(tasks, &student(), &config(4, vec![1, 2, 3]), &services).await.unwrap();
    assert_eq!(run.report.tasks[0].c_step1, 2);
    let p = &run.report.pass_at_k_step1;
    assert!((p[&1] - 0.5).abs() < 1e-12);
    assert!((p[&2] - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(p[&3], 1.0);
}

#[tokio::test]
async fn two_step_refines_only_samples_failing_seen_tests() {
    let backend = Arc::new(student_backend(6));
    let services = scenario::services_with(backend.clone());
    let n = 3;
    let run = run_two_step(&corpus(), &student(), &config(n, vec![1]), &RefinementTemplate::builtin(), &services)
        .await
        .unwrap();

    let fails_seen = |i: usize| i < scenario::N_STUDENT_FAILS;
    let mut refinement_queries = 0;
    for s in &run.samples {
        let i = task_index(&s.step1.code).unwrap();
        let step2 = s.step2.as_ref().unwrap();
        assert_eq!(step2.step, AttemptStep::Two);
        assert_eq!(step2.parent_id.as_deref(), Some(s.step1.id.as_str()));
        if fails_seen(i) {
            refinement_queries += 1;
            assert_eq!(s.seen_status, Some(ExecStatus::TestFailure));
        } else {
            assert_eq!(s.seen_status, Some(ExecStatus::Passed));
            assert_eq!(step2.code, s.step1.code, "passing sample must be reused verbatim");
            assert_eq!(s.step2_status, Some(s.step1_status));
        }
    }
    assert_eq!(refinement_queries, scenario::N_STUDENT_FAILS * n as usize);
    assert_eq!(backend.calls(), scenario::N_TASKS + refinement_queries);

    let c2: Vec<u32> = run.report.tasks.iter().map(|t| t.c_step2.unwrap()).collect();
    let expected: Vec<u32> = (0..scenario::N_TASKS)
        .map(|i| if !(6..scenario::N_STUDENT_FAILS).contains(&i) { n } else { 0 })
        .collect();
    assert_eq!(c2, expected);
    assert!((run.report.pass_at_k_step1[&1] - 0.4).abs() < 1e-12);
    assert!((run.report.pass_at_k_step2.as_ref().unwrap()[&1] - 0.7).abs() < 1e-12);
    assert!(run.report.config.two_step);
}

#[tokio::test]
async fn oracle_refiner_solves_everything_in_step_two() {
    let services = scenario::services_with(Arc::new(student_backend(scenario::N_TASKS)));
    let run = run_two_step(&corpus(), &student(), &config(5, vec![1]), &RefinementTemplate::builtin(), &services)
        .await
        .unwrap();
    for t in &run.report.tasks {
        assert!(t.c_step2.unwrap() >= t.c_step1, "{}", t.task_id);
    }
    assert_eq!(run.report.pass_at_k_step2.unwrap()[&1], 1.0);
}

/// A seen test that the wrong answer happens to pass: the sample is carried
/// over unchanged even though it fails the hidden tests.
#[tokio::test]
async fn seen_pass_hidden_fail_is_not_refined() {
    let backend = MockBackend::default().with_responder(|_: &EndpointConfig, request: &ChatRequest| {
        assert!(!is_refinement_prompt(request));
        Some(vec![fenced("def scale_1(x):\n    return x + 3")])
    });
    let services = scenario::services_with(Arc::new(backend));
    let run = run_two_step(&corpus()[1..2], &student(), &config(2, vec![1]), &RefinementTemplate::builtin(), &services)
        .await
        .unwrap();
    assert!(run.samples.iter().all(|s| s.seen_status == Some(ExecStatus::Passed)));
    assert_eq!(run.report.tasks[0].c_step2, Some(0));
}

#[tokio::test]
async fn tasks_without_seen_tests_carry_step_one_over() {
    let mut tasks = corpus()[..3].to_vec();
    for t in &mut tasks {
        let cut = t.instruction.find("    >>>").unwrap();
        t.instruction.truncate(cut);
    }
    let services = scenario::services_with(Arc::new(student_backend(6)));
    let run = run_two_step(&tasks, &student(), &config(2, vec![1]), &RefinementTemplate::builtin(), &services)
        .await
        .unwrap();
    assert_eq!(run.report.warnings.reused_without_seen_tests, 6);
    assert!(run.samples.iter().all(|s| s.step2.as_ref().unwrap().code == s.step1.code && s.seen_status.is_none()));
    assert_eq!(run.report.pass_at_k_step1, run.report.pass_at_k_step2.unwrap());
}

#[tokio::test]
async fn all_seen_mode_uses_every_test() {
    let mut tasks = corpus()[..2].to_vec();
    for t in &mut tasks {
        let cut = t.instruction.find("    >>>").unwrap();
        t.instruction.truncate(cut);
    }
    let services = scenario::services_with(Arc::new(student_backend(6)));
    let cfg = EvalConfig { seen_mode: SeenMode::AllSeen, ..config(1, vec![1]) };
    let run = run_two_step(&tasks, &student(), &cfg, &RefinementTemplate::builtin(), &services).await.unwrap();
    assert_eq!(run.report.warnings.reused_without_seen_tests, 0);
    assert_eq!(run.report.tasks.iter().map(|t| t.c_step2).collect::<Vec<_>>(), [Some(1), Some(1)]);
}

#[tokio::test]
async fn endpoint_failures_count_as_incorrect() {
    let backend = MockBackend::default().with_responder(|_: &EndpointConfig, request: &ChatRequest| {
        let i = task_index(&request.turns[0].content)?;
        (i != 13).then(|| vec![fenced(&canonical(i))])
    });
    let services = scenario::services_with(Arc::new(backend));
    let tasks: Vec<Task> = corpus()[12..15].to_vec();
    let run = run_inference(&tasks, &student(), &config(5, vec![1]), &services).await.unwrap();
    let c: Vec<u32> = run.report.tasks.iter().map(|t| t.c_step1).collect();
    assert_eq!(c, [5, 0, 5]);
    assert_eq!(run.report.warnings.endpoint_failures, 5);
    assert!((run.report.pass_at_k_step1[&1] - 2.0 / 3.0).abs() < 1e-12);
}

#[tokio::test]
async fn replies_without_code_count_as_incorrect() {
    let services = scenario::services_with(Arc::new(MockBackend::default().with_default("```python\n```")));
    let run = run_inference(&corpus()[..2], &student(), &config(2, vec![1]), &services).await.unwrap();
    assert_eq!(run.report.warnings.empty_code, 4);
    assert_eq!(run.report.pass_at_k_step1[&1], 0.0);

    // Prose is run as code and fails like any other wrong answer.
    let services = scenario::services_with(Arc::new(MockBackend::default().with_default("I cannot help with that.")));
    let run = run_inference(&corpus()[..2], &student(), &config(2, vec![1]), &services).await.unwrap();
    assert!(run.samples.iter().all(|s| s.step1_status == ExecStatus::CompileError));
    assert_eq!(run.report.pass_at_k_step1[&1], 0.0);
}

#[tokio::test]
async fn rejects_bad_inputs() {
    let services = scenario::services();
    let err = run_inference(&corpus(), &student(), &config(2, vec![5]), &services).await.unwrap_err();
    assert!(err.to_string().starts_with("config_invalid"));

    let mut tasks = corpus()[..1].to_vec();
    tasks[0].unit_tests.clear();
    let err = run_inference(&tasks, &student(), &config(2, vec![1]), &services).await.unwrap_err();
    assert!(matches!(err, EvalError::NoHiddenTests(id) if id == "toy-00"));

    assert!(EvalConfig::profile("pass3").unwrap_err().to_string().starts_with("config_invalid"));
}

#[tokio::test]
async fn report_round_trips_through_json() {
    let services = scenario::services_with(Arc::new(student_backend(0)));
    let run = run_inference(&corpus()[..4], &student(), &config(2, vec![1, 2]), &services).await.unwrap();
    let json = serde_json::to_string(&run.report).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, run.report);
}
