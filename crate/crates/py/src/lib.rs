//! Python bindings. Structured values cross the boundary as JSON text so the
//! Python side needs nothing beyond the standard library.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

use persd_core::domain::{Attempt, ExecutionFeedback, RefinementRecord, Task, Variant};
use persd_core::evaluator;
use persd_core::io::to_jsonl;
use persd_core::overlap::{self, OverlapCategory, OverlapJudgment};
use persd_core::pipeline;
use persd_core::prompting::{self, RefinementTemplate, SeenMode};

fn parse<T: DeserializeOwned>(what: &str, text: &str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| format!("{what}: {e}"))
}

fn parse_lines<T: DeserializeOwned>(what: &str, text: &str) -> Result<Vec<T>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{what} line {}: {e}", i + 1)))
        .collect()
}

#[derive(serde::Deserialize)]
struct AttemptLine {
    attempt: Attempt,
    feedback: ExecutionFeedback,
}

fn seen_mode(name: &str) -> Result<SeenMode, String> {
    parse("mode", &format!("{name:?}"))
}

pub fn seen_tests_json(task_json: &str, mode: &str) -> Result<String, String> {
    let task: Task = parse("task", task_json)?;
    let tests = prompting::extract_seen_tests(&task, seen_mode(mode)?);
    Ok(serde_json::to_string(&tests).expect("serialisable"))
}

pub fn refinement_instruction(task_json: &str, code: &str, feedback_json: &str) -> Result<String, String> {
    let task: Task = parse("task", task_json)?;
    let feedback: ExecutionFeedback = parse("feedback", feedback_json)?;
    prompting::render_refinement_instruction(&task, code, &feedback, &RefinementTemplate::builtin())
        .map_err(|e| e.to_string())
}

pub fn emit(variant: &str, corpus: &str, attempts: &str, refinements: &str) -> Result<String, String> {
    let variant: Variant = variant.parse()?;
    let corpus: Vec<Task> = parse_lines("corpus", corpus)?;
    let attempts: Vec<(Attempt, ExecutionFeedback)> =
        parse_lines::<AttemptLine>("attempts", attempts)?.into_iter().map(|l| (l.attempt, l.feedback)).collect();
    let refinements: Vec<RefinementRecord> = parse_lines("refinements", refinements)?;
    let records = pipeline::emit_variant(variant, &corpus, &attempts, &refinements).map_err(|e| e.to_string())?;
    Ok(to_jsonl(&records))
}

pub fn report(judgments: &str) -> Result<(f64, f64), String> {
    let judgments: Vec<OverlapJudgment> = parse_lines("judgments", judgments)?;
    let r = overlap::overlap_report(&judgments).map_err(|e| e.to_string())?;
    Ok((r.percent_leak, r.mean_score))
}

pub fn neighbors(query: &str, train: &str, top_k: usize) -> Result<Vec<(String, f64)>, String> {
    let train: Vec<Task> = parse_lines("train", train)?;
    let index = overlap::TfIdfIndex::build(&train);
    Ok(index.query(query, top_k).into_iter().map(|(t, s)| (t.id.clone(), s)).collect())
}

pub fn score_of(category: &str) -> Result<f64, String> {
    let c: OverlapCategory = parse("category", &format!("{:?}", category.replace(' ', "_")))?;
    Ok(c.score())
}

fn value_error(e: String) -> PyErr {
    PyValueError::new_err(e)
}

/// Unbiased pass@k from n samples with c correct.
#[pyfunction]
fn pass_at_k(n: u64, c: u64, k: u64) -> PyResult<f64> {
    evaluator::pass_at_k(n, c, k).map_err(|e| value_error(e.to_string()))
}

/// Function header of a task instruction, or None.
#[pyfunction]
fn function_header(instruction: &str) -> Option<String> {
    prompting::extract_function_header(&Task {
        id: String::new(),
        instruction: instruction.to_string(),
        unit_tests: Vec::new(),
        canonical_code: None,
        origin: persd_core::domain::TaskOrigin::Benchmark,
    })
    .ok()
}

/// Seen tests of a task (JSON) as a JSON list.
#[pyfunction]
#[pyo3(signature = (task_json, mode = "docstring_examples"))]
fn extract_seen_tests(task_json: &str, mode: &str) -> PyResult<String> {
    seen_tests_json(task_json, mode).map_err(value_error)
}

/// Refinement instruction for a failed attempt.
#[pyfunction]
fn render_refinement_instruction(task_json: &str, code: &str, feedback_json: &str) -> PyResult<String> {
    refinement_instruction(task_json, code, feedback_json).map_err(value_error)
}

/// Dataset records of one variant as JSONL.
#[pyfunction]
fn emit_variant(variant: &str, corpus_jsonl: &str, attempts_jsonl: &str, refinements_jsonl: &str) -> PyResult<String> {
    emit(variant, corpus_jsonl, attempts_jsonl, refinements_jsonl).map_err(value_error)
}

/// (percent_leak, mean_score) over judgments given as JSONL.
#[pyfunction]
fn overlap_report(judgments_jsonl: &str) -> PyResult<(f64, f64)> {
    report(judgments_jsonl).map_err(value_error)
}

/// Closest training tasks to `query` as (task_id, cosine) pairs.
#[pyfunction]
#[pyo3(signature = (query, train_jsonl, top_k = 2))]
fn retrieve_neighbors(query: &str, train_jsonl: &str, top_k: usize) -> PyResult<Vec<(String, f64)>> {
    neighbors(query, train_jsonl, top_k).map_err(value_error)
}

/// Similarity score of a judge category such as "somewhat similar".
#[pyfunction]
fn category_score(category: &str) -> PyResult<f64> {
    score_of(category).map_err(value_error)
}

#[pymodule]
fn persd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(pass_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(function_header, m)?)?;
    m.add_function(wrap_pyfunction!(extract_seen_tests, m)?)?;
    m.add_function(wrap_pyfunction!(render_refinement_instruction, m)?)?;
    m.add_function(wrap_pyfunction!(emit_variant, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_report, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve_neighbors, m)?)?;
    m.add_function(wrap_pyfunction!(category_score, m)?)?;
    Ok(())
}
