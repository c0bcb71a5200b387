use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{teacher_sampling, PipelineError, Services};
use crate::domain::{ExecStatus, SamplingConfig, Task, TaskOrigin, TestKind, UnitTest};
use crate::gateway::{EndpointConfig, GatewayError};
use crate::prompting::{
    header_for, parse_generated_task, parse_test_inputs, render_task_generation_prompt, render_test_input_prompt, ChatTurn,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusOptions {
    /// Number of task-generation queries sent to the teacher.
    pub target_count: usize,
    /// Seed instructions shown in each generation prompt.
    pub n_in_context: usize,
    pub rng_seed: u64,
    pub teacher_sampling: SamplingConfig,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            target_count: 0,
            n_in_context: 3,
            rng_seed: 0,
            teacher_sampling: teacher_sampling(),
        }
    }
}

/// Attrition through corpus construction. Every requested task ends up in
/// exactly one bucket: kept, or one of the drop reasons.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_requested: usize,
    pub n_generated: usize,
    pub n_with_test_inputs: usize,
    pub n_kept: usize,
    pub n_generation_failed: usize,
    pub n_parse_failed: usize,
    pub n_duplicates: usize,
    pub n_test_input_failed: usize,
    pub n_execution_failed: usize,
    pub n_flaky: usize,
    pub n_cancelled: usize,
}

impl CorpusStats {
    pub fn accounted(&self) -> usize {
        self.n_kept
            + self.n_generation_failed
            + self.n_parse_failed
            + self.n_duplicates
            + self.n_test_input_failed
            + self.n_execution_failed
            + self.n_flaky
            + self.n_cancelled
    }
}

enum Generated {
    Task(Task),
    Failed(String),
    Unparseable,
}

enum Tested {
    Kept(Task),
    NoInputs,
    ExecutionFailed(String),
    Flaky,
}

fn abort_on_auth(stage: &'static str, e: GatewayError) -> Result<String, PipelineError> {
    if e.is_auth() {
        return Err(PipelineError::Gateway { stage, source: e });
    }
    Ok(e.to_string())
}

fn normalize(instruction: &str) -> String {
    instruction.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Generates tasks with the teacher, attaches executable tests and keeps only
/// tasks whose reference solution runs cleanly and deterministically.
pub async fn build_stand_corpus(
    seed_tasks: &[Task],
    teacher: &EndpointConfig,
    options: &CorpusOptions,
    services: &Services,
) -> Result<(Vec<Task>, CorpusStats), PipelineError> {
    if seed_tasks.is_empty() {
        return Err(PipelineError::Prompt { stage: "gen-corpus", source: crate::prompting::PromptError::EmptySeeds });
    }
    let mut stats = CorpusStats { n_requested: options.target_count, ..Default::default() };
    let n_in_context = options.n_in_context.min(seed_tasks.len());
    let sampling = options.teacher_sampling.with_n(1);

    let generated = services
        .map_ordered((0..options.target_count).collect(), |i| {
            async move {
                let prompt = render_task_generation_prompt(
                    seed_tasks,
                    n_in_context,
                    options.rng_seed.wrapping_add(i as u64),
                    &services.prompts.task_generation,
                )
                .map_err(|source| PipelineError::Prompt { stage: "gen-corpus", source })?;
                let turns = [ChatTurn::user(prompt).expect("template is non-empty")];
                let reply = match services.gateway.chat(teacher, &turns, &sampling).await {
                    Ok(mut r) => r.remove(0),
                    Err(e) => return Ok(Generated::Failed(abort_on_auth("gen-corpus", e)?)),
                };
                Ok(match parse_generated_task(&reply) {
                    Some((instruction, code)) => Generated::Task(Task {
                        id: format!("gen-{i}"),
                        instruction,
                        unit_tests: Vec::new(),
                        canonical_code: Some(code),
                        origin: TaskOrigin::TeacherGenerated,
                    }),
                    None => Generated::Unparseable,
                })
            }
        })
        .await;

    let mut seen = HashSet::new();
    let mut unique = Vec::new();
    for outcome in generated {
        match outcome.transpose()? {
            None => stats.n_cancelled += 1,
            Some(Generated::Failed(why)) => {
                tracing::warn!("task generation failed: {why}");
                stats.n_generation_failed += 1;
            }
            Some(Generated::Unparseable) => stats.n_parse_failed += 1,
            Some(Generated::Task(task)) => {
                stats.n_generated += 1;
                if seen.insert(normalize(&task.instruction)) {
                    unique.push(task);
                } else {
                    stats.n_duplicates += 1;
                }
            }
        }
    }

    let tested = services
        .map_ordered(unique, |task| {
            async move { attach_tests(task, teacher, &sampling, services).await }
        })
        .await;

    let mut corpus = Vec::new();
    for outcome in tested {
        match outcome.transpose()? {
            None => stats.n_cancelled += 1,
            Some(Tested::NoInputs) => stats.n_test_input_failed += 1,
            Some(Tested::ExecutionFailed(why)) => {
                tracing::debug!("dropped task: {why}");
                stats.n_with_test_inputs += 1;
                stats.n_execution_failed += 1;
            }
            Some(Tested::Flaky) => {
                stats.n_with_test_inputs += 1;
                stats.n_flaky += 1;
            }
            Some(Tested::Kept(task)) => {
                stats.n_with_test_inputs += 1;
                stats.n_kept += 1;
                corpus.push(task);
            }
        }
    }
    Ok((corpus, stats))
}

const OUT_MARK: &str = "@@OUT@@";
const END_MARK: &str = "@@END@@";

/// Function name from a header such as `def name(args):`.
fn function_name(header: &str) -> Option<&str> {
    let rest = header.trim_start().strip_prefix("async ").unwrap_or(header.trim_start());
    let rest = rest.strip_prefix("def ")?;
    let name = rest[..rest.find('(')?].trim();
    (!name.is_empty()).then_some(name)
}

async fn attach_tests(
    mut task: Task,
    teacher: &EndpointConfig,
    sampling: &SamplingConfig,
    services: &Services,
) -> Result<Tested, PipelineError> {
    let code = task.canonical_code.clone().expect("generated tasks carry code");
    let prompt = render_test_input_prompt(&task, &services.prompts.test_inputs)
        .map_err(|source| PipelineError::Prompt { stage: "gen-corpus", source })?;
    let turns = [ChatTurn::user(prompt).expect("template is non-empty")];
    let reply = match services.gateway.chat(teacher, &turns, sampling).await {
        Ok(mut r) => r.remove(0),
        Err(e) => {
            tracing::warn!("test input generation failed for {}: {}", task.id, abort_on_auth("gen-corpus", e)?);
            return Ok(Tested::NoInputs);
        }
    };
    let inputs = parse_test_inputs(&reply, &task);
    if inputs.is_empty() {
        return Ok(Tested::NoInputs);
    }
    let Some(name) = header_for(&task).ok().as_deref().and_then(function_name).map(String::from) else {
        return Ok(Tested::ExecutionFailed(format!("{}: no function header", task.id)));
    };

    // Run the reference solution once per input and read the result back
    // through the assertion message.
    let mut assertions = Vec::with_capacity(inputs.len());
    for args in &inputs {
        let call = format!("{name}({args})");
        let probe = UnitTest::new("probe", TestKind::Hidden, format!("assert False, \"{OUT_MARK}\" + repr({call}) + \"{END_MARK}\""));
        let fb = services
            .executor
            .execute(&code, std::slice::from_ref(&probe))
            .await
            .map_err(|source| PipelineError::Exec { stage: "gen-corpus", source })?;
        let captured = (fb.status == ExecStatus::TestFailure)
            .then(|| {
                let start = fb.message.find(OUT_MARK)? + OUT_MARK.len();
                let len = fb.message[start..].find(END_MARK)?;
                Some(fb.message[start..start + len].to_string())
            })
            .flatten();
        let Some(expected) = captured else {
            return Ok(Tested::ExecutionFailed(format!("{}: {call} -> {}: {}", task.id, fb.status, fb.message)));
        };
        assertions.push(format!("assert {call} == {expected}"));
    }
    task.unit_tests = assertions
        .into_iter()
        .enumerate()
        .map(|(j, a)| UnitTest::new(format!("{}/{j}", task.id), TestKind::Hidden, a))
        .collect();

    let first = services
        .executor
        .execute(&code, &task.unit_tests)
        .await
        .map_err(|source| PipelineError::Exec { stage: "gen-corpus", source })?;
    let second = services
        .executor
        .execute(&code, &task.unit_tests)
        .await
        .map_err(|source| PipelineError::Exec { stage: "gen-corpus", source })?;
    Ok(match (first.passed(), second.passed()) {
        (true, true) => Tested::Kept(task),
        (false, false) => Tested::ExecutionFailed(format!("{}: {}: {}", task.id, first.status, first.message)),
        _ => Tested::Flaky,
    })
}
