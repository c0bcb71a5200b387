use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{teacher_sampling, variants::emit_all_variants, PipelineError, Services};
use crate::domain::{
    Attempt, AttemptStep, DatasetRecord, ExecutionFeedback, RefinementRecord, SamplingConfig, Task, Variant,
};
use crate::gateway::EndpointConfig;
use crate::prompting::{parse_code_block, render_refinement_instruction, render_teacher_refinement_chat, ChatTurn};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTask {
    pub task_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttemptsOutput {
    pub attempts: Vec<(Attempt, ExecutionFeedback)>,
    pub skipped: Vec<SkippedTask>,
    pub partial: bool,
}

/// Queries the student once per task (for `n_samples` completions) and runs
/// every completion against all of the task's tests.
pub async fn collect_student_attempts(
    corpus: &[Task],
    student: &EndpointConfig,
    sampling: &SamplingConfig,
    round_index: u32,
    services: &Services,
) -> Result<AttemptsOutput, PipelineError> {
    if let Some(t) = corpus.iter().find(|t| t.unit_tests.is_empty()) {
        return Err(PipelineError::InvalidInput(format!("task {} has no unit tests", t.id)));
    }
    let results = services
        .map_ordered(corpus.iter().collect(), |task| async move {
            let turns = [ChatTurn::user(task.instruction.clone())
                .map_err(|source| PipelineError::Prompt { stage: "attempts", source })?];
            let replies = match services.gateway.chat(student, &turns, sampling).await {
                Ok(r) => r,
                Err(e) if e.is_auth() => return Err(PipelineError::Gateway { stage: "attempts", source: e }),
                Err(e) => return Ok(Err(SkippedTask { task_id: task.id.clone(), reason: e.to_string() })),
            };
            let mut pairs = Vec::with_capacity(replies.len());
            for (i, reply) in replies.iter().enumerate() {
                let attempt = Attempt {
                    id: format!("{}/r{round_index}/a{i}", task.id),
                    task_id: task.id.clone(),
                    code: parse_code_block(reply),
                    producer: student.name.clone(),
                    sampling: *sampling,
                    index: i as u32,
                    step: AttemptStep::One,
                    parent_id: None,
                };
                let feedback = services
                    .executor
                    .execute(&attempt.code, &task.unit_tests)
                    .await
                    .map_err(|source| PipelineError::Exec { stage: "attempts", source })?;
                pairs.push((attempt, feedback));
            }
            Ok(Ok(pairs))
        })
        .await;

    let mut out = AttemptsOutput::default();
    for (task, result) in corpus.iter().zip(results) {
        match result {
            None => {
                out.partial = true;
                out.skipped.push(SkippedTask { task_id: task.id.clone(), reason: "cancelled".into() });
            }
            Some(r) => match r? {
                Ok(pairs) => out.attempts.extend(pairs),
                Err(skip) => {
                    tracing::warn!("skipped {}: {}", skip.task_id, skip.reason);
                    out.skipped.push(skip);
                }
            },
        }
    }
    Ok(out)
}

/// The first failing attempt of each task, paired with the task, in corpus order.
pub fn first_failures(
    corpus: &[Task],
    attempts: &[(Attempt, ExecutionFeedback)],
) -> Result<Vec<(Task, Attempt, ExecutionFeedback)>, PipelineError> {
    let tasks: HashMap<&str, &Task> = corpus.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut first: HashMap<&str, &(Attempt, ExecutionFeedback)> = HashMap::new();
    for pair in attempts {
        if !tasks.contains_key(pair.0.task_id.as_str()) {
            return Err(PipelineError::DanglingTask(pair.0.task_id.clone()));
        }
        if !pair.1.passed() {
            let slot = first.entry(pair.0.task_id.as_str()).or_insert(pair);
            if pair.0.index < slot.0.index {
                *slot = pair;
            }
        }
    }
    Ok(corpus
        .iter()
        .filter_map(|t| first.get(t.id.as_str()).map(|(a, f)| (t.clone(), a.clone(), f.clone())))
        .collect())
}

/// Asks the teacher to repair each failing attempt and keeps the repair as
/// validated only when it passes every test of its task.
pub async fn collect_personalised_refinements(
    wrong: &[(Task, Attempt, ExecutionFeedback)],
    teacher: &EndpointConfig,
    sampling: &SamplingConfig,
    services: &Services,
) -> Result<(Vec<RefinementRecord>, bool), PipelineError> {
    if let Some((_, a, _)) = wrong.iter().find(|(_, _, f)| f.passed()) {
        return Err(PipelineError::InvalidInput(format!("attempt {} passed; only failing attempts are refined", a.id)));
    }
    let sampling = (*sampling).with_n(1);
    let results = services
        .map_ordered(wrong.iter().collect(), |(task, attempt, feedback)| {
            async move {
                let mut record = RefinementRecord {
                    task_id: task.id.clone(),
                    student_attempt: attempt.clone(),
                    feedback: feedback.clone(),
                    refinement_instruction: String::new(),
                    refined_code: String::new(),
                    validated: false,
                    diagnostic: None,
                };
                let prepared = render_refinement_instruction(task, &attempt.code, feedback, &services.prompts.refine)
                    .and_then(|t| Ok((t, render_teacher_refinement_chat(task, &attempt.code, feedback, &services.prompts)?)));
                let turns = match prepared {
                    Ok((instruction, turns)) => {
                        record.refinement_instruction = instruction;
                        turns
                    }
                    Err(e) => {
                        record.diagnostic = Some(format!("prompt: {e}"));
                        return Ok(record);
                    }
                };
                let reply = match services.gateway.chat(teacher, &turns, &sampling).await {
                    Ok(mut r) => r.remove(0),
                    Err(e) if e.is_auth() => return Err(PipelineError::Gateway { stage: "refine", source: e }),
                    Err(e) => {
                        record.diagnostic = Some(format!("teacher: {e}"));
                        return Ok(record);
                    }
                };
                record.refined_code = parse_code_block(&reply);
                if record.refined_code.is_empty() {
                    record.diagnostic = Some("teacher reply contains no code".into());
                    return Ok(record);
                }
                let fb = services
                    .executor
                    .execute(&record.refined_code, &task.unit_tests)
                    .await
                    .map_err(|source| PipelineError::Exec { stage: "refine", source })?;
                record.validated = fb.passed();
                if !record.validated {
                    record.diagnostic = Some(format!("refinement failed: {}: {}", fb.status, fb.message));
                }
                Ok(record)
            }
        })
        .await;
    let partial = results.iter().any(Option::is_none);
    let records = results.into_iter().flatten().collect::<Result<Vec<_>, _>>()?;
    Ok((records, partial))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub n_tasks_in: usize,
    pub n_wrong_attempts: usize,
    pub n_validated_refinements: usize,
    /// Teacher spend during the round.
    pub dollar_cost: f64,
}

impl RoundStats {
    pub fn is_consistent(&self) -> bool {
        self.n_validated_refinements <= self.n_wrong_attempts && self.n_wrong_attempts <= self.n_tasks_in
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRound {
    pub round_index: u32,
    pub student_endpoint: EndpointConfig,
    /// Number of personalised rounds the student endpoint has been trained
    /// on; must be `round_index - 1`.
    pub student_trained_rounds: u32,
    pub attempt_sampling: SamplingConfig,
    /// Decoding for the teacher's refinement replies.
    #[serde(default = "teacher_sampling")]
    pub refine_sampling: SamplingConfig,
    #[serde(default)]
    pub stats: RoundStats,
}

impl PipelineRound {
    pub fn new(round_index: u32, student_endpoint: EndpointConfig) -> Self {
        Self {
            round_index,
            student_trained_rounds: round_index.saturating_sub(1),
            student_endpoint,
            attempt_sampling: SamplingConfig::attempt(),
            refine_sampling: teacher_sampling(),
            stats: RoundStats::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.round_index == 0 {
            return Err(PipelineError::InvalidRound("round_index starts at 1".into()));
        }
        if self.student_trained_rounds + 1 != self.round_index {
            return Err(PipelineError::InvalidRound(format!(
                "round {} needs a student trained through round {}, got one trained through round {}",
                self.round_index,
                self.round_index - 1,
                self.student_trained_rounds
            )));
        }
        self.attempt_sampling.validate().map_err(PipelineError::InvalidRound)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutput {
    pub attempts: AttemptsOutput,
    pub refinements: Vec<RefinementRecord>,
    pub datasets: BTreeMap<Variant, Vec<DatasetRecord>>,
    pub stats: RoundStats,
    pub partial: bool,
}

/// One round of personalised distillation: attempts, failure filter, teacher
/// refinements and every requested dataset variant.
pub async fn run_round(
    round: &PipelineRound,
    corpus: &[Task],
    teacher: &EndpointConfig,
    variants: &[Variant],
    services: &Services,
) -> Result<RoundOutput, PipelineError> {
    round.validate()?;
    let cost_before = services.gateway.ledger().dollar_cost(&teacher.name);
    let attempts =
        collect_student_attempts(corpus, &round.student_endpoint, &round.attempt_sampling, round.round_index, services).await?;
    let wrong = first_failures(corpus, &attempts.attempts)?;
    let (refinements, refine_partial) =
        collect_personalised_refinements(&wrong, teacher, &round.refine_sampling, services).await?;
    let all = emit_all_variants(corpus, &attempts.attempts, &refinements)?;
    let datasets = variants.iter().map(|v| (*v, all[v].clone())).collect();
    let stats = RoundStats {
        n_tasks_in: corpus.len(),
        n_wrong_attempts: wrong.len(),
        n_validated_refinements: refinements.iter().filter(|r| r.validated).count(),
        dollar_cost: services.gateway.ledger().dollar_cost(&teacher.name) - cost_before,
    };
    debug_assert!(stats.is_consistent());
    let partial = attempts.partial || refine_partial;
    Ok(RoundOutput { attempts, refinements, datasets, stats, partial })
}

/// Task ids that have at least one stored failing attempt.
pub(crate) fn failing_attempt_ids(attempts: &[(Attempt, ExecutionFeedback)]) -> HashSet<&str> {
    attempts.iter().filter(|(_, f)| !f.passed()).map(|(a, _)| a.id.as_str()).collect()
}
