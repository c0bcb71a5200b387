use std::collections::{BTreeMap, HashMap, HashSet};

use super::refine::failing_attempt_ids;
use super::PipelineError;
use crate::domain::{Attempt, DatasetRecord, ExecutionFeedback, RecordKind, RefinementRecord, Task, Variant};

struct Inputs<'a> {
    corpus: &'a [Task],
    tasks: HashMap<&'a str, &'a Task>,
    /// Validated refinements, one per task, in input order.
    refined: Vec<(&'a Task, &'a RefinementRecord)>,
}

fn canonical(task: &Task) -> Result<&str, PipelineError> {
    task.canonical_code
        .as_deref()
        .ok_or_else(|| PipelineError::InvalidInput(format!("task {} has no canonical code", task.id)))
}

impl<'a> Inputs<'a> {
    fn new(
        corpus: &'a [Task],
        attempts: &'a [(Attempt, ExecutionFeedback)],
        refinements: &'a [RefinementRecord],
    ) -> Result<Self, PipelineError> {
        let tasks: HashMap<&str, &Task> = corpus.iter().map(|t| (t.id.as_str(), t)).collect();
        let failing = failing_attempt_ids(attempts);
        let mut seen = HashSet::new();
        let mut refined = Vec::new();
        for r in refinements.iter().filter(|r| r.validated) {
            let task = *tasks.get(r.task_id.as_str()).ok_or_else(|| PipelineError::DanglingTask(r.task_id.clone()))?;
            if r.feedback.passed() || !failing.contains(r.student_attempt.id.as_str()) {
                return Err(PipelineError::InvalidInput(format!(
                    "refinement for {} does not trace to a stored failing attempt ({})",
                    r.task_id, r.student_attempt.id
                )));
            }
            if !seen.insert(r.task_id.as_str()) {
                return Err(PipelineError::InvalidInput(format!("several validated refinements for task {}", r.task_id)));
            }
            refined.push((task, r));
        }
        Ok(Self { corpus, tasks, refined })
    }

    fn emit(&self, variant: Variant) -> Result<Vec<DatasetRecord>, PipelineError> {
        let record = |input: &str, output: &str, kind, task: &Task| DatasetRecord {
            input: input.to_string(),
            output: output.to_string(),
            kind,
            task_id: task.id.clone(),
            variant,
        };
        let generation = RecordKind::CodeGeneration;
        let refinement = RecordKind::CodeRefinement;
        let mut out = Vec::new();
        match variant {
            Variant::StanD => {
                for t in self.corpus {
                    out.push(record(&t.instruction, canonical(t)?, generation, t));
                }
            }
            Variant::InpD | Variant::InpDRefine | Variant::InpDCombined => {
                for (t, r) in &self.refined {
                    let c = canonical(t)?;
                    if variant != Variant::InpDRefine {
                        out.push(record(&t.instruction, c, generation, t));
                    }
                    if variant != Variant::InpD {
                        out.push(record(&r.refinement_instruction, c, refinement, t));
                    }
                }
            }
            Variant::PersD => {
                for (t, r) in &self.refined {
                    out.push(record(&t.instruction, &r.refined_code, generation, t));
                }
            }
            Variant::PersDRefine | Variant::PersDCombined => {
                for (t, r) in &self.refined {
                    out.push(record(&r.refinement_instruction, &r.refined_code, refinement, t));
                    if variant == Variant::PersDCombined {
                        out.push(record(&t.instruction, canonical(t)?, generation, t));
                    }
                }
            }
        }
        debug_assert!(out.iter().all(|r| self.tasks.contains_key(r.task_id.as_str())));
        out.sort_by(|a, b| (&a.task_id, a.kind).cmp(&(&b.task_id, b.kind)));
        Ok(out)
    }
}

/// Dataset records of one variant, sorted by (task_id, kind). Only validated
/// refinements contribute.
pub fn emit_variant(
    variant: Variant,
    corpus: &[Task],
    attempts: &[(Attempt, ExecutionFeedback)],
    refinements: &[RefinementRecord],
) -> Result<Vec<DatasetRecord>, PipelineError> {
    Inputs::new(corpus, attempts, refinements)?.emit(variant)
}

pub fn emit_all_variants(
    corpus: &[Task],
    attempts: &[(Attempt, ExecutionFeedback)],
    refinements: &[RefinementRecord],
) -> Result<BTreeMap<Variant, Vec<DatasetRecord>>, PipelineError> {
    let inputs = Inputs::new(corpus, attempts, refinements)?;
    Variant::ALL.iter().map(|v| Ok((*v, inputs.emit(*v)?))).collect()
}
