//! Shared value types for tasks, attempts, execution feedback and dataset records.
//!
//! Every type here is a plain serializable value. JSONL files produced by the
//! pipeline use these field names verbatim.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Default cap on `ExecutionFeedback::message`, in characters.
pub const DEFAULT_MESSAGE_CAP: usize = 2000;

/// Marker appended to a message that was cut at the cap.
pub const TRUNCATION_SUFFIX: &str = "\n... [truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrigin {
    Seed,
    TeacherGenerated,
    Benchmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    /// Visible to the model at inference time (doc-string examples).
    Seen,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitTest {
    pub id: String,
    pub kind: TestKind,
    /// One self-contained assertion statement.
    pub assertion: String,
}

impl UnitTest {
    pub fn new(id: impl Into<String>, kind: TestKind, assertion: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind,
            assertion: assertion.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub instruction: String,
    pub unit_tests: Vec<UnitTest>,
    #[serde(default)]
    pub canonical_code: Option<String>,
    pub origin: TaskOrigin,
}

impl Task {
    pub fn seen_tests(&self) -> Vec<UnitTest> {
        self.tests_of(TestKind::Seen)
    }

    pub fn hidden_tests(&self) -> Vec<UnitTest> {
        self.tests_of(TestKind::Hidden)
    }

    fn tests_of(&self, kind: TestKind) -> Vec<UnitTest> {
        self.unit_tests
            .iter()
            .filter(|t| t.kind == kind)
            .cloned()
            .collect()
    }
}

/// Checks the invariants of a single task. An empty result means the task is well formed.
pub fn validate_task(task: &Task) -> Vec<String> {
    let mut violations = Vec::new();
    if task.id.trim().is_empty() {
        violations.push("id empty".to_string());
    }
    if task.instruction.trim().is_empty() {
        violations.push("instruction empty".to_string());
    }
    // Seed tasks only serve as in-context exemplars and may come without tests.
    if task.origin != TaskOrigin::Seed && task.unit_tests.is_empty() {
        violations.push("unit_tests empty".to_string());
    }
    if task.origin == TaskOrigin::TeacherGenerated && task.canonical_code.is_none() {
        violations.push("canonical_code missing".to_string());
    }
    let mut ids = HashSet::new();
    for test in &task.unit_tests {
        if !ids.insert(test.id.as_str()) {
            violations.push(format!("duplicate unit test id {}", test.id));
        }
        let assertion = test.assertion.trim();
        if assertion.is_empty() {
            violations.push(format!("unit test {} has empty assertion", test.id));
        } else if assertion.contains('\n') {
            violations.push(format!("unit test {} spans multiple lines", test.id));
        }
    }
    violations
}

/// Checks every task plus id uniqueness across the corpus.
pub fn validate_corpus(tasks: &[Task]) -> Vec<String> {
    let mut violations = Vec::new();
    let mut ids = HashSet::new();
    for task in tasks {
        for v in validate_task(task) {
            violations.push(format!("{}: {}", task.id, v));
        }
        if !ids.insert(task.id.as_str()) {
            violations.push(format!("{}: duplicate task id", task.id));
        }
    }
    violations
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub n_samples: u32,
    pub max_tokens: u32,
}

impl SamplingConfig {
    pub fn new(temperature: f64, n_samples: u32) -> Self {
        Self {
            temperature,
            top_p: 0.95,
            n_samples,
            max_tokens: 512,
        }
    }

    /// Student attempt collection: one sample at temperature 0.3.
    pub fn attempt() -> Self {
        Self::new(0.3, 1)
    }

    /// pass@1 estimation: 20 samples at temperature 0.2.
    pub fn pass1() -> Self {
        Self::new(0.2, 20)
    }

    /// pass@{5,10,20,50,100} estimation: 100 samples at temperature 0.8.
    pub fn passk() -> Self {
        Self::new(0.8, 100)
    }

    pub fn with_n(self, n_samples: u32) -> Self {
        Self { n_samples, ..self }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.n_samples < 1 {
            return Err("n_samples must be >= 1".to_string());
        }
        if self.max_tokens < 1 {
            return Err("max_tokens must be >= 1".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptStep {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub id: String,
    pub task_id: String,
    pub code: String,
    /// Name of the endpoint that produced the code.
    pub producer: String,
    pub sampling: SamplingConfig,
    pub index: u32,
    pub step: AttemptStep,
    /// Step-one attempt this one refines; required for step two.
    #[serde(default)]
    pub parent_id: Option<String>,
}

impl Attempt {
    pub fn validate(&self) -> Result<(), String> {
        match (self.step, &self.parent_id) {
            (AttemptStep::Two, None) => Err(format!("{}: step-two attempt without parent", self.id)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Passed,
    CompileError,
    RuntimeError,
    TestFailure,
    Timeout,
    HarnessError,
}

impl ExecStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecStatus::Passed => "passed",
            ExecStatus::CompileError => "compile_error",
            ExecStatus::RuntimeError => "runtime_error",
            ExecStatus::TestFailure => "test_failure",
            ExecStatus::Timeout => "timeout",
            ExecStatus::HarnessError => "harness_error",
        }
    }

    pub fn is_passed(self) -> bool {
        self == ExecStatus::Passed
    }
}

impl fmt::Display for ExecStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "passed" => ExecStatus::Passed,
            "compile_error" => ExecStatus::CompileError,
            "runtime_error" => ExecStatus::RuntimeError,
            "test_failure" => ExecStatus::TestFailure,
            "timeout" => ExecStatus::Timeout,
            "harness_error" => ExecStatus::HarnessError,
            other => return Err(format!("unknown status {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    Pass,
    Fail,
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub unit_test_id: String,
    pub result: TestOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionFeedback {
    pub status: ExecStatus,
    pub message: String,
    pub per_test: Vec<TestResult>,
    pub wall_time_ms: u64,
}

impl ExecutionFeedback {
    pub fn passed(&self) -> bool {
        self.status.is_passed()
    }

    /// Feedback for a failure that happened outside the candidate code.
    pub fn harness_error(tests: &[UnitTest], message: impl Into<String>, cap: usize) -> Self {
        Self {
            status: ExecStatus::HarnessError,
            message: truncate_message(&message.into(), cap),
            per_test: not_run(tests),
            wall_time_ms: 0,
        }
    }

    /// `status == passed` exactly when every test passed.
    pub fn is_consistent(&self) -> bool {
        let all_pass = !self.per_test.is_empty()
            && self.per_test.iter().all(|t| t.result == TestOutcome::Pass);
        self.passed() == all_pass
    }
}

pub(crate) fn not_run(tests: &[UnitTest]) -> Vec<TestResult> {
    tests
        .iter()
        .map(|t| TestResult {
            unit_test_id: t.id.clone(),
            result: TestOutcome::NotRun,
        })
        .collect()
}

/// Truncates to at most `cap` characters including the suffix marker.
pub fn truncate_message(message: &str, cap: usize) -> String {
    if message.chars().count() <= cap {
        return message.to_string();
    }
    let suffix_len = TRUNCATION_SUFFIX.chars().count();
    let keep = cap.saturating_sub(suffix_len);
    let mut out: String = message.chars().take(keep).collect();
    out.push_str(TRUNCATION_SUFFIX);
    out.chars().take(cap).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub task_id: String,
    pub student_attempt: Attempt,
    pub feedback: ExecutionFeedback,
    pub refinement_instruction: String,
    pub refined_code: String,
    pub validated: bool,
    /// Why a record failed validation (teacher error, parse failure, failing tests).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    CodeGeneration,
    CodeRefinement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "StanD")]
    StanD,
    #[serde(rename = "InpD")]
    InpD,
    #[serde(rename = "InpD_refine")]
    InpDRefine,
    #[serde(rename = "InpD_combined")]
    InpDCombined,
    #[serde(rename = "PERsD")]
    PersD,
    #[serde(rename = "PERsD_refine")]
    PersDRefine,
    #[serde(rename = "PERsD_combined")]
    PersDCombined,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::StanD,
        Variant::InpD,
        Variant::InpDRefine,
        Variant::InpDCombined,
        Variant::PersD,
        Variant::PersDRefine,
        Variant::PersDCombined,
    ];

    /// Name as written in JSONL records.
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::StanD => "StanD",
            Variant::InpD => "InpD",
            Variant::InpDRefine => "InpD_refine",
            Variant::InpDCombined => "InpD_combined",
            Variant::PersD => "PERsD",
            Variant::PersDRefine => "PERsD_refine",
            Variant::PersDCombined => "PERsD_combined",
        }
    }

    /// Lowercase kebab-case name used on the command line and in file names.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::StanD => "stand",
            Variant::InpD => "inpd",
            Variant::InpDRefine => "inpd-refine",
            Variant::InpDCombined => "inpd-combined",
            Variant::PersD => "persd",
            Variant::PersDRefine => "persd-refine",
            Variant::PersDCombined => "persd-combined",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == key)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub input: String,
    pub output: String,
    pub kind: RecordKind,
    pub task_id: String,
    pub variant: Variant,
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_feedback() -> impl Strategy<Value = ExecutionFeedback> {
        (
            prop_oneof![
                Just(ExecStatus::Passed),
                Just(ExecStatus::CompileError),
                Just(ExecStatus::RuntimeError),
                Just(ExecStatus::TestFailure),
                Just(ExecStatus::Timeout),
                Just(ExecStatus::HarnessError),
            ],
            ".*",
            proptest::collection::vec(("[a-z0-9/]{1,8}", 0..3u8), 0..6),
            any::<u64>(),
        )
            .prop_map(|(status, message, tests, wall_time_ms)| ExecutionFeedback {
                status,
                message,
                per_test: tests
                    .into_iter()
                    .map(|(id, r)| TestResult {
                        unit_test_id: id,
                        result: [TestOutcome::Pass, TestOutcome::Fail, TestOutcome::NotRun][r as usize],
                    })
                    .collect(),
                wall_time_ms,
            })
    }

    fn arb_attempt() -> impl Strategy<Value = Attempt> {
        (".*", ".*", 0.0..2.0f64, 1..200u32, any::<u32>(), proptest::option::of("[a-z]{1,5}")).prop_map(
            |(task_id, code, temperature, n, index, parent_id)| Attempt {
                id: format!("{task_id}/a{index}"),
                task_id,
                code,
                producer: "student".into(),
                sampling: SamplingConfig::new(temperature, n),
                index,
                step: if parent_id.is_some() { AttemptStep::Two } else { AttemptStep::One },
                parent_id,
            },
        )
    }

    proptest! {
        #[test]
        fn refinement_record_roundtrips(attempt in arb_attempt(), feedback in arb_feedback(), code in ".*", validated: bool) {
            let rec = RefinementRecord {
                task_id: attempt.task_id.clone(),
                student_attempt: attempt,
                feedback,
                refinement_instruction: "fix it".into(),
                refined_code: code,
                validated,
                diagnostic: None,
            };
            let line = serde_json::to_string(&rec).unwrap();
            prop_assert_eq!(serde_json::from_str::<RefinementRecord>(&line).unwrap(), rec);
        }

        #[test]
        fn task_and_record_roundtrip(id in "[A-Za-z0-9/_-]{1,12}", instr in ".*", asserts in proptest::collection::vec(".*", 0..5), canon in proptest::option::of(".*")) {
            let task = Task {
                id: id.clone(),
                instruction: instr.clone(),
                unit_tests: asserts.iter().enumerate().map(|(i, a)| UnitTest::new(format!("t{i}"), if i % 2 == 0 { TestKind::Seen } else { TestKind::Hidden }, a.clone())).collect(),
                canonical_code: canon,
                origin: TaskOrigin::Benchmark,
            };
            let line = serde_json::to_string(&task).unwrap();
            prop_assert_eq!(serde_json::from_str::<Task>(&line).unwrap(), task);

            let rec = DatasetRecord { input: instr.clone(), output: instr, kind: RecordKind::CodeRefinement, task_id: id, variant: Variant::InpDCombined };
            let line = serde_json::to_string(&rec).unwrap();
            prop_assert_eq!(serde_json::from_str::<DatasetRecord>(&line).unwrap(), rec);
        }
    }
}
