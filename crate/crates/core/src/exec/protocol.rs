//! JSON wire protocol spoken with the runner executable.
//!
//! The harness writes one [`RunnerRequest`] to the runner's stdin and reads one
//! [`RunnerVerdict`] from its stdout. The runner exits 0 whenever it managed to
//! report a verdict, including verdicts about broken candidate code.

use serde::{Deserialize, Serialize};

use crate::domain::{ExecStatus, TestOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerRequest {
    pub code: String,
    pub assertions: Vec<String>,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerTestResult {
    pub id: String,
    pub result: TestOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerVerdict {
    pub status: ExecStatus,
    pub message: String,
    pub per_test: Vec<RunnerTestResult>,
    pub wall_time_ms: u64,
}

impl RunnerVerdict {
    /// Verdict for a request the runner could not even read.
    pub fn harness_error(message: impl Into<String>) -> Self {
        Self {
            status: ExecStatus::HarnessError,
            message: message.into(),
            per_test: Vec::new(),
            wall_time_ms: 0,
        }
    }

    /// Statuses for which the runner may stop before reporting every test.
    pub fn may_be_partial(status: ExecStatus) -> bool {
        matches!(
            status,
            ExecStatus::CompileError | ExecStatus::Timeout | ExecStatus::HarnessError
        )
    }
}

/// Id the runner reports for the assertion at `index`.
pub fn runner_test_id(index: usize) -> String {
    format!("t{index}")
}
