//! Stub runner: a deterministic, dependency-free stand-in for the real sandbox
//! runner. It speaks the same wire protocol and interprets a small Python
//! subset (functions, control flow, ints/floats/strings/lists/tuples, common
//! builtins), which is enough for toy tasks and for exercising the harness.
//!
//! Compile errors are reported before any assertion runs. Each assertion runs
//! in a copy of the namespace produced by the candidate code. `AssertionError`
//! maps to `test_failure`, any other exception to `runtime_error`.

pub mod eval;
pub mod parse;

use std::time::{Duration, Instant};

use crate::domain::{ExecStatus, TestOutcome};
use crate::exec::protocol::{runner_test_id, RunnerRequest, RunnerTestResult, RunnerVerdict};
use eval::{Interpreter, Raised};

/// Handles one raw request read from stdin. Malformed input becomes a
/// `harness_error` verdict rather than a failure.
pub fn handle_raw(input: &str) -> RunnerVerdict {
    match serde_json::from_str::<RunnerRequest>(input) {
        Ok(request) => run(&request),
        Err(e) => RunnerVerdict::harness_error(format!("malformed request: {e}")),
    }
}

/// Interprets the request on a dedicated thread with a deep stack, so that
/// deep recursion in candidate code surfaces as `RecursionError`.
pub fn run(request: &RunnerRequest) -> RunnerVerdict {
    let request = request.clone();
    std::thread::Builder::new()
        .name("stub-interpreter".into())
        .stack_size(INTERPRETER_STACK)
        .spawn(move || run_inline(&request))
        .and_then(|h| h.join().map_err(|_| std::io::Error::other("interpreter panicked")))
        .unwrap_or_else(|e| RunnerVerdict::harness_error(format!("stub interpreter failed: {e}")))
}

const INTERPRETER_STACK: usize = 64 * 1024 * 1024;

fn run_inline(request: &RunnerRequest) -> RunnerVerdict {
    let started = Instant::now();
    let deadline = started + Duration::from_millis(request.timeout_ms);
    let n = request.assertions.len();
    let results = |outcomes: Vec<TestOutcome>| -> Vec<RunnerTestResult> {
        outcomes
            .into_iter()
            .enumerate()
            .map(|(i, result)| RunnerTestResult { id: runner_test_id(i), result })
            .collect()
    };
    let finish = |status, message: String, outcomes, stdout: &str| RunnerVerdict {
        status,
        message: with_captured(message, status, stdout),
        per_test: results(outcomes),
        wall_time_ms: started.elapsed().as_millis() as u64,
    };

    let program = match parse::parse_program(&request.code) {
        Ok(p) => p,
        Err(e) => return finish(ExecStatus::CompileError, e.to_string(), vec![TestOutcome::NotRun; n], ""),
    };

    let mut interp = Interpreter::new(deadline);
    if let Err(raised) = interp.run_module(&program) {
        let status = match raised {
            Raised::Timeout => ExecStatus::Timeout,
            _ => ExecStatus::RuntimeError,
        };
        let stdout = std::mem::take(&mut interp.stdout);
        return finish(status, timeout_aware(&raised, request.timeout_ms), vec![TestOutcome::NotRun; n], &stdout);
    }
    let namespace = interp.globals.clone();

    let mut outcomes = vec![TestOutcome::NotRun; n];
    let mut first_failure: Option<(ExecStatus, String)> = None;
    for (i, assertion) in request.assertions.iter().enumerate() {
        interp.globals = namespace.clone();
        let outcome = match parse::parse_program(assertion) {
            Err(e) => Err((ExecStatus::RuntimeError, format!("{e} in assertion: {assertion}"))),
            Ok(stmts) => match interp.run_module(&stmts) {
                Ok(()) => Ok(()),
                Err(Raised::Timeout) => {
                    first_failure.get_or_insert((ExecStatus::Timeout, timeout_aware(&Raised::Timeout, request.timeout_ms)));
                    break;
                }
                Err(r) if r.is_assertion() => {
                    let msg = match r.render().as_str() {
                        "AssertionError" => format!("AssertionError: {assertion}"),
                        rendered => rendered.to_string(),
                    };
                    Err((ExecStatus::TestFailure, msg))
                }
                Err(r) => Err((ExecStatus::RuntimeError, format!("{} (in: {assertion})", r.render()))),
            },
        };
        match outcome {
            Ok(()) => outcomes[i] = TestOutcome::Pass,
            Err(failure) => {
                outcomes[i] = TestOutcome::Fail;
                first_failure.get_or_insert(failure);
            }
        }
    }

    let stdout = std::mem::take(&mut interp.stdout);
    match first_failure {
        None => finish(ExecStatus::Passed, String::new(), outcomes, &stdout),
        Some((status, message)) => finish(status, message, outcomes, &stdout),
    }
}

fn timeout_aware(raised: &Raised, timeout_ms: u64) -> String {
    match raised {
        Raised::Timeout => format!("Timeout: execution exceeded {timeout_ms} ms"),
        other => other.render(),
    }
}

fn with_captured(message: String, status: ExecStatus, stdout: &str) -> String {
    if status == ExecStatus::Passed || stdout.is_empty() {
        message
    } else {
        format!("{message}\n--- captured stdout ---\n{stdout}")
    }
}
