//! Execution of candidate code against unit tests.
//!
//! Every call to [`Executor::execute`] spawns the configured runner executable
//! in its own process group, working directory and network namespace, feeds it
//! a [`RunnerRequest`] and classifies the returned [`RunnerVerdict`]. The whole
//! process group is killed once the verdict is in or the deadline passes, so no
//! descendant of the runner outlives the call.

pub mod protocol;

use std::ffi::OsString;
use std::os::unix::process::ExitStatusExt;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::process::Command;
use tokio::sync::Semaphore;

use crate::domain::{
    not_run, truncate_message, ExecStatus, ExecutionFeedback, Task, TestResult,
    UnitTest, DEFAULT_MESSAGE_CAP,
};
use protocol::{RunnerRequest, RunnerVerdict};

/// Extra time granted past `wall_timeout_ms` before the process group is killed.
pub const KILL_GRACE: Duration = Duration::from_millis(250);

const STDERR_CAP: u64 = 8 * 1024;

/// Network access inside the jail. There is deliberately no enabled variant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkPolicy {
    #[default]
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecLimits {
    pub wall_timeout_ms: u64,
    pub memory_mb: u64,
    pub max_output_bytes: usize,
    pub network: NetworkPolicy,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            wall_timeout_ms: 10_000,
            memory_mb: 512,
            max_output_bytes: 65_536,
            network: NetworkPolicy::Disabled,
        }
    }
}

impl ExecLimits {
    pub fn with_timeout_ms(self, wall_timeout_ms: u64) -> Self {
        Self {
            wall_timeout_ms,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        if self.wall_timeout_ms == 0 {
            return Err(ExecError::InvalidLimits("wall_timeout_ms must be > 0".into()));
        }
        if self.memory_mb == 0 {
            return Err(ExecError::InvalidLimits("memory_mb must be > 0".into()));
        }
        if self.max_output_bytes == 0 {
            return Err(ExecError::InvalidLimits("max_output_bytes must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("no unit tests given")]
    NoTests,
    #[error("task {0} has no seen unit tests")]
    NoSeenTests(String),
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
    #[error("max_parallel must be >= 1")]
    ZeroParallelism,
}

/// Program (plus fixed leading arguments) used as the runner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerCommand {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl RunnerCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
        }
    }

    pub fn arg(mut self, arg: impl Into<String>) -> Self {
        self.args.push(arg.into());
        self
    }
}

#[derive(Debug, Default)]
struct ChildCounter {
    live: AtomicUsize,
    peak: AtomicUsize,
}

struct LiveGuard<'a>(&'a ChildCounter);

impl<'a> LiveGuard<'a> {
    fn enter(counter: &'a ChildCounter) -> Self {
        let now = counter.live.fetch_add(1, Ordering::SeqCst) + 1;
        counter.peak.fetch_max(now, Ordering::SeqCst);
        Self(counter)
    }
}

impl Drop for LiveGuard<'_> {
    fn drop(&mut self) {
        self.0.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Runs candidate code through an external runner. Cheap to clone; clones share
/// the live-child counters.
#[derive(Debug, Clone)]
pub struct Executor {
    runner: RunnerCommand,
    limits: ExecLimits,
    message_cap: usize,
    record_wall_time: bool,
    children: Arc<ChildCounter>,
}

enum RunOutcome {
    Exited(std::process::ExitStatus, Vec<u8>),
    Overflow,
    Io(std::io::Error),
}

impl Executor {
    pub fn new(runner: RunnerCommand, limits: ExecLimits) -> Result<Self, ExecError> {
        limits.validate()?;
        Ok(Self {
            runner,
            limits,
            message_cap: DEFAULT_MESSAGE_CAP,
            record_wall_time: true,
            children: Arc::default(),
        })
    }

    pub fn with_message_cap(mut self, cap: usize) -> Self {
        self.message_cap = cap;
        self
    }

    /// With `false`, feedback reports `wall_time_ms = 0`, making persisted
    /// outputs independent of machine speed.
    pub fn with_wall_time(mut self, record: bool) -> Self {
        self.record_wall_time = record;
        self
    }

    pub fn limits(&self) -> &ExecLimits {
        &self.limits
    }

    pub fn runner(&self) -> &RunnerCommand {
        &self.runner
    }

    /// Highest number of simultaneously alive runner processes seen so far.
    pub fn peak_children(&self) -> usize {
        self.children.peak.load(Ordering::SeqCst)
    }

    pub fn live_children(&self) -> usize {
        self.children.live.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.children
            .peak
            .store(self.children.live.load(Ordering::SeqCst), Ordering::SeqCst);
    }

    /// Runs `code` against `tests` and classifies the outcome.
    pub async fn execute(&self, code: &str, tests: &[UnitTest]) -> Result<ExecutionFeedback, ExecError> {
        if tests.is_empty() {
            return Err(ExecError::NoTests);
        }
        let request = RunnerRequest {
            code: code.to_string(),
            assertions: tests.iter().map(|t| t.assertion.clone()).collect(),
            timeout_ms: self.limits.wall_timeout_ms,
        };
        let mut feedback = self.run_request(&request, tests).await;
        if !self.record_wall_time {
            feedback.wall_time_ms = 0;
        }
        Ok(feedback)
    }

    /// Same as [`execute`](Self::execute) restricted to the task's seen tests.
    pub async fn feedback_for_seen(&self, code: &str, task: &Task) -> Result<ExecutionFeedback, ExecError> {
        let seen = task.seen_tests();
        if seen.is_empty() {
            return Err(ExecError::NoSeenTests(task.id.clone()));
        }
        self.execute(code, &seen).await
    }

    /// Executes every job with at most `max_parallel` runners alive at once.
    /// Results are positionally aligned with `jobs`.
    pub async fn execute_batch(
        &self,
        jobs: &[(String, Vec<UnitTest>)],
        max_parallel: usize,
    ) -> Result<Vec<ExecutionFeedback>, ExecError> {
        if max_parallel == 0 {
            return Err(ExecError::ZeroParallelism);
        }
        let permits = Semaphore::new(max_parallel);
        let runs = jobs.iter().map(|(code, tests)| {
            let permits = &permits;
            async move {
                let _permit = permits.acquire().await.expect("semaphore never closed");
                match self.execute(code, tests).await {
                    Ok(feedback) => feedback,
                    Err(e) => ExecutionFeedback::harness_error(tests, e.to_string(), self.message_cap),
                }
            }
        });
        Ok(futures::future::join_all(runs).await)
    }

    async fn run_request(&self, request: &RunnerRequest, tests: &[UnitTest]) -> ExecutionFeedback {
        let started = Instant::now();
        let workdir = match tempfile::Builder::new().prefix("persd-exec-").tempdir() {
            Ok(dir) => dir,
            Err(e) => return self.harness_error(tests, format!("cannot create work dir: {e}")),
        };
        let payload = match serde_json::to_vec(request) {
            Ok(p) => p,
            Err(e) => return self.harness_error(tests, format!("cannot encode request: {e}")),
        };

        let mut command = Command::new(&self.runner.program);
        command
            .args(&self.runner.args)
            .current_dir(workdir.path())
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| OsString::from("/usr/bin:/bin")))
            .env("HOME", workdir.path())
            .env("TMPDIR", workdir.path())
            .env("LANG", "C.UTF-8")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true)
            .process_group(0);
        let memory_bytes = self.limits.memory_mb.saturating_mul(1024 * 1024);
        // SAFETY: the closure runs between fork and exec and only calls
        // async-signal-safe libc functions.
        unsafe {
            command.pre_exec(move || jail_child(memory_bytes));
        }

        let mut child = match command.spawn() {
            Ok(c) => c,
            Err(e) => {
                return self.harness_error(tests, format!("cannot start runner {}: {e}", self.runner.program.display()))
            }
        };
        let _live = LiveGuard::enter(&self.children);
        let pgid = child.id().map(|id| id as libc::pid_t);

        let mut stdin = child.stdin.take().expect("stdin piped");
        let writer = tokio::spawn(async move {
            // The runner may legitimately exit without draining stdin.
            let _ = stdin.write_all(&payload).await;
            let _ = stdin.shutdown().await;
        });
        let stderr = child.stderr.take().expect("stderr piped");
        let stderr_reader = tokio::spawn(async move {
            let mut buf = Vec::new();
            let _ = stderr.take(STDERR_CAP).read_to_end(&mut buf).await;
            String::from_utf8_lossy(&buf).into_owned()
        });
        let mut stdout = child.stdout.take().expect("stdout piped");
        let cap = self.limits.max_output_bytes;

        let deadline = Duration::from_millis(self.limits.wall_timeout_ms) + KILL_GRACE;
        let run = async {
            let mut out = Vec::new();
            if let Err(e) = (&mut stdout).take(cap as u64 + 1).read_to_end(&mut out).await {
                return RunOutcome::Io(e);
            }
            if out.len() > cap {
                return RunOutcome::Overflow;
            }
            match child.wait().await {
                Ok(status) => RunOutcome::Exited(status, out),
                Err(e) => RunOutcome::Io(e),
            }
        };
        let outcome = tokio::time::timeout(deadline, run).await;

        if let Some(pgid) = pgid {
            kill_group(pgid);
        }
        let _ = child.wait().await;
        writer.abort();
        let stderr_text = stderr_reader.await.unwrap_or_default();
        let elapsed_ms = started.elapsed().as_millis() as u64;

        match outcome {
            Err(_) => ExecutionFeedback {
                status: ExecStatus::Timeout,
                message: format!("Timeout: execution exceeded {} ms", self.limits.wall_timeout_ms),
                per_test: not_run(tests),
                wall_time_ms: elapsed_ms,
            },
            Ok(RunOutcome::Overflow) => {
                self.harness_error(tests, format!("runner output exceeded {cap} bytes"))
            }
            Ok(RunOutcome::Io(e)) => self.harness_error(tests, format!("runner i/o failed: {e}")),
            Ok(RunOutcome::Exited(status, out)) => {
                if !status.success() {
                    let how = match (status.code(), status.signal()) {
                        (Some(code), _) => format!("exit code {code}"),
                        (None, Some(sig)) => format!("signal {sig}"),
                        _ => "unknown status".to_string(),
                    };
                    return self.harness_error(
                        tests,
                        format!("runner died ({how}): {}", stderr_text.trim()),
                    );
                }
                match serde_json::from_slice::<RunnerVerdict>(trim_ascii(&out)) {
                    Ok(verdict) => self.classify(verdict, tests),
                    Err(e) => self.harness_error(
                        tests,
                        format!(
                            "unparseable runner output ({e}): {}",
                            String::from_utf8_lossy(&out).chars().take(200).collect::<String>()
                        ),
                    ),
                }
            }
        }
    }

    fn classify(&self, verdict: RunnerVerdict, tests: &[UnitTest]) -> ExecutionFeedback {
        let per_test: Vec<TestResult> = if verdict.per_test.len() == tests.len() {
            tests
                .iter()
                .zip(&verdict.per_test)
                .map(|(test, r)| TestResult {
                    unit_test_id: test.id.clone(),
                    result: r.result,
                })
                .collect()
        } else if RunnerVerdict::may_be_partial(verdict.status) {
            let mut results = not_run(tests);
            for (slot, r) in results.iter_mut().zip(&verdict.per_test) {
                slot.result = r.result;
            }
            results
        } else {
            return self.harness_error(
                tests,
                format!(
                    "runner reported {} results for {} assertions",
                    verdict.per_test.len(),
                    tests.len()
                ),
            );
        };

        let feedback = ExecutionFeedback {
            status: verdict.status,
            message: if verdict.status.is_passed() {
                String::new()
            } else {
                truncate_message(&verdict.message, self.message_cap)
            },
            per_test,
            wall_time_ms: verdict.wall_time_ms,
        };
        if !feedback.is_consistent() {
            return self.harness_error(
                tests,
                format!("inconsistent verdict: status {} with per-test results", verdict.status),
            );
        }
        feedback
    }

    fn harness_error(&self, tests: &[UnitTest], message: String) -> ExecutionFeedback {
        ExecutionFeedback::harness_error(tests, message, self.message_cap)
    }
}

fn trim_ascii(bytes: &[u8]) -> &[u8] {
    let start = bytes.iter().position(|b| !b.is_ascii_whitespace()).unwrap_or(bytes.len());
    let end = bytes.iter().rposition(|b| !b.is_ascii_whitespace()).map_or(start, |i| i + 1);
    &bytes[start..end]
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: plain syscall; ESRCH when the group is already gone is fine.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

fn jail_child(memory_bytes: u64) -> std::io::Result<()> {
    let limit = libc::rlimit {
        rlim_cur: memory_bytes as libc::rlim_t,
        rlim_max: memory_bytes as libc::rlim_t,
    };
    let no_core = libc::rlimit { rlim_cur: 0, rlim_max: 0 };
    // SAFETY: setrlimit and unshare are async-signal-safe syscalls.
    unsafe {
        if libc::setrlimit(libc::RLIMIT_AS, &limit) != 0 {
            return Err(std::io::Error::last_os_error());
        }
        libc::setrlimit(libc::RLIMIT_CORE, &no_core);
        if libc::unshare(libc::CLONE_NEWNET) != 0
            && libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET) != 0
        {
            return Err(std::io::Error::last_os_error());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TestOutcome;

    #[test]
    fn default_limits() {
        let l = ExecLimits::default();
        assert_eq!(l.wall_timeout_ms, 10_000);
        assert_eq!(l.memory_mb, 512);
        assert_eq!(l.max_output_bytes, 65_536);
        assert_eq!(l.network, NetworkPolicy::Disabled);
    }

    #[test]
    fn zero_limits_rejected() {
        assert!(ExecLimits::default().with_timeout_ms(0).validate().is_err());
        let l = ExecLimits { memory_mb: 0, ..Default::default() };
        assert!(Executor::new(RunnerCommand::new("/bin/true"), l).is_err());
    }

    #[test]
    fn limits_parse_with_defaults() {
        let l: ExecLimits = serde_json::from_str(r#"{"wall_timeout_ms": 500}"#).unwrap();
        assert_eq!(l.wall_timeout_ms, 500);
        assert_eq!(l.memory_mb, 512);
        assert!(serde_json::from_str::<ExecLimits>(r#"{"network": "enabled"}"#).is_err());
    }

    fn tests(n: usize) -> Vec<UnitTest> {
        (0..n)
            .map(|i| UnitTest::new(format!("u{i}"), crate::domain::TestKind::Hidden, "assert True"))
            .collect()
    }

    fn verdict(status: ExecStatus, results: &[TestOutcome]) -> RunnerVerdict {
        RunnerVerdict {
            status,
            message: "boom".into(),
            per_test: results
                .iter()
                .enumerate()
                .map(|(i, r)| protocol::RunnerTestResult { id: protocol::runner_test_id(i), result: *r })
                .collect(),
            wall_time_ms: 1,
        }
    }

    #[test]
    fn classify_maps_ids_positionally() {
        let ex = Executor::new(RunnerCommand::new("/bin/true"), ExecLimits::default()).unwrap();
        let fb = ex.classify(
            verdict(ExecStatus::TestFailure, &[TestOutcome::Pass, TestOutcome::Fail]),
            &tests(2),
        );
        assert_eq!(fb.status, ExecStatus::TestFailure);
        assert_eq!(fb.per_test[1].unit_test_id, "u1");
        assert_eq!(fb.message, "boom");
    }

    #[test]
    fn classify_pads_partial_compile_errors() {
        let ex = Executor::new(RunnerCommand::new("/bin/true"), ExecLimits::default()).unwrap();
        let fb = ex.classify(verdict(ExecStatus::CompileError, &[]), &tests(3));
        assert_eq!(fb.status, ExecStatus::CompileError);
        assert!(fb.per_test.iter().all(|t| t.result == TestOutcome::NotRun));
    }

    #[test]
    fn classify_rejects_short_or_inconsistent_verdicts() {
        let ex = Executor::new(RunnerCommand::new("/bin/true"), ExecLimits::default()).unwrap();
        let short = ex.classify(verdict(ExecStatus::TestFailure, &[TestOutcome::Fail]), &tests(2));
        assert_eq!(short.status, ExecStatus::HarnessError);
        let lying = ex.classify(verdict(ExecStatus::Passed, &[TestOutcome::Pass, TestOutcome::Fail]), &tests(2));
        assert_eq!(lying.status, ExecStatus::HarnessError);
        let lying = ex.classify(verdict(ExecStatus::TestFailure, &[TestOutcome::Pass, TestOutcome::Pass]), &tests(2));
        assert_eq!(lying.status, ExecStatus::HarnessError);
    }

    #[test]
    fn passed_verdict_has_empty_message() {
        let ex = Executor::new(RunnerCommand::new("/bin/true"), ExecLimits::default()).unwrap();
        let fb = ex.classify(verdict(ExecStatus::Passed, &[TestOutcome::Pass]), &tests(1));
        assert!(fb.passed());
        assert!(fb.message.is_empty());
    }

    #[test]
    fn message_is_capped() {
        let ex = Executor::new(RunnerCommand::new("/bin/true"), ExecLimits::default())
            .unwrap()
            .with_message_cap(50);
        let mut v = verdict(ExecStatus::RuntimeError, &[TestOutcome::Fail]);
        v.message = "x".repeat(500);
        assert_eq!(ex.classify(v, &tests(1)).message.chars().count(), 50);
    }
}
