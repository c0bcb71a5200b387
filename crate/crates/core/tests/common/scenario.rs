//! Scripted offline scenario: 20 toy tasks, a student that fails the first
//! 12 of them, and a teacher that repairs 10 of those and returns the
//! student's broken code for the other 2.

use std::sync::Arc;

use persd_core::domain::{Task, TaskOrigin, TestKind, UnitTest};
use persd_core::exec::{ExecLimits, Executor, RunnerCommand};
use persd_core::gateway::{ChatBackend, ChatRequest, EndpointConfig, Gateway, MockBackend};
use persd_core::pipeline::Services;

pub const N_TASKS: usize = 20;
pub const N_STUDENT_FAILS: usize = 12;
pub const N_TEACHER_REPAIRS: usize = 10;

pub fn stub_runner() -> RunnerCommand {
    RunnerCommand::new(env!("CARGO_BIN_EXE_persd-stub-runner"))
}

pub fn executor() -> Executor {
    Executor::new(stub_runner(), ExecLimits::default().with_timeout_ms(5000))
        .unwrap()
        .with_wall_time(false)
}

fn name(i: usize) -> String {
    format!("scale_{i}")
}

pub fn canonical(i: usize) -> String {
    format!("def {}(x):\n    return x * {} + {}", name(i), i + 2, i)
}

/// Wrong on every input, including the docstring example.
pub fn broken(i: usize) -> String {
    format!("def {}(x):\n    return x - {}", name(i), i + 2)
}

pub fn repaired(i: usize) -> String {
    format!("def {}(x):\n    y = x * {}\n    return y + {}", name(i), i + 2, i)
}

pub fn fenced(code: &str) -> String {
    format!("Here you go:\n```python\n{code}\n```\n")
}

pub fn corpus() -> Vec<Task> {
    (0..N_TASKS)
        .map(|i| {
            let id = format!("toy-{i:02}");
            let unit_tests = [3i64, 5, 10]
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    let expected = x * (i as i64 + 2) + i as i64;
                    UnitTest::new(format!("{id}/{j}"), TestKind::Hidden, format!("assert {}({x}) == {expected}", name(i)))
                })
                .collect();
            Task {
                instruction: format!(
                    "def {}(x):\n    \"\"\"Return x multiplied by {} plus {}.\n    >>> {}(1)\n    {}\n    \"\"\"\n",
                    name(i),
                    i + 2,
                    i,
                    name(i),
                    2 * i + 2
                ),
                id,
                unit_tests,
                canonical_code: Some(canonical(i)),
                origin: TaskOrigin::TeacherGenerated,
            }
        })
        .collect()
}

/// Index of the toy task a prompt is about.
pub fn task_index(text: &str) -> Option<usize> {
    let start = text.find("def scale_")? + "def scale_".len();
    let digits: String = text[start..].chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

pub fn student() -> EndpointConfig {
    EndpointConfig::mock("student")
}

pub fn teacher() -> EndpointConfig {
    EndpointConfig { price_per_1k_prompt_tokens: 0.0015, price_per_1k_completion_tokens: 0.002, ..EndpointConfig::mock("teacher") }
}

pub fn backend() -> MockBackend {
    MockBackend::default().with_responder(|endpoint: &EndpointConfig, request: &ChatRequest| {
        let i = task_index(&request.turns[0].content)?;
        let code = match endpoint.name.as_str() {
            "student" if i < N_STUDENT_FAILS => broken(i),
            "student" => canonical(i),
            "teacher" if request.turns.len() == 3 && i < N_TEACHER_REPAIRS => repaired(i),
            "teacher" if request.turns.len() == 3 => broken(i),
            _ => return None,
        };
        Some(vec![fenced(&code)])
    })
}

pub fn services_with(backend: Arc<dyn ChatBackend>) -> Services {
    Services::new(Gateway::new(backend), executor()).with_concurrency(4)
}

pub fn services() -> Services {
    services_with(Arc::new(backend()))
}
