#![allow(dead_code)]

pub mod scenario;

use std::path::{Path, PathBuf};

use persd_core::domain::{ExecStatus, ExecutionFeedback, Task, TaskOrigin, TestKind, TestOutcome, TestResult, UnitTest};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(name)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Compares against a golden file; `PERSD_BLESS=1` rewrites it instead.
pub fn assert_golden(name: &str, actual: &str) {
    let path = fixture("golden").join(name);
    if std::env::var_os("PERSD_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "golden mismatch for {name}\n--- expected\n{expected}\n--- actual\n{actual}");
}

pub fn toy_task() -> Task {
    Task {
        id: "toy/running_max".into(),
        instruction: "def running_max(xs):\n    \"\"\"Return a list whose i-th element is the largest of xs[0..i].\n    >>> running_max([1, 3, 2])\n    [1, 3, 3]\n    \"\"\"\n".into(),
        unit_tests: vec![
            UnitTest::new("toy/running_max/0", TestKind::Hidden, "assert running_max([1, 3, 2]) == [1, 3, 3]"),
            UnitTest::new("toy/running_max/1", TestKind::Hidden, "assert running_max([]) == []"),
            UnitTest::new("toy/running_max/2", TestKind::Hidden, "assert running_max([5, 4]) == [5, 5]"),
        ],
        canonical_code: Some(
            "def running_max(xs):\n    out = []\n    for x in xs:\n        out.append(x if not out else max(out[-1], x))\n    return out"
                .into(),
        ),
        origin: TaskOrigin::TeacherGenerated,
    }
}

pub fn toy_attempt() -> String {
    "def running_max(xs):\n    out = []\n    for x in xs:\n        out.append(max(xs))\n    return out".into()
}

pub fn toy_feedback() -> ExecutionFeedback {
    ExecutionFeedback {
        status: ExecStatus::TestFailure,
        message: "AssertionError: assert running_max([1, 3, 2]) == [1, 3, 3]".into(),
        per_test: vec![
            TestResult { unit_test_id: "toy/running_max/0".into(), result: TestOutcome::Fail },
            TestResult { unit_test_id: "toy/running_max/1".into(), result: TestOutcome::Pass },
            TestResult { unit_test_id: "toy/running_max/2".into(), result: TestOutcome::Fail },
        ],
        wall_time_ms: 3,
    }
}

pub fn seed_tasks() -> Vec<Task> {
    [
        "Write a function to reverse words in a given string.",
        "Write a function to find the n-th Lucas number.",
        "Write a python function to count the number of digits in a number.",
        "Write a function to remove all whitespace from a string.",
        "Write a function to check if a list is sorted in ascending order.",
        "Write a function to compute the sum of squares of the first n natural numbers.",
        "Write a python function to find the first repeated character in a string.",
        "Write a function to merge two sorted lists into one sorted list.",
    ]
    .iter()
    .enumerate()
    .map(|(i, s)| Task {
        id: format!("seed/{}", 601 + i),
        instruction: s.to_string(),
        unit_tests: vec![],
        canonical_code: None,
        origin: TaskOrigin::Seed,
    })
    .collect()
}
