//! Prompt rendering and the small parsers that read teacher replies and task
//! instructions (function headers, doc-string examples, test inputs, code fences).

mod scan;
pub mod template;

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ExecutionFeedback, Task, TestKind, UnitTest};
pub use template::Template;

/// Number of test inputs requested from the teacher per generated task.
pub const NUM_TEST_INPUTS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("template_invalid: {0}")]
    TemplateInvalid(String),
    #[error("passed_feedback: refinement requested for a passing attempt")]
    PassedFeedback,
    #[error("missing_canonical: task {0} has no canonical code")]
    MissingCanonical(String),
    #[error("no_header_found: task {0} contains no function definition")]
    NoHeaderFound(String),
    #[error("empty_seeds: no seed tasks supplied")]
    EmptySeeds,
    #[error("too_many_exemplars: requested {requested}, only {available} seeds")]
    TooManyExemplars { requested: usize, available: usize },
    #[error("empty_turn: chat turn content is empty")]
    EmptyTurn,
    #[error("template_io: {0}")]
    Io(String),
}

/// The code-refinement instruction template. Holds exactly one each of
/// `<<TASK>>`, `<<CODE>>`, `<<ERROR>>` and `<<HEADER>>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinementTemplate(Template);

impl RefinementTemplate {
    pub const PLACEHOLDERS: [&'static str; 4] = ["TASK", "CODE", "ERROR", "HEADER"];

    pub fn new(text: impl Into<String>) -> Result<Self, PromptError> {
        Template::new(text, &Self::PLACEHOLDERS).map(Self)
    }

    pub fn builtin() -> Self {
        Self::new(include_str!("../../templates/refine.txt")).expect("builtin refine template")
    }

    pub fn text(&self) -> &str {
        self.0.text()
    }
}

/// Every template the pipeline renders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub refine: RefinementTemplate,
    pub teacher_turn1: Template,
    pub teacher_turn2: Template,
    pub task_generation: Template,
    pub test_inputs: Template,
    pub overlap_judge: Template,
}

const TEMPLATE_FILES: [(&str, &[&str]); 5] = [
    ("teacher_turn1.txt", &["TASK", "HEADER"]),
    ("teacher_turn2.txt", &["CODE", "ERROR"]),
    ("task_generation.txt", &["EXAMPLES"]),
    ("test_inputs.txt", &["TASK", "CODE", "NUM_INPUTS"]),
    ("overlap_judge.txt", &["TEST_TASK", "TRAIN_TASK"]),
];

impl PromptSet {
    pub fn builtin() -> Self {
        let t = |text: &str, i: usize| Template::new(text, TEMPLATE_FILES[i].1).expect("builtin template");
        Self {
            refine: RefinementTemplate::builtin(),
            teacher_turn1: t(include_str!("../../templates/teacher_turn1.txt"), 0),
            teacher_turn2: t(include_str!("../../templates/teacher_turn2.txt"), 1),
            task_generation: t(include_str!("../../templates/task_generation.txt"), 2),
            test_inputs: t(include_str!("../../templates/test_inputs.txt"), 3),
            overlap_judge: t(include_str!("../../templates/overlap_judge.txt"), 4),
        }
    }

    /// Builtin templates, overridden by any same-named file found in `dir`
    /// (`refine.txt`, `teacher_turn1.txt`, ...).
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(None);
            }
            std::fs::read_to_string(&path)
                .map(Some)
                .map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))
        };
        if let Some(text) = read("refine.txt")? {
            set.refine = RefinementTemplate::new(text)?;
        }
        for (name, placeholders) in TEMPLATE_FILES {
            let Some(text) = read(name)? else { continue };
            let template = Template::new(text, placeholders)
                .map_err(|e| PromptError::TemplateInvalid(format!("{name}: {e}")))?;
            match name {
                "teacher_turn1.txt" => set.teacher_turn1 = template,
                "teacher_turn2.txt" => set.teacher_turn2 = template,
                "task_generation.txt" => set.task_generation = template,
                "test_inputs.txt" => set.test_inputs = template,
                _ => set.overlap_judge = template,
            }
        }
        Ok(set)
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: ChatRole,
    pub content: String,
}

impl ChatTurn {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Result<Self, PromptError> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(PromptError::EmptyTurn);
        }
        Ok(Self { role, content })
    }

    pub fn user(content: impl Into<String>) -> Result<Self, PromptError> {
        Self::new(ChatRole::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Result<Self, PromptError> {
        Self::new(ChatRole::Assistant, content)
    }
}

/// Returns the first top-level `def` signature in the instruction, from the
/// start of its line through the colon that ends it. Signatures spanning
/// several lines are returned whole.
pub fn extract_function_header(task: &Task) -> Result<String, PromptError> {
    find_header(&task.instruction).ok_or_else(|| PromptError::NoHeaderFound(task.id.clone()))
}

/// Header from the instruction, falling back to the canonical solution for
/// prose-only instructions.
pub fn header_for(task: &Task) -> Result<String, PromptError> {
    find_header(&task.instruction)
        .or_else(|| task.canonical_code.as_deref().and_then(find_header))
        .ok_or_else(|| PromptError::NoHeaderFound(task.id.clone()))
}

fn find_header(text: &str) -> Option<String> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        if !(line.starts_with("def ") || line.starts_with("async def ")) {
            continue;
        }
        let rest = &text[start..];
        let mut colon = None;
        scan::walk(rest, |i, c, depth| {
            if c == ':' && depth == 0 {
                colon = Some(i);
                return false;
            }
            true
        });
        if let Some(end) = colon {
            return Some(rest[..=end].to_string());
        }
    }
    None
}

/// Positional parameter arity `(required, max)` of a header; `max` is `None`
/// when the function takes `*args`.
pub fn header_arity(header: &str) -> Option<(usize, Option<usize>)> {
    let open = header.find('(')?;
    let close = scan::matching_close(header, open)?;
    let params = scan::split_top_level(&header[open + 1..close], ',')?;
    let (mut required, mut total, mut variadic) = (0, 0, false);
    for p in params.iter().map(|p| p.trim()).filter(|p| !p.is_empty()) {
        if p == "/" {
            continue;
        }
        if p.starts_with("**") {
            continue;
        }
        if p.starts_with('*') {
            if p != "*" {
                variadic = true;
            }
            break;
        }
        total += 1;
        let has_default = scan::split_top_level(p, '=').map(|parts| parts.len() > 1).unwrap_or(false);
        if !has_default {
            required += 1;
        }
    }
    Some((required, (!variadic).then_some(total)))
}

fn refusing_passed(feedback: &ExecutionFeedback) -> Result<(), PromptError> {
    if feedback.passed() {
        return Err(PromptError::PassedFeedback);
    }
    Ok(())
}

/// Renders the code-refinement instruction for a failing attempt.
pub fn render_refinement_instruction(
    task: &Task,
    attempt_code: &str,
    feedback: &ExecutionFeedback,
    template: &RefinementTemplate,
) -> Result<String, PromptError> {
    refusing_passed(feedback)?;
    let header = header_for(task)?;
    Ok(template.0.render(&[
        ("TASK", &task.instruction),
        ("CODE", attempt_code),
        ("ERROR", &feedback.message),
        ("HEADER", &header),
    ]))
}

/// Two-turn conversation asking the teacher to repair the student's attempt:
/// the teacher's own solution sits in the first assistant turn.
pub fn render_teacher_refinement_chat(
    task: &Task,
    attempt_code: &str,
    feedback: &ExecutionFeedback,
    prompts: &PromptSet,
) -> Result<Vec<ChatTurn>, PromptError> {
    let canonical = task
        .canonical_code
        .as_deref()
        .ok_or_else(|| PromptError::MissingCanonical(task.id.clone()))?;
    refusing_passed(feedback)?;
    let header = header_for(task)?;
    Ok(vec![
        ChatTurn::user(prompts.teacher_turn1.render(&[("TASK", &task.instruction), ("HEADER", &header)]))?,
        ChatTurn::assistant(canonical)?,
        ChatTurn::user(prompts.teacher_turn2.render(&[("CODE", attempt_code), ("ERROR", &feedback.message)]))?,
    ])
}

/// Task-generation prompt with `n_in_context` seed instructions drawn
/// uniformly without replacement.
pub fn render_task_generation_prompt(
    seed_tasks: &[Task],
    n_in_context: usize,
    rng_seed: u64,
    template: &Template,
) -> Result<String, PromptError> {
    if seed_tasks.is_empty() {
        return Err(PromptError::EmptySeeds);
    }
    if n_in_context > seed_tasks.len() {
        return Err(PromptError::TooManyExemplars {
            requested: n_in_context,
            available: seed_tasks.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let picked = index::sample(&mut rng, seed_tasks.len(), n_in_context);
    let mut examples = String::new();
    for (i, idx) in picked.iter().enumerate() {
        examples.push_str(&format!("\n### Example {}\n{}\n", i + 1, seed_tasks[idx].instruction.trim_end()));
    }
    Ok(template.render(&[("EXAMPLES", &examples)]))
}

pub fn render_test_input_prompt(task: &Task, template: &Template) -> Result<String, PromptError> {
    let code = task
        .canonical_code
        .as_deref()
        .ok_or_else(|| PromptError::MissingCanonical(task.id.clone()))?;
    Ok(template.render(&[
        ("TASK", &task.instruction),
        ("CODE", code),
        ("NUM_INPUTS", &NUM_TEST_INPUTS.to_string()),
    ]))
}

pub fn render_judge_prompt(test_task: &Task, train_task: &Task, template: &Template) -> String {
    template.render(&[
        ("TEST_TASK", test_task.instruction.trim()),
        ("TRAIN_TASK", train_task.instruction.trim()),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeenMode {
    DocstringExamples,
    AllSeen,
}

/// Seen tests of a task. In `DocstringExamples` mode each `>>> expr` line
/// followed by a single result line becomes `assert expr == result`;
/// examples that do not fit that shape are skipped.
pub fn extract_seen_tests(task: &Task, mode: SeenMode) -> Vec<UnitTest> {
    match mode {
        SeenMode::AllSeen => task
            .unit_tests
            .iter()
            .map(|t| UnitTest { kind: TestKind::Seen, ..t.clone() })
            .collect(),
        SeenMode::DocstringExamples => doctest_assertions(&task.instruction)
            .into_iter()
            .enumerate()
            .map(|(i, a)| UnitTest::new(format!("{}/seen/{i}", task.id), TestKind::Seen, a))
            .collect(),
    }
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

fn is_docstring_end(s: &str) -> bool {
    s.starts_with("\"\"\"") || s.starts_with("'''")
}

fn doctest_assertions(text: &str) -> Vec<String> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let trimmed = line.trim_start();
        let trimmed = trimmed
            .strip_prefix("\"\"\"")
            .or_else(|| trimmed.strip_prefix("'''"))
            .unwrap_or(trimmed);
        let Some(expr) = trimmed.strip_prefix(">>>") else { continue };
        if !(expr.is_empty() || expr.starts_with(' ')) {
            continue;
        }
        let expr = expr.trim();
        if expr.is_empty() || expr.starts_with("print(") || !scan::balanced(expr) {
            continue;
        }
        let Some(next) = lines.get(i + 1) else { continue };
        let mut expected = next.trim();
        if expected.is_empty() || expected.starts_with(">>>") || expected.starts_with("...") {
            continue;
        }
        if expected.starts_with("Traceback") || is_docstring_end(expected) {
            continue;
        }
        for quote in ["\"\"\"", "'''"] {
            if let Some(stripped) = expected.strip_suffix(quote) {
                if !scan::balanced(expected) {
                    expected = stripped.trim_end();
                }
            }
        }
        if expected.is_empty() || !scan::balanced(expected) {
            continue;
        }
        let continued = lines.get(i + 2).is_some_and(|after| {
            let t = after.trim();
            !t.is_empty() && !t.starts_with(">>>") && !is_docstring_end(t) && indent_of(after) >= indent_of(next)
        });
        if continued {
            continue;
        }
        out.push(format!("assert {expr} == {expected}"));
    }
    out
}

/// Content of the first fenced code block, or the whole reply trimmed when
/// there is no fence.
pub fn parse_code_block(reply: &str) -> String {
    let Some(open) = reply.find("```") else {
        return reply.trim().to_string();
    };
    let after_open = &reply[open + 3..];
    let body_start = after_open.find('\n').map(|i| i + 1).unwrap_or(after_open.len());
    let body = &after_open[body_start..];
    let body = match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    };
    body.trim_matches('\n').trim_end().to_string()
}

/// Splits a generated-task reply into (instruction, solution code).
pub fn parse_generated_task(reply: &str) -> Option<(String, String)> {
    let inst_at = reply.find("### Instruction")?;
    let rest = &reply[inst_at + "### Instruction".len()..];
    let sol_at = rest.find("### Solution")?;
    let instruction = rest[..sol_at].trim().to_string();
    let code = parse_code_block(&rest[sol_at + "### Solution".len()..]);
    (!instruction.is_empty() && !code.is_empty()).then_some((instruction, code))
}

/// Argument lists (as Python source, e.g. `"1, [2, 3]"`) proposed by the
/// teacher. Unparseable entries are dropped, duplicates removed, and at most
/// five kept. When the task's header is known, entries with the wrong number
/// of positional arguments are dropped too.
pub fn parse_test_inputs(reply: &str, task: &Task) -> Vec<String> {
    let arity = header_for(task).ok().and_then(|h| header_arity(&h));
    let body = if reply.contains("```") { parse_code_block(reply) } else { reply.to_string() };
    let entries = list_entries(&body).unwrap_or_else(|| line_entries(&body));
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for entry in entries {
        let Some(args) = entry_arguments(entry.trim(), arity) else { continue };
        if seen.insert(scan::squash_whitespace(&args)) {
            out.push(args);
        }
        if out.len() == NUM_TEST_INPUTS {
            break;
        }
    }
    out
}

fn list_entries(body: &str) -> Option<Vec<&str>> {
    let open = body.find('[')?;
    let close = scan::matching_close(body, open)?;
    let parts = scan::split_top_level(&body[open + 1..close], ',')?;
    Some(parts.into_iter().filter(|p| !p.trim().is_empty()).collect())
}

fn line_entries(body: &str) -> Vec<&str> {
    body.lines()
        .map(|l| l.trim().trim_end_matches(','))
        .filter(|l| l.starts_with('('))
        .collect()
}

fn entry_arguments(entry: &str, arity: Option<(usize, Option<usize>)>) -> Option<String> {
    if entry.is_empty() || !scan::balanced(entry) {
        return None;
    }
    let wrapped = entry.starts_with('(') && scan::matching_close(entry, 0) == Some(entry.len() - 1);
    let args: Vec<&str> = if wrapped {
        let inner = &entry[1..entry.len() - 1];
        let mut parts: Vec<&str> = scan::split_top_level(inner, ',')?.into_iter().map(str::trim).collect();
        if parts.last() == Some(&"") {
            parts.pop();
        }
        if parts.iter().any(|p| p.is_empty()) {
            return None;
        }
        parts
    } else {
        vec![entry]
    };
    let fits = |n: usize| arity.is_none_or(|(lo, hi)| n >= lo && hi.is_none_or(|hi| n <= hi));
    if fits(args.len()) {
        return Some(args.join(", "));
    }
    // A lone tuple argument written without the extra parentheses.
    if wrapped && args.len() > 1 && fits(1) {
        return Some(entry.to_string());
    }
    None
}
