mod common;

use std::collections::BTreeMap;

use common::*;
use persd_core::domain::{Task, TestKind};
use persd_core::prompting::*;
use proptest::prelude::*;

fn chat_transcript(turns: &[ChatTurn]) -> String {
    turns.iter().map(|t| format!("=== {} ===\n{}\n", t.role.as_str(), t.content)).collect()
}

#[test]
fn refinement_instruction_matches_golden() {
    let out = render_refinement_instruction(&toy_task(), &toy_attempt(), &toy_feedback(), &RefinementTemplate::builtin()).unwrap();
    assert_golden("refinement_instruction.txt", &out);
}

#[test]
fn teacher_chat_matches_golden() {
    let turns = render_teacher_refinement_chat(&toy_task(), &toy_attempt(), &toy_feedback(), &PromptSet::builtin()).unwrap();
    assert_golden("teacher_refinement_chat.txt", &chat_transcript(&turns));
}

#[test]
fn task_generation_matches_golden() {
    let out = render_task_generation_prompt(&seed_tasks(), 3, 7, &PromptSet::builtin().task_generation).unwrap();
    assert_golden("task_generation.txt", &out);
}

#[test]
fn test_input_prompt_matches_golden() {
    let out = render_test_input_prompt(&toy_task(), &PromptSet::builtin().test_inputs).unwrap();
    assert_golden("test_inputs.txt", &out);
}

#[test]
fn template_dir_overrides_builtin() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("refine.txt"), "T=<<TASK>>|C=<<CODE>>|E=<<ERROR>>|H=<<HEADER>>").unwrap();
    let set = PromptSet::load_dir(dir.path()).unwrap();
    let out = render_refinement_instruction(&toy_task(), "c", &toy_feedback(), &set.refine).unwrap();
    assert!(out.starts_with("T=def running_max(xs):"));
    assert!(out.ends_with("|H=def running_max(xs):"));
    assert_eq!(set.teacher_turn1, PromptSet::builtin().teacher_turn1);

    std::fs::write(dir.path().join("teacher_turn2.txt"), "only <<CODE>>").unwrap();
    assert!(matches!(PromptSet::load_dir(dir.path()), Err(PromptError::TemplateInvalid(_))));
}

fn marker_count(s: &str) -> usize {
    let mut n = 0;
    let mut rest = s;
    while let Some(i) = rest.find("<<") {
        let tail = &rest[i + 2..];
        let name_len = tail.bytes().take_while(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || *b == b'_').count();
        if name_len > 0 && tail[name_len..].starts_with(">>") {
            n += 1;
        }
        rest = &rest[i + 2..];
    }
    n
}

fn all_renders(instr: &str, code: &str, message: &str) -> Vec<String> {
    let mut task = toy_task();
    task.instruction = format!("def f(a, b):\n{instr}");
    task.canonical_code = Some(code.to_string());
    let mut fb = toy_feedback();
    fb.message = message.to_string();
    let set = PromptSet::builtin();
    let mut seeds = seed_tasks();
    seeds[0].instruction = instr.to_string();
    vec![
        render_refinement_instruction(&task, code, &fb, &set.refine).unwrap(),
        chat_transcript(&render_teacher_refinement_chat(&task, code, &fb, &set).unwrap()),
        render_task_generation_prompt(&seeds, seeds.len(), 1, &set.task_generation).unwrap(),
        render_test_input_prompt(&task, &set.test_inputs).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn renders_leave_no_placeholder(instr in "[^<]{0,60}", code in "[^<]{1,60}", msg in "[^<]{0,60}") {
        prop_assume!(!code.trim().is_empty());
        for out in all_renders(&instr, &code, &msg) {
            prop_assert!(!out.contains("<<"), "{}", out);
        }
    }

    #[test]
    fn inserted_text_is_never_rescanned(
        instr in "([a-z ]|<<TASK>>|<<CODE>>|<<){0,8}",
        code in "x([a-z ]|<<ERROR>>|<<HEADER>>){0,8}",
        msg in "([a-z ]|<<TASK>>|<<X>>){0,8}",
    ) {
        let outs = all_renders(&instr, &code, &msg);
        // Refinement instruction carries instr (task + header line), code and msg.
        let expected = marker_count(&instr) + marker_count(&code) + marker_count(&msg);
        prop_assert_eq!(marker_count(&outs[0]), expected);
    }
}

#[test]
fn doctest_fixture_extraction_is_complete() {
    let corpus: Vec<Task> = read_jsonl(&fixture("fixtures/doctest_corpus.jsonl"));
    let expected: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&std::fs::read_to_string(fixture("fixtures/doctest_expected.json")).unwrap()).unwrap();
    assert_eq!(corpus.len(), 20);
    let (mut found, mut total) = (0, 0);
    for task in &corpus {
        let got: Vec<String> = extract_seen_tests(task, SeenMode::DocstringExamples).into_iter().map(|t| t.assertion).collect();
        let want = &expected[&task.id];
        total += want.len();
        found += want.iter().filter(|a| got.contains(a)).count();
        assert_eq!(&got, want, "task {}", task.id);
    }
    assert_eq!(found, total);
}

#[test]
fn all_seen_is_pure_relabeling() {
    let corpus: Vec<Task> = read_jsonl(&fixture("fixtures/doctest_corpus.jsonl"));
    for task in &corpus {
        let seen = extract_seen_tests(task, SeenMode::AllSeen);
        assert_eq!(seen.len(), task.unit_tests.len());
        for (s, t) in seen.iter().zip(&task.unit_tests) {
            assert_eq!((s.id.as_str(), s.assertion.as_str(), s.kind), (t.id.as_str(), t.assertion.as_str(), TestKind::Seen));
        }
    }
}
