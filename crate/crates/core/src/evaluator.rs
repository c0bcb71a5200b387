//! Sampling-based evaluation of a model endpoint: 1-step generation, optional
//! 2-step regeneration from seen-test feedback, and unbiased pass@k.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Attempt, AttemptStep, ExecStatus, SamplingConfig, Task, UnitTest};
use crate::exec::{ExecError, ExecLimits};
use crate::gateway::{EndpointConfig, GatewayError};
use crate::io::{sha256_hex, to_jsonl};
use crate::pipeline::Services;
use crate::prompting::{extract_seen_tests, parse_code_block, render_refinement_instruction, ChatTurn, RefinementTemplate, SeenMode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("domain_error: pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")]
    Domain { n: u64, c: u64, k: u64 },
    #[error("config_invalid: {0}")]
    Config(String),
    #[error("task {0} has no hidden tests")]
    NoHiddenTests(String),
    #[error("eval: {0}")]
    Gateway(GatewayError),
    #[error("eval: {0}")]
    Exec(ExecError),
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)`, computed as a running
/// product so that large `n` neither overflows nor loses precision.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, EvalError> {
    if c > n || k == 0 || k > n {
        return Err(EvalError::Domain { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut fail = 1.0f64;
    for i in (n - c + 1)..=n {
        fail *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - fail)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_samples: u32,
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    pub k_values: Vec<u32>,
    #[serde(default)]
    pub two_step: bool,
    /// Where seen tests come from when a task carries none of its own.
    #[serde(default = "default_seen_mode")]
    pub seen_mode: SeenMode,
}

fn default_top_p() -> f64 {
    0.95
}

fn default_max_tokens() -> u32 {
    512
}

fn default_seen_mode() -> SeenMode {
    SeenMode::DocstringExamples
}

impl EvalConfig {
    fn from_sampling(s: SamplingConfig, k_values: Vec<u32>) -> Self {
        Self {
            n_samples: s.n_samples,
            temperature: s.temperature,
            top_p: s.top_p,
            max_tokens: s.max_tokens,
            k_values,
            two_step: false,
            seen_mode: default_seen_mode(),
        }
    }

    /// 20 samples at temperature 0.2, for pass@1.
    pub fn pass1() -> Self {
        Self::from_sampling(SamplingConfig::pass1(), vec![1])
    }

    /// 100 samples at temperature 0.8, for pass@5 through pass@100.
    pub fn passk() -> Self {
        Self::from_sampling(SamplingConfig::passk(), vec![5, 10, 20, 50, 100])
    }

    pub fn profile(name: &str) -> Result<Self, EvalError> {
        match name {
            "pass1" => Ok(Self::pass1()),
            "passk" => Ok(Self::passk()),
            other => Err(EvalError::Config(format!("unknown profile {other:?} (expected pass1 or passk)"))),
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig { temperature: self.temperature, top_p: self.top_p, n_samples: self.n_samples, max_tokens: self.max_tokens }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        self.sampling().validate().map_err(EvalError::Config)?;
        if self.k_values.is_empty() {
            return Err(EvalError::Config("k_values is empty".into()));
        }
        if let Some(k) = self.k_values.iter().find(|k| **k == 0 || **k > self.n_samples) {
            return Err(EvalError::Config(format!("k={k} outside 1..={}", self.n_samples)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub task_id: String,
    pub n: u32,
    pub c_step1: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_step2: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalWarnings {
    /// Samples lost to endpoint errors; counted as incorrect.
    pub endpoint_failures: u32,
    /// Samples whose reply held no code; counted as incorrect.
    pub empty_code: u32,
    /// 2-step samples reused verbatim because the task has no seen tests.
    pub reused_without_seen_tests: u32,
    /// 2-step samples reused because no refinement prompt could be built.
    pub refinement_prompt_failures: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub endpoint: String,
    pub model: String,
    pub config: EvalConfig,
    pub limits: ExecLimits,
    pub corpus_hash: String,
    pub tasks: Vec<TaskCounts>,
    pub pass_at_k_step1: BTreeMap<u32, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_at_k_step2: Option<BTreeMap<u32, f64>>,
    pub warnings: EvalWarnings,
}

/// One generated sample and how it fared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub step1: Attempt,
    pub step1_status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen_status: Option<ExecStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step2: Option<Attempt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step2_status: Option<ExecStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub report: EvalReport,
    pub samples: Vec<EvalSample>,
}

pub fn corpus_hash(corpus: &[Task]) -> String {
    sha256_hex(to_jsonl(corpus).as_bytes())
}

fn hidden_tests(task: &Task) -> Result<Vec<UnitTest>, EvalError> {
    let hidden = task.hidden_tests();
    if hidden.is_empty() {
        return Err(EvalError::NoHiddenTests(task.id.clone()));
    }
    Ok(hidden)
}

fn seen_tests(task: &Task, mode: SeenMode) -> Vec<UnitTest> {
    let own = task.seen_tests();
    if own.is_empty() {
        extract_seen_tests(task, mode)
    } else {
        own
    }
}

/// Mean of per-task pass@k for every configured k.
pub fn aggregate(counts: impl Iterator<Item = (u32, u32)> + Clone, k_values: &[u32]) -> Result<BTreeMap<u32, f64>, EvalError> {
    let mut out = BTreeMap::new();
    for &k in k_values {
        let mut sum = 0.0;
        let mut tasks = 0usize;
        for (n, c) in counts.clone() {
            sum += pass_at_k(n as u64, c as u64, k as u64)?;
            tasks += 1;
        }
        out.insert(k, if tasks == 0 { 0.0 } else { sum / tasks as f64 });
    }
    Ok(out)
}

struct TaskResult {
    counts: TaskCounts,
    samples: Vec<EvalSample>,
    warnings: EvalWarnings,
}

async fn run_task(
    task: &Task,
    endpoint: &EndpointConfig,
    config: &EvalConfig,
    template: Option<&RefinementTemplate>,
    services: &Services,
) -> Result<TaskResult, EvalError> {
    let hidden = hidden_tests(task)?;
    let mut warnings = EvalWarnings::default();
    let sampling = config.sampling();
    let n = config.n_samples as usize;
    let turns = [ChatTurn::user(task.instruction.clone()).map_err(|e| EvalError::Config(format!("task {}: {e}", task.id)))?];
    let replies = match services.gateway.chat(endpoint, &turns, &sampling).await {
        Ok(r) => r.into_iter().map(Some).collect(),
        Err(e) if e.is_auth() => return Err(EvalError::Gateway(e)),
        Err(e) => {
            tracing::warn!("{}: sampling failed: {e}", task.id);
            warnings.endpoint_failures += n as u32;
            vec![None; n]
        }
    };

    let seen = template.map(|_| seen_tests(task, config.seen_mode));
    let mut samples = Vec::with_capacity(n);
    for (i, reply) in replies.into_iter().enumerate() {
        let step1 = Attempt {
            id: format!("{}/s{i}", task.id),
            task_id: task.id.clone(),
            code: reply.as_deref().map(parse_code_block).unwrap_or_default(),
            producer: endpoint.name.clone(),
            sampling,
            index: i as u32,
            step: AttemptStep::One,
            parent_id: None,
        };
        let step1_status = score(&step1.code, &hidden, services, &mut warnings, reply.is_some()).await?;
        let mut sample = EvalSample { step1, step1_status, seen_status: None, step2: None, step2_status: None };
        if let (Some(template), Some(seen)) = (template, seen.as_ref()) {
            two_step(task, endpoint, config, template, seen, &hidden, &mut sample, services, &mut warnings).await?;
        }
        samples.push(sample);
    }

    let passed = |s: Option<ExecStatus>| s.is_some_and(ExecStatus::is_passed);
    let counts = TaskCounts {
        task_id: task.id.clone(),
        n: n as u32,
        c_step1: samples.iter().filter(|s| s.step1_status.is_passed()).count() as u32,
        c_step2: template.map(|_| samples.iter().filter(|s| passed(s.step2_status)).count() as u32),
    };
    Ok(TaskResult { counts, samples, warnings })
}

/// Status of `code` against the hidden tests. Empty code is a failure
/// without execution.
async fn score(
    code: &str,
    hidden: &[UnitTest],
    services: &Services,
    warnings: &mut EvalWarnings,
    had_reply: bool,
) -> Result<ExecStatus, EvalError> {
    if code.trim().is_empty() {
        if had_reply {
            warnings.empty_code += 1;
        }
        return Ok(ExecStatus::CompileError);
    }
    let fb = services.executor.execute(code, hidden).await.map_err(EvalError::Exec)?;
    Ok(fb.status)
}

#[allow(clippy::too_many_arguments)]
async fn two_step(
    task: &Task,
    endpoint: &EndpointConfig,
    config: &EvalConfig,
    template: &RefinementTemplate,
    seen: &[UnitTest],
    hidden: &[UnitTest],
    sample: &mut EvalSample,
    services: &Services,
    warnings: &mut EvalWarnings,
) -> Result<(), EvalError> {
    let reuse = |sample: &mut EvalSample| {
        sample.step2 = Some(Attempt {
            id: format!("{}/step2", sample.step1.id),
            step: AttemptStep::Two,
            parent_id: Some(sample.step1.id.clone()),
            ..sample.step1.clone()
        });
        sample.step2_status = Some(sample.step1_status);
    };
    if seen.is_empty() {
        warnings.reused_without_seen_tests += 1;
        reuse(sample);
        return Ok(());
    }
    let code = sample.step1.code.clone();
    let fb_seen = if code.trim().is_empty() {
        None
    } else {
        Some(services.executor.execute(&code, seen).await.map_err(EvalError::Exec)?)
    };
    sample.seen_status = Some(fb_seen.as_ref().map_or(ExecStatus::CompileError, |f| f.status));
    // Passing samples carry over; so do empty ones, which have nothing to refine.
    let Some(fb_seen) = fb_seen.filter(|f| !f.passed()) else {
        reuse(sample);
        return Ok(());
    };
    let instruction = match render_refinement_instruction(task, &code, &fb_seen, template) {
        Ok(i) => i,
        Err(e) => {
            tracing::warn!("{}: no refinement prompt: {e}", task.id);
            warnings.refinement_prompt_failures += 1;
            reuse(sample);
            return Ok(());
        }
    };
    let turns = [ChatTurn::user(instruction).expect("rendered template is non-empty")];
    let reply = match services.gateway.chat(endpoint, &turns, &config.sampling().with_n(1)).await {
        Ok(mut r) => Some(r.remove(0)),
        Err(e) if e.is_auth() => return Err(EvalError::Gateway(e)),
        Err(e) => {
            tracing::warn!("{}: refinement query failed: {e}", task.id);
            warnings.endpoint_failures += 1;
            None
        }
    };
    let step2 = Attempt {
        id: format!("{}/step2", sample.step1.id),
        code: reply.as_deref().map(parse_code_block).unwrap_or_default(),
        step: AttemptStep::Two,
        parent_id: Some(sample.step1.id.clone()),
        sampling: config.sampling().with_n(1),
        ..sample.step1.clone()
    };
    sample.step2_status = Some(score(&step2.code, hidden, services, warnings, reply.is_some()).await?);
    sample.step2 = Some(step2);
    Ok(())
}

async fn run(
    corpus: &[Task],
    endpoint: &EndpointConfig,
    config: &EvalConfig,
    template: Option<&RefinementTemplate>,
    services: &Services,
) -> Result<EvalRun, EvalError> {
    config.validate()?;
    for task in corpus {
        hidden_tests(task)?;
    }
    let results = services
        .map_ordered(corpus.iter().collect(), |task| run_task(task, endpoint, config, template, services))
        .await;
    let mut tasks = Vec::new();
    let mut samples = Vec::new();
    let mut warnings = EvalWarnings::default();
    for r in results.into_iter().flatten() {
        let r = r?;
        warnings.endpoint_failures += r.warnings.endpoint_failures;
        warnings.empty_code += r.warnings.empty_code;
        warnings.reused_without_seen_tests += r.warnings.reused_without_seen_tests;
        warnings.refinement_prompt_failures += r.warnings.refinement_prompt_failures;
        tasks.push(r.counts);
        samples.extend(r.samples);
    }
    let pass_at_k_step1 = aggregate(tasks.iter().map(|t| (t.n, t.c_step1)), &config.k_values)?;
    let pass_at_k_step2 = match template {
        Some(_) => Some(aggregate(tasks.iter().map(|t| (t.n, t.c_step2.unwrap_or(0))), &config.k_values)?),
        None => None,
    };
    let report = EvalReport {
        endpoint: endpoint.name.clone(),
        model: endpoint.model.clone(),
        config: EvalConfig { two_step: template.is_some(), ..config.clone() },
        limits: *services.executor.limits(),
        corpus_hash: corpus_hash(corpus),
        tasks,
        pass_at_k_step1,
        pass_at_k_step2,
        warnings,
    };
    Ok(EvalRun { report, samples })
}

/// 1-step inference: `n_samples` completions per task scored on hidden tests.
pub async fn run_inference(
    corpus: &[Task],
    endpoint: &EndpointConfig,
    config: &EvalConfig,
    services: &Services,
) -> Result<EvalRun, EvalError> {
    run(corpus, endpoint, config, None, services).await
}

/// 2-step inference: samples failing their seen tests are regenerated once
/// from a refinement instruction; the rest carry over unchanged.
pub async fn run_two_step(
    corpus: &[Task],
    endpoint: &EndpointConfig,
    config: &EvalConfig,
    template: &RefinementTemplate,
    services: &Services,
) -> Result<EvalRun, EvalError> {
    run(corpus, endpoint, config, Some(template), services).await
}

/// Table with one row per labelled report and a `pass@k step=s` column for
/// every k and step present, values in percent.
pub fn report_table(rows: &[(String, EvalReport)]) -> Result<String, csv::Error> {
    let mut ks: Vec<u32> = rows.iter().flat_map(|(_, r)| r.pass_at_k_step1.keys().copied()).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string()];
    for k in &ks {
        header.push(format!("pass@{k} step=1"));
        header.push(format!("pass@{k} step=2"));
    }
    w.write_record(&header)?;
    let cell = |v: Option<&f64>| v.map(|v| format!("{:.2}", v * 100.0)).unwrap_or_default();
    for (label, r) in rows {
        let mut record = vec![label.clone()];
        for k in &ks {
            record.push(cell(r.pass_at_k_step1.get(k)));
            record.push(cell(r.pass_at_k_step2.as_ref().and_then(|m| m.get(k))));
        }
        w.write_record(&record)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        assert_eq!(pass_at_k(20, 20, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(5, 0, 3).unwrap(), 0.0);
        assert!((pass_at_k(2, 1, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!((pass_at_k(5, 2, 3).unwrap() - 0.9).abs() < 1e-12);
        assert!((pass_at_k(4, 2, 2).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        assert!(pass_at_k(3, 4, 1).is_err());
        assert!(pass_at_k(3, 1, 0).is_err());
        assert!(pass_at_k(3, 1, 4).is_err());
    }

    #[test]
    fn large_n_is_finite() {
        let p = pass_at_k(1000, 1, 1).unwrap();
        assert!((p - 0.001).abs() < 1e-12);
        let p = pass_at_k(1000, 500, 100).unwrap();
        assert!(p > 0.999_999 && p <= 1.0);
    }

    #[test]
    fn profiles() {
        assert_eq!(EvalConfig::pass1().n_samples, 20);
        assert_eq!(EvalConfig::passk().k_values, [5, 10, 20, 50, 100]);
        assert!(EvalConfig::profile("pass2").is_err());
        let bad = EvalConfig { k_values: vec![21], ..EvalConfig::pass1() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn table_layout() {
        let report = EvalReport {
            endpoint: "e".into(),
            model: "m".into(),
            config: EvalConfig::pass1(),
            limits: ExecLimits::default(),
            corpus_hash: String::new(),
            tasks: vec![],
            pass_at_k_step1: BTreeMap::from([(1, 0.5)]),
            pass_at_k_step2: Some(BTreeMap::from([(1, 0.625)])),
            warnings: EvalWarnings::default(),
        };
        let one_step = EvalReport { pass_at_k_step2: None, ..report.clone() };
        let t = report_table(&[("PERsD".into(), report), ("StanD".into(), one_step)]).unwrap();
        assert_eq!(t, "variant,pass@1 step=1,pass@1 step=2\nPERsD,50.00,62.50\nStanD,50.00,\n");
    }
}
