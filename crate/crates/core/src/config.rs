//! Run configuration: one TOML file holding endpoints, paths, limits and
//! decoding profiles. Secrets stay in environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::SamplingConfig;
use crate::evaluator::EvalConfig;
use crate::exec::{ExecLimits, RunnerCommand};
use crate::gateway::EndpointConfig;
use crate::io::sha256_hex;
use crate::pipeline::{teacher_sampling, CorpusOptions};
use crate::prompting::SeenMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config_invalid: {0}")]
    Invalid(String),
    #[error("missing_input: {0}")]
    MissingInput(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub output_dir: PathBuf,
    /// Seed tasks shown in task-generation prompts.
    #[serde(default)]
    pub seeds: Option<PathBuf>,
    /// Training corpus; written by `gen-corpus`, read by later stages.
    pub corpus: PathBuf,
    /// Evaluation benchmark.
    #[serde(default)]
    pub benchmark: Option<PathBuf>,
    /// Corpus checked against the benchmark by `overlap`; defaults to `corpus`.
    #[serde(default)]
    pub train_corpus: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub teacher: EndpointConfig,
    pub student: EndpointConfig,
    #[serde(default)]
    pub judge: Option<EndpointConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Recorded exchanges served by the replay backend.
    #[serde(default)]
    pub transcript: Option<PathBuf>,
    /// Where to write a transcript of live exchanges, if anywhere.
    #[serde(default)]
    pub record: Option<PathBuf>,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_ms: u64,
}

fn default_request_timeout() -> u64 {
    120_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingProfiles {
    pub attempt: SamplingConfig,
    pub teacher: SamplingConfig,
    pub pass1: EvalConfig,
    pub passk: EvalConfig,
}

impl Default for SamplingProfiles {
    fn default() -> Self {
        Self {
            attempt: SamplingConfig::attempt(),
            teacher: teacher_sampling(),
            pass1: EvalConfig::pass1(),
            passk: EvalConfig::passk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub target_count: usize,
    pub n_in_context: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        let d = CorpusOptions::default();
        Self { target_count: d.target_count, n_in_context: d.n_in_context }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlapSettings {
    pub top_k: usize,
}

impl Default for OverlapSettings {
    fn default() -> Self {
        Self { top_k: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Personalised rounds the configured student has been trained on.
    #[serde(default)]
    pub student_trained_rounds: u32,
    pub paths: Paths,
    pub runner: RunnerCommand,
    #[serde(default)]
    pub limits: ExecLimits,
    /// Keep runner wall times in outputs. Off by default because timings
    /// make otherwise identical reruns differ byte-wise.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub sampling: SamplingProfiles,
    #[serde(default)]
    pub corpus: CorpusSettings,
    #[serde(default)]
    pub overlap: OverlapSettings,
    #[serde(default = "default_seen_mode")]
    pub seen_mode: SeenMode,
    pub endpoints: Endpoints,
    pub backend: BackendConfig,
}

fn default_concurrency() -> usize {
    8
}

fn default_seen_mode() -> SeenMode {
    SeenMode::DocstringExamples
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string().replace('\n', " ").trim().to_string()))
    }

    /// Reads, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::MissingInput(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        resolve(base, &mut p.output_dir);
        resolve(base, &mut p.corpus);
        for x in [&mut p.seeds, &mut p.benchmark, &mut p.train_corpus, &mut p.templates].into_iter().flatten() {
            resolve(base, x);
        }
        // A bare program name is looked up on PATH by the OS.
        if self.runner.program.components().count() > 1 {
            resolve(base, &mut self.runner.program);
        }
        for x in [&mut self.backend.transcript, &mut self.backend.record].into_iter().flatten() {
            resolve(base, x);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.concurrency == 0 {
            return Err(invalid("concurrency must be at least 1"));
        }
        let e = &self.endpoints;
        for endpoint in [Some(&e.teacher), Some(&e.student), e.judge.as_ref()].into_iter().flatten() {
            endpoint.validate().map_err(|err| invalid(err.to_string()))?;
        }
        for (name, s) in [("attempt", &self.sampling.attempt), ("teacher", &self.sampling.teacher)] {
            s.validate().map_err(|m| invalid(format!("sampling.{name}: {m}")))?;
        }
        for (name, p) in [("pass1", &self.sampling.pass1), ("passk", &self.sampling.passk)] {
            p.validate().map_err(|m| invalid(format!("sampling.{name}: {m}")))?;
        }
        self.limits.validate().map_err(|m| invalid(m.to_string()))?;
        if self.overlap.top_k == 0 {
            return Err(invalid("overlap.top_k must be at least 1"));
        }
        if self.runner.program.components().count() > 1 && !self.runner.program.exists() {
            return Err(ConfigError::MissingInput(format!("runner {}", self.runner.program.display())));
        }
        if let Some(t) = &self.paths.templates {
            if !t.is_dir() {
                return Err(ConfigError::MissingInput(format!("templates {}", t.display())));
            }
        }
        if self.backend.kind == BackendKind::Replay {
            match &self.backend.transcript {
                None => return Err(invalid("backend.transcript is required for the replay backend")),
                Some(t) if !t.exists() => return Err(ConfigError::MissingInput(format!("transcript {}", t.display()))),
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Hash of the resolved configuration, recorded in manifests.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    pub fn corpus_options(&self) -> CorpusOptions {
        CorpusOptions {
            target_count: self.corpus.target_count,
            n_in_context: self.corpus.n_in_context,
            rng_seed: self.rng_seed,
            teacher_sampling: self.sampling.teacher,
        }
    }

    pub fn eval_profile(&self, name: &str) -> Result<EvalConfig, ConfigError> {
        let mut profile = match name {
            "pass1" => self.sampling.pass1.clone(),
            "passk" => self.sampling.passk.clone(),
            other => return Err(invalid(format!("unknown profile {other:?} (expected pass1 or passk)"))),
        };
        profile.seen_mode = self.seen_mode;
        Ok(profile)
    }

    /// Endpoint by name, among teacher, student and judge.
    pub fn endpoint(&self, name: &str) -> Result<&EndpointConfig, ConfigError> {
        let e = &self.endpoints;
        [Some(&e.teacher), Some(&e.student), e.judge.as_ref()]
            .into_iter()
            .flatten()
            .find(|x| x.name == name)
            .ok_or_else(|| invalid(format!("no endpoint named {name:?}")))
    }
}
