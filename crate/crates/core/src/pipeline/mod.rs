//! Distillation data construction: the standard corpus, student attempts,
//! personalised teacher refinements and the dataset variants built from them.

mod corpus;
mod refine;
mod variants;

use std::future::Future;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use thiserror::Error;

use crate::domain::SamplingConfig;
use crate::exec::{ExecError, Executor};
use crate::gateway::{Gateway, GatewayError};
use crate::prompting::{PromptError, PromptSet};

pub use corpus::{build_stand_corpus, CorpusOptions, CorpusStats};
pub use refine::{
    collect_personalised_refinements, collect_student_attempts, first_failures, run_round, AttemptsOutput, PipelineRound,
    RoundOutput, RoundStats, SkippedTask,
};
pub use variants::{emit_all_variants, emit_variant};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Gateway { stage: &'static str, source: GatewayError },
    #[error("{stage}: {source}")]
    Exec { stage: &'static str, source: ExecError },
    #[error("{stage}: {source}")]
    Prompt { stage: &'static str, source: PromptError },
    #[error("dangling_task: {0}")]
    DanglingTask(String),
    #[error("invalid_round: {0}")]
    InvalidRound(String),
    #[error("invalid_input: {0}")]
    InvalidInput(String),
}

/// Default decoding for teacher queries other than attempts.
pub fn teacher_sampling() -> SamplingConfig {
    SamplingConfig::new(0.7, 1)
}

/// Everything a stage needs to talk to models and run code.
#[derive(Clone)]
pub struct Services {
    pub gateway: Arc<Gateway>,
    pub executor: Arc<Executor>,
    pub prompts: Arc<PromptSet>,
    /// Upper bound on concurrently processed work items.
    pub concurrency: usize,
    /// Once set, work items not yet started are skipped and outputs are partial.
    pub cancel: Arc<AtomicBool>,
}

impl Services {
    pub fn new(gateway: Gateway, executor: Executor) -> Self {
        Self {
            gateway: Arc::new(gateway),
            executor: Arc::new(executor),
            prompts: Arc::new(PromptSet::builtin()),
            concurrency: 8,
            cancel: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn with_prompts(mut self, prompts: PromptSet) -> Self {
        self.prompts = Arc::new(prompts);
        self
    }

    pub fn with_concurrency(mut self, concurrency: usize) -> Self {
        self.concurrency = concurrency.max(1);
        self
    }

    pub fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Runs `f` over `items` with bounded concurrency, keeping input order.
    /// Items reached after cancellation yield `None`.
    pub(crate) async fn map_ordered<I, T, F, Fut>(&self, items: Vec<I>, f: F) -> Vec<Option<T>>
    where
        F: Fn(I) -> Fut,
        Fut: Future<Output = T>,
    {
        stream::iter(items)
            .map(|item| {
                let fut = (!self.cancelled()).then(|| f(item));
                async move {
                    match fut {
                        Some(fut) => Some(fut.await),
                        None => None,
                    }
                }
            })
            .buffered(self.concurrency)
            .collect()
            .await
    }
}
