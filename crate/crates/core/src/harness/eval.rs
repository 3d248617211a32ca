//! Batch evaluation over a dataset.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use super::dataset::QuestionRecord;
use super::report::{summarize, EvalSummary};
use super::trace::TraceDocument;
use crate::controller::{Backends, Controller, ControllerConfig, ControllerError};
use crate::estimators::WeightProvider;
use crate::templates::PromptTemplates;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("workers must be >= 1")]
    Workers,
    #[error(transparent)]
    Config(#[from] ControllerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub summary: EvalSummary,
    /// One trace per question, in dataset order.
    pub traces: Vec<TraceDocument>,
}

pub struct EvalOptions<'a> {
    pub workers: usize,
    pub templates: &'a PromptTemplates,
    pub weights: &'a dyn WeightProvider,
}

fn run_one(
    record: &QuestionRecord,
    config: &ControllerConfig,
    backends: &Backends,
    opts: &EvalOptions<'_>,
) -> TraceDocument {
    let controller = Controller {
        config,
        backends,
        templates: opts.templates,
        weights: opts.weights,
    };
    let version = &opts.templates.version;
    match controller.run(&record.question, &record.options) {
        Ok(outcome) => {
            TraceDocument::from_outcome(&record.id, record.answer, config, version, &outcome)
        }
        Err(failure) => {
            tracing::warn!(question = %record.id, error = %failure.error, "question failed");
            TraceDocument::from_failure(&record.id, record.answer, config, version, &failure)
        }
    }
}

/// Runs every record and summarizes. Scripted backends are consumed in
/// dataset order, so they always run on one worker.
pub fn run_eval(
    dataset: &[QuestionRecord],
    config: &ControllerConfig,
    backends: &Backends,
    opts: &EvalOptions<'_>,
) -> Result<EvalRun, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if opts.workers == 0 {
        return Err(EvalError::Workers);
    }
    config.validate()?;
    let workers = if backends.is_scripted() {
        if opts.workers > 1 {
            tracing::info!("scripted backend: running on a single worker");
        }
        1
    } else {
        opts.workers.min(dataset.len())
    };

    let traces: Vec<TraceDocument> = if workers == 1 {
        dataset
            .iter()
            .map(|r| run_one(r, config, backends, opts))
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let sink: Mutex<Vec<Option<TraceDocument>>> = Mutex::new(vec![None; dataset.len()]);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(record) = dataset.get(i) else { break };
                    let trace = run_one(record, config, backends, opts);
                    sink.lock().expect("trace sink poisoned")[i] = Some(trace);
                });
            }
        });
        sink.into_inner()
            .expect("trace sink poisoned")
            .into_iter()
            .map(|t| t.expect("every question produces a trace"))
            .collect()
    };

    let summary = summarize(config, &traces);
    Ok(EvalRun { summary, traces })
}
