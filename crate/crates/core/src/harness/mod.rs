//! Dataset loading, batch evaluation, traces, reports and estimator
//! comparison.

pub mod compare;
pub mod dataset;
pub mod eval;
pub mod report;
pub mod trace;

pub use compare::{compare_estimators, Comparison, CompareCase, ThetaSweep};
pub use dataset::{load_dataset, parse_dataset, QuestionRecord};
pub use eval::{run_eval, EvalOptions, EvalRun};
pub use report::{emit_report, format_percent, summarize, EvalSummary, ReportFormat};
pub use trace::{load_traces, TraceDocument};
