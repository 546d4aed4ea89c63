//! Post-processing of stored results: summaries, histograms, usage reports
//! and configurable pipelines.

mod histogram;
mod pipeline;
mod summary;
mod usage;

pub use histogram::{histogram, Bin};
pub use pipeline::{
    check, parse_pipeline, plot_data, run_pipeline, stage_def, Artifact, Data, DataKind, HistogramSeries, Input,
    OutputFormat, PipelineSpec, Series, StageDef, StageSpec, STAGES, SUMMARY_COLUMNS,
};
pub use summary::{summarize, FiveNumber, MetricSummary, NOTCH_K};
pub use usage::{
    canonical_topic, node_availability, usage_report, usage_report_with, FinishedEntry, NodeAvailability, Period,
    TopicRow, UsageOptions, UsageReport, OTHER_TOPIC, TOPICS,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no values to summarize")]
    EmptyInput,
    #[error("values must be finite")]
    NonFinite,
    #[error("confidence {0} outside (0, 1)")]
    BadConfidence(f64),
    #[error("bin width {0} must be positive")]
    BadBinWidth(f64),
    #[error("no experiments in period {0}")]
    EmptyPeriod(String),
    #[error("cannot read period `{0}`")]
    BadPeriod(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("stage `{stage}`: {message}")]
    StageParam { stage: String, message: String },
    #[error("stage `{stage}`: {message}")]
    StageType { stage: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("input: {0}")]
    Input(String),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::EmptyInput => "EMPTY_INPUT",
            EvalError::NonFinite => "NON_FINITE",
            EvalError::BadConfidence(_) => "BAD_CONFIDENCE",
            EvalError::BadBinWidth(_) => "BAD_BIN_WIDTH",
            EvalError::EmptyPeriod(_) => "EMPTY_PERIOD",
            EvalError::BadPeriod(_) => "BAD_PERIOD",
            EvalError::UnknownStage(_) => "UNKNOWN_STAGE",
            EvalError::StageParam { .. } => "STAGE_PARAM",
            EvalError::StageType { .. } => "STAGE_TYPE",
            EvalError::Parse { .. } => "PARSE",
            EvalError::Input(_) => "INPUT",
        }
    }
}
