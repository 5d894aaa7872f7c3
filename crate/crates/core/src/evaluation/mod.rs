//! Answer scoring against ground-truth scene graphs.
//!
//! Free-text answers are parsed into attribute mentions (categories,
//! quantities, grid locations, relation triples), compared with the
//! annotation graph as sets, and pooled across images into micro-averaged
//! recall, precision and F1. Also provides consensus VQA accuracy, the
//! top-k ablation runner and report rendering.

mod ablation;
mod mentions;
mod metrics;
mod report;

use thiserror::Error;

pub use ablation::{
    default_questions, read_questions, run_ablation, score_transcript, AblationRow, EvalSummary,
    Pipeline, QaItem, Vocabulary, DEFAULT_K_VALUES, DEFAULT_QUESTION,
};
pub use mentions::{
    extract_mentions, tokenize, ExtractedMentions, LocationLexicon, MentionMatcher, RelationKey,
    GRID_SYNONYMS,
};
pub use metrics::{
    count_attributes, f1, normalize_answer, score_attributes, vqa_accuracy, AttributeCounts,
    AttributeScores, ConfusionCounts, GroundTruthRecord, Prf,
};
pub use report::{render_report, ReportFormat, ReportRow, ATTRIBUTE_COLUMNS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("consensus accuracy needs at least 3 human answers, got {0}")]
    TooFewAnswers(usize),
    #[error("k values must be non-empty and at least 1, got {0:?}")]
    InvalidKValues(Vec<usize>),
    #[error("image `{0}` is not in the dataset")]
    UnknownImage(String),
    #[error("question file line {line}: {message}")]
    Questions { line: usize, message: String },
    #[error("could not start worker pool: {0}")]
    Pool(String),
}
