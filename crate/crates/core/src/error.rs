use alloc::string::String;

use crate::datagen::QuestionType;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("constraint infeasible: no scene answers `{template}` with `{answer}` after {attempts} attempts")]
    ConstraintInfeasible {
        template: String,
        answer: String,
        attempts: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: usize, vocab: usize },
    #[error("empty question")]
    EmptyQuestion,
    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("question type {0} has no samples")]
    EmptyType(QuestionType),
    #[error("every question type is empty")]
    EmptyReport,
    #[error("reports come from different datasets: `{0}` vs `{1}`")]
    DatasetMismatch(String, String),
    #[error("wrong dataset split: expected {expected}, found {found}")]
    WrongSplit {
        expected: &'static str,
        found: &'static str,
    },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
}
