use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::eval::EvalError;
use crate::kv::KvError;
use crate::naming::NamingError;
use crate::pipeline::PipelineError;
use crate::prompt::{ParseError, PromptError};
use crate::vocabulary::VocabError;

/// Any failure from this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Naming(#[from] NamingError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Kv(#[from] KvError),
}
