use std::path::Path;
use std::process::ExitCode;

use elodin::eval::EvalError;
use elodin::naming::NamingError;
use elodin::pipeline::PipelineError;
use elodin::prompt::{ParseError, PromptError};
use elodin::vocabulary::VocabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: flags, prompts, config or data files.
    #[error("{0}")]
    Validation(String),
    /// Failure while running: I/O, numerical breakdown, failed self-checks.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Validation(_) => ExitCode::from(2),
            Self::Runtime(_) => ExitCode::from(3),
        }
    }

    /// Prefixes validation messages with the file they concern.
    pub fn context(self, path: &Path) -> Self {
        match self {
            Self::Validation(m) if !m.contains(&*path.to_string_lossy()) => {
                Self::Validation(format!("{}: {m}", path.display()))
            }
            other => other,
        }
    }
}

/// Parse error rendered with a caret under the offending character.
pub fn positioned(prompt: &str, e: &ParseError) -> CliError {
    let caret = " ".repeat(e.position());
    CliError::Validation(format!("invalid prompt: {e}\n  {prompt}\n  {caret}^"))
}

fn pipeline_is_runtime(e: &PipelineError) -> bool {
    matches!(e, PipelineError::Io { .. })
}

fn naming_is_runtime(e: &NamingError) -> bool {
    match e {
        NamingError::NonFinite { .. } | NamingError::ZeroVector | NamingError::Autodiff(_) => true,
        NamingError::Pipeline(p) => pipeline_is_runtime(p),
        _ => false,
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if pipeline_is_runtime(&e) {
            Self::Runtime(e.to_string())
        } else {
            Self::Validation(e.to_string())
        }
    }
}

impl From<NamingError> for CliError {
    fn from(e: NamingError) -> Self {
        if naming_is_runtime(&e) {
            Self::Runtime(e.to_string())
        } else {
            Self::Validation(e.to_string())
        }
    }
}

impl From<VocabError> for CliError {
    fn from(e: VocabError) -> Self {
        match e {
            VocabError::Io { .. } => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match &e {
            PromptError::Pipeline(p) if pipeline_is_runtime(p) => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let runtime = match &e {
            EvalError::Io { .. } => true,
            EvalError::Naming { source, .. } => naming_is_runtime(source),
            EvalError::Vocab(VocabError::Io { .. }) => true,
            EvalError::Pipeline(p) => pipeline_is_runtime(p),
            _ => false,
        };
        if runtime {
            Self::Runtime(e.to_string())
        } else {
            Self::Validation(e.to_string())
        }
    }
}

impl From<elodin::kv::KvError> for CliError {
    fn from(e: elodin::kv::KvError) -> Self {
        Self::Validation(e.to_string())
    }
}
