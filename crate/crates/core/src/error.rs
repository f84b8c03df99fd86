use std::fmt;
use std::path::PathBuf;

use distill_tensor::TensorError;

use crate::registry::Category;

/// One problem found while validating a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    /// Dotted location in the config tree, e.g. `train.stage2.criterion`.
    pub location: String,
    pub message: String,
}

impl Issue {
    pub fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Issue { location: location.into(), message: message.into() }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

/// Which side of a module invocation a capture refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Input,
    Output,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Input => "input",
            Side::Output => "output",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{category} '{name}' is already registered")]
    DuplicateRegistration { category: Category, name: String },

    #[error("invalid component name {0:?}")]
    InvalidName(String),

    #[error("unknown {category} '{name}'{}", suggest(.suggestions))]
    UnknownComponent { category: Category, name: String, suggestions: Vec<String> },

    #[error("failed to construct {category} '{name}' (params: {}): {message}", .params.join(", "))]
    Construction { category: Category, name: String, params: Vec<String>, message: String },

    #[error("invalid parameter '{name}': {message}")]
    InvalidParam { name: String, message: String },

    #[error("YAML syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },

    #[error("unresolved alias *{anchor}")]
    UnresolvedAlias { anchor: String },

    #[error("!join element {index} is a {found}; only strings, numbers and booleans can be joined")]
    TypeErrorJoin { index: usize, found: String },

    #[error("unsupported tag {0}")]
    UnknownTag(String),

    #[error("invalid configuration:\n{}", .0.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<Issue>),

    #[error("stage {stage} is incomplete; missing: {}", .missing.join(", "))]
    IncompleteStage { stage: usize, missing: Vec<String> },

    #[error("no module at path '{path}'{}", suggest(.suggestions))]
    UnknownModulePath { path: String, suggestions: Vec<String> },

    #[error("nothing captured for {side} of '{path}' (generation {generation})")]
    MissingCapture { path: String, side: Side, generation: u64 },

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("storage error at {}: {source}", .path.display())]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cache has no entries for indices {0:?}")]
    CacheMiss(Vec<usize>),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("malformed file {}: {message}", .path.display())]
    Format { path: PathBuf, message: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { context: String, expected: Vec<usize>, got: Vec<usize> },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("zero-norm attention/factor map in {0}")]
    ZeroNorm(String),

    #[error("loss term '{term}' is not finite ({})", .values.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", "))]
    NonFiniteLoss { term: String, values: Vec<(String, f64)> },

    #[error("stage {stage}, epoch {epoch}, step {step}: {source}")]
    InStage {
        stage: usize,
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Other(String),
}

fn suggest(s: &[String]) -> String {
    if s.is_empty() {
        String::new()
    } else {
        format!("; did you mean {}?", s.iter().map(|x| format!("'{x}'")).collect::<Vec<_>>().join(", "))
    }
}

impl Error {
    /// Validation-class errors: the configuration itself is at fault.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Syntax { .. }
            | Error::UnresolvedAlias { .. }
            | Error::TypeErrorJoin { .. }
            | Error::UnknownTag(_)
            | Error::Validation(_)
            | Error::IncompleteStage { .. }
            | Error::UnknownComponent { .. }
            | Error::UnknownModulePath { .. }
            | Error::InvalidParam { .. }
            | Error::Construction { .. } => true,
            Error::InStage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Storage { path, source }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
