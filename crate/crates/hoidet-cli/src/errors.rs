//! Process-level error categories and their exit codes.

use hoidet::classifiers::ClassifierError;
use hoidet::data_io::DataError;
use hoidet::eval::EvalError;
use hoidet::infer::InferError;
use hoidet::model::CheckpointError;
use hoidet::tensor::TensorError;
use hoidet::train::TrainError;

/// Every failure surfaces as one of three categories with a fixed exit
/// code: configuration problems (2), broken or missing artifacts (3), and
/// internal invariant violations (4).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Internal(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config error",
            CliError::Data(_) => "data error",
            CliError::Internal(_) => "internal error",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.category(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::BadConfig(_) | DataError::BadFraction(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BadMode(_) | EvalError::Infeasible(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::KOutOfRange { .. } => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::Classifier(inner) => CliError::from(inner),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Internal(e.to_string())
    }
}

/// Context helpers for errors whose category depends on the call site.
pub trait Ctx<T> {
    fn or_config(self, what: &str) -> Result<T>;
    fn or_data(self, what: &str) -> Result<T>;
    fn or_internal(self, what: &str) -> Result<T>;
}

impl<T, E: std::fmt::Display> Ctx<T> for std::result::Result<T, E> {
    fn or_config(self, what: &str) -> Result<T> {
        self.map_err(|e| CliError::Config(format!("{what}: {e}")))
    }

    fn or_data(self, what: &str) -> Result<T> {
        self.map_err(|e| CliError::Data(format!("{what}: {e}")))
    }

    fn or_internal(self, what: &str) -> Result<T> {
        self.map_err(|e| CliError::Internal(format!("{what}: {e}")))
    }
}
