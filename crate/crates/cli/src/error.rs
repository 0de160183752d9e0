use std::fmt;

use gradepipe_core::analytics::AnalyticsError;
use gradepipe_core::backend::BackendError;
use gradepipe_core::config::ConfigError;
use gradepipe_core::grade::GradeError;
use gradepipe_core::ingest::IngestError;
use gradepipe_core::messaging::MessageError;
use gradepipe_core::pipeline::{Failure, FailureClass};
use gradepipe_core::report::ReportError;
use gradepipe_core::results::ResultsError;
use gradepipe_core::template::TemplateError;
use gradepipe_review::ReviewError;
use serde::Serialize;

/// Exit status groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorClass {
    Validation,
    Backend,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Validation => 2,
            ErrorClass::Backend => 3,
            ErrorClass::Io => 4,
        }
    }
}

impl From<FailureClass> for ErrorClass {
    fn from(c: FailureClass) -> Self {
        match c {
            FailureClass::Validation => ErrorClass::Validation,
            FailureClass::Backend => ErrorClass::Backend,
            FailureClass::Io => ErrorClass::Io,
        }
    }
}

/// The machine-readable record printed to stderr on failure.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub error: &'static str,
    pub class: ErrorClass,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<Failure>,
}

impl CliError {
    pub fn new(error: &'static str, class: ErrorClass, message: impl Into<String>) -> Self {
        CliError {
            error,
            class,
            message: message.into(),
            failures: Vec::new(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new("ValidationError", ErrorClass::Validation, message)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new(
            "IoError",
            ErrorClass::Io,
            format!("{}: {e}", path.display()),
        )
    }

    /// Summarizes per-region failures. Backend problems outrank I/O, which
    /// outranks validation, when choosing the exit status.
    pub fn from_failures(stage: &str, failures: Vec<Failure>) -> Self {
        let class = [
            FailureClass::Backend,
            FailureClass::Io,
            FailureClass::Validation,
        ]
        .into_iter()
        .find(|c| failures.iter().any(|f| f.class == *c))
        .unwrap_or(FailureClass::Validation);
        CliError {
            error: "PartialFailure",
            class: class.into(),
            message: format!(
                "{stage} failed for {} item(s); progress was saved",
                failures.len()
            ),
            failures,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.error, self.message)
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => Self::new("IoError", ErrorClass::Io, e.to_string()),
            _ => Self::new("IngestError", ErrorClass::Validation, e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::new("IoError", ErrorClass::Io, e.to_string()),
            _ => Self::new("ConfigError", ErrorClass::Validation, e.to_string()),
        }
    }
}

impl From<ResultsError> for CliError {
    fn from(e: ResultsError) -> Self {
        match e {
            ResultsError::Io { .. } => Self::new("IoError", ErrorClass::Io, e.to_string()),
            _ => Self::new("ResultsError", ErrorClass::Validation, e.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => Self::new("IoError", ErrorClass::Io, e.to_string()),
            ReportError::Analytics(_) => {
                Self::new("AnalyticsError", ErrorClass::Validation, e.to_string())
            }
        }
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        Self::new("AnalyticsError", ErrorClass::Validation, e.to_string())
    }
}

impl From<MessageError> for CliError {
    fn from(e: MessageError) -> Self {
        match e {
            MessageError::Io { .. } => Self::new("IoError", ErrorClass::Io, e.to_string()),
            _ => Self::new("MessageError", ErrorClass::Validation, e.to_string()),
        }
    }
}

impl From<TemplateError> for CliError {
    fn from(e: TemplateError) -> Self {
        Self::new("TemplateError", ErrorClass::Validation, e.to_string())
    }
}

impl From<GradeError> for CliError {
    fn from(e: GradeError) -> Self {
        Self::new("GradeError", ErrorClass::Validation, e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        Self::new("BackendError", ErrorClass::Backend, e.to_string())
    }
}

impl From<ReviewError> for CliError {
    fn from(e: ReviewError) -> Self {
        match e {
            ReviewError::Io { .. } | ReviewError::CorruptLog { .. } => {
                Self::new("StorageError", ErrorClass::Io, e.to_string())
            }
            _ => Self::new("ReviewError", ErrorClass::Validation, e.to_string()),
        }
    }
}
