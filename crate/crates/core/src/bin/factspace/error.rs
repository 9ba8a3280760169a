use std::path::Path;

use factspace::checkpoint::CheckpointError;
use factspace::datagen::SynthError;
use factspace::fact::FactError;
use factspace::lang::LangError;
use factspace::pipeline::PipelineError;
use factspace::retrieval::RetrievalError;
use factspace::training::TrainError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_MISSING_FILE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn missing(path: &Path) -> Self {
        CliError {
            code: EXIT_MISSING_FILE,
            kind: "missing_file",
            message: format!("no such file: {}", path.display()),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            kind: "validation",
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FAILURE,
            kind: "io",
            message: message.into(),
        }
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        serde_json::json!({ "error": self.kind, "code": self.code, "message": self.message })
            .to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::validation(e.to_string().replace('\n', " "))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError {
                code: EXIT_DIVERGENCE,
                kind: "divergence",
                message: e.to_string(),
            },
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<FactError> for CliError {
    fn from(e: FactError) -> Self {
        match e {
            FactError::Io(io) => io.into(),
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<LangError> for CliError {
    fn from(e: LangError) -> Self {
        match e {
            LangError::Io(io) => io.into(),
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Io(io) => io.into(),
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Fact(f) => f.into(),
            SynthError::Lang(l) => l.into(),
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => io.into(),
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Train(t) => t.into(),
            PipelineError::Fact(f) => f.into(),
            PipelineError::Lang(l) => l.into(),
            PipelineError::Retrieval(r) => r.into(),
            other => CliError::validation(other.to_string()),
        }
    }
}
