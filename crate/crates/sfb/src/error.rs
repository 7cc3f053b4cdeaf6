use std::fmt;
use std::path::PathBuf;

/// Pipeline stage named in runtime failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Train,
    Calibrate,
    Adapt,
    Evaluate,
    Sweep,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Generate => "generate",
            Self::Train => "train",
            Self::Calibrate => "calibrate",
            Self::Adapt => "adapt",
            Self::Evaluate => "evaluate",
            Self::Sweep => "sweep",
            Self::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{stage} stage failed: {source}")]
    Core {
        stage: Stage,
        #[source]
        source: sfb_core::Error,
    },
    #[error("{stage} stage failed on {}: {source}", path.display())]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage} stage failed: {message}")]
    Format { stage: Stage, message: String },
    #[error("{stage} stage failed: {message}")]
    MissingData { stage: Stage, message: String },
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            _ => 1,
        }
    }

    pub fn io(stage: Stage, path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { stage, path, source }
    }

    pub fn format(stage: Stage, message: impl fmt::Display) -> Self {
        Self::Format { stage, message: message.to_string() }
    }
}

/// Attaches a stage to core errors.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, HarnessError>;
}

impl<T> StageExt<T> for Result<T, sfb_core::Error> {
    fn stage(self, stage: Stage) -> Result<T, HarnessError> {
        self.map_err(|source| HarnessError::Core { stage, source })
    }
}
