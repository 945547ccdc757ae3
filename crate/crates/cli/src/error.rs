use std::io;
use std::path::{Path, PathBuf};

use biasprobe::concepts::ConceptError;
use biasprobe::data::{BundleError, DataError};
use biasprobe::mitigate::MitigateError;
use biasprobe::model::ModelError;
use biasprobe::pipeline::PipelineError;
use biasprobe::probe::ProbeError;
use biasprobe::stats::StatsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("{} was produced with config {found}, this run uses {expected}", path.display())]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::HashMismatch { .. } => 2,
            CliError::FileNotFound(_) | CliError::Io(_) => 3,
            CliError::Schema(_) => 4,
            CliError::Failed(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            CliError::FileNotFound(path.to_path_buf())
        } else {
            CliError::Io(format!("{}: {e}", path.display()))
        }
    }
}

fn from_io(e: &io::Error) -> CliError {
    CliError::Io(e.to_string())
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::InvalidSpec(_) | DataError::PatchTooLarge { .. } | DataError::ZeroStride => {
                CliError::Config(e.to_string())
            }
            DataError::Io(io) => from_io(io),
            DataError::Format { .. } => CliError::Schema(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ModelError::Io(io) => from_io(io),
            ModelError::Format(_) | ModelError::DimensionMismatch { .. } => CliError::Schema(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<ConceptError> for CliError {
    fn from(e: ConceptError) -> Self {
        match e {
            ConceptError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ConceptError::Data(d) => d.into(),
            ConceptError::Model(m) => m.into(),
            ConceptError::Io(io) => from_io(&io),
            ConceptError::Format(_) | ConceptError::IncompatibleWidth { .. } => CliError::Schema(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ProbeError::Model(m) => m.into(),
            ProbeError::Concept(c) => c.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<MitigateError> for CliError {
    fn from(e: MitigateError) -> Self {
        match e {
            MitigateError::Model(m) => m.into(),
            MitigateError::Concept(c) => c.into(),
            MitigateError::UnknownConcept { .. } => CliError::Schema(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Model(m) => m.into(),
            StatsError::Concept(c) => c.into(),
            StatsError::IncompatibleWidth { .. } | StatsError::MissingBiasLabels => CliError::Schema(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data(x) => x.into(),
            PipelineError::Model(x) => x.into(),
            PipelineError::Concept(x) => x.into(),
            PipelineError::Probe(x) => x.into(),
            PipelineError::Mitigate(x) => x.into(),
            PipelineError::Stats(x) => x.into(),
            PipelineError::InvalidConfig(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<BundleError> for CliError {
    fn from(e: BundleError) -> Self {
        match &e {
            BundleError::Io(io) => from_io(io),
            _ => CliError::Schema(e.to_string()),
        }
    }
}
