use gfm_core::density::DensityError;
use gfm_core::distill::DistillError;
use gfm_core::flowmatch::FmError;
use gfm_core::geodesic::GeodesicError;
use gfm_core::metrics::MetricsError;
use gfm_core::nets::NetError;
use gfm_core::persistence::PersistError;
use gfm_core::tasks::TaskError;
use thiserror::Error;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<gfm_core::csv::CsvError> for CliError {
    fn from(e: gfm_core::csv::CsvError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DensityError> for CliError {
    fn from(e: DensityError) -> Self {
        let msg = e.to_string();
        match e {
            DensityError::NonFinite { .. } => CliError::Numerical(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Persist(p) => p.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Persist(p) => p.into(),
            TaskError::Csv(c) => c.into(),
            TaskError::Density(d) => d.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<GeodesicError> for CliError {
    fn from(e: GeodesicError) -> Self {
        let msg = e.to_string();
        match e {
            GeodesicError::Config(_)
            | GeodesicError::Dimension { .. }
            | GeodesicError::TooFewNodes(_)
            | GeodesicError::OutsideBounds(_)
            | GeodesicError::NotPlanar(_) => CliError::Config(msg),
            _ => CliError::Numerical(msg),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        let msg = e.to_string();
        match e {
            DistillError::Config(_) | DistillError::Empty => CliError::Config(msg),
            DistillError::Net(n) => n.into(),
            DistillError::Density(d) => d.into(),
            DistillError::Metrics(m) => m.into(),
            _ => CliError::Numerical(msg),
        }
    }
}

impl From<FmError> for CliError {
    fn from(e: FmError) -> Self {
        let msg = e.to_string();
        match e {
            FmError::NonFinite { .. } | FmError::Diff(_) => CliError::Numerical(msg),
            FmError::Net(n) => n.into(),
            _ => CliError::Config(msg),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Net(n) => n.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}
