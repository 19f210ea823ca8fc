use thiserror::Error;

/// Errors raised anywhere in the learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("network is disconnected: {0}")]
    Disconnected(String),

    #[error("duplicate bus id {0}")]
    DuplicateBus(i64),

    #[error("reference to unknown bus {0}")]
    UnknownBus(i64),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular elimination block in Kron reduction: {0}")]
    SingularElimination(String),

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("angle kernel requested for zero eigenvalue mode {0}")]
    ZeroModeAngle(usize),

    #[error("unstable pole {re:.3e}{im:+.3e}i")]
    UnstablePole { re: f64, im: f64 },

    #[error("resonant pole pair: |p_k + p_l| = {0:.3e}")]
    ResonantPoles(f64),

    #[error("equal-time covariance of {0} requires a filter")]
    UnfilteredImpulse(String),

    #[error("not enough samples: need {need}, have {have}")]
    InsufficientSamples { need: usize, have: usize },

    #[error("rank-deficient design: {deficiency} unknown(s) not identifiable")]
    RankDeficient { deficiency: usize },

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("simulation unstable: state norm exceeded bound, max eigenvalue real part {0:.3e}")]
    Unstable(f64),

    #[error("filter design: {0}")]
    FilterDesign(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("unknown unit tag {0:?}")]
    UnknownUnit(String),

    #[error("missing artifact {0}")]
    MissingArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for errors caused by bad user input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::Parse { .. }
                | Error::Disconnected(_)
                | Error::DuplicateBus(_)
                | Error::UnknownBus(_)
                | Error::Invalid(_)
                | Error::Dimension(_)
                | Error::ZeroModeAngle(_)
                | Error::UnfilteredImpulse(_)
                | Error::InsufficientSamples { .. }
                | Error::UnknownUnit(_)
                | Error::MissingArtifact(_)
                | Error::Config(_)
                | Error::FilterDesign(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
