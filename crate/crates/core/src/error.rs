use thiserror::Error;

/// Every failure the estimators, simulator and harness can report.
///
/// `kind()` yields the bare variant name, which is what the CLI prints on
/// failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("clone window is full ({0} clones)")]
    WindowFull(usize),
    #[error("unknown clone id {0}")]
    UnknownClone(u64),
    #[error("keyframe requested {elapsed:.3} s after the previous one (interval {interval:.3} s)")]
    TooSoon { elapsed: f64, interval: f64 },
    #[error("accumulator holds deferred corrections; run global recovery first")]
    StaleAccumulator,
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("parallax {0:.4} deg below threshold")]
    LowParallax(f64),
    #[error("triangulation diverged")]
    Diverged,
    #[error("feature behind camera")]
    BehindCamera,
    #[error("unknown frame reference {0}")]
    UnknownFrameRef(String),
    #[error("feature jacobian rank deficient")]
    RankDeficientFeature,
    #[error("track references global keyframe {0}")]
    GlobalKeyframeTouched(u64),
    #[error("measurement block has non-local columns")]
    NonLocalBlock,
    #[error("innovation covariance is singular or ill-conditioned")]
    SingularInnovation,
    #[error("invalid trajectory spec: {0}")]
    InvalidSpec(String),
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error("pose covariance marginal is singular")]
    SingularMarginal,
    #[error("runs use different scenarios or seeds")]
    MismatchedScenarios,
    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    IoError(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Variant name, unwrapping step context.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::WindowFull(_) => "WindowFull",
            Error::UnknownClone(_) => "UnknownClone",
            Error::TooSoon { .. } => "TooSoon",
            Error::StaleAccumulator => "StaleAccumulator",
            Error::NonPositiveDt(_) => "NonPositiveDt",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::LowParallax(_) => "LowParallax",
            Error::Diverged => "Diverged",
            Error::BehindCamera => "BehindCamera",
            Error::UnknownFrameRef(_) => "UnknownFrameRef",
            Error::RankDeficientFeature => "RankDeficientFeature",
            Error::GlobalKeyframeTouched(_) => "GlobalKeyframeTouched",
            Error::NonLocalBlock => "NonLocalBlock",
            Error::SingularInnovation => "SingularInnovation",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::ConfigError(_) => "ConfigError",
            Error::SingularMarginal => "SingularMarginal",
            Error::MismatchedScenarios => "MismatchedScenarios",
            Error::AtStep { source, .. } => source.kind(),
            Error::IoError(_) => "IoError",
            Error::Csv(_) => "IoError",
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Error {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep { step, source: Box::new(e) },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
