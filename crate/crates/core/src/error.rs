use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("window too small: horizon {horizon} exceeds t_max {t_max}")]
    WindowTooSmall { horizon: f64, t_max: f64 },

    #[error("skeleton does not cover disaster at time {time}")]
    SkeletonMismatch { time: f64 },

    #[error("oracle scale exceeded: {0}")]
    OracleScaleExceeded(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("empty measure")]
    EmptyMeasure,

    #[error("particle budget insufficient: {censored} of {total} environments censored at t = {t}")]
    ParticleBudget { t: f64, censored: usize, total: usize },

    #[error("strategy soundness violated: {0} surviving paths were hit")]
    StrategyUnsound(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
