use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid adjacency matrix: {0}")]
    InvalidAdjacency(String),

    #[error("invalid graph schedule: {0}")]
    InvalidSchedule(String),

    #[error("interval [{t0}, {t1}] is not inside the schedule horizon [0, {horizon}]")]
    OutsideHorizon { t0: f64, t1: f64, horizon: f64 },

    #[error("incidence matrix has a trivial kernel")]
    TrivialKernel,

    #[error("invalid matrix signal: {0}")]
    InvalidSignal(String),

    #[error("window [{t0}, {t1}] is not inside the sampled range [{start}, {end}]")]
    WindowOutsideSamples {
        t0: f64,
        t1: f64,
        start: f64,
        end: f64,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("state norm {norm:e} exceeded the blow-up threshold at t = {t}")]
    BlowUp { t: f64, norm: f64 },

    #[error("non-finite value in {what} at t = {t}")]
    NonFinite { what: &'static str, t: f64 },

    #[error("insufficient trajectory coverage: {0}")]
    Coverage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
