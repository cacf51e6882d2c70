use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("delay must be positive, got {0}")]
    NonPositiveDelay(f64),

    #[error("sampling grid is empty")]
    DegenerateGrid,

    #[error("omega = {omega} lies outside [-{r}, 0]")]
    OutOfDomain { omega: f64, r: f64 },

    #[error("step {step} does not divide the delay {r}")]
    StepMisaligned { step: f64, r: f64 },

    #[error("lag {lag} is positive but shorter than the step {step}")]
    LagShorterThanStep { lag: f64, step: f64 },

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("time order violated: t = {t} < s = {s}")]
    TimeOrder { t: f64, s: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unstable basis coordinates could not be solved (residual {residual:.3e})")]
    SingularUnstableBasis { residual: f64 },

    #[error("empty xi window: lower bound {lo} >= upper bound {hi}")]
    EmptyWindow { lo: f64, hi: f64 },

    #[error("xi = {xi} is outside the open window ({lo}, {hi})")]
    XiOutOfWindow { xi: f64, lo: f64, hi: f64 },

    #[error("tail envelope needs span {needed:.3} beyond max_span {max_span}")]
    TruncationUnreachable { needed: f64, max_span: f64 },

    #[error("measured contraction ratio >= 1 on sweeps {sweep} and {}: {ratios:?}", sweep + 1)]
    NotContracting { sweep: usize, ratios: Vec<f64> },

    #[error("model: {0}")]
    Model(String),

    #[error("expression: {0}")]
    Expression(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing series: {0}")]
    MissingSeries(String),
}
