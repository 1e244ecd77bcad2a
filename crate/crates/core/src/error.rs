use alloc::string::String;

/// Errors shared by the linear-algebra, model and checking layers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical rank {rank} exceeds the allowed rank {budget}")]
    RankExceeded { rank: usize, budget: usize },
    #[error("need at least {need} vectors, got {have}")]
    TooFewVectors { have: usize, need: usize },
    #[error("{assumption} does not hold: {detail}")]
    AssumptionFailed { assumption: &'static str, detail: String },
    #[error("{examples} examples exceed the guaranteed capacity {capacity}")]
    CapacityExceeded { examples: usize, capacity: usize },
    #[error("head {head}: saturation scale exceeded cap {c_max:e} (L1 gap {l1_gap:e}, block rank {block_rank}/{required_rank})")]
    ScaleCapExceeded {
        head: usize,
        c_max: f64,
        l1_gap: f64,
        block_rank: usize,
        required_rank: usize,
    },
    #[error("head {head}: retry budget of {attempts} exhausted during {stage}")]
    BudgetExhausted {
        head: usize,
        stage: &'static str,
        attempts: usize,
    },
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("memorization check failed: max relative error {max_rel_error:e}")]
    VerificationFailed { max_rel_error: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(alloc::format!($($arg)*))
    };
}

macro_rules! arg_err {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}

pub(crate) use arg_err;
pub(crate) use dim_err;
