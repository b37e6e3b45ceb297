use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("noise tensor needs {needed} entries, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u64 },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },

    #[error("matrix is numerically singular: smallest eigenvalue {min_eig:e}")]
    Singular { min_eig: f64 },

    #[error("matrix is not symmetric: residual {residual:e}")]
    Asymmetric { residual: f64 },

    #[error("negative radicand {0:e} in subspace distance")]
    NegativeRadicand(f64),

    #[error("envelope evaluated at or after blow-up time t* = {t_star}")]
    BlowUp { t_star: f64 },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Singular { .. } => true,
            Error::AtStep { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub(crate) fn at_step(self, step: u64) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }
}
