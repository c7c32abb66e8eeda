use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("step ordering violated: t_to = {t_to} is after t_from = {t_from}")]
    Ordering { t_from: f64, t_to: f64 },

    #[error("conversion {from} -> {to} is singular at t = {t} (alpha = {alpha}, sigma = {sigma})")]
    SingularTime {
        from: &'static str,
        to: &'static str,
        t: f64,
        alpha: f64,
        sigma: f64,
    },

    #[error("invalid composition: {0}")]
    Spec(String),

    #[error("field lacks required capability: {0}")]
    Capability(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid construction: {0}")]
    Construction(String),

    #[error("no uniform score-error bound: {0}")]
    NoUniformBound(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}
