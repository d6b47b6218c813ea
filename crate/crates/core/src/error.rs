use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("SafeExp must be applied with safe_exp_query / safe_exp_key")]
    SafeExpNeedsDedicatedOp,

    #[error("streaming key normalization requires a StreamingMaxState")]
    MissingStreamingState,

    #[error("sum-normalization denominator {value:e} below {eps:e} at position {position}")]
    Degenerate { position: usize, value: f64, eps: f64 },

    #[error("{mode} mode is not available for the {gate} update rule")]
    UnsupportedMode { mode: &'static str, gate: &'static str },

    #[error("invalid attention config: {0}")]
    Config(String),
}

pub(crate) fn ensure_finite<'a, T, I>(values: I, what: &'static str) -> Result<()>
where
    T: crate::Scalar,
    I: IntoIterator<Item = &'a T>,
{
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
