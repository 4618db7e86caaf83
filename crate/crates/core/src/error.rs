use thiserror::Error;

/// Errors produced by the bridgekit library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside its domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("{op} does not support schedule kind {kind}")]
    UnsupportedKind { op: &'static str, kind: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("velocity is singular at t = {t} (sigma^2 = 0); clamp t to at least t_min")]
    Singularity { t: f64 },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite gradient in tensor {tensor} at element {index}")]
    NonFiniteGradient { tensor: usize, index: usize },

    #[error("non-finite loss at step {step} (inputs hash {inputs_hash:016x})")]
    NonFiniteLoss { step: usize, inputs_hash: u64 },

    #[error("sampler diverged at step {step}: state is no longer finite")]
    SamplerDivergence { step: usize },

    #[error("forward cache does not match the parameters it is used with")]
    StaleCache,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible model: {0}")]
    Incompatible(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_unit_time(what: &'static str, t: f64) -> Result<()> {
    if t.is_finite() && (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            what,
            value: t,
            domain: "[0, 1]",
        })
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
