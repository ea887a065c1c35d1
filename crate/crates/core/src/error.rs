use std::fmt;

/// Partitioning scheme names used in error messages and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    YPlane,
    Channel,
    Hybrid,
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::YPlane => "yplane",
            SchemeKind::Channel => "channel",
            SchemeKind::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("infeasible budget for {scheme}: needs at least {required} bytes, budget is {budget} bytes")]
    InfeasibleBudget {
        scheme: SchemeKind,
        required: u64,
        budget: u64,
    },

    #[error("access [{offset}, {offset}+{len}) out of bounds for buffer '{label}' of {buffer_len} bytes")]
    Bounds {
        label: String,
        offset: usize,
        len: usize,
        buffer_len: usize,
    },

    #[error("invalid enclave configuration: {0}")]
    Config(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("model file: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl fmt::Display, actual: impl fmt::Display) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn at_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }

    /// True when this error (or the error it wraps) is an infeasible budget.
    pub fn is_infeasible(&self) -> bool {
        match self {
            Error::InfeasibleBudget { .. } => true,
            Error::Layer { source, .. } => source.is_infeasible(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
