use thiserror::Error;

use crate::hilbert::{ComponentId, ValidationReport};

#[derive(Debug, Error)]
pub enum Error {
    #[error("no component is realized")]
    NoRealized,

    #[error("component {0} is not ready")]
    NotReady(ComponentId),

    #[error("unknown component {0}")]
    UnknownComponent(ComponentId),

    #[error("continuous coupling {from} -> {to} joins a realized member to a ready member")]
    ContinuousIntoReady { from: usize, to: usize },

    #[error("degenerate state: active square modulus {0:e} is below the numerical floor")]
    DegenerateState(f64),

    #[error(
        "step controller cannot meet tolerance at t = {t}: step {h:e} fell below floor {floor:e}"
    )]
    StepUnderflow { t: f64, h: f64, floor: f64 },

    #[error("quadrature error estimate {estimate:e} exceeds requested {requested:e} with {n_steps} steps")]
    QuadratureResolution {
        estimate: f64,
        requested: f64,
        n_steps: usize,
    },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("graph failed validation:\n{0}")]
    Validation(ValidationReport),

    #[error("scenario format: {0}")]
    Format(String),

    #[error("unknown scenario id `{0}`")]
    UnknownScenario(String),

    #[error("trial {index}: {source}")]
    Trial {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DegenerateState(_)
            | Error::StepUnderflow { .. }
            | Error::QuadratureResolution { .. }
            | Error::Eigen(_) => true,
            Error::Trial { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
