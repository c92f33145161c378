use std::fmt;

/// Errors produced across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("timestep {t} outside 1..={horizon}")]
    Index { t: usize, horizon: usize },

    #[error("gradient undefined at t = 1 (no predecessor step)")]
    UndefinedGradient,

    #[error("degenerate score curve: {0}")]
    DegenerateCurve(String),

    #[error("score curve has {} above-threshold regions: {}", .0.len(), Regions(.0))]
    AmbiguousCrossing(Vec<(usize, usize)>),

    #[error("target aggregate {target} infeasible (maximum reachable {max})")]
    Infeasible { target: f64, max: f64 },

    #[error("unknown allocation preset {0}")]
    UnknownPreset(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sparsity would prune all {heads} heads")]
    AllHeadsPruned { heads: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("non-finite activations captured at layer {0}")]
    Capture(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("internal: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

struct Regions<'a>(&'a [(usize, usize)]);

impl fmt::Display for Regions<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (lo, hi)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "[{lo}, {hi}]")?;
        }
        Ok(())
    }
}

pub(crate) fn shape_err(expected: impl fmt::Display, actual: impl fmt::Display) -> Error {
    Error::Shape {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
