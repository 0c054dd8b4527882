//! Score-distillation laboratory over toy denoisers.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`]: dense row-major tensors and a reverse-mode tape.
//! * [`rng`]: counter-keyed deterministic noise streams.
//! * [`schedule`]: variance-preserving noise schedules.
//! * [`denoiser`]: trainable MLP denoisers, analytic Gaussian denoisers,
//!   low-rank adapters and learnable condition embeddings.
//! * [`priors`]: score-distillation gradient rules and the two-loop
//!   distillation driver.
//! * [`generators`]: differentiable parameter-to-sample maps (identity
//!   particles, 2D splat scenes).
//! * [`oracle`]: closed-form fixed points, Monte Carlo expected gradients,
//!   finite-difference checks, MMD.
//! * [`dataset`]: synthetic 2D mixtures and raster targets.
//! * [`harness`]: run configs, checkpoints, metrics, end-to-end drivers.

pub mod dataset;
pub mod denoiser;
pub mod generators;
pub mod harness;
pub mod optim;
pub mod oracle;
pub mod priors;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{Dtype, Scalar, Tensor};

/// Unified error type for the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("condition id {id} out of range for table with {rows} rows")]
    UnknownCondition { id: usize, rows: usize },

    #[error("timestep {t} outside schedule range 0..{steps}")]
    BadTimestep { t: usize, steps: usize },

    #[error("{what}: expected {expected}, got {got}")]
    Invalid {
        what: String,
        expected: String,
        got: String,
    },

    #[error("checkpoint magic mismatch: expected \"LODS\", got {got:?}")]
    BadMagic { got: [u8; 4] },

    #[error("checkpoint version {found} not supported (current {supported})")]
    BadVersion { found: u32, supported: u32 },

    #[error("checkpoint truncated while reading {reading}")]
    Truncated { reading: String },

    #[error("checkpoint missing tensor {name:?}")]
    MissingTensor { name: String },

    #[error("unknown dtype tag {tag}")]
    BadDtype { tag: u8 },

    #[error("optimisation diverged at step {step}: |grad| = {norm}")]
    Diverged { step: u64, norm: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
