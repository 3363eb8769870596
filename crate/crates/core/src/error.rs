//! Crate-wide error type and the process exit codes the CLI maps it to.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("class {class} weight column has zero norm")]
    DegenerateWeights { class: usize },

    #[error("degenerate paired test: zero variance of differences (mean diff {mean_diff})")]
    DegenerateTest { mean_diff: f64 },

    #[error("run diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("snapshot captured mid-cycle at step {step} (cycle length {cycle_length})")]
    SnapshotProtocol { step: usize, cycle_length: usize },

    #[error("learning-rate schedule exhausted: step {step} beyond {cycles} cycles of {cycle_length}")]
    ScheduleExhausted {
        step: usize,
        cycles: usize,
        cycle_length: usize,
    },

    #[error("missing cached state: {0}")]
    State(String),

    #[error("could not place {k} class means with pairwise angle >= {min_angle_deg} degrees in dimension {dim}; increase dim")]
    Geometry {
        k: usize,
        dim: usize,
        min_angle_deg: f64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code: 0 success, 1 config/input error, 2 runtime or
    /// divergence, 3 statistical degeneracy.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Argument(_)
            | Error::Parse { .. }
            | Error::Label { .. }
            | Error::Geometry { .. } => 1,
            Error::DegenerateTest { .. } => 3,
            _ => 2,
        }
    }
}
