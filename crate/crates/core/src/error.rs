use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("failed to load weights: tensor `{tensor}`: {reason}")]
    WeightLoad { tensor: String, reason: String },

    #[error("missing layer {0} in extracted features")]
    MissingLayer(usize),

    #[error("degenerate key: row {row} has zero norm")]
    DegenerateKey { row: usize },

    #[error("grid error: {0}")]
    Grid(String),

    #[error("rank error: requested {requested} components but matrix rank is {rank}")]
    Rank { requested: usize, rank: usize },

    #[error("lookup error: unknown id `{0}`")]
    Lookup(String),

    #[error("numerical abort at iteration {iteration}: {term} is {value}")]
    NonFinite {
        iteration: usize,
        term: String,
        value: f64,
    },

    #[error("optimization diverged at step {step}: loss {loss} exceeded 10x initial {initial} for 50 steps")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        /// Loss at every step taken before the abort.
        trace: Vec<f64>,
    },

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Image { .. } => 3,
            Error::NonFinite { .. } | Error::Diverged { .. } => 4,
            _ => 2,
        }
    }
}
