use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("invalid variance parameters: {0}")]
    InvalidVariance(String),
    #[error("numerically singular matrix in cluster {cluster}")]
    SingularCluster { cluster: usize },
    #[error("numerically singular matrix: {0}")]
    Singular(String),
    #[error("ill-conditioned {what}: condition estimate {cond:.3e}")]
    IllConditioned { what: String, cond: f64 },
    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("model '{label}': {source}")]
    Model {
        label: String,
        #[source]
        source: Box<LmmError>,
    },
    #[error("bias correction failed: {failed} of {total} inner fits did not converge")]
    BiasCorrection { failed: usize, total: usize },
    #[error("invalid region: {0}")]
    Region(String),
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io: {0}")]
    Io(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, LmmError>;

impl From<std::io::Error> for LmmError {
    fn from(e: std::io::Error) -> Self {
        LmmError::Io(e.to_string())
    }
}

impl From<csv::Error> for LmmError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        LmmError::Parse { line, msg: e.to_string() }
    }
}
