use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error("duplicate observation for site {site} on {date}")]
    Conflict { site: String, date: String },

    #[error("site {site}: no non-missing values for day-of-year {days:?}")]
    IncompleteCoverage { site: String, days: Vec<u32> },

    #[error("time {0} lies outside [0, 1]")]
    Domain(f64),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("degenerate basis: rank {rank} < {q}")]
    DegenerateBasis { rank: usize, q: usize },

    #[error("ill-conditioned system ({context}); smallest eigenvalue {min_eigenvalue:e}")]
    Conditioning {
        context: String,
        min_eigenvalue: f64,
    },

    #[error("covariance is not positive semi-definite; eigenvalue {0:e}")]
    NotPsd(f64),

    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite objective at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("site {site}: {source}")]
    Site {
        site: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_site(self, site: &str) -> Self {
        Error::Site {
            site: site.to_string(),
            source: Box::new(self),
        }
    }
}
