//! Bayesian nonparametric bi-clustering for count-valued time series.
//!
//! Subjects (e.g. neurons) are clustered by shared low-dimensional latent
//! trajectories while time bins are clustered by shared switching linear
//! dynamics. Counts are negative-binomial (or Poisson) with log-mean
//! `d_i + c̃_i' x̃_t^(z_i)`; the latent trajectories follow a switching
//! vector autoregression whose discrete state sequence carries a sticky
//! HDP-HMM prior, and the subject partition carries a mixture-of-finite-
//! mixtures prior. Posterior inference is a blocked Gibbs/MH sampler built
//! on Pólya-Gamma augmentation and forward-filter backward-sampling.
//!
//! The crate ships the model types ([`model`]), the individual sampler
//! steps ([`latents`], [`subjects`], [`states`], [`partition`]), a chain
//! driver ([`sampler`]), a synthetic-data generator ([`simulate`]),
//! posterior summaries ([`diagnostics`]) and a CLI (`bicluster`) with
//! `simulate`, `fit` and `summarize` subcommands ([`cli`], [`io`]).

pub mod cli;
pub mod diagnostics;
pub mod io;
pub mod latents;
pub mod model;
pub mod numeric;
pub mod partition;
pub mod polya_gamma;
pub mod sampler;
pub mod simulate;
pub mod ssm;
pub mod states;
pub mod subjects;

pub use model::{
    CountMatrix, DynamicsSet, Hyperparams, LatentState, LinearDynamics, StateChain, SubjectParams,
};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("optimization failed: {0}")]
    Optim(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
