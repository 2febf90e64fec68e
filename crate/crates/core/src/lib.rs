//! Subtyping of irregularly sampled, partially missing categorical time
//! series with mixtures of continuous-time hidden Markov models.
//!
//! Each subtype is a CT-HMM: a hidden continuous-time Markov chain observed
//! at arbitrary timestamps through per-feature categorical emissions. Subtype
//! parameters are learned with EM, patients are clustered with hard EM over
//! the subtype likelihoods, and fits are scored by forecasting the tail of
//! each held-out trajectory from its prefix.

pub mod ctmc;
pub mod emissions;
pub mod error;
pub mod evaluation;
pub mod expm;
pub mod inference;
pub mod io;
pub mod learning;
pub mod mixture;
pub mod synthesis;
pub mod trajectory;

pub use ctmc::{EndConditionedStats, GeneratorMatrix, RateBounds, Structure, TransitionMatrix};
pub use emissions::{BinningScheme, EmissionTable, FeatureBinning, Observation};
pub use error::{Error, Result};
pub use evaluation::{ForecastReport, GridConfig, GridReport};
pub use inference::{PosteriorSummary, SubtypeModel};
pub use io::{ModelMetadata, RunConfig};
pub use learning::{EmConfig, FitDiagnostics, SufficientStats};
pub use mixture::{MixtureConfig, MixtureModel};
pub use synthesis::{CohortConfig, SyntheticCohort};
pub use trajectory::Trajectory;
