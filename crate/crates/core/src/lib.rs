//! Crowd-rating aggregation with a regularised rank-1 factor model.
//!
//! * [`model`]: ratings, observation sets, latent parameters and the
//!   canonical centred representation.
//! * [`mf`]: the weighted ridge solver, activity filters and sign convention.
//! * [`twostage`]: residual-variance reweighting and the weighted refit.
//! * [`sim`]: a generator of ratings from strategically conforming raters.
//! * [`theory`]: closed-form limits and the suite comparing them to fits.
//! * [`io`]: tab-separated ratings, parameter, weight and truth files.
//! * [`eval`]: weekly rolling fits and one-week-ahead error metrics.
//! * [`analysis`]: rank correlation, bimodality, shrunk proportions,
//!   difference-in-differences and permutation tests.

pub mod analysis;
pub mod error;
pub mod eval;
pub mod exec;
pub mod io;
pub mod mf;
pub mod model;
pub mod rng;
pub mod sim;
pub mod theory;
pub mod twostage;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{LatentParams, NoteStatus, ObservationSet, RatingEvent};
