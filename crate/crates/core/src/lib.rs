//! Session-based next-item recommendation in a learned metric space.
//!
//! Sessions and items are embedded into one unit-sphere space; a session is
//! served by retrieving the items nearest to its embedding. The crate covers
//! the whole pipeline: event ingestion and preprocessing ([`data`]), a small
//! autodiff engine ([`autodiff`]), session/item encoders ([`encoders`]),
//! training objectives ([`losses`]), per-epoch example sampling
//! ([`sampling`]), the training loop ([`trainer`]), exact retrieval and
//! model files ([`index`]), classical baselines ([`baselines`]) and the
//! no-look-ahead evaluation protocol ([`eval`]).

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod index;
pub mod losses;
pub mod sampling;
pub mod trainer;

pub(crate) mod rng;

pub use error::{Error, Result};
