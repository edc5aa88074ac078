pub mod baseline_uqr;
pub mod em_fitter;
pub mod error;
pub mod linalg;
pub mod mal_dist;
pub mod penalized_fitter;
pub mod special_fn;
pub mod study_harness;

pub use error::{Error, Result};
