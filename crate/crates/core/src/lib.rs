//! Desk-scale laboratory for bi-level immunization of conditional diffusion
//! denoisers against malicious fine-tuning, on synthetic 2-D concepts.

pub mod analysis;
pub mod attack;
pub mod bilevel;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod scenario;
pub mod seeding;
pub mod train;

pub use error::{Error, Result};
