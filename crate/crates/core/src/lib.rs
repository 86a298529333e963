//! Sampled softmax and competing objectives for collaborative filtering.
//!
//! The crate covers the whole pipeline (interaction data, ID-, history- and
//! graph-based recommenders, five training losses, samplers, an Adam
//! trainer, all-ranking evaluation) plus [`theory`], a set of executable
//! checks of the analytical properties those pieces are expected to have.
//!
//! Data-parallel loops go through [`exec::Exec`]; with the default
//! `parallel` feature they run on rayon, otherwise sequentially, with
//! identical results either way.

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod models;
pub mod sampling;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
