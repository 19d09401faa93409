//! Core toolkit for text-queried sound event localization: spatial scene
//! synthesis, GCC-PHAT features, query embeddings, a small autograd engine,
//! the query-conditioned models, and the DOA objective/metric stack.

pub mod autograd;
pub mod embed;
pub mod error;
pub mod features;
pub mod models;
pub mod objectives;
pub mod room;
pub mod signal;
pub mod wav;

pub use error::{Error, Result};
