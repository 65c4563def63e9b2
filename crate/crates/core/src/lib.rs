//! TriGait: silhouette, skeleton and cross-modal fusion branches for gait
//! recognition, with a synthetic walker dataset, metric-learning training and
//! a gallery/probe rank-1 protocol.

pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod eval;
pub mod train;

pub use error::{Error, Result};
