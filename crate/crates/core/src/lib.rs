//! Expert retrieval and assembly (ERA) convolutions, expert learning-rate
//! optimisation (ELRO), and the supporting pieces needed to train and
//! evaluate them on synthetic early-prediction tasks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod elro;
pub mod era;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
