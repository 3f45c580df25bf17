pub mod autodiff;
pub mod beamforming;
pub mod channel;
pub mod cli;
pub mod error;
pub mod estimation;
pub mod metrics;
pub mod numerics;
pub mod training;
pub mod unfolding;

pub use error::{Error, Result};
