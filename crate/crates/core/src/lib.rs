pub mod autodiff;
pub mod error;
pub mod evt;
pub mod fsio;
pub mod metrics;
pub mod objectives;
pub mod pinn;
pub mod resample;
pub mod simgen;
pub mod studies;
pub mod train;
pub mod workflow;

pub use error::{Error, Result};
