pub mod diag;
pub mod error;
pub mod filters;
pub mod gauss;
pub mod kalman;
pub mod pmcmc;
pub mod resample;
pub mod smc;
pub mod ssm;
pub mod twist;
pub mod twistpf;

pub use error::{Error, Result};
