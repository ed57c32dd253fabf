//! Physical fields for the tempo toolkit: trajectories, PDE data generators,
//! dataset storage, and evaluation metrics and spectra.

mod error;
pub mod fft;
pub mod generate;
pub mod grf;
pub mod metrics;
pub mod nsv;
pub mod rd;
pub mod spectra;
pub mod store;
pub mod swe;
mod trajectory;

pub use error::{FieldsError, Result};
pub use trajectory::{FieldTrajectory, Pde};
