pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod phantom;
mod plot;
pub mod recon;
pub mod run;
pub mod simulator;

pub use error::{Error, Result};
