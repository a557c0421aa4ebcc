pub mod autodiff;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod dct;
pub mod error;
pub mod exit;
pub mod io;
pub mod motion;
pub mod params;
pub mod predictor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
