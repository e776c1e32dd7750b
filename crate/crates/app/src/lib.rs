//! Command-line pipeline and JSON service over a trained model bundle.

pub mod api;
pub mod bundle;
pub mod cli;
pub mod service;

pub use bundle::{ModelBundle, MotionLibrary};
