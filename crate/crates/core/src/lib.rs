//! Knowledge distillation for retinal OCT classification: networks, losses,
//! optimization, augmentation, patient-level data handling and the
//! training/evaluation engine.

pub mod augment;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod optim;
pub mod seed;

pub use error::{Error, Result};
