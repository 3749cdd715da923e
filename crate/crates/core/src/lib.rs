//! Unpaired image-to-image translation with a shared-bottleneck U-Net,
//! spectrally bounded convolutions and a multi-class adversarial objective.

pub mod absn;
pub mod augbuf;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
