//! Signal processing, augmentation, time-frequency imaging, a small
//! reverse-mode autodiff engine, and the NRC-Net classifier for
//! phonocardiogram recordings.

pub mod autodiff;
pub mod error;
pub mod eval_harness;
pub mod noise_lab;
pub mod nrc_net;
pub mod preprocess;
pub mod rng;
pub mod signal_io;
pub mod tf_transforms;

pub use error::{Error, Result};
