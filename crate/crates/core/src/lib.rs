//! Semi-supervised volumetric segmentation with channel-selective routing and
//! bidirectional channel-wise interaction between labeled and unlabeled streams.

pub mod augment;
pub mod error;
pub mod interact;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod router;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
