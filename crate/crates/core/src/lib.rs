//! Image and event-camera domain adaptation for night-time semantic
//! segmentation, at desk scale.
//!
//! The pipeline turns day frame pairs into pseudo-event maps
//! ([`motion`]), builds an illumination-robust content map from single
//! images ([`content`]), encodes real event streams as voxel grids
//! ([`voxel`]), aligns labeled images to the event camera ([`warp`]), and
//! self-trains a small fused image/auxiliary segmenter ([`model`],
//! [`trainer`]) evaluated by mean IoU ([`metrics`]).

pub mod content;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod par;
pub mod synthetic;
pub mod trainer;
pub mod types;
pub mod voxel;
pub mod warp;

pub use error::{Error, Result};
pub use types::{Event, EventStream, GrayImage, LabelMask, ProbMap, Raster, RealMap, RgbImage, SignedMap, IGNORE};

/// Crate version.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
