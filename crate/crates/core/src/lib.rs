//! Map-aided pole-base annotation.
//!
//! A 2D vector map of pole-like landmarks is projected into camera images at
//! ground level, refined with lidar ground points, filtered for occlusion with
//! projected lidar depths and encoded as fixed-size boxes. The crate also holds
//! the segmentation-mask extractor, the detection evaluation harness and a
//! synthetic ray-cast world used as a verification oracle.

pub mod annotate;
pub mod cloud;
pub mod error;
pub mod evaluate;
pub mod frames;
pub mod ground;
pub mod map_store;
pub mod occlusion;
pub mod par;
pub mod seg_extract;
pub mod synth;

pub use error::{Error, Result};
