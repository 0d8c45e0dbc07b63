//! Pedestrian attribute recognition from an RGB frame plus an event-camera stream.
//!
//! The event stream is voxelized, low-pass filtered in the DCT domain, and condensed
//! into prompt tokens that are injected into selected layers of a ViT over the RGB
//! image. Both streams are refined with Hopfield-style memories (an internal
//! prototype layer and an offline K-means bank), mixed through a similarity gate and
//! bidirectional cross-attention, and classified per attribute.

pub mod error;
pub mod events;
pub mod freq;
pub mod head;
pub mod memory;
pub mod model;
pub mod backbone;
pub mod config;
pub mod prompter;
pub mod synth;
pub mod train;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod selftest;

pub use error::{Error, Result};
