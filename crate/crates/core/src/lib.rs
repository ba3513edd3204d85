//! RGB-thermal single-object tracking that combines per-modality correlation
//! filters, learned response fusion, a constant-velocity motion tracker with a
//! reliability switcher, and camera-motion compensation.

pub mod error;
pub mod geom;
pub mod img;
pub mod nnet;
pub mod cftrack;
pub mod cme;
pub mod fusion;
pub mod motion;
pub mod tmatch;
pub mod pipeline;
pub mod bench;
pub mod synth;
pub mod config;

pub use error::{Error, Result};
