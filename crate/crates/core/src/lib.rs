#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod gaussian;
pub mod grid;
pub mod losses;
pub mod math;
pub mod pipeline;
pub mod render;
pub mod segment;
pub mod synth;
pub mod train;
pub mod video;

pub use error::{Error, Result, SegmentError};
