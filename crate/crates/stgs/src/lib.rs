//! File formats, training runs, the HTTP streaming service, the adaptive
//! bitrate client and the `stgs` CLI on top of `stgs-core`.

pub mod abr;
pub mod bench;
pub mod checkpoint;
pub mod client;
pub mod codec;
pub mod encode;
pub mod error;
pub mod imageio;
pub mod manifest;
pub mod scene;
pub mod server;
pub mod throttle;
pub mod train;

pub use error::{Error, Result};
pub use stgs_core as core;
