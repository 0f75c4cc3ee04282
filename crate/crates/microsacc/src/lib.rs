//! Synthetic microsaccade event pipeline.
//!
//! The crate covers the full path from parametric eye motion to evaluated
//! spiking classifiers:
//!
//! - [`scene`]: procedural rendering of eye-rotation frame sequences over
//!   seven angular-displacement classes.
//! - [`dvs`]: frame-to-event conversion emulating a dynamic vision sensor,
//!   with a brute-force reference simulator.
//! - [`dataset`]: balanced dataset assembly with duration and event-count
//!   overlap, mirroring, splits, and the `.evms` file format.
//! - [`flow`]: voxel-grid binning, dense Farneback optical flow targets, and
//!   the flow/total training losses.
//! - [`snn`]: a spiking convolutional classifier with surrogate-gradient
//!   training through time and an optional flow-regression head.
//! - [`eval`]: metrics, the event-count bias probe, dataset inspection, and
//!   sliding-window inference over external recordings.
//!
//! Each stage is usable on its own; the `examples/` directory holds one
//! runnable example per capability, and the `microsacc` binary exposes the
//! same operations as subcommands.

pub mod config;
pub mod dataset;
pub mod dvs;
pub mod flow;
pub mod error;
pub mod scene;
pub mod seeds;
pub mod snn;

pub use config::PipelineConfig;
pub use error::{Error, Result};
