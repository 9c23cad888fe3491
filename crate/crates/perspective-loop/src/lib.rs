//! Depth-aware gated pooling with recurrent refinement for semantic
//! segmentation.
//!
//! The crate implements a small scene-parsing stack around one idea: object
//! scale in a perspective image is inversely proportional to depth, so the
//! pooling field used to classify a pixel should be selected by (predicted or
//! measured) depth. Feature maps from dilated-convolution branches are mixed
//! per pixel by a gate derived from quantized depth, and a weight-shared
//! recurrent module refines segmentation and depth estimates jointly.
//!
//! Everything runs on the CPU in `f64` with hand-rolled reverse-mode
//! differentiation, which keeps the full pipeline — synthetic data, training,
//! evaluation, ablations — testable against finite differences and
//! brute-force oracles. See the `examples/` directory for runnable entry
//! points per capability, and the `perspective-loop` binary for the
//! subcommand interface.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod losses;
pub mod model;
pub mod pnm;
pub mod quantizer;
pub mod seed;
pub mod synthdata;
pub mod train;
pub mod types;

pub use config::{LoadedConfig, LossWeights, ModelConfig, TrainSchedule, Variant};
pub use error::{Error, Result};
pub use types::{DepthMap, GateMap, Image, LabelMap, Sample, IGNORE_LABEL};
