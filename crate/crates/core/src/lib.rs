//! Primitive-based 3D object estimation from single depth images.
//!
//! The pipeline recovers an object as a set of oriented 3D boxes. A sequential
//! proposal network lifts image features into primitive hypotheses, and a
//! fully-connected graph reasoning network refines their labels and geometry.
//! The crate also ships the full evaluation stack (corner-set Hausdorff
//! metrics, thresholded accuracy/recall, voxel IoU), a procedural synthetic
//! dataset factory with a depth renderer, and a small dense-tensor
//! reverse-mode autodiff core that makes the whole model trainable on a CPU.
//!
//! Entry points:
//! - [`geometry`]: oriented-box primitives, transforms, voxelization, exports
//! - [`metrics`]: Hausdorff error, TAcc/TRec, voxel IoU
//! - [`matching`]: greedy assignment and pairing NMS
//! - [`nn`]: tensors, reverse-mode differentiation, layers, Adam, checkpoints
//! - [`model`]: the two-stage proposal + reasoning network
//! - [`training`]: normalization, losses, stage-wise optimization
//! - [`synthdata`]: procedural objects, cameras, depth rendering, dataset I/O
//! - [`cli`]: the `primgraph` command-line front end

pub mod checks;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
