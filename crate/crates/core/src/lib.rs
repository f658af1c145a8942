//! Window-based selective state-space backbone for sparse voxel features.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense `f64` arrays, a define-by-run operation tape with
//!   reverse-mode gradients, finite-difference checking and Adam.
//! - [`voxelgrid`]: point clouds, voxelization and the sparse down/upsampling
//!   operators with recorded coordinate maps.
//! - [`serialize`]: window partitioning, shifted sort keys, sequence
//!   construction with inverse indices and locality metrics.
//! - [`ssm`]: a reference selective state-space (Mamba) block.
//! - [`winmamba`]: positional embedding, window shift fusion, the window-scale
//!   adaptive dual-path block and the stacked backbone.
//! - [`toytask`]: synthetic scenes, a per-voxel classifier and the ablation
//!   harness.

pub mod error;
pub mod numerics;
pub mod serialize;
pub mod ssm;
pub mod toytask;
pub mod voxelgrid;
pub mod winmamba;

pub use error::{Error, Result};
