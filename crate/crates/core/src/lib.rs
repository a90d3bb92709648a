//! Slice-to-volume reconstruction toolkit.
//!
//! The crate is organised around the acquisition model of a stack of thick
//! 2D slices taken from a 3D volume under per-slice motion:
//!
//! - [`grid`]: volumes, finite-difference gradients and factor-2 pyramids.
//! - [`warp`]: slice geometry, the slicing (pull) / splatting (push) adjoint
//!   pair with trilinear weights, and the through-plane PSF.
//! - [`simulate`]: smooth random rigid trajectories and stack acquisition.
//! - [`rigid`]: affine fit, polar decomposition and rigid-compensated loss.
//! - [`solver`]: block-coordinate-descent reconstruction (CG volume updates,
//!   Gauss-Newton motion updates, coarse-to-fine).
//! - [`inpaint`]: multi-scale normalized-convolution hole filling.
//! - [`metrics`]: MSE, end-point error, anchor-point error and PSNR.
//! - [`io`]: NIfTI-1 volumes and the `.svrm` motion format.
//!
//! All coordinates are in voxel units of the reconstruction grid, memory order
//! is x-fastest (`index = x + nx * (y + ny * z)`).

pub mod error;
pub mod grid;
pub mod inpaint;
pub mod io;
pub mod metrics;
pub mod rigid;
pub mod simulate;
pub mod solver;
pub mod warp;

pub use error::{Error, Result};
pub use grid::{Dims, Volume};
pub use warp::{Axis, MotionStack, Psf, SliceGeometry, SliceStack, SplatVolume};
