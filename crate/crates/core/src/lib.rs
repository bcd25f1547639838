//! Semi-supervised dual-modal (point cloud + image) semantic segmentation.
//!
//! Two parallel streams share one architecture: a 3D voxel U-Net and a 2D
//! image U-Net whose decoder features are fused per point-pixel pair by a
//! multi-head attention block. The *original* stream is trained with SGD;
//! the *pseudo-label* stream tracks it by exponential moving average and
//! labels unlabeled scenes, with cross-modal voting filtering those labels.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`tensor`]) over
//! procedurally generated scenes ([`scene`]).

pub mod dmf;
pub mod error;
pub mod branches;
pub mod geometry;
pub mod metrics;
pub mod plo;
pub mod scene;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
