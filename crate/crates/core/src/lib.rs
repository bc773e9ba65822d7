//! Sparse-view generalizable neural rendering for finger traits.
//!
//! The crate builds a radiance field conditioned on a plane-sweep cost volume:
//! 2D features of the input views are warped onto the reference frustum,
//! refined by epipolar self/cross attention guided by binary trait masks,
//! aggregated into a neural encoding volume, and decoded into density and
//! color along target rays. Training distills pseudo depth through a
//! scale/shift-invariant loss and focuses the rendering loss on trait pixels.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`geometry`]: cameras, rays, projection, plane-sweep homographies
//! - [`diff`]: reverse-mode autodiff over dense tensors, optimizer, checkpoints
//! - [`encoder`]: 2D feature nets, warped feature volumes, epipolar attention,
//!   trait-guided variance cost volume
//! - [`field`]: encoding-volume aggregation, trilinear sampling, radiance decoder
//! - [`render`]: window sampling and differentiable color/depth compositing
//! - [`losses`]: photometric, depth-distillation and trait-guided losses
//! - [`synth`]: synthetic elliptic-cylinder scenes with exact depth oracles
//! - [`eval`]: PSNR/SSIM and verification/identification metrics
//! - [`scene`], [`config`], [`pipeline`]: dataset I/O, run configuration,
//!   training orchestration
//!
//! All numeric core code is generic over the scalar type via [`Scalar`];
//! the pipeline and CLI run in double precision (see [`Real`]).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub mod config;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};

/// Floating-point scalar the numeric core is generic over.
///
/// Implemented for `f32` and `f64`. `cast` converts literals and other
/// compile-time constants; it panics only on non-finite conversion targets,
/// which never occur for the constants used in this crate.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Copy
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn cast(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite constant")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Default precision used by the pipeline and the CLI.
pub type Real = f64;
