//! Texture/deformation disentangling GAN for face attribute editing.
//!
//! An image is explained as a texture (shading times albedo) in a canonical frame
//! plus a monotone warp. A label-conditioned generator edits the texture and the
//! result is warped back with the original deformation.

pub mod data;
pub mod dae;
pub mod error;
pub mod eval;
pub mod gan;
pub mod identity;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
