//! Numerics for deformable image registration.

pub mod erf;
pub mod error;
pub mod fields;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod phantom;
pub mod register;
pub mod rng;
pub mod selftest;
pub mod swin;
pub mod uncertainty;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use rng::Rng;
pub use volume::{Dims, DisplacementField, LabelStack, VelocityField, Volume};
