//! Sparse-view X-ray tomography: phantoms, a ray-marching projector, a SART
//! baseline, and a neural refractive-index field conditioned on a handful of
//! projections.

pub mod config;
pub mod error;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nnkit;
pub mod phantom;
pub mod physics;
pub mod projector;
pub mod rng;
pub mod sart;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{GridSpec, Ray, Vec3, ViewGeometry};
pub use image::Image;
pub use phantom::{generate_phantom, Phantom, PhantomSpec};
pub use physics::{Channel, Material};
pub use projector::{ContrastImage, ProjectionStack};
pub use volume::RefractiveVolume;

/// The guide's chapters, compiled so that their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/projection.md")]
    mod projection {}
    #[doc = include_str!("../../../book/src/sart.md")]
    mod sart {}
    #[doc = include_str!("../../../book/src/nnkit.md")]
    mod nnkit {}
    #[doc = include_str!("../../../book/src/field.md")]
    mod field {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
