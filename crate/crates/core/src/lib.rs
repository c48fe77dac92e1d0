//! Parallel-beam tomography kernels for projection-based vessel segmentation.
//!
//! The crate is `no_std` with `alloc`. Everything here is pure computation on
//! in-memory buffers: file formats, the CLI and run manifests live in the
//! companion `vtomo` crate.
//!
//! Pipeline, end to end:
//!
//! + [`phantom`] synthesizes a binary vessel tree and a CT-like volume.
//! + [`projection`] computes integral projections (line integrals) and top-k
//!   maximum intensity projections over a [`geometry::ProjectionGeometry`].
//! + [`estimator`] maps a top-k condition stack to estimated integral
//!   projections (the seam where a learned model plugs in).
//! + [`reconstruction`] runs filtered back projection and the
//!   projection-consistency least-squares refinement.
//! + [`postprocess`] thresholds and cleans the refined volume.
//! + [`metrics`] scores the result.
//!
//! With the `parallel` feature (on by default) the projectors and filters
//! use the current rayon thread pool. Every parallel path writes disjoint
//! output partitions, so results do not depend on the worker count.
//! That feature links std, which shadows the `num_traits::Float` methods the
//! modules import for the plain `no_std` build; hence the unused-import allows.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

extern crate alloc;

mod error;
mod fft;
mod par;

pub mod estimator;
pub mod geometry;
pub mod metrics;
pub mod phantom;
pub mod postprocess;
pub mod projection;
pub mod reconstruction;
pub mod rng;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{Grid, ProjectionGeometry, Ray, SliceProjector, SystemMatrix};
pub use projection::{ProjectionStack, TopKStack};
pub use volume::{Volume, VolumeKind};
