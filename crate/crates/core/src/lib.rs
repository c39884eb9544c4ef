//! Depth refinement from a short burst of frames with millimeter-scale
//! camera motion.
//!
//! A bundle holds RGB frames, low-resolution sensor depth, exact poses and
//! intrinsics. The averaged sensor depth of the first frame is refined by a
//! coordinate MLP trained on photometric consistency between views, gated by
//! a learned per-pixel confidence.
//!
//! ```no_run
//! use mbdepth::bundle_io::{render_synthetic_bundle, LidarModel, RenderParams, SceneSpec, TremorParams};
//! use mbdepth::refine::{compute_z_avg, reconstruct, train, TrainConfig};
//!
//! let synth = render_synthetic_bundle(
//!     &SceneSpec::sphere_on_plane(),
//!     &TremorParams::default(),
//!     &RenderParams::default(),
//!     &LidarModel::default(),
//! )?;
//! let out = train(&synth.bundle, &TrainConfig { epochs: 50, ..Default::default() })?;
//! let z_avg = compute_z_avg(&synth.bundle)?;
//! let z_star = reconstruct(&out.model, &synth.bundle, &z_avg)?;
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod bundle_io;
pub mod cli;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod neural;
pub mod refine;

pub use geometry::{Intrinsics, PixelCoord, Point3H, Pose};
pub use image::ImageGrid;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Checkpoint(#[from] neural::CheckpointError),
    #[error(transparent)]
    Refine(#[from] refine::RefineError),
    #[error(transparent)]
    BundleIo(#[from] bundle_io::BundleIoError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}
