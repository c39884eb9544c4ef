//! Backward-forward projection refinement.
//!
//! A training step draws colored points from a query frame, moves them into
//! the reference frame with the known pose, lets the MLP predict a z-offset
//! along the reference ray, sends the refined point back into the query frame
//! and compares Gaussian-weighted patches of the two images. An explicit
//! confidence field gates every offset. After training, the reprojected and
//! averaged low-resolution depth `Z_avg` is refined pixel by pixel into `Z*`.

mod bundle;
mod chain;
mod reconstruct;
mod train;

pub use bundle::{depth_intrinsics, Bundle, Frame, MAX_FRAMES};
pub use chain::{
    draw_query_samples, geometric_regularizer, photometric_loss, predict_correction, refined_point, resample_in_query, to_reference_frame, Correction,
    PhotometricChain, QuerySample, ReferencePoint,
};
pub use reconstruct::{compute_z_avg, reconstruct, RefinementModel};
pub use train::{batch_objective, format_log_line, train, train_with_progress, BatchObjective, EpochStats, TrainLog, TrainOutput, Trainer};

use crate::geometry::{GeometryError, PixelCoord};
use crate::image::{ImageError, ImageGrid, PatchKernel};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("could only draw {drawn} of {requested} samples with valid depth from frame {frame}")]
    SamplingStarvation { frame: usize, requested: usize, drawn: usize },
    #[error("non-finite {what} at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("degenerate bundle: {0}")]
    DegenerateBundle(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Numeric precision of the batched network passes during training.
/// Parameters, gradients and optimizer state are always f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Colored points drawn per step (`M`).
    pub samples: usize,
    /// Patch half-width `K`; patches are `(2K+1)²`.
    pub patch_half_width: usize,
    /// Patch Gaussian σ in pixels; `None` means `(K+1)/2`.
    pub patch_sigma: Option<f64>,
    /// Positional-encoding levels `L`.
    pub levels: usize,
    /// Weight of the geometric regularizer.
    pub alpha: f64,
    pub base_lr: f64,
    pub decay: f64,
    pub epochs: usize,
    /// Use every `frame_stride`-th frame as a query view.
    pub frame_stride: usize,
    /// Predict depth directly instead of an offset to the sensor depth.
    pub direct_depth: bool,
    /// Replace every depth map with this constant before training.
    pub constant_init_depth: Option<f64>,
    pub median_filter_confidence: bool,
    pub seed: u64,
    /// Coordinates are divided by this (meters) before encoding.
    pub coord_scale: f64,
    /// Learning rate of the confidence field at epoch 0 (decays with `decay`).
    pub confidence_lr: f64,
    pub precision: Precision,
    /// Draw attempts allowed per requested sample before giving up.
    pub max_draw_attempts: usize,
    pub z_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            samples: 4096,
            patch_half_width: 11,
            patch_sigma: None,
            levels: 6,
            alpha: 0.01,
            base_lr: 1e-5,
            decay: 0.985,
            epochs: 200,
            frame_stride: 1,
            direct_depth: false,
            constant_init_depth: None,
            median_filter_confidence: true,
            seed: 0,
            coord_scale: 1.0,
            confidence_lr: 1e-3,
            precision: Precision::F64,
            max_draw_attempts: 16,
            z_min: crate::geometry::DEFAULT_Z_MIN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let bad = |m: &str| Err(RefineError::InvalidConfig(m.to_string()));
        if self.samples == 0 {
            return bad("samples must be positive");
        }
        if self.levels == 0 {
            return bad("levels must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if !(self.base_lr > 0.0 && self.decay > 0.0 && self.confidence_lr >= 0.0) {
            return bad("learning rates and decay must be positive");
        }
        if self.frame_stride == 0 {
            return bad("frame stride must be at least 1");
        }
        if matches!(self.patch_sigma, Some(s) if !(s > 0.0)) {
            return bad("patch sigma must be positive");
        }
        if !(self.coord_scale > 0.0) {
            return bad("coordinate scale must be positive");
        }
        if matches!(self.constant_init_depth, Some(z) if !(z > 0.0)) {
            return bad("constant depth must be positive");
        }
        if self.max_draw_attempts == 0 {
            return bad("max_draw_attempts must be positive");
        }
        Ok(())
    }

    pub fn kernel(&self) -> PatchKernel {
        PatchKernel::new(
            self.patch_half_width,
            self.patch_sigma.unwrap_or_else(|| crate::image::default_sigma(self.patch_half_width)),
        )
    }
}

/// Learned per-pixel weight in `[0, 1]` on the reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    values: ImageGrid,
}

impl ConfidenceMap {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            values: ImageGrid::filled(height, width, 1, 1.0),
        }
    }

    pub fn from_grid(values: ImageGrid) -> Result<Self, RefineError> {
        if values.channels() != 1 {
            return Err(ImageError::Channels {
                expected: 1,
                actual: values.channels(),
            }
            .into());
        }
        let values = values.map(|x| x.clamp(0.0, 1.0))?;
        Ok(Self { values })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.values
    }

    pub fn into_grid(self) -> ImageGrid {
        self.values
    }

    pub fn sample(&self, x: PixelCoord) -> Result<f64, ImageError> {
        Ok(self.values.sample_bilinear(x)?[0])
    }

    pub(crate) fn values_mut(&mut self) -> &mut ImageGrid {
        &mut self.values
    }
}
