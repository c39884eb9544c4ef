//! Frames and bundles: the in-memory form of one capture.

use super::RefineError;
use crate::bundle_io::Provenance;
use crate::geometry::{Intrinsics, Pose};
use crate::image::ImageGrid;

/// Captures are limited to two seconds at 60 Hz.
pub const MAX_FRAMES: usize = 120;

/// One synchronized RGB + depth + pose sample.
///
/// Depth values `<= 0` mark holes.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: ImageGrid,
    pub depth: ImageGrid,
    /// Camera-to-reference transform.
    pub pose: Pose,
    pub intrinsics_rgb: Intrinsics,
    pub intrinsics_depth: Intrinsics,
    pub timestamp_ns: u64,
}

impl Frame {
    /// Build a frame whose depth intrinsics are the RGB intrinsics rescaled to
    /// the depth grid.
    pub fn new(image: ImageGrid, depth: ImageGrid, pose: Pose, intrinsics_rgb: Intrinsics, timestamp_ns: u64) -> Self {
        let intrinsics_depth = depth_intrinsics(&intrinsics_rgb, &image, &depth);
        Self {
            image,
            depth,
            pose,
            intrinsics_rgb,
            intrinsics_depth,
            timestamp_ns,
        }
    }

    /// Scale from RGB pixel coordinates to depth-grid coordinates.
    pub fn depth_scale(&self) -> (f64, f64) {
        (
            self.depth.width() as f64 / self.image.width() as f64,
            self.depth.height() as f64 / self.image.height() as f64,
        )
    }
}

pub fn depth_intrinsics(k: &Intrinsics, image: &ImageGrid, depth: &ImageGrid) -> Intrinsics {
    k.scaled(
        depth.width() as f64 / image.width() as f64,
        depth.height() as f64 / image.height() as f64,
    )
}

/// `N` frames; frame 0 is the reference and has the identity pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    frames: Vec<Frame>,
    ground_truth: Option<ImageGrid>,
    provenance: Option<Provenance>,
}

impl Bundle {
    pub fn new(frames: Vec<Frame>) -> Result<Self, RefineError> {
        validate(&frames)?;
        Ok(Self {
            frames,
            ground_truth: None,
            provenance: None,
        })
    }

    /// Attach the reference-view ground-truth depth of a synthetic capture.
    pub fn with_ground_truth(mut self, gt: ImageGrid) -> Result<Self, RefineError> {
        let r = &self.frames[0].image;
        if gt.height() != r.height() || gt.width() != r.width() || gt.channels() != 1 {
            return Err(RefineError::InvalidBundle(format!(
                "ground truth is {}x{}x{}, expected {}x{}x1",
                gt.height(),
                gt.width(),
                gt.channels(),
                r.height(),
                r.width()
            )));
        }
        self.ground_truth = Some(gt);
        Ok(self)
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = Some(p);
        self
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn reference(&self) -> &Frame {
        &self.frames[0]
    }

    pub fn ground_truth(&self) -> Option<&ImageGrid> {
        self.ground_truth.as_ref()
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// `(H, W, H_d, W_d)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let f = &self.frames[0];
        (f.image.height(), f.image.width(), f.depth.height(), f.depth.width())
    }

    /// Copy of the bundle with every depth map replaced by `z` (no-LiDAR ablation).
    pub fn with_constant_depth(&self, z: f64) -> Result<Self, RefineError> {
        if !(z > 0.0 && z.is_finite()) {
            return Err(RefineError::InvalidConfig(format!("constant depth must be positive, got {z}")));
        }
        let mut out = self.clone();
        for f in &mut out.frames {
            f.depth = ImageGrid::filled(f.depth.height(), f.depth.width(), 1, z as f32);
        }
        Ok(out)
    }

    /// Non-reference frame indices kept by `stride` (multiples of the stride).
    pub fn query_indices(&self, stride: usize) -> Vec<usize> {
        let stride = stride.max(1);
        (1..self.frames.len()).filter(|i| i % stride == 0).collect()
    }
}

fn validate(frames: &[Frame]) -> Result<(), RefineError> {
    let bad = |m: String| Err(RefineError::InvalidBundle(m));
    if frames.is_empty() {
        return bad("bundle has no frames".into());
    }
    if frames.len() > MAX_FRAMES {
        return bad(format!("bundle has {} frames, at most {MAX_FRAMES} allowed", frames.len()));
    }
    if !frames[0].pose.is_identity() {
        return bad("reference frame pose must be the identity".into());
    }
    let r = &frames[0];
    for (i, f) in frames.iter().enumerate() {
        if f.image.channels() != 3 {
            return bad(format!("frame {i}: image must have 3 channels"));
        }
        if f.depth.channels() != 1 {
            return bad(format!("frame {i}: depth must have 1 channel"));
        }
        if (f.image.height(), f.image.width(), f.depth.height(), f.depth.width())
            != (r.image.height(), r.image.width(), r.depth.height(), r.depth.width())
        {
            return bad(format!("frame {i}: dimensions differ from the reference frame"));
        }
        if f.depth.height() > f.image.height() || f.depth.width() > f.image.width() {
            return bad(format!("frame {i}: depth grid is larger than the image"));
        }
        let expected = depth_intrinsics(&f.intrinsics_rgb, &f.image, &f.depth);
        if !f.intrinsics_depth.approx_eq(&expected, 1e-9) {
            return bad(format!("frame {i}: depth intrinsics are not the scaled RGB intrinsics"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn frame(pose: Pose, h: usize, w: usize) -> Frame {
        let k = Intrinsics::new(100.0, 100.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap();
        Frame::new(
            ImageGrid::filled(h, w, 3, 0.5),
            ImageGrid::filled(h / 4, w / 4, 1, 0.3),
            pose,
            k,
            0,
        )
    }

    #[test]
    fn validation() {
        let id = Pose::identity();
        let moved = Pose::from_translation(Vector3::new(0.001, 0.0, 0.0));
        assert!(Bundle::new(vec![frame(id, 16, 16), frame(moved, 16, 16)]).is_ok());
        assert!(Bundle::new(vec![]).is_err());
        assert!(Bundle::new(vec![frame(moved, 16, 16)]).is_err());
        assert!(Bundle::new(vec![frame(id, 16, 16), frame(moved, 16, 20)]).is_err());
        assert!(Bundle::new(vec![frame(id, 8, 8); MAX_FRAMES + 1]).is_err());

        let mut f = frame(id, 16, 16);
        f.intrinsics_depth.fx *= 1.01;
        assert!(Bundle::new(vec![f]).is_err());
    }

    #[test]
    fn depth_intrinsics_are_scaled() {
        let f = frame(Pose::identity(), 16, 32);
        assert_eq!(f.intrinsics_depth.fx, 25.0);
        assert_eq!(f.intrinsics_depth.cx, f.intrinsics_rgb.cx / 4.0);
        assert_eq!(f.depth_scale(), (0.25, 0.25));
    }

    #[test]
    fn stride_selection() {
        let frames: Vec<_> = (0..10).map(|i| frame(if i == 0 { Pose::identity() } else { Pose::from_translation(Vector3::new(i as f64 * 1e-4, 0.0, 0.0)) }, 8, 8)).collect();
        let b = Bundle::new(frames).unwrap();
        assert_eq!(b.query_indices(1), (1..10).collect::<Vec<_>>());
        assert_eq!(b.query_indices(2), vec![2, 4, 6, 8]);
        assert_eq!(b.query_indices(8), vec![8]);
        let c = b.with_constant_depth(1.0).unwrap();
        assert!(c.frames().iter().all(|f| f.depth.data().iter().all(|&z| z == 1.0)));
    }
}
