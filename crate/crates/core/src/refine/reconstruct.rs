//! Averaged sensor depth and the final refined depth map.

use super::{Bundle, ConfidenceMap, RefineError};
use crate::geometry::{project, unproject, PixelCoord};
use crate::image::ImageGrid;
use crate::neural::{encode_into, BatchEngine, Checkpoint, MlpParams};
use std::collections::VecDeque;

/// Everything needed to evaluate `Z*`: network, confidence and encoding setup.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementModel {
    pub params: MlpParams,
    pub confidence: ConfidenceMap,
    pub levels: usize,
    pub coord_scale: f64,
    /// The network predicts depth itself rather than a gated offset.
    pub direct_depth: bool,
}

impl RefinementModel {
    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            levels: self.levels as u32,
            seed,
            coord_scale: self.coord_scale,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, confidence: ConfidenceMap) -> Self {
        Self {
            params: ckpt.params,
            confidence,
            levels: ckpt.levels as usize,
            coord_scale: ckpt.coord_scale,
            direct_depth: false,
        }
    }
}

/// Reproject every valid low-resolution depth sample into the reference depth
/// grid, average, fill holes from the nearest valid cell and upsample to the
/// RGB resolution.
pub fn compute_z_avg(bundle: &Bundle) -> Result<ImageGrid, RefineError> {
    let (h, w, hd, wd) = bundle.dims();
    let k_ref = bundle.reference().intrinsics_depth;
    let mut sum = vec![0.0f64; hd * wd];
    let mut weight = vec![0.0f64; hd * wd];
    for frame in bundle.frames() {
        let kd = frame.intrinsics_depth;
        for r in 0..hd {
            for c in 0..wd {
                let z = frame.depth.get(r, c, 0) as f64;
                if !(z > 0.0 && z.is_finite()) {
                    continue;
                }
                let p = frame.pose.transform_point(&unproject(PixelCoord::new(c as f64, r as f64), z, &kd)?);
                let Ok(x) = project(&p, &k_ref) else {
                    continue;
                };
                splat(&mut sum, &mut weight, wd, hd, x, p.z);
            }
        }
    }
    let mut low: Vec<Option<f64>> = sum.iter().zip(&weight).map(|(&s, &wt)| (wt > 1e-12).then(|| s / wt)).collect();
    if low.iter().all(Option::is_none) {
        return Err(RefineError::DegenerateBundle("no depth sample reprojects into the reference view".into()));
    }
    fill_nearest(&mut low, wd, hd);
    let low = ImageGrid::new(hd, wd, 1, low.into_iter().map(|z| z.unwrap() as f32).collect())?;
    Ok(low.resample(h, w, wd as f64 / w as f64, hd as f64 / h as f64))
}

fn splat(sum: &mut [f64], weight: &mut [f64], w: usize, h: usize, x: PixelCoord, z: f64) {
    let (c0, r0) = (x.u.floor(), x.v.floor());
    let (fu, fv) = (x.u - c0, x.v - r0);
    for (dr, dc, wt) in [(0, 0, (1.0 - fu) * (1.0 - fv)), (0, 1, fu * (1.0 - fv)), (1, 0, (1.0 - fu) * fv), (1, 1, fu * fv)] {
        let (r, c) = (r0 + dr as f64, c0 + dc as f64);
        if wt <= 0.0 || r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            continue;
        }
        let i = r as usize * w + c as usize;
        sum[i] += wt * z;
        weight[i] += wt;
    }
}

/// Breadth-first fill of empty cells from their nearest filled neighbour.
fn fill_nearest(cells: &mut [Option<f64>], w: usize, h: usize) {
    let mut queue: VecDeque<usize> = (0..cells.len()).filter(|&i| cells[i].is_some()).collect();
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / w, i % w);
        let z = cells[i];
        let mut visit = |j: usize| {
            if cells[j].is_none() {
                cells[j] = z;
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(i - w);
        }
        if r + 1 < h {
            visit(i + w);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < w {
            visit(i + 1);
        }
    }
}

/// `Z*(x) = Z_avg(x) + C(x)·f(X(x), I_r(x))` at every reference pixel, or the
/// network output itself for a direct-depth model.
pub fn reconstruct(model: &RefinementModel, bundle: &Bundle, z_avg: &ImageGrid) -> Result<ImageGrid, RefineError> {
    let reference = bundle.reference();
    let (h, w) = (reference.image.height(), reference.image.width());
    if z_avg.height() != h || z_avg.width() != w || z_avg.channels() != 1 {
        return Err(RefineError::InvalidBundle(format!(
            "Z_avg is {}x{}x{}, expected {h}x{w}x1",
            z_avg.height(),
            z_avg.width(),
            z_avg.channels()
        )));
    }
    if model.confidence.grid().height() != h || model.confidence.grid().width() != w {
        return Err(RefineError::InvalidBundle("confidence map does not match the reference image".into()));
    }
    let k = reference.intrinsics_rgb;
    let conf = model.confidence.grid().data();
    let img = reference.image.data();
    let mut engine = BatchEngine::<f64>::new(&model.params);
    let mut out = z_avg.data().to_vec();
    let mut inputs = Vec::new();
    let mut idx = Vec::new();
    const CHUNK: usize = 4096;
    let flush = |inputs: &mut Vec<f64>, idx: &mut Vec<usize>, engine: &mut BatchEngine<f64>, out: &mut [f32]| {
        if idx.is_empty() {
            return;
        }
        let y = engine.forward(inputs, idx.len());
        for (&i, &raw) in idx.iter().zip(&y) {
            let z = z_avg.data()[i] as f64;
            out[i] = if model.direct_depth {
                raw as f32
            } else {
                (z + conf[i] as f64 * raw) as f32
            };
        }
        inputs.clear();
        idx.clear();
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let z = z_avg.data()[i] as f64;
            let Ok(p) = unproject(PixelCoord::new(c as f64, r as f64), z, &k) else {
                continue;
            };
            let rgb = [img[3 * i] as f64, img[3 * i + 1] as f64, img[3 * i + 2] as f64];
            encode_into(&(p / model.coord_scale), rgb, model.levels, &mut inputs);
            idx.push(i);
            if idx.len() == CHUNK {
                flush(&mut inputs, &mut idx, &mut engine, &mut out);
            }
        }
    }
    flush(&mut inputs, &mut idx, &mut engine, &mut out);
    Ok(ImageGrid::new(h, w, 1, out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use crate::neural::init_params;
    use crate::refine::Frame;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(80.0, 80.0, 31.5, 23.5).unwrap()
    }

    fn frame(depth: ImageGrid, pose: Pose) -> Frame {
        let img = ImageGrid::from_fn(48, 64, 3, |r, c, ch| ((r * 7 + c * 3 + ch) % 11) as f32 / 10.0).unwrap();
        Frame::new(img, depth, pose, k(), 0)
    }

    fn model(levels: usize) -> RefinementModel {
        RefinementModel {
            params: init_params(1, levels),
            confidence: ConfidenceMap::ones(48, 64),
            levels,
            coord_scale: 1.0,
            direct_depth: false,
        }
    }

    #[test]
    fn single_frame_is_upsampled_reference_depth() {
        let depth = ImageGrid::from_fn(12, 16, 1, |r, c, _| 0.4 + 0.01 * r as f32 + 0.003 * c as f32).unwrap();
        let b = Bundle::new(vec![frame(depth.clone(), Pose::identity())]).unwrap();
        let z = compute_z_avg(&b).unwrap();
        let expect = depth.resample(48, 64, 0.25, 0.25);
        for (a, e) in z.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn in_plane_translation_keeps_plane_depth() {
        let frames = (0..6)
            .map(|i| {
                let t = Vector3::new(0.001 * i as f64, -0.0007 * i as f64, 0.0);
                let pose = if i == 0 { Pose::identity() } else { Pose::from_translation(t) };
                frame(ImageGrid::filled(12, 16, 1, 0.5), pose)
            })
            .collect();
        let z = compute_z_avg(&Bundle::new(frames).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn holes_are_filled_from_neighbours() {
        let depth = ImageGrid::from_fn(12, 16, 1, |r, c, _| if r < 6 && c < 8 { 0.0 } else { 0.7 }).unwrap();
        let b = Bundle::new(vec![frame(depth, Pose::identity())]).unwrap();
        let z = compute_z_avg(&b).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn empty_depth_is_degenerate() {
        let b = Bundle::new(vec![frame(ImageGrid::filled(12, 16, 1, 0.0), Pose::identity())]).unwrap();
        assert!(matches!(compute_z_avg(&b), Err(RefineError::DegenerateBundle(_))));
    }

    #[test]
    fn init_model_reconstructs_z_avg_exactly() {
        let depth = ImageGrid::from_fn(12, 16, 1, |r, c, _| 0.3 + 0.02 * ((r + c) % 5) as f32).unwrap();
        let b = Bundle::new(vec![frame(depth, Pose::identity())]).unwrap();
        let z = compute_z_avg(&b).unwrap();
        let z_star = reconstruct(&model(6), &b, &z).unwrap();
        assert_eq!(z_star, z);
    }

    #[test]
    fn zero_confidence_gates_everything() {
        let depth = ImageGrid::filled(12, 16, 1, 0.5);
        let b = Bundle::new(vec![frame(depth, Pose::identity())]).unwrap();
        let z = compute_z_avg(&b).unwrap();
        let mut m = model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for l in m.params.layers_mut() {
            l.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.3..0.3));
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        assert_ne!(reconstruct(&m, &b, &z).unwrap(), z);
        m.confidence = ConfidenceMap::from_grid(ImageGrid::filled(48, 64, 1, 0.0)).unwrap();
        assert_eq!(reconstruct(&m, &b, &z).unwrap(), z);
    }
}
