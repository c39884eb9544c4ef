//! The per-sample backward-forward projection chain.

use super::{ConfidenceMap, RefineError, RefinementModel};
use crate::geometry::{project_jacobian, project_with_min, ray_direction, unproject, Intrinsics, PixelCoord, Point3H, Pose};
use crate::image::{sample_patch, ImageGrid, PatchKernel};
use crate::neural::{encode_point, mlp_forward};
use rand::Rng;

/// A colored point drawn from a query frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuerySample {
    pub x: PixelCoord,
    pub z: f64,
    pub rgb: [f64; 3],
}

/// A drawn point moved into the reference camera, still carrying its color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub point: Point3H,
    pub rgb: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    /// Network output.
    pub raw: f64,
    /// Confidence sampled at `x_r`.
    pub confidence: f64,
    /// `confidence * raw`.
    pub applied: f64,
    pub x_r: PixelCoord,
}

/// Bilinear depth lookup at an RGB pixel. `None` when any contributing texel
/// is a hole.
pub(crate) fn sample_depth(depth: &ImageGrid, x: PixelCoord, scale: (f64, f64)) -> Option<f64> {
    let u = (x.u * scale.0).clamp(0.0, (depth.width() - 1) as f64);
    let v = (x.v * scale.1).clamp(0.0, (depth.height() - 1) as f64);
    let taps = depth.taps(u, v)?;
    let mut z = 0.0;
    for (r, c, w) in taps.weights() {
        let d = depth.get(r, c, 0) as f64;
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        z += w * d;
    }
    Some(z)
}

/// Draw `count` samples with valid depth, keeping a `margin`-pixel border.
/// Each requested sample gets `max_attempts` tries.
pub fn draw_query_samples<R: Rng + ?Sized>(
    image: &ImageGrid,
    depth: &ImageGrid,
    count: usize,
    margin: usize,
    max_attempts: usize,
    rng: &mut R,
) -> Result<Vec<QuerySample>, RefineError> {
    let (h, w) = (image.height(), image.width());
    let m = margin as f64;
    let (u_hi, v_hi) = ((w - 1) as f64 - m, (h - 1) as f64 - m);
    if u_hi < m || v_hi < m {
        return Err(RefineError::InvalidConfig(format!("patch margin {margin} does not fit a {w}x{h} image")));
    }
    let scale = (depth.width() as f64 / w as f64, depth.height() as f64 / h as f64);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let budget = count.saturating_mul(max_attempts);
    while out.len() < count {
        if attempts >= budget {
            return Err(RefineError::SamplingStarvation {
                frame: usize::MAX,
                requested: count,
                drawn: out.len(),
            });
        }
        attempts += 1;
        let x = PixelCoord::new(rng.random_range(m..=u_hi), rng.random_range(m..=v_hi));
        let Some(z) = sample_depth(depth, x, scale) else {
            continue;
        };
        let rgb = image.sample_rgb(x.u, x.v).expect("sample inside margin");
        out.push(QuerySample { x, z, rgb });
    }
    Ok(out)
}

pub fn to_reference_frame(sample: &QuerySample, pose: &Pose, k_q: &Intrinsics) -> Result<ReferencePoint, RefineError> {
    let x_q = unproject(sample.x, sample.z, k_q)?;
    Ok(ReferencePoint {
        point: pose.transform_point(&x_q),
        rgb: sample.rgb,
    })
}

/// Evaluate the network and the confidence gate for one point. `None` when the
/// point does not project inside the reference image.
pub fn predict_correction(model: &RefinementModel, point: &ReferencePoint, k_r: &Intrinsics) -> Option<Correction> {
    let x_r = project_with_min(&point.point, k_r, crate::geometry::DEFAULT_Z_MIN).ok()?;
    let confidence = model.confidence.sample(x_r).ok()?;
    let input = encode_point(&(point.point / model.coord_scale), point.rgb, model.levels);
    let (raw, _) = mlp_forward(&model.params, &input);
    let applied = if model.direct_depth { raw } else { confidence * raw };
    Some(Correction {
        raw,
        confidence,
        applied,
        x_r,
    })
}

/// The refined point keeps the reference ray through `x_r` and moves to
/// z-depth `z`.
pub fn refined_point(x_r: PixelCoord, z: f64, k_r: &Intrinsics) -> Result<Point3H, RefineError> {
    Ok(unproject(x_r, z, k_r)?)
}

/// Project a refined reference-frame point into the query camera and sample
/// its patch there. Returns the query coordinate and the weighted samples.
pub fn resample_in_query(
    x_f: &Point3H,
    pose: &Pose,
    k_q: &Intrinsics,
    image: &ImageGrid,
    kernel: &PatchKernel,
) -> Result<(PixelCoord, Vec<(f64, Vec<f64>)>), RefineError> {
    let inv = pose.inverse()?;
    let y = inv.transform_point(x_f);
    let xq = project_with_min(&y, k_q, crate::geometry::DEFAULT_Z_MIN)?;
    let patch = sample_patch(image, xq, kernel)?;
    Ok((xq, patch))
}

/// Weighted sum of squared RGB differences between two sampled patches.
pub fn photometric_loss(query: &[(f64, Vec<f64>)], reference: &[(f64, Vec<f64>)]) -> f64 {
    query
        .iter()
        .zip(reference)
        .map(|((w, q), (_, r))| w * q.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

/// `|Δz|` and its subgradient (0 at 0).
pub fn geometric_regularizer(dz: f64) -> (f64, f64) {
    let g = if dz > 0.0 {
        1.0
    } else if dz < 0.0 {
        -1.0
    } else {
        0.0
    };
    (dz.abs(), g)
}

/// Fixed geometry for one query/reference pair: evaluates the photometric
/// loss of a refined depth along a reference ray and its derivative.
#[derive(Debug, Clone)]
pub struct PhotometricChain<'a> {
    reference: &'a ImageGrid,
    k_r: Intrinsics,
    query: &'a ImageGrid,
    k_q: Intrinsics,
    /// Reference-to-query transform.
    to_query: Pose,
    kernel: &'a PatchKernel,
    /// Kernel weights repeated per channel, one row of `3 (2K + 1)` per patch row.
    row_weights: Vec<f64>,
    z_min: f64,
}

impl<'a> PhotometricChain<'a> {
    pub fn new(
        reference: &'a ImageGrid,
        k_r: Intrinsics,
        query: &'a ImageGrid,
        k_q: Intrinsics,
        query_pose: &Pose,
        kernel: &'a PatchKernel,
    ) -> Result<Self, RefineError> {
        if reference.channels() != 3 || query.channels() != 3 {
            return Err(RefineError::InvalidBundle("images must have 3 channels".into()));
        }
        Ok(Self {
            reference,
            k_r,
            query,
            k_q,
            to_query: query_pose.inverse()?,
            row_weights: kernel.weights().iter().flat_map(|&w| [w; 3]).collect(),
            kernel,
            z_min: crate::geometry::DEFAULT_Z_MIN,
        })
    }

    pub fn with_z_min(mut self, z_min: f64) -> Self {
        self.z_min = z_min;
        self
    }

    pub fn reference_intrinsics(&self) -> Intrinsics {
        self.k_r
    }

    pub fn kernel(&self) -> &PatchKernel {
        self.kernel
    }

    /// Query pixel hit by the point at z-depth `z` on the ray through `x_r`.
    pub fn query_pixel(&self, x_r: PixelCoord, z: f64) -> Option<PixelCoord> {
        let y = self.to_query.transform_point(&Point3H::from(ray_direction(x_r, &self.k_r) * z));
        project_with_min(&y, &self.k_q, self.z_min).ok()
    }

    /// Loss of depth `z` along the ray through `x_r`. `None` if either patch
    /// leaves its image or the point is behind the query camera.
    pub fn loss(&self, x_r: PixelCoord, z: f64) -> Option<f64> {
        if !(z > self.z_min) {
            return None;
        }
        let xq = self.query_pixel(x_r, z)?;
        self.patch_residual::<false>(xq, x_r).map(|r| r.0)
    }

    /// Loss and `∂loss/∂z`.
    pub fn loss_and_grad(&self, x_r: PixelCoord, z: f64) -> Option<(f64, f64)> {
        if !(z > self.z_min) {
            return None;
        }
        let ray = ray_direction(x_r, &self.k_r);
        let y = self.to_query.transform_point(&Point3H::from(ray * z));
        let xq = project_with_min(&y, &self.k_q, self.z_min).ok()?;
        let (loss, gu, gv) = self.patch_residual::<true>(xq, x_r)?;
        let dy = self.to_query.transform_vector(&ray);
        let [ju, jv] = project_jacobian(&y, &self.k_q);
        Some((loss, gu * ju.dot(&dy) + gv * jv.dot(&dy)))
    }

    /// Patch loss between the query at `xq` and the reference at `xr`, plus
    /// its gradient with respect to `xq` when `GRAD` is set.
    ///
    /// Both footprints must sit strictly inside their images so that every
    /// tap shares the centre's bilinear fractions.
    fn patch_residual<const GRAD: bool>(&self, xq: PixelCoord, xr: PixelCoord) -> Option<(f64, f64, f64)> {
        let k = self.kernel.half_width() as isize;
        let base = |img: &ImageGrid, x: PixelCoord| -> Option<(isize, isize, f64, f64)> {
            if !(x.u.is_finite() && x.v.is_finite()) {
                return None;
            }
            let (c, r) = (x.u.floor(), x.v.floor());
            let (c, r, fu, fv) = (c as isize, r as isize, x.u - c, x.v - r);
            let (w, h) = (img.width() as isize, img.height() as isize);
            (c - k >= 0 && r - k >= 0 && c + k + 1 < w && r + k + 1 < h).then_some((c, r, fu, fv))
        };
        let (qc, qr, qfu, qfv) = base(self.query, xq)?;
        let (rc, rr, rfu, rfv) = base(self.reference, xr)?;
        let n = 2 * k as usize + 1;
        let span = 3 * n;
        let qd = self.query.data();
        let rd = self.reference.data();
        let (qrow, rrow) = (3 * self.query.width(), 3 * self.reference.width());
        let (q00, q01, q10, q11) = ((1.0 - qfu) * (1.0 - qfv), qfu * (1.0 - qfv), (1.0 - qfu) * qfv, qfu * qfv);
        let (r00, r01, r10, r11) = ((1.0 - rfu) * (1.0 - rfv), rfu * (1.0 - rfv), (1.0 - rfu) * rfv, rfu * rfv);
        let patch = PatchRows {
            query: qd,
            reference: rd,
            query_start: (qr - k) as usize * qrow + 3 * (qc - k) as usize,
            reference_start: (rr - k) as usize * rrow + 3 * (rc - k) as usize,
            query_stride: qrow,
            reference_stride: rrow,
            span,
            weights: &self.row_weights,
            q: [q00, q01, q10, q11],
            r: [r00, r01, r10, r11],
            frac: [qfu, qfv],
        };
        let acc = patch.accumulate::<GRAD>();
        let sum = |a: [f64; 4]| (a[0] + a[1]) + (a[2] + a[3]);
        let (loss, gu, gv) = (sum(acc[0]), 2.0 * sum(acc[1]), 2.0 * sum(acc[2]));
        Some((loss, gu, gv))
    }
}

/// Confidence texels and weights that produced `C(x)`.
/// Footprints of one query/reference patch pair inside their images.
struct PatchRows<'a> {
    query: &'a [f32],
    reference: &'a [f32],
    query_start: usize,
    reference_start: usize,
    query_stride: usize,
    reference_stride: usize,
    /// Values per patch row, `3 (2K + 1)`.
    span: usize,
    weights: &'a [f64],
    /// Bilinear corner weights.
    q: [f64; 4],
    r: [f64; 4],
    /// Query sub-pixel fractions `(fu, fv)`.
    frac: [f64; 2],
}

impl PatchRows<'_> {
    /// Lane-split sums of the loss and its `u`/`v` derivatives (halved).
    fn accumulate<const GRAD: bool>(&self) -> [[f64; 4]; 3] {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required target features were detected at runtime.
            return unsafe { self.accumulate_avx2::<GRAD>() };
        }
        self.accumulate_portable::<GRAD>()
    }

    /// Taps past the last whole group of four, summed separately.
    #[inline(always)]
    fn tail_taps<const GRAD: bool>(&self, from: usize, weights: &[f64], [qt, qb, rt, rb]: [&[f32]; 4], tail: &mut [f64; 3]) {
        let [q00, q01, q10, q11] = self.q;
        let [r00, r01, r10, r11] = self.r;
        let [fu, fv] = self.frac;
        for j in from..self.span {
            let (a, b, c, d) = (qt[j] as f64, qt[j + 3] as f64, qb[j] as f64, qb[j + 3] as f64);
            let q = a * q00 + b * q01 + c * q10 + d * q11;
            let r = rt[j] as f64 * r00 + rt[j + 3] as f64 * r01 + rb[j] as f64 * r10 + rb[j + 3] as f64 * r11;
            let diff = q - r;
            let wd = weights[j] * diff;
            tail[0] += wd * diff;
            if GRAD {
                tail[1] += wd * ((b - a) * (1.0 - fv) + (d - c) * fv);
                tail[2] += wd * ((c - a) * (1.0 - fu) + (d - b) * fu);
            }
        }
    }

    /// Same arithmetic as the portable path, lane for lane (no fused
    /// multiply-add), so both give identical results.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn accumulate_avx2<const GRAD: bool>(&self) -> [[f64; 4]; 3] {
        use std::arch::x86_64::*;
        let span = self.span;
        let whole = span / 4 * 4;
        let splat = |x: f64| _mm256_set1_pd(x);
        let [q00, q01, q10, q11] = self.q.map(splat);
        let [r00, r01, r10, r11] = self.r.map(splat);
        let (fu, fv) = (splat(self.frac[0]), splat(self.frac[1]));
        let (cu, cv) = (splat(1.0 - self.frac[1]), splat(1.0 - self.frac[0]));
        let (mut loss, mut gu, mut gv) = (_mm256_setzero_pd(), _mm256_setzero_pd(), _mm256_setzero_pd());
        let mut tail = [0.0f64; 3];
        for (row, weights) in self.weights.chunks_exact(span).enumerate() {
            let qs = self.query_start + row * self.query_stride;
            let rs = self.reference_start + row * self.reference_stride;
            let (qt, qb) = (&self.query[qs..qs + span + 3], &self.query[qs + self.query_stride..qs + self.query_stride + span + 3]);
            let (rt, rb) = (
                &self.reference[rs..rs + span + 3],
                &self.reference[rs + self.reference_stride..rs + self.reference_stride + span + 3],
            );
            let ld = |s: &[f32], j: usize| _mm256_cvtps_pd(_mm_loadu_ps(s.as_ptr().add(j)));
            for j in (0..whole).step_by(4) {
                let (a, b, c, d) = (ld(qt, j), ld(qt, j + 3), ld(qb, j), ld(qb, j + 3));
                let q = _mm256_add_pd(
                    _mm256_add_pd(_mm256_add_pd(_mm256_mul_pd(a, q00), _mm256_mul_pd(b, q01)), _mm256_mul_pd(c, q10)),
                    _mm256_mul_pd(d, q11),
                );
                let r = _mm256_add_pd(
                    _mm256_add_pd(_mm256_add_pd(_mm256_mul_pd(ld(rt, j), r00), _mm256_mul_pd(ld(rt, j + 3), r01)), _mm256_mul_pd(ld(rb, j), r10)),
                    _mm256_mul_pd(ld(rb, j + 3), r11),
                );
                let diff = _mm256_sub_pd(q, r);
                let wd = _mm256_mul_pd(_mm256_loadu_pd(weights.as_ptr().add(j)), diff);
                loss = _mm256_add_pd(loss, _mm256_mul_pd(wd, diff));
                if GRAD {
                    let du = _mm256_add_pd(_mm256_mul_pd(_mm256_sub_pd(b, a), cu), _mm256_mul_pd(_mm256_sub_pd(d, c), fv));
                    let dv = _mm256_add_pd(_mm256_mul_pd(_mm256_sub_pd(c, a), cv), _mm256_mul_pd(_mm256_sub_pd(d, b), fu));
                    gu = _mm256_add_pd(gu, _mm256_mul_pd(wd, du));
                    gv = _mm256_add_pd(gv, _mm256_mul_pd(wd, dv));
                }
            }
            self.tail_taps::<GRAD>(whole, weights, [qt, qb, rt, rb], &mut tail);
        }
        let mut acc = [[0.0f64; 4]; 3];
        _mm256_storeu_pd(acc[0].as_mut_ptr(), loss);
        _mm256_storeu_pd(acc[1].as_mut_ptr(), gu);
        _mm256_storeu_pd(acc[2].as_mut_ptr(), gv);
        for (a, t) in acc.iter_mut().zip(tail) {
            a[0] += t;
        }
        acc
    }

    // Four independent accumulators per term so the inner loop vectorizes.
    #[inline(always)]
    fn accumulate_portable<const GRAD: bool>(&self) -> [[f64; 4]; 3] {
        let span = self.span;
        let [q00, q01, q10, q11] = self.q;
        let [r00, r01, r10, r11] = self.r;
        let [fu, fv] = self.frac;
        let (cu, cv) = (1.0 - fv, 1.0 - fu);
        let mut acc = [[0.0f64; 4]; 3];
        let mut tail = [0.0f64; 3];
        for (row, weights) in self.weights.chunks_exact(span).enumerate() {
            let qs = self.query_start + row * self.query_stride;
            let rs = self.reference_start + row * self.reference_stride;
            let (qt, qb) = (&self.query[qs..qs + span + 3], &self.query[qs + self.query_stride..qs + self.query_stride + span + 3]);
            let (rt, rb) = (
                &self.reference[rs..rs + span + 3],
                &self.reference[rs + self.reference_stride..rs + self.reference_stride + span + 3],
            );
            let whole = span / 4 * 4;
            for o in (0..whole).step_by(4) {
                for l in 0..4 {
                    let j = o + l;
                    // SAFETY: j < span, and each row slice holds span + 3 values.
                    let (a, b, c, d, e, f, g, h, wt) = unsafe {
                        (
                            *qt.get_unchecked(j) as f64,
                            *qt.get_unchecked(j + 3) as f64,
                            *qb.get_unchecked(j) as f64,
                            *qb.get_unchecked(j + 3) as f64,
                            *rt.get_unchecked(j) as f64,
                            *rt.get_unchecked(j + 3) as f64,
                            *rb.get_unchecked(j) as f64,
                            *rb.get_unchecked(j + 3) as f64,
                            *weights.get_unchecked(j),
                        )
                    };
                    let diff = (a * q00 + b * q01 + c * q10 + d * q11) - (e * r00 + f * r01 + g * r10 + h * r11);
                    let wd = wt * diff;
                    acc[0][l] += wd * diff;
                    if GRAD {
                        acc[1][l] += wd * ((b - a) * cu + (d - c) * fv);
                        acc[2][l] += wd * ((c - a) * cv + (d - b) * fu);
                    }
                }
            }
            self.tail_taps::<GRAD>(whole, weights, [qt, qb, rt, rb], &mut tail);
        }
        for (a, t) in acc.iter_mut().zip(tail) {
            a[0] += t;
        }
        acc
    }
}

pub(crate) fn confidence_taps(confidence: &ConfidenceMap, x: PixelCoord) -> Option<[(usize, f64); 4]> {
    let grid = confidence.grid();
    let t = grid.taps(x.u, x.v)?;
    let w = grid.width();
    Some(t.weights().map(|(r, c, wt)| (r * w + c, wt)))
}
