//! Dense scalar fields with continuous-coordinate sampling.
//!
//! Grids are row-major and channel-interleaved. Sample positions use the
//! texel-center convention: integer `(u, v)` hits a stored value exactly and
//! the valid domain is `[0, W-1] x [0, H-1]`. Nothing here clamps: an
//! out-of-bounds request is an error so callers can drop the sample.

use crate::geometry::PixelCoord;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("data length {len} does not match {height}x{width}x{channels}")]
    ShapeMismatch {
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    },
    #[error("grid dimensions must be non-zero")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("coordinate ({u}, {v}) is outside the {width}x{height} grid")]
    OutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("patch around ({u}, {v}) leaves the grid")]
    PatchOutOfBounds { u: f64, v: f64 },
    #[error("expected {expected} channel(s), got {actual}")]
    Channels { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(ImageError::Empty);
        }
        if data.len() != height * width * channels {
            return Err(ImageError::ShapeMismatch {
                height,
                width,
                channels,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "grid dimensions must be non-zero");
        assert!(value.is_finite());
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Build a grid by evaluating `f(row, col, channel)`.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Write a value. Panics on non-finite input, which would break the grid invariant.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        assert!(value.is_finite(), "non-finite value written to grid");
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Result<Self, ImageError> {
        Self::new(self.height, self.width, self.channels, self.data.iter().map(|&x| f(x)).collect())
    }

    #[inline]
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Bilinear sample of every channel.
    pub fn sample_bilinear(&self, x: PixelCoord) -> Result<Vec<f64>, ImageError> {
        let mut out = vec![0.0; self.channels];
        self.sample_bilinear_into(x.u, x.v, &mut out)?;
        Ok(out)
    }

    pub fn sample_bilinear_into(&self, u: f64, v: f64, out: &mut [f64]) -> Result<(), ImageError> {
        let taps = self.taps(u, v).ok_or(ImageError::OutOfBounds {
            u,
            v,
            width: self.width,
            height: self.height,
        })?;
        for (ch, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = taps.combine(&self.data, ch);
        }
        Ok(())
    }

    /// Bilinear sample with clamping to the grid edge, used for resampling a
    /// whole field onto a different grid (never for loss evaluation).
    pub fn sample_clamped(&self, u: f64, v: f64, ch: usize) -> f64 {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        self.taps(u, v).expect("clamped coordinate in bounds").combine(&self.data, ch)
    }

    /// Bilinear sample of a 3-channel grid together with `∂/∂u` and `∂/∂v`.
    #[cfg(test)]
    pub(crate) fn sample_rgb_with_grad(&self, u: f64, v: f64) -> Option<([f64; 3], [f64; 3], [f64; 3])> {
        debug_assert_eq!(self.channels, 3);
        let t = self.taps(u, v)?;
        let mut val = [0.0; 3];
        let mut du = [0.0; 3];
        let mut dv = [0.0; 3];
        for ch in 0..3 {
            let a = self.data[t.i00 + ch] as f64;
            let b = self.data[t.i01 + ch] as f64;
            let c = self.data[t.i10 + ch] as f64;
            let d = self.data[t.i11 + ch] as f64;
            let top = a + (b - a) * t.fu;
            let bottom = c + (d - c) * t.fu;
            val[ch] = top + (bottom - top) * t.fv;
            du[ch] = (b - a) * (1.0 - t.fv) + (d - c) * t.fv;
            dv[ch] = bottom - top;
        }
        Some((val, du, dv))
    }

    #[inline]
    pub(crate) fn sample_rgb(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        debug_assert_eq!(self.channels, 3);
        let t = self.taps(u, v)?;
        let mut val = [0.0; 3];
        for (ch, out) in val.iter_mut().enumerate() {
            *out = t.combine(&self.data, ch);
        }
        Some(val)
    }

    /// Bilinear weights and texel offsets around `(u, v)`.
    #[inline]
    pub(crate) fn taps(&self, u: f64, v: f64) -> Option<Taps> {
        if !self.in_bounds(u, v) {
            return None;
        }
        // On the last row/column step back one texel and use a unit fraction,
        // so the sample stays exact without reading past the edge.
        let (c0, fu) = split(u, self.width);
        let (r0, fv) = split(v, self.height);
        let c1 = if self.width > 1 { c0 + 1 } else { c0 };
        let r1 = if self.height > 1 { r0 + 1 } else { r0 };
        let idx = |r: usize, c: usize| (r * self.width + c) * self.channels;
        Some(Taps {
            i00: idx(r0, c0),
            i01: idx(r0, c1),
            i10: idx(r1, c0),
            i11: idx(r1, c1),
            fu,
            fv,
            row: r0,
            col: c0,
            row1: r1,
            col1: c1,
        })
    }

    /// Resize a single- or multi-channel field onto a new grid by bilinear
    /// resampling at `(col * sx, row * sy)`, clamped at the edges.
    pub fn resample(&self, height: usize, width: usize, sx: f64, sy: f64) -> ImageGrid {
        let ch = self.channels;
        let mut data = Vec::with_capacity(height * width * ch);
        for r in 0..height {
            for c in 0..width {
                for k in 0..ch {
                    data.push(self.sample_clamped(c as f64 * sx, r as f64 * sy, k) as f32);
                }
            }
        }
        ImageGrid {
            height,
            width,
            channels: ch,
            data,
        }
    }
}

#[inline]
fn split(x: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let i = (x.floor() as usize).min(n - 2);
    (i, x - i as f64)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub i00: usize,
    pub i01: usize,
    pub i10: usize,
    pub i11: usize,
    pub fu: f64,
    pub fv: f64,
    pub row: usize,
    pub col: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Taps {
    #[inline]
    fn combine(&self, data: &[f32], ch: usize) -> f64 {
        let a = data[self.i00 + ch] as f64;
        let b = data[self.i01 + ch] as f64;
        let c = data[self.i10 + ch] as f64;
        let d = data[self.i11 + ch] as f64;
        let top = a + (b - a) * self.fu;
        let bottom = c + (d - c) * self.fu;
        top + (bottom - top) * self.fv
    }

    /// `(row, col, weight)` for the four texels.
    pub fn weights(&self) -> [(usize, usize, f64); 4] {
        let (fu, fv) = (self.fu, self.fv);
        [
            (self.row, self.col, (1.0 - fu) * (1.0 - fv)),
            (self.row, self.col1, fu * (1.0 - fv)),
            (self.row1, self.col, (1.0 - fu) * fv),
            (self.row1, self.col1, fu * fv),
        ]
    }
}

/// Gaussian-weighted `(2K+1)²` sampling footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchKernel {
    half_width: usize,
    sigma: f64,
    offsets: Vec<(i32, i32)>,
    weights: Vec<f64>,
}

impl PatchKernel {
    /// Weights are `N(√(δu² + δv²); 0, σ²)` normalized to sum to one.
    pub fn new(half_width: usize, sigma: f64) -> Self {
        assert!(sigma > 0.0 && sigma.is_finite(), "patch sigma must be positive");
        let k = half_width as i32;
        let mut offsets = Vec::with_capacity((2 * half_width + 1).pow(2));
        let mut weights = Vec::with_capacity(offsets.capacity());
        for dv in -k..=k {
            for du in -k..=k {
                let r2 = (du * du + dv * dv) as f64;
                offsets.push((du, dv));
                weights.push((-0.5 * r2 / (sigma * sigma)).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self {
            half_width,
            sigma,
            offsets,
            weights,
        }
    }

    /// Default width heuristic `σ = (K + 1) / 2`.
    pub fn with_default_sigma(half_width: usize) -> Self {
        Self::new(half_width, default_sigma(half_width))
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Whether the whole footprint centred at `(u, v)` lies inside `grid`.
    #[inline]
    pub fn fits(&self, grid: &ImageGrid, u: f64, v: f64) -> bool {
        let k = self.half_width as f64;
        grid.in_bounds(u - k, v - k) && grid.in_bounds(u + k, v + k)
    }
}

pub fn default_sigma(half_width: usize) -> f64 {
    (half_width as f64 + 1.0) / 2.0
}

pub fn make_patch_kernel(half_width: usize, sigma: f64) -> PatchKernel {
    PatchKernel::new(half_width, sigma)
}

/// Bilinear samples at `x - (δu, δv)` for every kernel offset, paired with the
/// offset's weight.
pub fn sample_patch(grid: &ImageGrid, x: PixelCoord, kernel: &PatchKernel) -> Result<Vec<(f64, Vec<f64>)>, ImageError> {
    if !kernel.fits(grid, x.u, x.v) {
        return Err(ImageError::PatchOutOfBounds { u: x.u, v: x.v });
    }
    kernel
        .offsets
        .iter()
        .zip(&kernel.weights)
        .map(|(&(du, dv), &w)| {
            let at = PixelCoord::new(x.u - du as f64, x.v - dv as f64);
            grid.sample_bilinear(at).map(|s| (w, s))
        })
        .collect()
}

/// 5x5 median; border pixels use the median of the in-bounds neighbours.
/// For an even count the two middle values are averaged.
pub fn median_filter_5x5(grid: &ImageGrid) -> Result<ImageGrid, ImageError> {
    if grid.channels != 1 {
        return Err(ImageError::Channels {
            expected: 1,
            actual: grid.channels,
        });
    }
    let (h, w) = (grid.height as isize, grid.width as isize);
    let mut out = Vec::with_capacity(grid.data.len());
    let mut window: Vec<f32> = Vec::with_capacity(25);
    for r in 0..h {
        for c in 0..w {
            window.clear();
            for dr in -2..=2 {
                for dc in -2..=2 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && rr < h && cc >= 0 && cc < w {
                        window.push(grid.data[(rr * w + cc) as usize]);
                    }
                }
            }
            window.sort_unstable_by(f32::total_cmp);
            let n = window.len();
            let m = if n % 2 == 1 {
                window[n / 2]
            } else {
                0.5 * (window[n / 2 - 1] + window[n / 2])
            };
            out.push(m);
        }
    }
    Ok(ImageGrid {
        height: grid.height,
        width: grid.width,
        channels: 1,
        data: out,
    })
}
