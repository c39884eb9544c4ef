//! Synthetic captures: hand-tremor pose paths, a small ray-cast scene with
//! exact depth, and a low-resolution depth sensor model.

use super::format::Provenance;
use crate::geometry::{Intrinsics, Pose};
use crate::image::ImageGrid;
use crate::refine::{Bundle, Frame, RefineError};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Gaussian random walk in translation and rotation at a fixed frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TremorParams {
    /// Per-frame step std along camera x, y, z (meters).
    pub translation_std: [f64; 3],
    /// Per-frame step std of the axis-angle vector (radians).
    pub rotation_std: [f64; 3],
    pub frames: usize,
    pub frame_rate_hz: f64,
    pub seed: u64,
}

impl Default for TremorParams {
    /// Calibrated so the median over seeds of the largest in-plane distance
    /// from the first frame is about 5.8 mm over 120 frames.
    fn default() -> Self {
        Self {
            translation_std: [3.5e-4, 3.5e-4, 1.0e-4],
            rotation_std: [1.0e-4; 3],
            frames: 120,
            frame_rate_hz: 60.0,
            seed: 0,
        }
    }
}

/// Exact rigid poses; pose 0 is the identity.
pub fn simulate_tremor(params: &TremorParams) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut t = Vector3::zeros();
    let mut r = Vector3::zeros();
    let mut poses = Vec::with_capacity(params.frames);
    for i in 0..params.frames {
        if i > 0 {
            for a in 0..3 {
                t[a] += params.translation_std[a] * std_normal.sample(&mut rng);
                r[a] += params.rotation_std[a] * std_normal.sample(&mut rng);
            }
            poses.push(Pose::from_axis_angle(r, t));
        } else {
            poses.push(Pose::identity());
        }
    }
    poses
}

pub fn timestamps(params: &TremorParams) -> Vec<u64> {
    (0..params.frames)
        .map(|i| (i as f64 * 1e9 / params.frame_rate_hz).round() as u64)
        .collect()
}

/// Largest distance in the image plane (x, y) between any camera centre and
/// the first one.
pub fn max_in_plane_displacement(poses: &[Pose]) -> f64 {
    let Some(first) = poses.first() else { return 0.0 };
    let o = first.translation();
    poses
        .iter()
        .map(|p| {
            let d = p.translation() - o;
            d.x.hypot(d.y)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    /// Smoothed checkerboard in plane coordinates.
    Checker,
    /// Sum of three oblique sinusoids.
    Sinusoid,
    ValueNoise,
    /// Half sinusoid, half value noise.
    Mixed,
    Flat,
}

/// Solid texture evaluated at the 3D hit point, so every view sees the same
/// color at the same surface point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub kind: TextureKind,
    /// Peak-to-peak amplitude of each channel.
    pub contrast: f64,
    /// Mean color.
    pub base: [f64; 3],
    /// Checker cell size or value-noise cell size (meters); sinusoids use
    /// wavelengths of `scale`, `1.55·scale` and `2.5·scale`.
    pub scale: f64,
    pub seed: u64,
}

impl TextureSpec {
    pub fn mixed(seed: u64) -> Self {
        Self {
            kind: TextureKind::Mixed,
            contrast: 1.0,
            base: [0.5, 0.5, 0.5],
            scale: 0.005,
            seed,
        }
    }

    pub fn flat(color: [f64; 3]) -> Self {
        Self {
            kind: TextureKind::Flat,
            contrast: 0.0,
            base: color,
            scale: 0.01,
            seed: 0,
        }
    }

    pub fn checker(cell: f64) -> Self {
        Self {
            kind: TextureKind::Checker,
            contrast: 0.6,
            base: [0.5, 0.5, 0.5],
            scale: cell,
            seed: 0,
        }
    }

    pub fn is_textured(&self) -> bool {
        self.kind != TextureKind::Flat && self.contrast > 0.0
    }

    pub fn color(&self, p: &Point3<f64>) -> [f64; 3] {
        let mut out = self.base;
        if !self.is_textured() {
            return out;
        }
        for (ch, o) in out.iter_mut().enumerate() {
            let s = match self.kind {
                TextureKind::Checker => {
                    let k = std::f64::consts::PI / self.scale;
                    // Same pattern in all channels, slightly tinted.
                    (4.0 * (k * p.x).sin() * (k * p.y).sin()).tanh() * [1.0, 0.9, 0.8][ch]
                }
                TextureKind::Sinusoid => sinusoids(p, self.scale, self.seed, ch),
                TextureKind::ValueNoise => value_noise(p, self.scale * 0.8, self.seed.wrapping_add(ch as u64)) * 2.0 - 1.0,
                TextureKind::Mixed => {
                    0.5 * sinusoids(p, self.scale, self.seed, ch) + 0.5 * (value_noise(p, self.scale * 0.8, self.seed.wrapping_add(ch as u64)) * 2.0 - 1.0)
                }
                TextureKind::Flat => 0.0,
            };
            *o = (*o + 0.5 * self.contrast * s).clamp(0.0, 1.0);
        }
        out
    }
}

/// Three sinusoids along fixed oblique directions; phases depend on seed and
/// channel. Result in `[-1, 1]`.
fn sinusoids(p: &Point3<f64>, scale: f64, seed: u64, ch: usize) -> f64 {
    const DIRS: [[f64; 3]; 3] = [[0.94, 0.34, 0.0], [-0.28, 0.96, 0.0], [0.62, -0.78, 0.1]];
    const MULT: [f64; 3] = [1.0, 1.55, 2.5];
    let mut s = 0.0;
    for (i, (d, m)) in DIRS.iter().zip(MULT).enumerate() {
        let phase = unit_hash(seed, (ch * 3 + i) as i64, 17, 3) * std::f64::consts::TAU;
        let x = d[0] * p.x + d[1] * p.y + d[2] * p.z;
        s += (std::f64::consts::TAU * x / (scale * m) + phase).sin();
    }
    s / 3.0
}

fn unit_hash(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise with smoothstep fade, in `[0, 1]`.
fn value_noise(p: &Point3<f64>, cell: f64, seed: u64) -> f64 {
    let q = p.coords / cell;
    let base = q.map(f64::floor);
    let f = (q - base).map(|t| t * t * (3.0 - 2.0 * t));
    let (bx, by, bz) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { f.x } else { 1.0 - f.x }) * (if dy == 1 { f.y } else { 1.0 - f.y }) * (if dz == 1 { f.z } else { 1.0 - f.z });
                acc += w * unit_hash(seed, bx + dx, by + dy, bz + dz);
            }
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    TexturedPlane,
    SphereOnPlane,
    BoxOnPlane,
}

/// Plane `z = depth` tilted about the camera x axis through `(0, 0, depth)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub depth: f64,
    #[serde(default)]
    pub tilt_x_deg: f64,
    /// Half extent in plane coordinates; `None` is an infinite plane.
    #[serde(default)]
    pub half_size: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereSpec {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub kind: SceneKind,
    pub plane: PlaneSpec,
    #[serde(default)]
    pub sphere: Option<SphereSpec>,
    #[serde(default, rename = "box")]
    pub cuboid: Option<BoxSpec>,
    pub plane_texture: TextureSpec,
    pub object_texture: TextureSpec,
    /// Flat fronto-parallel backdrop hit by rays that miss everything else.
    pub background_depth: f64,
    pub background_color: [f64; 3],
}

impl SceneSpec {
    /// Textured card at 0.42 m with a textured sphere in front of it, on a
    /// flat backdrop.
    pub fn sphere_on_plane() -> Self {
        Self {
            name: "sphere-on-plane".into(),
            kind: SceneKind::SphereOnPlane,
            plane: PlaneSpec {
                depth: 0.42,
                tilt_x_deg: 0.0,
                half_size: Some([0.16, 0.12]),
            },
            sphere: Some(SphereSpec {
                center: [0.02, 0.01, 0.34],
                radius: 0.06,
            }),
            cuboid: None,
            plane_texture: TextureSpec::mixed(11),
            object_texture: TextureSpec::mixed(23),
            background_depth: 0.6,
            background_color: [0.35, 0.4, 0.45],
        }
    }

    pub fn box_on_plane() -> Self {
        Self {
            name: "box-on-plane".into(),
            kind: SceneKind::BoxOnPlane,
            sphere: None,
            cuboid: Some(BoxSpec {
                center: [-0.01, 0.0, 0.36],
                half_extent: [0.05, 0.04, 0.03],
            }),
            ..Self::sphere_on_plane()
        }
    }

    /// Tilted textured card.
    pub fn textured_plane() -> Self {
        Self {
            name: "plane".into(),
            kind: SceneKind::TexturedPlane,
            plane: PlaneSpec {
                depth: 0.4,
                tilt_x_deg: 15.0,
                half_size: Some([0.18, 0.14]),
            },
            sphere: None,
            cuboid: None,
            ..Self::sphere_on_plane()
        }
    }

    /// Repetitive texture filling the view at 0.3 m.
    pub fn checker() -> Self {
        Self {
            name: "checker".into(),
            kind: SceneKind::TexturedPlane,
            plane: PlaneSpec {
                depth: 0.3,
                tilt_x_deg: 0.0,
                half_size: None,
            },
            sphere: None,
            cuboid: None,
            plane_texture: TextureSpec::checker(0.01),
            object_texture: TextureSpec::checker(0.01),
            background_depth: 0.6,
            background_color: [0.5, 0.5, 0.5],
        }
    }

    /// Textureless version of the sphere scene.
    pub fn flat() -> Self {
        Self {
            name: "flat".into(),
            plane_texture: TextureSpec::flat([0.6, 0.55, 0.5]),
            object_texture: TextureSpec::flat([0.6, 0.55, 0.5]),
            ..Self::sphere_on_plane()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "plane" | "textured-plane" => Some(Self::textured_plane()),
            "sphere-on-plane" | "canonical" => Some(Self::sphere_on_plane()),
            "box-on-plane" => Some(Self::box_on_plane()),
            "checker" => Some(Self::checker()),
            "flat" => Some(Self::flat()),
            _ => None,
        }
    }

    /// Object depths must stay in `[0.1, 0.5]` m.
    pub fn validate(&self) -> Result<(), RefineError> {
        let bad = |m: String| Err(RefineError::InvalidConfig(m));
        let range = 0.1..=0.5;
        if !range.contains(&self.plane.depth) {
            return bad(format!("plane depth {} outside [0.1, 0.5] m", self.plane.depth));
        }
        if self.plane.tilt_x_deg.abs() >= 80.0 {
            return bad("plane tilt must be below 80 degrees".into());
        }
        match self.kind {
            SceneKind::SphereOnPlane => match &self.sphere {
                Some(s) if s.radius > 0.0 && range.contains(&(s.center[2] - s.radius)) && range.contains(&(s.center[2] + s.radius)) => {}
                Some(_) => return bad("sphere must have positive radius and lie within [0.1, 0.5] m".into()),
                None => return bad("sphere-on-plane scene needs a sphere".into()),
            },
            SceneKind::BoxOnPlane => match &self.cuboid {
                Some(b) if b.half_extent.iter().all(|&e| e > 0.0) && range.contains(&(b.center[2] - b.half_extent[2])) && range.contains(&(b.center[2] + b.half_extent[2])) => {}
                Some(_) => return bad("box must have positive extent and lie within [0.1, 0.5] m".into()),
                None => return bad("box-on-plane scene needs a box".into()),
            },
            SceneKind::TexturedPlane => {}
        }
        if !(self.background_depth > 0.0) {
            return bad("background depth must be positive".into());
        }
        Ok(())
    }

    /// Nearest intersection of the ray `o + t·d` with `t > 0`: returns `t`,
    /// the hit point and whether the surface is textured.
    fn intersect(&self, o: &Point3<f64>, d: &Vector3<f64>) -> (f64, Point3<f64>, Surface) {
        let mut best = (f64::INFINITY, Surface::Background);
        // Plane through (0, 0, depth) with normal tilted about x.
        let tilt = self.plane.tilt_x_deg.to_radians();
        let n = Vector3::new(0.0, tilt.sin(), -tilt.cos());
        let c = Point3::new(0.0, 0.0, self.plane.depth);
        let denom = n.dot(d);
        if denom.abs() > 1e-12 {
            let t = n.dot(&(c - o)) / denom;
            if t > 0.0 && t < best.0 {
                let p = o + d * t;
                let local = p - c;
                let (px, py) = (local.x, local.y * tilt.cos() + local.z * tilt.sin());
                let inside = self.plane.half_size.is_none_or(|[hx, hy]| px.abs() <= hx && py.abs() <= hy);
                if inside {
                    best = (t, Surface::Plane);
                }
            }
        }
        if self.kind == SceneKind::SphereOnPlane {
            if let Some(s) = &self.sphere {
                let oc = o - Point3::from(s.center);
                let b = oc.dot(d);
                let cc = oc.norm_squared() - s.radius * s.radius;
                let a = d.norm_squared();
                let disc = b * b - a * cc;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a;
                    if t > 0.0 && t < best.0 {
                        best = (t, Surface::Object);
                    }
                }
            }
        }
        if self.kind == SceneKind::BoxOnPlane {
            if let Some(bx) = &self.cuboid {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    let lo = bx.center[a] - bx.half_extent[a];
                    let hi = bx.center[a] + bx.half_extent[a];
                    if d[a].abs() < 1e-15 {
                        if o[a] < lo || o[a] > hi {
                            t0 = f64::INFINITY;
                        }
                        continue;
                    }
                    let (ta, tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                if t0 <= t1 && t0 > 0.0 && t0 < best.0 {
                    best = (t0, Surface::Object);
                }
            }
        }
        if best.1 == Surface::Background {
            // Fronto-parallel backdrop in the reference frame.
            let t = if d.z.abs() > 1e-12 { (self.background_depth - o.z) / d.z } else { f64::INFINITY };
            best.0 = if t > 0.0 { t } else { f64::INFINITY };
        }
        (best.0, o + d * best.0, best.1)
    }

    fn shade(&self, surface: Surface, p: &Point3<f64>) -> ([f64; 3], bool) {
        match surface {
            Surface::Plane => (self.plane_texture.color(p), self.plane_texture.is_textured()),
            Surface::Object => {
                let mut c = self.object_texture.color(p);
                // View-independent Lambertian term from a fixed light.
                if let (SceneKind::SphereOnPlane, Some(s)) = (self.kind, &self.sphere) {
                    let n = (p - Point3::from(s.center)).normalize();
                    let l = Vector3::new(-0.4, -0.5, -0.77).normalize();
                    let k = 0.75 + 0.25 * n.dot(&l).max(0.0);
                    c.iter_mut().for_each(|x| *x *= k);
                }
                (c, self.object_texture.is_textured())
            }
            Surface::Background => (self.background_color, false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Surface {
    Plane,
    Object,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub width: usize,
    pub height: usize,
    pub depth_width: usize,
    pub depth_height: usize,
    /// Focal length in pixels; `None` means `375 · width / 480`.
    #[serde(default)]
    pub focal: Option<f64>,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            width: 480,
            height: 360,
            depth_width: 60,
            depth_height: 45,
            focal: None,
        }
    }
}

impl RenderParams {
    /// Depth grid at 1/8 of the RGB resolution.
    pub fn with_resolution(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth_width: (width / 8).max(1),
            depth_height: (height / 8).max(1),
            focal: None,
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.focal.unwrap_or(375.0 * self.width as f64 / 480.0);
        Intrinsics::new(f, f, (self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0).expect("valid default intrinsics")
    }
}

/// Render one view: RGB, exact z-depth and the textured-surface mask.
pub fn render_frame(scene: &SceneSpec, pose: &Pose, k: &Intrinsics, width: usize, height: usize) -> (ImageGrid, ImageGrid, Vec<bool>) {
    let o = Point3::from(*pose.translation());
    let mut rgb = Vec::with_capacity(width * height * 3);
    let mut depth = Vec::with_capacity(width * height);
    let mut mask = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let d_cam = Vector3::new((c as f64 - k.cx) / k.fx, (r as f64 - k.cy) / k.fy, 1.0);
            let d = pose.transform_vector(&d_cam);
            // The ray parameter equals the camera z-depth since d_cam.z = 1.
            let (t, p, surface) = scene.intersect(&o, &d);
            let (color, textured) = scene.shade(surface, &p);
            rgb.extend(color.iter().map(|&x| x as f32));
            depth.push(t as f32);
            mask.push(textured);
        }
    }
    (
        ImageGrid::new(height, width, 3, rgb).expect("rendered image is finite"),
        ImageGrid::new(height, width, 1, depth).expect("rendered depth is finite"),
        mask,
    )
}

/// Low-resolution depth sensor: box average, Gaussian noise, a smooth bias
/// field shared by all frames of a capture, optional quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarModel {
    pub noise_std: f64,
    /// Largest absolute value of the bias field (meters); 0 disables it.
    pub bias_amplitude: f64,
    pub bias_components: usize,
    #[serde(default)]
    pub quantization: Option<f64>,
    pub seed: u64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            noise_std: 0.005,
            bias_amplitude: 0.01,
            bias_components: 4,
            quantization: None,
            seed: 0,
        }
    }
}

impl LidarModel {
    pub fn noiseless() -> Self {
        Self {
            noise_std: 0.0,
            bias_amplitude: 0.0,
            ..Self::default()
        }
    }

    /// Bias field on an `h x w` grid: a few random low-frequency cosines,
    /// rescaled so the largest magnitude equals `bias_amplitude`.
    pub fn bias_field(&self, h: usize, w: usize) -> Vec<f64> {
        if self.bias_amplitude == 0.0 || self.bias_components == 0 {
            return vec![0.0; h * w];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xb1a5_f1e1_d000_0001);
        let comps: Vec<(f64, f64, f64, f64)> = (0..self.bias_components)
            .map(|_| {
                (
                    rng.random_range(0.3..1.5),
                    rng.random_range(0.3..1.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.5..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                )
            })
            .collect();
        let mut field: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
                comps.iter().map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).cos()).sum()
            })
            .collect();
        let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            field.iter_mut().for_each(|v| *v *= self.bias_amplitude / peak);
        }
        field
    }
}

/// Downsample `gt` to `h x w` and corrupt it. `frame_seed` decorrelates the
/// per-frame noise; the bias field depends on the model seed only.
pub fn simulate_lidar(gt: &ImageGrid, h: usize, w: usize, model: &LidarModel, frame_seed: u64) -> ImageGrid {
    assert!(h <= gt.height() && w <= gt.width() && h > 0 && w > 0, "depth grid must not exceed the source");
    let sx = gt.width() as f64 / w as f64;
    let sy = gt.height() as f64 / h as f64;
    let cols = box_weights(gt.width(), w, sx);
    let rows = box_weights(gt.height(), h, sy);
    let bias = model.bias_field(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ frame_seed);
    let noise = Normal::new(0.0, model.noise_std.max(0.0)).unwrap();
    let mut out = Vec::with_capacity(h * w);
    for (r, row_w) in rows.iter().enumerate() {
        for (c, col_w) in cols.iter().enumerate() {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for &(rr, wr) in row_w {
                for &(cc, wc) in col_w {
                    acc += wr * wc * gt.get(rr, cc, 0) as f64;
                    wsum += wr * wc;
                }
            }
            let mut z = acc / wsum + bias[r * w + c];
            if model.noise_std > 0.0 {
                z += noise.sample(&mut rng);
            }
            if let Some(q) = model.quantization.filter(|q| *q > 0.0) {
                z = (z / q).round() * q;
            }
            out.push(z.max(1e-3) as f32);
        }
    }
    ImageGrid::new(h, w, 1, out).expect("finite depth")
}

/// Source pixels and overlap weights for each target cell. Target cell `j`
/// is centred on source coordinate `j·s` and spans `s` source pixels.
fn box_weights(n_src: usize, n_dst: usize, s: f64) -> Vec<Vec<(usize, f64)>> {
    (0..n_dst)
        .map(|j| {
            let (lo, hi) = (j as f64 * s - s / 2.0, j as f64 * s + s / 2.0);
            let first = (lo + 0.5).floor().max(0.0) as usize;
            let last = ((hi + 0.5).ceil() as usize).min(n_src);
            (first..last)
                .filter_map(|i| {
                    let ov = (hi.min(i as f64 + 0.5) - lo.max(i as f64 - 0.5)).max(0.0);
                    (ov > 0.0).then_some((i, ov))
                })
                .collect()
        })
        .collect()
}

/// A rendered capture plus what only the simulator knows.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub bundle: Bundle,
    pub gt_depth: ImageGrid,
    /// Reference pixels whose surface carries texture.
    pub textured_mask: Vec<bool>,
    pub poses: Vec<Pose>,
}

impl SyntheticBundle {
    pub fn background_mask(&self) -> Vec<bool> {
        self.textured_mask.iter().map(|t| !t).collect()
    }
}

pub fn render_synthetic_bundle(scene: &SceneSpec, tremor: &TremorParams, render: &RenderParams, lidar: &LidarModel) -> Result<SyntheticBundle, RefineError> {
    scene.validate()?;
    if tremor.frames == 0 {
        return Err(RefineError::InvalidConfig("tremor path needs at least one frame".into()));
    }
    if render.depth_width > render.width || render.depth_height > render.height || render.depth_width == 0 || render.depth_height == 0 {
        return Err(RefineError::InvalidConfig("depth grid must be non-empty and no larger than the image".into()));
    }
    let k = render.intrinsics();
    let poses = simulate_tremor(tremor);
    let stamps = timestamps(tremor);
    let mut frames = Vec::with_capacity(poses.len());
    let mut gt = None;
    let mut mask = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let (img, depth, m) = render_frame(scene, pose, &k, render.width, render.height);
        let low = simulate_lidar(&depth, render.depth_height, render.depth_width, lidar, i as u64);
        if i == 0 {
            gt = Some(depth);
            mask = m;
        }
        frames.push(Frame::new(img, low, *pose, k, stamps[i]));
    }
    let gt = gt.expect("at least one frame");
    let bundle = Bundle::new(frames)?.with_ground_truth(gt.clone())?.with_provenance(Provenance {
        scene: scene.name.clone(),
        seed: tremor.seed,
        tremor: Some(tremor.clone()),
        lidar: Some(lidar.clone()),
        note: "synthetic; depth noise is Gaussian plus a smooth bias field (stand-in for real sensor error)".into(),
    });
    Ok(SyntheticBundle {
        bundle,
        gt_depth: gt,
        textured_mask: mask,
        poses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, unproject, PixelCoord};

    #[test]
    fn tremor_basics() {
        let p = TremorParams::default();
        let a = simulate_tremor(&p);
        assert_eq!(a.len(), 120);
        assert!(a[0].is_identity());
        assert_eq!(a, simulate_tremor(&p));
        let still = TremorParams {
            translation_std: [0.0; 3],
            rotation_std: [0.0; 3],
            ..p.clone()
        };
        assert!(simulate_tremor(&still).iter().all(|q| q.is_identity()));
        assert_eq!(timestamps(&p)[3], 50_000_000);
    }

    #[test]
    fn tremor_steps_have_zero_mean() {
        let p = TremorParams {
            frames: 10_001,
            ..Default::default()
        };
        let poses = simulate_tremor(&p);
        let steps: Vec<f64> = poses.windows(2).map(|w| w[1].translation().x - w[0].translation().x).collect();
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        let std = (steps.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / steps.len() as f64).sqrt();
        assert!(mean.abs() < 4.0 * std / (steps.len() as f64).sqrt());
        assert!((std / 3.5e-4 - 1.0).abs() < 0.05);
    }

    #[test]
    fn fronto_parallel_plane_depth() {
        let scene = SceneSpec {
            plane: PlaneSpec {
                depth: 0.3,
                tilt_x_deg: 0.0,
                half_size: None,
            },
            ..SceneSpec::checker()
        };
        let k = Intrinsics::new(60.0, 60.0, 15.5, 11.5).unwrap();
        let (_, depth, mask) = render_frame(&scene, &Pose::identity(), &k, 32, 24);
        assert!(depth.data().iter().all(|&z| (z - 0.3).abs() < 1e-7));
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn sphere_centre_depth() {
        let scene = SceneSpec {
            sphere: Some(SphereSpec {
                center: [0.0, 0.0, 0.35],
                radius: 0.05,
            }),
            ..SceneSpec::sphere_on_plane()
        };
        let k = Intrinsics::new(60.0, 60.0, 15.0, 11.0).unwrap();
        let (_, depth, _) = render_frame(&scene, &Pose::identity(), &k, 31, 23);
        assert!((depth.get(11, 15, 0) - 0.30).abs() < 1e-7);
    }

    #[test]
    fn views_agree_on_surface_color() {
        let scene = SceneSpec::sphere_on_plane();
        let render = RenderParams::with_resolution(160, 120);
        let k = render.intrinsics();
        let pose = Pose::from_axis_angle(Vector3::new(1e-3, -5e-4, 2e-4), Vector3::new(0.004, -0.002, 0.0005));
        let (ri, rd, _) = render_frame(&scene, &Pose::identity(), &k, 160, 120);
        let (qi, _, _) = render_frame(&scene, &pose, &k, 160, 120);
        let inv = pose.inverse().unwrap();
        let mut errs = Vec::new();
        for r in (10..110).step_by(3) {
            for c in (10..150).step_by(3) {
                let x = PixelCoord::new(c as f64, r as f64);
                let p = unproject(x, rd.get(r, c, 0) as f64, &k).unwrap();
                let xq = project(&inv.transform_point(&p), &k).unwrap();
                let Some(q) = qi.sample_rgb(xq.u, xq.v) else { continue };
                for ch in 0..3 {
                    errs.push((q[ch] - ri.get(r, c, ch) as f64).abs());
                }
            }
        }
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        assert!(median < 2.0 / 255.0, "median color error {median}");
    }

    #[test]
    fn lidar_constant_without_noise() {
        let gt = ImageGrid::filled(48, 64, 1, 0.37);
        let d = simulate_lidar(&gt, 6, 8, &LidarModel::noiseless(), 0);
        assert_eq!((d.height(), d.width()), (6, 8));
        assert!(d.data().iter().all(|&z| (z - 0.37).abs() < 1e-6));
    }

    #[test]
    fn lidar_resolution_ratios() {
        let gt = ImageGrid::filled(1440, 1920, 1, 0.4);
        let d = simulate_lidar(&gt, 180, 240, &LidarModel::noiseless(), 0);
        assert_eq!((d.height(), d.width()), (180, 240));
        let d = simulate_lidar(&gt, 192, 256, &LidarModel::noiseless(), 0);
        assert_eq!((d.height(), d.width()), (192, 256));
        assert!(d.data().iter().all(|&z| (z - 0.4).abs() < 1e-6));
    }

    #[test]
    fn lidar_noise_statistics() {
        let gt = ImageGrid::filled(800, 800, 1, 0.4);
        let model = LidarModel {
            bias_amplitude: 0.0,
            ..Default::default()
        };
        let d = simulate_lidar(&gt, 100, 100, &model, 1);
        let errs: Vec<f64> = d.data().iter().map(|&z| z as f64 - 0.4).collect();
        let std = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        assert!((std / 0.005 - 1.0).abs() < 0.1, "std {std}");
    }

    #[test]
    fn bias_field_amplitude_and_sharing() {
        let m = LidarModel::default();
        let f = m.bias_field(45, 60);
        let peak = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((peak - 0.01).abs() < 1e-12);
        assert_eq!(f, m.bias_field(45, 60));
    }

    #[test]
    fn box_weights_cover_source() {
        let w = box_weights(64, 8, 8.0);
        assert_eq!(w[0].iter().map(|x| x.1).sum::<f64>(), 4.5);
        assert_eq!(w[3].iter().map(|x| x.1).sum::<f64>(), 8.0);
        assert_eq!(w[3].first().unwrap(), &(20, 0.5));
    }

    #[test]
    fn scene_validation() {
        assert!(SceneSpec::sphere_on_plane().validate().is_ok());
        let mut s = SceneSpec::sphere_on_plane();
        s.plane.depth = 0.8;
        assert!(s.validate().is_err());
        for name in ["plane", "sphere-on-plane", "box-on-plane", "checker", "flat"] {
            assert!(SceneSpec::by_name(name).unwrap().validate().is_ok(), "{name}");
        }
    }

    #[test]
    fn scene_spec_toml_roundtrip() {
        let s = SceneSpec::box_on_plane();
        let text = toml::to_string(&s).unwrap();
        assert_eq!(toml::from_str::<SceneSpec>(&text).unwrap(), s);
    }
}
