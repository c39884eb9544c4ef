//! Metrics and exports.

use crate::geometry::{project, unproject, Intrinsics, PixelCoord};
use crate::image::{ImageError, ImageGrid};
use crate::refine::Bundle;
use nalgebra::Vector3;
use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate evaluation: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("malformed report: {0}")]
    Report(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Mean absolute and mean squared RGB difference over all contributing
/// (pixel, query frame, channel) triples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricError {
    pub mae: f64,
    pub mse: f64,
    /// Contributing (pixel, frame) pairs.
    pub samples: usize,
}

/// Reproject every reference pixel with `depth` into every other frame and
/// compare colors. Points leaving a query image are skipped.
pub fn photometric_error(depth: &ImageGrid, bundle: &Bundle) -> Result<PhotometricError, EvalError> {
    Ok(photometric_error_paired(&[depth], bundle)?[0])
}

/// Evaluate several depth maps on one shared sample set: a (pixel, frame)
/// pair counts only if every depth map keeps it inside the query image.
pub fn photometric_error_paired(depths: &[&ImageGrid], bundle: &Bundle) -> Result<Vec<PhotometricError>, EvalError> {
    let reference = bundle.reference();
    let (h, w) = (reference.image.height(), reference.image.width());
    for d in depths {
        if d.height() != h || d.width() != w || d.channels() != 1 {
            return Err(EvalError::ShapeMismatch(format!("depth is {}x{}x{}, expected {h}x{w}x1", d.height(), d.width(), d.channels())));
        }
    }
    if bundle.len() < 2 {
        return Err(EvalError::Degenerate("bundle has no query frames".into()));
    }
    let k_r = reference.intrinsics_rgb;
    let mut sums = vec![(0.0f64, 0.0f64); depths.len()];
    let mut count = 0usize;
    let mut colors = vec![[0.0f64; 3]; depths.len()];
    for frame in &bundle.frames()[1..] {
        let to_query = frame.pose.inverse().map_err(|e| EvalError::Degenerate(e.to_string()))?;
        for r in 0..h {
            'pixel: for c in 0..w {
                let x = PixelCoord::new(c as f64, r as f64);
                for (d, col) in depths.iter().zip(colors.iter_mut()) {
                    let Ok(p) = unproject(x, d.get(r, c, 0) as f64, &k_r) else {
                        continue 'pixel;
                    };
                    let Ok(xq) = project(&to_query.transform_point(&p), &frame.intrinsics_rgb) else {
                        continue 'pixel;
                    };
                    let Some(s) = frame.image.sample_rgb(xq.u, xq.v) else {
                        continue 'pixel;
                    };
                    *col = s;
                }
                count += 1;
                for (sum, col) in sums.iter_mut().zip(&colors) {
                    for (ch, q) in col.iter().enumerate() {
                        let e = q - reference.image.get(r, c, ch) as f64;
                        sum.0 += e.abs();
                        sum.1 += e * e;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(EvalError::Degenerate("no reprojected pixel lands inside a query image".into()));
    }
    let n = (3 * count) as f64;
    Ok(sums
        .into_iter()
        .map(|(a, s)| PhotometricError {
            mae: a / n,
            mse: s / n,
            samples: count,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub pixels: usize,
}

/// Masked depth error; `mask = None` uses every pixel.
pub fn depth_metrics(depth: &ImageGrid, gt: &ImageGrid, mask: Option<&[bool]>) -> Result<DepthMetrics, EvalError> {
    if (depth.height(), depth.width(), depth.channels()) != (gt.height(), gt.width(), gt.channels()) {
        return Err(EvalError::ShapeMismatch("depth and ground truth differ in shape".into()));
    }
    if let Some(m) = mask {
        if m.len() != depth.data().len() {
            return Err(EvalError::ShapeMismatch("mask length differs from the depth map".into()));
        }
    }
    let (mut a, mut s, mut n) = (0.0, 0.0, 0usize);
    for (i, (&d, &g)) in depth.data().iter().zip(gt.data()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let e = d as f64 - g as f64;
        a += e.abs();
        s += e * e;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(DepthMetrics {
        mae: a / n as f64,
        rmse: (s / n as f64).sqrt(),
        pixels: n,
    })
}

/// Pixel disparity between a point at depth `z` and one `feature` meters
/// behind it, for a camera translated by `baseline`.
pub fn expected_disparity(fx: f64, baseline: f64, z: f64, feature: f64) -> f64 {
    fx * baseline * (1.0 / z - 1.0 / (z + feature))
}

/// Unit normals from central-difference tangents, facing the camera
/// (`n = normalize(t_v × t_u)`). Pixels without a usable neighbourhood take
/// the normal of the nearest valid pixel.
pub fn depth_to_normals(depth: &ImageGrid, k: &Intrinsics) -> Result<ImageGrid, EvalError> {
    if depth.channels() != 1 {
        return Err(EvalError::ShapeMismatch("depth must have one channel".into()));
    }
    let (h, w) = (depth.height(), depth.width());
    let point = |r: usize, c: usize| unproject(PixelCoord::new(c as f64, r as f64), depth.get(r, c, 0) as f64, k).ok().map(|p| p.coords);
    let mut normals: Vec<Option<Vector3<f64>>> = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let tangent = |a: Option<Vector3<f64>>, b: Option<Vector3<f64>>, span: f64| Some((b? - a?) / span);
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let n = (|| {
                if c1 == c0 || r1 == r0 {
                    return None;
                }
                let tu = tangent(point(r, c0), point(r, c1), (c1 - c0) as f64)?;
                let tv = tangent(point(r0, c), point(r1, c), (r1 - r0) as f64)?;
                let n = tv.cross(&tu);
                let len = n.norm();
                (len > 1e-15 && len.is_finite()).then(|| n / len)
            })();
            normals.push(n);
        }
    }
    if normals.iter().all(Option::is_none) {
        return Err(EvalError::Degenerate("no pixel has a valid normal".into()));
    }
    let mut queue: VecDeque<usize> = (0..normals.len()).filter(|&i| normals[i].is_some()).collect();
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / w, i % w);
        let n = normals[i];
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                continue;
            }
            let j = rr as usize * w + cc as usize;
            if normals[j].is_none() {
                normals[j] = n;
                queue.push_back(j);
            }
        }
    }
    let data = normals.into_iter().flat_map(|n| {
        let n = n.unwrap();
        [n.x as f32, n.y as f32, n.z as f32]
    });
    Ok(ImageGrid::new(h, w, 3, data.collect())?)
}

/// Map unit normals to `[0, 1]` per channel.
pub fn encode_normals(normals: &ImageGrid) -> Result<ImageGrid, EvalError> {
    Ok(normals.map(|x| ((x + 1.0) * 0.5).clamp(0.0, 1.0))?)
}

pub fn write_normals_png(path: &Path, normals: &ImageGrid) -> Result<(), EvalError> {
    if normals.channels() != 3 {
        return Err(EvalError::ShapeMismatch("normal map must have 3 channels".into()));
    }
    let enc = encode_normals(normals)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), enc.width() as u32, enc.height() as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| EvalError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(fmt)?;
    let bytes: Vec<u8> = enc.data().iter().map(|&x| (x * 255.0).round() as u8).collect();
    writer.write_image_data(&bytes).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

/// Little-endian PFM (`Pf` for one channel, `PF` for three); rows are stored
/// bottom to top.
pub fn write_pfm(path: &Path, grid: &ImageGrid) -> Result<(), EvalError> {
    let tag = match grid.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(EvalError::ShapeMismatch(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    let mut buf = format!("{tag}\n{} {}\n-1.0\n", grid.width(), grid.height()).into_bytes();
    let row_len = grid.width() * grid.channels();
    for row in grid.data().chunks_exact(row_len).rev() {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_pfm(path: &Path) -> Result<ImageGrid, EvalError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |msg: &str| EvalError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    // Three whitespace-terminated header tokens.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    pos += 1;
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("not a PFM file")),
    };
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let n = w * h * channels;
    let payload = bytes.get(pos..).ok_or_else(|| bad("truncated data"))?;
    if payload.len() != 4 * n {
        return Err(bad(&format!("expected {} data bytes, found {}", 4 * n, payload.len())));
    }
    let vals: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| {
            let b: [u8; 4] = b.try_into().unwrap();
            if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row_len = w * channels;
    let data: Vec<f32> = vals.chunks_exact(row_len.max(1)).rev().flatten().copied().collect();
    Ok(ImageGrid::new(h, w, channels, data)?)
}

/// Read a depth map from a blob or a PFM file (by content).
pub fn read_depth_file(path: &Path) -> Result<ImageGrid, EvalError> {
    let head = fs::read(path).map_err(io_err(path))?;
    if head.starts_with(crate::bundle_io::BLOB_MAGIC) {
        return crate::bundle_io::read_blob(path).map_err(|e| EvalError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        });
    }
    read_pfm(path)
}

/// Evaluation summary, serialized as `key: value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bundle: String,
    pub depth: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub pe_mae: f64,
    pub pe_mse: f64,
    pub pe_samples: usize,
    pub depth_mae: Option<f64>,
    pub depth_rmse: Option<f64>,
    pub depth_pixels: Option<usize>,
    pub eval_seconds: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}: {v}").unwrap();
        kv("bundle", self.bundle.clone());
        kv("depth", self.depth.clone());
        kv("frames", self.frames.to_string());
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv("pe_mae", self.pe_mae.to_string());
        kv("pe_mse", self.pe_mse.to_string());
        kv("pe_samples", self.pe_samples.to_string());
        if let Some(v) = self.depth_mae {
            kv("depth_mae", v.to_string());
        }
        if let Some(v) = self.depth_rmse {
            kv("depth_rmse", v.to_string());
        }
        if let Some(v) = self.depth_pixels {
            kv("depth_pixels", v.to_string());
        }
        kv("eval_seconds", self.eval_seconds.to_string());
        s
    }

    pub fn from_text(text: &str) -> Result<Self, EvalError> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(": ").ok_or_else(|| EvalError::Report(format!("line without `key: value`: {line}")))?;
            map.insert(k.trim().to_string(), v.to_string());
        }
        fn get<T: std::str::FromStr>(map: &std::collections::HashMap<String, String>, k: &str) -> Result<Option<T>, EvalError> {
            map.get(k)
                .map(|v| v.parse::<T>().map_err(|_| EvalError::Report(format!("bad value for {k}: {v}"))))
                .transpose()
        }
        let req = |k: &str| EvalError::Report(format!("missing key {k}"));
        Ok(Self {
            bundle: get(&map, "bundle")?.ok_or_else(|| req("bundle"))?,
            depth: get(&map, "depth")?.ok_or_else(|| req("depth"))?,
            frames: get(&map, "frames")?.ok_or_else(|| req("frames"))?,
            width: get(&map, "width")?.ok_or_else(|| req("width"))?,
            height: get(&map, "height")?.ok_or_else(|| req("height"))?,
            pe_mae: get(&map, "pe_mae")?.ok_or_else(|| req("pe_mae"))?,
            pe_mse: get(&map, "pe_mse")?.ok_or_else(|| req("pe_mse"))?,
            pe_samples: get(&map, "pe_samples")?.ok_or_else(|| req("pe_samples"))?,
            depth_mae: get(&map, "depth_mae")?,
            depth_rmse: get(&map, "depth_rmse")?,
            depth_pixels: get(&map, "depth_pixels")?,
            eval_seconds: get(&map, "eval_seconds")?.ok_or_else(|| req("eval_seconds"))?,
        })
    }
}
