//! On-disk bundle layout.
//!
//! ```text
//! <dir>/manifest        TOML
//! <dir>/rgb_0000.bin    blob, H x W x 3
//! <dir>/depth_0000.bin  blob, H_d x W_d x 1
//! <dir>/gt_depth.bin    optional blob, H x W x 1
//! ```
//!
//! A blob is a 16-byte header (`MBDB`, then `H`, `W`, `C` as little-endian
//! u32) followed by `H·W·C` little-endian f32 values, row-major with
//! interleaved channels.

use super::synth::{LidarModel, TremorParams};
use crate::geometry::{Intrinsics, Pose};
use crate::image::{ImageError, ImageGrid};
use crate::refine::{Bundle, Frame, RefineError};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 4] = b"MBDB";
pub const BLOB_HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest";

#[derive(Debug, Error)]
pub enum BundleIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("unsupported schema version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: truncated blob, expected {expected} bytes but found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{path}: not a depth/image blob (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Bundle(#[from] RefineError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleIoError + '_ {
    move |source| BundleIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How a synthetic bundle was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tremor: Option<TremorParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lidar: Option<LidarModel>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    /// Row-major 4x4 camera-to-reference matrix.
    pub pose: Vec<f64>,
    /// `[fx, fy, cx, cy]`.
    pub intrinsics_rgb: [f64; 4],
    pub timestamp_ns: u64,
    pub image: String,
    pub depth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub h_d: usize,
    pub w_d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub frames: Vec<FrameEntry>,
}

pub fn write_blob(path: &Path, grid: &ImageGrid) -> Result<(), BundleIoError> {
    let mut buf = Vec::with_capacity(BLOB_HEADER_LEN + 4 * grid.data().len());
    buf.extend_from_slice(BLOB_MAGIC);
    for d in [grid.height(), grid.width(), grid.channels()] {
        let d = u32::try_from(d).map_err(|_| BundleIoError::DimensionMismatch(format!("dimension {d} does not fit in u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in grid.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_blob(path: &Path) -> Result<ImageGrid, BundleIoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 4 || &bytes[..4] != BLOB_MAGIC {
        if bytes.len() < 4 && BLOB_MAGIC.starts_with(&bytes) {
            return Err(BundleIoError::Truncated {
                path: path.to_path_buf(),
                expected: BLOB_HEADER_LEN,
                found: bytes.len(),
            });
        }
        return Err(BundleIoError::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < BLOB_HEADER_LEN {
        return Err(BundleIoError::Truncated {
            path: path.to_path_buf(),
            expected: BLOB_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(BLOB_HEADER_LEN))
        .ok_or_else(|| BundleIoError::DimensionMismatch(format!("{}: header dimensions overflow", path.display())))?;
    if bytes.len() < expected {
        return Err(BundleIoError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(BundleIoError::DimensionMismatch(format!(
            "{}: {} bytes of trailing data after a {h}x{w}x{c} payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    let data = bytes[BLOB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ImageGrid::new(h, w, c, data)?)
}

pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<PathBuf, BundleIoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (h, w, h_d, w_d) = bundle.dims();
    let mut frames = Vec::with_capacity(bundle.len());
    for (i, f) in bundle.frames().iter().enumerate() {
        let image = format!("rgb_{i:04}.bin");
        let depth = format!("depth_{i:04}.bin");
        write_blob(&dir.join(&image), &f.image)?;
        write_blob(&dir.join(&depth), &f.depth)?;
        let m = f.pose.to_matrix4();
        let k = f.intrinsics_rgb;
        frames.push(FrameEntry {
            pose: (0..16).map(|j| m[(j / 4, j % 4)]).collect(),
            intrinsics_rgb: [k.fx, k.fy, k.cx, k.cy],
            timestamp_ns: f.timestamp_ns,
            image,
            depth,
        });
    }
    let ground_truth = match bundle.ground_truth() {
        Some(gt) => {
            write_blob(&dir.join("gt_depth.bin"), gt)?;
            Some("gt_depth.bin".to_string())
        }
        None => None,
    };
    let manifest = BundleManifest {
        schema_version: SCHEMA_VERSION,
        n: bundle.len(),
        h,
        w,
        h_d,
        w_d,
        ground_truth,
        provenance: bundle.provenance().cloned(),
        frames,
    };
    let text = toml::to_string(&manifest).map_err(|e| BundleIoError::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Parse a manifest, checking the schema version before anything else.
pub fn read_manifest(dir: &Path) -> Result<BundleManifest, BundleIoError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let raw: toml::Table = toml::from_str(&text).map_err(|e| BundleIoError::Manifest(e.to_string()))?;
    let version = raw
        .get("schema_version")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| BundleIoError::Manifest("missing schema_version".into()))?;
    if version != SCHEMA_VERSION as i64 {
        return Err(BundleIoError::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: SCHEMA_VERSION,
        });
    }
    toml::from_str(&text).map_err(|e| BundleIoError::Manifest(e.to_string()))
}

pub fn read_bundle(dir: &Path) -> Result<Bundle, BundleIoError> {
    let m = read_manifest(dir)?;
    if m.frames.len() != m.n {
        return Err(BundleIoError::DimensionMismatch(format!("manifest declares {} frames but lists {}", m.n, m.frames.len())));
    }
    let mut frames = Vec::with_capacity(m.n);
    for (i, e) in m.frames.iter().enumerate() {
        let image = read_frame_blob(dir, &e.image, (m.h, m.w, 3))?;
        let depth = read_frame_blob(dir, &e.depth, (m.h_d, m.w_d, 1))?;
        if e.pose.len() != 16 {
            return Err(BundleIoError::Manifest(format!("frame {i}: pose has {} entries, expected 16", e.pose.len())));
        }
        let mut pose = Pose::from_matrix4(&Matrix4::from_row_slice(&e.pose)).map_err(|err| BundleIoError::Manifest(format!("frame {i}: {err}")))?;
        if i == 0 {
            let dev = (pose.to_matrix4() - Matrix4::identity()).amax();
            if dev > 1e-12 {
                return Err(BundleIoError::Manifest(format!("reference pose deviates from identity by {dev:e}")));
            }
            pose = Pose::identity();
        }
        let [fx, fy, cx, cy] = e.intrinsics_rgb;
        let k = Intrinsics::new(fx, fy, cx, cy).map_err(|err| BundleIoError::Manifest(format!("frame {i}: {err}")))?;
        frames.push(Frame::new(image, depth, pose, k, e.timestamp_ns));
    }
    let mut bundle = Bundle::new(frames)?;
    if let Some(gt) = &m.ground_truth {
        bundle = bundle.with_ground_truth(read_frame_blob(dir, gt, (m.h, m.w, 1))?)?;
    }
    if let Some(p) = m.provenance {
        bundle = bundle.with_provenance(p);
    }
    Ok(bundle)
}

fn read_frame_blob(dir: &Path, name: &str, dims: (usize, usize, usize)) -> Result<ImageGrid, BundleIoError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(BundleIoError::DimensionMismatch(format!("manifest references missing blob {}", path.display())));
    }
    let g = read_blob(&path)?;
    if (g.height(), g.width(), g.channels()) != dims {
        return Err(BundleIoError::DimensionMismatch(format!(
            "{} is {}x{}x{}, manifest expects {}x{}x{}",
            path.display(),
            g.height(),
            g.width(),
            g.channels(),
            dims.0,
            dims.1,
            dims.2
        )));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn bundle() -> Bundle {
        let k = Intrinsics::new(50.0, 51.0, 15.5, 11.5).unwrap();
        let frames = (0..3)
            .map(|i| {
                let img = ImageGrid::from_fn(24, 32, 3, |r, c, ch| (r * 31 + c * 7 + ch) as f32 * 1e-3 + 0.1).unwrap();
                let depth = ImageGrid::from_fn(6, 8, 1, |r, c, _| 0.3 + (r + c) as f32 * 1.234e-3).unwrap();
                let pose = if i == 0 {
                    Pose::identity()
                } else {
                    Pose::from_axis_angle(Vector3::new(1e-3, -2e-3, 3e-4) * i as f64, Vector3::new(1e-3, 2e-4, -3e-4) * i as f64)
                };
                Frame::new(img, depth, pose, k, 16_666_667 * i as u64)
            })
            .collect();
        Bundle::new(frames).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle()
            .with_ground_truth(ImageGrid::filled(24, 32, 1, 0.3125))
            .unwrap()
            .with_provenance(Provenance {
                scene: "test".into(),
                seed: 4,
                tremor: None,
                lidar: None,
                note: String::new(),
            });
        write_bundle(&b, dir.path()).unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn missing_blob_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&bundle(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("rgb_0002.bin")).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(BundleIoError::DimensionMismatch(_))));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&bundle(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("schema_version = 1", "schema_version = 2");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(BundleIoError::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn truncated_and_bad_magic_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_blob(&p, &ImageGrid::filled(4, 5, 1, 1.5)).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16 + 80);
        fs::write(&p, &bytes[..50]).unwrap();
        assert!(matches!(read_blob(&p), Err(BundleIoError::Truncated { expected: 96, found: 50, .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_blob(&p), Err(BundleIoError::BadMagic { .. })));
        let mut long = bytes;
        long.push(0);
        fs::write(&p, &long).unwrap();
        assert!(matches!(read_blob(&p), Err(BundleIoError::DimensionMismatch(_))));
    }

    #[test]
    fn wrong_blob_shape_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&bundle(), dir.path()).unwrap();
        write_blob(&dir.path().join("depth_0001.bin"), &ImageGrid::filled(5, 8, 1, 0.3)).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(BundleIoError::DimensionMismatch(_))));
    }

    #[test]
    fn blob_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_blob(&p, &ImageGrid::filled(2, 3, 3, 0.5)).unwrap();
        let b = fs::read(&p).unwrap();
        assert_eq!(&b[..4], b"MBDB");
        assert_eq!(&b[4..16], &[2, 0, 0, 0, 3, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[16..20], &0.5f32.to_le_bytes());
    }
}
