//! Bundle persistence and the synthetic capture generator.

mod format;
mod synth;

pub use format::{
    read_blob, read_bundle, read_manifest, write_blob, write_bundle, BundleIoError, BundleManifest, FrameEntry, Provenance, BLOB_HEADER_LEN,
    BLOB_MAGIC, MANIFEST_FILE, SCHEMA_VERSION,
};
pub use synth::{
    max_in_plane_displacement, render_frame, render_synthetic_bundle, simulate_lidar, simulate_tremor, timestamps, BoxSpec, LidarModel,
    PlaneSpec, RenderParams, SceneKind, SceneSpec, SphereSpec, SyntheticBundle, TextureKind, TextureSpec, TremorParams,
};
