//! Point-cloud IO, normalization, FPS/KNN patchification and synthetic shapes.

mod cloud;
mod patches;
mod sampling;
mod synth;

pub use cloud::{
    decode_pclb, encode_pclb, encode_xyz, load_pointcloud, normalize_cloud, parse_xyz,
    save_pointcloud, Point, PointCloud, PointFormat, PCLB_MAGIC, PCLB_VERSION,
};
pub use patches::{make_patches, resample, PatchConfig, PointPatchSet};
pub use sampling::{fps, knn_group, StartRule};
pub use synth::{synth_generate, CategorySpec, SyntheticSpec};
