//! Synthetic data, dual-view input preparation and dataset files.

mod manifest;
mod raster;
mod scene;
mod views;

pub use manifest::{read_manifest, write_dataset, write_manifest, ManifestRecord};
pub use raster::{
    assemble_grid, bilinear_taps, read_image, read_mask, resize_bilinear, resize_nearest,
    split_grid, write_image, write_mask, Mask, Plane, Raster,
};
pub use scene::{
    describe, generate_sample, generate_set, rasterize_object, resolve_expression, Color, Position,
    Sample, SampleMeta, SceneObject, SceneSpec, Shape, SizeClass,
};
pub use views::{prepare_image_views, prepare_views, ViewBundle};
