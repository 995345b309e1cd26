//! Procedural scenes, semantic renderings and the convolutional stem that
//! turns renderings into multi-level feature maps.

mod render;
mod scene;
mod stem;

pub use render::{render_view, render_views, NEAR_DEPTH};
pub use scene::{class_histogram, generate_scene, SceneSpec, VoxelScene, CLASS_NAMES};
pub use stem::{conv_stem, FeaturePyramid, Stem, StemConfig};

pub const EMPTY: u8 = 0;
pub const SURFACE: u8 = 1;
pub const BUILDING: u8 = 2;
pub const POLE: u8 = 3;
pub const VEHICLE: u8 = 4;
pub const PEDESTRIAN: u8 = 5;
pub const VEGETATION: u8 = 6;

/// Semantic classes produced by the generator, excluding empty.
pub const NUM_CLASSES: usize = 6;

#[cfg(test)]
mod tests;
