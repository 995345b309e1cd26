use alloc::vec::Vec;

use super::VoxelScene;
use crate::diffcore::Tensor;
use crate::geometry::{first_hit, pixel_rays, Camera, CameraRig};

/// Depth at which the inverse-depth channel saturates at 1.
pub const NEAR_DEPTH: f64 = 0.5;

/// `[H, W, M + 2]` rendering: one-hot class channels for classes `1..=M`,
/// `min(1, NEAR_DEPTH / depth)` of the first hit, and a no-hit channel.
/// Values are rounded to single precision.
pub fn render_view(scene: &VoxelScene, cam: &Camera, classes: usize) -> Tensor {
    let c = classes + 2;
    let mut img = Tensor::zeros(&[cam.height, cam.width, c]);
    let origin = cam.center();
    let data = img.data_mut();
    for ([u, v], dir) in pixel_rays(cam) {
        let px = &mut data[(v * cam.width + u) * c..][..c];
        match first_hit(&scene.grid, &scene.labels, origin, dir) {
            Some((idx, depth)) => {
                let label = usize::from(scene.labels[idx]);
                if (1..=classes).contains(&label) {
                    px[label - 1] = 1.0;
                }
                px[classes] = f64::from((NEAR_DEPTH / depth.max(1e-12)).min(1.0) as f32);
            }
            None => px[classes + 1] = 1.0,
        }
    }
    img
}

pub fn render_views(scene: &VoxelScene, rig: &CameraRig, classes: usize) -> Vec<Tensor> {
    rig.cameras.iter().map(|cam| render_view(scene, cam, classes)).collect()
}
