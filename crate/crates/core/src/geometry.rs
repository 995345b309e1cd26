//! Pinhole cameras, ego-frame voxel grids and ray casting.
//!
//! Conventions: the ego frame is x forward, y left, z up (meters). Camera
//! extrinsics map ego to camera coordinates (`p_cam = R p_ego + t`), the
//! camera looks along +z with x right and y down. Pixel `(u, v)` covers
//! `[u, u+1) x [v, v+1)`. Voxels are stored x-major with z fastest.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::{bail, Error, Result};
use crate::math::{self, Mat3, Vec3};

/// Axis-aligned box of the ego frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl SceneBounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    /// The Occ3D-nuScenes range: 80 m x 80 m x 6.4 m.
    pub fn occ3d() -> Self {
        Self {
            min: [-40.0, -40.0, -1.0],
            max: [40.0, 40.0, 5.4],
        }
    }

    fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.max[a] > self.min[a]) || !self.min[a].is_finite() || !self.max[a].is_finite() {
                bail!(Config, "degenerate bounds on axis {}: [{}, {}]", a, self.min[a], self.max[a]);
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        math::sub(self.max, self.min)
    }

    pub fn center(&self) -> Vec3 {
        math::scale(math::add(self.min, self.max), 0.5)
    }

    /// Closed-box membership.
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// True when `inner` lies inside `self` (faces may touch).
    pub fn contains_box(&self, inner: &SceneBounds) -> bool {
        (0..3).all(|a| inner.min[a] >= self.min[a] && inner.max[a] <= self.max[a])
    }

    /// The box scaled by `fraction` about its center in x and y, full height.
    pub fn shrink_xy(&self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            bail!(Config, "shrink fraction must be in (0, 1], got {}", fraction);
        }
        let c = self.center();
        let e = self.extent();
        let mut min = self.min;
        let mut max = self.max;
        for a in 0..2 {
            min[a] = c[a] - 0.5 * e[a] * fraction;
            max[a] = c[a] + 0.5 * e[a] * fraction;
        }
        Self::new(min, max)
    }
}

/// Regular voxel grid over a [`SceneBounds`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub bounds: SceneBounds,
    pub dims: [usize; 3],
    pub voxel: Vec3,
}

impl GridSpec {
    pub fn new(bounds: SceneBounds, dims: [usize; 3]) -> Result<Self> {
        bounds.validate()?;
        if dims.iter().any(|&n| n == 0) {
            bail!(Config, "grid dims must be positive, got {:?}", dims);
        }
        let e = bounds.extent();
        let voxel = [e[0] / dims[0] as f64, e[1] / dims[1] as f64, e[2] / dims[2] as f64];
        Ok(Self { bounds, dims, voxel })
    }

    /// Grid with cubic voxels of side `size`; every extent must be a whole
    /// number of voxels.
    pub fn with_voxel_size(bounds: SceneBounds, size: f64) -> Result<Self> {
        bounds.validate()?;
        if !(size > 0.0) {
            bail!(Config, "voxel size must be positive, got {}", size);
        }
        let e = bounds.extent();
        let mut dims = [0; 3];
        for a in 0..3 {
            let n = math::round(e[a] / size);
            if n < 1.0 || math::abs(e[a] - n * size) > 1e-9 {
                bail!(Config, "extent {} on axis {} is not a multiple of voxel size {}", e[a], a, size);
            }
            dims[a] = n as usize;
        }
        Ok(Self {
            bounds,
            dims,
            voxel: [size; 3],
        })
    }

    /// The Occ3D grid: 200 x 200 x 16 voxels of 0.4 m.
    pub fn occ3d() -> Self {
        Self::with_voxel_size(SceneBounds::occ3d(), 0.4).expect("static grid")
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, ijk: [usize; 3]) -> usize {
        (ijk[0] * self.dims[1] + ijk[1]) * self.dims[2] + ijk[2]
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let k = index % self.dims[2];
        let j = (index / self.dims[2]) % self.dims[1];
        let i = index / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    #[inline]
    pub fn center(&self, index: usize) -> Vec3 {
        let c = self.coords(index);
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = self.bounds.min[a] + (c[a] as f64 + 0.5) * self.voxel[a];
        }
        p
    }

    /// Voxel containing `p` (half-open cells, the upper face belongs to the
    /// last cell); `None` outside the grid.
    pub fn voxel_at(&self, p: Vec3) -> Option<usize> {
        let mut ijk = [0; 3];
        for a in 0..3 {
            if !(p[a] >= self.bounds.min[a] && p[a] <= self.bounds.max[a]) {
                return None;
            }
            let f = math::floor((p[a] - self.bounds.min[a]) / self.voxel[a]);
            ijk[a] = (f as usize).min(self.dims[a] - 1);
        }
        Some(self.index(ijk))
    }
}

/// Per-axis affine map of ego points into the unit cube of `bounds`.
/// Points outside the bounds map outside `[0, 1]`.
pub fn normalize_points(points: &[Vec3], bounds: &SceneBounds) -> Result<Vec<Vec3>> {
    bounds.validate()?;
    let e = bounds.extent();
    Ok(points
        .iter()
        .map(|p| {
            [
                (p[0] - bounds.min[0]) / e[0],
                (p[1] - bounds.min[1]) / e[1],
                (p[2] - bounds.min[2]) / e[2],
            ]
        })
        .collect())
}

/// Pinhole camera with ego-to-camera extrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub uv: [f64; 2],
    pub depth: f64,
    pub hit: bool,
}

const MIN_DEPTH: f64 = 1e-6;

impl Camera {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, width: usize, height: usize) -> Result<Self> {
        let cam = Self { k, r, t, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let rrt = math::mat_mul(&self.r, &math::transpose(&self.r));
        for (i, row) in rrt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if math::abs(v - target) > 1e-9 {
                    bail!(Config, "rotation is not orthonormal");
                }
            }
        }
        if math::abs(math::det(&self.r) - 1.0) > 1e-9 {
            bail!(Config, "rotation determinant is {}", math::det(&self.r));
        }
        let k = &self.k;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            bail!(Config, "focal lengths must be positive");
        }
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0 {
            bail!(Config, "intrinsics must be upper triangular with K[2][2] = 1");
        }
        if self.width == 0 || self.height == 0 {
            bail!(Config, "image extents must be positive");
        }
        if !(k[0][2] >= 0.0 && k[0][2] <= self.width as f64 && k[1][2] >= 0.0 && k[1][2] <= self.height as f64) {
            bail!(Config, "principal point outside the image");
        }
        Ok(())
    }

    /// Camera at `position` looking along heading `yaw` (radians about +z)
    /// and elevation `pitch`, with horizontal field of view `hfov` and square
    /// pixels, principal point at the image center.
    pub fn looking(position: Vec3, yaw: f64, pitch: f64, hfov: f64, width: usize, height: usize) -> Result<Self> {
        let (sy, cy) = (math::sin(yaw), math::cos(yaw));
        let (sp, cp) = (math::sin(pitch), math::cos(pitch));
        let forward = [cy * cp, sy * cp, sp];
        let right = [sy, -cy, 0.0];
        let down = [sp * cy, sp * sy, -cp];
        let r = [right, down, forward];
        let t = math::scale(math::mat_vec(&r, position), -1.0);
        let f = 0.5 * width as f64 / math::tan(0.5 * hfov);
        let k = [[f, 0.0, 0.5 * width as f64], [0.0, f, 0.5 * height as f64], [0.0, 0.0, 1.0]];
        Self::new(k, r, t, width, height)
    }

    /// Camera center in the ego frame.
    pub fn center(&self) -> Vec3 {
        math::scale(math::mat_vec(&math::transpose(&self.r), self.t), -1.0)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.r, p), self.t)
    }

    pub fn project(&self, p_ego: Vec3) -> Projection {
        let pc = self.to_camera(p_ego);
        let depth = pc[2];
        let k = &self.k;
        let (u, v) = if depth != 0.0 {
            (
                (k[0][0] * pc[0] + k[0][1] * pc[1]) / depth + k[0][2],
                k[1][1] * pc[1] / depth + k[1][2],
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        let hit = depth > MIN_DEPTH && u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        Projection { uv: [u, v], depth, hit }
    }

    /// Ego point at camera depth `depth` along pixel coordinate `uv`.
    pub fn unproject(&self, uv: [f64; 2], depth: f64) -> Vec3 {
        let dir = self.pixel_direction(uv);
        math::add(self.center(), math::scale(dir, depth))
    }

    /// Ego-frame ray direction through continuous pixel `uv`, scaled so its
    /// camera-frame z component is 1 (ray parameter equals depth).
    pub fn pixel_direction(&self, uv: [f64; 2]) -> Vec3 {
        let kinv = math::inverse(&self.k).expect("validated intrinsics are invertible");
        let dc = math::mat_vec(&kinv, [uv[0], uv[1], 1.0]);
        math::mat_vec(&math::transpose(&self.r), dc)
    }

    /// Row-major 3x4 matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> [[f64; 4]; 3] {
        let kr = math::mat_mul(&self.k, &self.r);
        let kt = math::mat_vec(&self.k, self.t);
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&kr[i]);
            m[i][3] = kt[i];
        }
        m
    }
}

pub fn project_point(p_ego: Vec3, cam: &Camera) -> Projection {
    cam.project(p_ego)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.is_empty() {
            bail!(Config, "camera rig is empty");
        }
        for c in &cameras {
            c.validate()?;
        }
        Ok(Self { cameras })
    }

    /// `count` cameras at `position` with headings evenly spread over the circle.
    pub fn surround(count: usize, position: Vec3, hfov: f64, width: usize, height: usize) -> Result<Self> {
        let cams = (0..count)
            .map(|i| {
                let yaw = 2.0 * core::f64::consts::PI * i as f64 / count as f64;
                Camera::looking(position, yaw, 0.0, hfov, width, height)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cams)
    }

    /// Four 100-degree cameras at the ego origin, 96 x 64 pixels.
    pub fn default_surround() -> Self {
        Self::surround(4, [0.0, 0.0, 0.0], 100f64.to_radians(), 96, 64).expect("static rig")
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Text description: a header line then one line per camera holding K
    /// (9 values, row-major), R (9), t (3), width and height.
    pub fn to_text(&self) -> String {
        let mut s = String::from("osp-rig 1\n");
        for c in &self.cameras {
            s.push_str("camera");
            for row in c.k.iter().chain(c.r.iter()) {
                for v in row {
                    let _ = write!(s, " {:?}", v);
                }
            }
            for v in c.t {
                let _ = write!(s, " {:?}", v);
            }
            let _ = writeln!(s, " {} {}", c.width, c.height);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some("osp-rig 1") => {}
            Some(other) => bail!(Data, "unsupported rig header {:?}", other),
            None => bail!(Data, "empty rig description"),
        }
        let mut cams = Vec::new();
        for line in lines {
            let mut it = line.split_whitespace();
            if it.next() != Some("camera") {
                bail!(Data, "expected camera line, got {:?}", line);
            }
            let fields: Vec<&str> = it.collect();
            if fields.len() != 23 {
                bail!(Data, "camera line has {} fields, expected 23", fields.len());
            }
            let num = |i: usize| -> Result<f64> {
                fields[i]
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad number {:?}", fields[i])))
            };
            let mut k = [[0.0; 3]; 3];
            let mut r = [[0.0; 3]; 3];
            let mut t = [0.0; 3];
            for i in 0..9 {
                k[i / 3][i % 3] = num(i)?;
                r[i / 3][i % 3] = num(9 + i)?;
            }
            for (i, ti) in t.iter_mut().enumerate() {
                *ti = num(18 + i)?;
            }
            let dim = |i: usize| -> Result<usize> {
                fields[i]
                    .parse::<usize>()
                    .map_err(|_| Error::Data(format!("bad image extent {:?}", fields[i])))
            };
            cams.push(Camera::new(k, r, t, dim(21)?, dim(22)?).map_err(|e| Error::Data(format!("{e}")))?);
        }
        Self::new(cams).map_err(|e| Error::Data(format!("{e}")))
    }
}

/// Indices of the cameras that see `p_ego`, ascending.
pub fn hit_views(p_ego: Vec3, rig: &CameraRig) -> Vec<usize> {
    rig.cameras
        .iter()
        .enumerate()
        .filter(|(_, c)| c.project(p_ego).hit)
        .map(|(i, _)| i)
        .collect()
}

/// Ray parameter interval `[t0, t1]` where `origin + t dir` is inside the box.
pub(crate) fn slab_interval(bounds: &SceneBounds, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < bounds.min[a] || origin[a] > bounds.max[a] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((bounds.min[a] - origin[a]) / dir[a], (bounds.max[a] - origin[a]) / dir[a]);
        if lo > hi {
            core::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Visits, in order, every voxel the ray `origin + t dir`, `t in [0, t_end]`
/// passes through (Amanatides & Woo stepping). `visit(index, t_enter)`
/// returns `false` to stop. When the ray crosses an edge or corner exactly,
/// the axes are stepped together so cells touched at a single point are
/// skipped.
pub fn traverse(grid: &GridSpec, origin: Vec3, dir: Vec3, t_end: f64, mut visit: impl FnMut(usize, f64) -> bool) {
    let Some((t0, t1)) = slab_interval(&grid.bounds, origin, dir) else {
        return;
    };
    let t_start = t0.max(0.0);
    let t_stop = t1.min(t_end);
    if t_start > t_stop {
        return;
    }
    let p = math::add(origin, math::scale(dir, t_start));
    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let rel = (p[a] - grid.bounds.min[a]) / grid.voxel[a];
        let mut i = math::floor(rel) as isize;
        if dir[a] < 0.0 && rel == math::floor(rel) {
            i -= 1;
        }
        idx[a] = i.clamp(0, grid.dims[a] as isize - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            let boundary = grid.bounds.min[a] + (idx[a] + 1) as f64 * grid.voxel[a];
            t_next[a] = t_start + (boundary - p[a]) / dir[a];
            t_delta[a] = grid.voxel[a] / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            let boundary = grid.bounds.min[a] + idx[a] as f64 * grid.voxel[a];
            t_next[a] = t_start + (boundary - p[a]) / dir[a];
            t_delta[a] = -grid.voxel[a] / dir[a];
        }
    }
    let mut t_enter = t_start;
    loop {
        let flat = grid.index([idx[0] as usize, idx[1] as usize, idx[2] as usize]);
        if !visit(flat, t_enter) {
            return;
        }
        let t_min = t_next[0].min(t_next[1]).min(t_next[2]);
        if !(t_min < t_stop) {
            return;
        }
        let tol = 1e-9 * t_min.abs().max(1.0);
        for a in 0..3 {
            if t_next[a] - t_min <= tol {
                idx[a] += step[a];
                t_next[a] += t_delta[a];
                if idx[a] < 0 || idx[a] >= grid.dims[a] as isize {
                    return;
                }
            }
        }
        t_enter = t_min;
    }
}

/// First occupied voxel along a ray and its entry parameter.
pub fn first_hit(grid: &GridSpec, labels: &[u8], origin: Vec3, dir: Vec3) -> Option<(usize, f64)> {
    let mut found = None;
    traverse(grid, origin, dir, f64::INFINITY, |i, t| {
        if labels[i] != 0 {
            found = Some((i, t));
            false
        } else {
            true
        }
    });
    found
}

/// Pixel-center ray directions of a camera, row by row.
pub fn pixel_rays(cam: &Camera) -> impl Iterator<Item = ([usize; 2], Vec3)> + '_ {
    let kinv = math::inverse(&cam.k).expect("validated intrinsics are invertible");
    let rt = math::transpose(&cam.r);
    (0..cam.height).flat_map(move |v| {
        (0..cam.width).map(move |u| {
            let dc = math::mat_vec(&kinv, [u as f64 + 0.5, v as f64 + 0.5, 1.0]);
            ([u, v], math::mat_vec(&rt, dc))
        })
    })
}

/// Camera-visibility mask of a labelled grid.
///
/// A voxel is visible when, for some camera, either the ray from the camera
/// center to the voxel center (voxel inside the frustum) reaches the voxel
/// without crossing an occupied voxel, or some pixel-center ray of that camera
/// passes through the voxel before or at its first occupied voxel.
pub fn visibility_mask(labels: &[u8], grid: &GridSpec, rig: &CameraRig) -> Result<Vec<bool>> {
    if labels.len() != grid.len() {
        return Err(Error::Shape {
            op: "visibility_mask",
            left: vec![labels.len()],
            right: grid.dims.to_vec(),
        });
    }
    let mut visible = vec![false; grid.len()];
    for cam in &rig.cameras {
        let origin = cam.center();
        for target in 0..grid.len() {
            if visible[target] {
                continue;
            }
            let c = grid.center(target);
            if !cam.project(c).hit {
                continue;
            }
            let mut reached = false;
            traverse(grid, origin, math::sub(c, origin), 1.0, |i, _| {
                if i == target {
                    reached = true;
                    return false;
                }
                labels[i] == 0
            });
            visible[target] |= reached;
        }
        for (_, dir) in pixel_rays(cam) {
            traverse(grid, origin, dir, f64::INFINITY, |i, _| {
                visible[i] = true;
                labels[i] == 0
            });
        }
    }
    Ok(visible)
}
