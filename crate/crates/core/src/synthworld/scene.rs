use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{BUILDING, EMPTY, NUM_CLASSES, PEDESTRIAN, POLE, SURFACE, VEGETATION, VEHICLE};
use crate::error::{bail, Result};
use crate::geometry::{GridSpec, SceneBounds};
use crate::math;

pub const CLASS_NAMES: [&str; NUM_CLASSES + 1] = ["empty", "surface", "building", "pole", "vehicle", "pedestrian", "vegetation"];

/// Dense semantic label grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelScene {
    pub grid: GridSpec,
    pub labels: Vec<u8>,
}

impl VoxelScene {
    pub fn empty(grid: GridSpec) -> Self {
        Self {
            grid,
            labels: vec![EMPTY; grid.len()],
        }
    }

    pub fn label(&self, ijk: [usize; 3]) -> u8 {
        self.labels[self.grid.index(ijk)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub grid: GridSpec,
    pub classes: usize,
    pub buildings: usize,
    pub poles: usize,
    pub vehicles: usize,
    pub pedestrians: usize,
    pub vegetation: usize,
    /// Half-width in meters of the square around the ego kept free of objects.
    pub ego_clearance: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let bounds = SceneBounds::new([-10.0, -10.0, -1.5], [10.0, 10.0, 2.5]).expect("static bounds");
        Self {
            grid: GridSpec::with_voxel_size(bounds, 0.5).expect("static grid"),
            classes: NUM_CLASSES,
            buildings: 2,
            poles: 6,
            vehicles: 4,
            pedestrians: 6,
            vegetation: 30,
            ego_clearance: 2.0,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.classes != NUM_CLASSES {
            bail!(Config, "the scene generator emits {} classes, spec asks for {}", NUM_CLASSES, self.classes);
        }
        let [nx, ny, nz] = self.grid.dims;
        if nx < 8 || ny < 8 || nz < 5 {
            bail!(Config, "grid {:?} too small for scene generation (needs 8 x 8 x 5)", self.grid.dims);
        }
        if !(self.ego_clearance >= 0.0) {
            bail!(Config, "ego clearance must be non-negative");
        }
        Ok(())
    }

    fn halved(&self) -> Self {
        Self {
            buildings: self.buildings / 2,
            poles: self.poles / 2,
            vehicles: self.vehicles / 2,
            pedestrians: self.pedestrians / 2,
            vegetation: self.vegetation / 2,
            ..self.clone()
        }
    }
}

const ATTEMPTS: usize = 40;

struct Builder<'a> {
    spec: &'a SceneSpec,
    scene: VoxelScene,
}

impl Builder<'_> {
    fn free(&self, i: isize, j: isize, k: isize) -> bool {
        let [nx, ny, nz] = self.spec.grid.dims;
        if i < 0 || j < 0 || k < 1 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            return false;
        }
        let idx = self.spec.grid.index([i as usize, j as usize, k as usize]);
        let c = self.spec.grid.center(idx);
        let r = self.spec.ego_clearance;
        if math::abs(c[0]) < r && math::abs(c[1]) < r {
            return false;
        }
        self.scene.labels[idx] == EMPTY
    }

    /// Writes `class` into every cell if all are free; false otherwise.
    fn place(&mut self, cells: &[[isize; 3]], class: u8) -> bool {
        if cells.is_empty() || !cells.iter().all(|&[i, j, k]| self.free(i, j, k)) {
            return false;
        }
        for &[i, j, k] in cells {
            let idx = self.spec.grid.index([i as usize, j as usize, k as usize]);
            self.scene.labels[idx] = class;
        }
        true
    }

    fn boxed(i0: isize, j0: isize, k0: isize, size: [isize; 3]) -> Vec<[isize; 3]> {
        let mut v = Vec::new();
        for i in i0..i0 + size[0] {
            for j in j0..j0 + size[1] {
                for k in k0..k0 + size[2] {
                    v.push([i, j, k]);
                }
            }
        }
        v
    }

    fn try_place<R: Rng>(&mut self, rng: &mut R, class: u8, mut shape: impl FnMut(&mut R) -> Vec<[isize; 3]>) -> bool {
        (0..ATTEMPTS).any(|_| {
            let cells = shape(rng);
            self.place(&cells, class)
        })
    }
}

fn attempt<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Option<VoxelScene> {
    let grid = spec.grid;
    let [nx, ny, nz] = grid.dims.map(|n| n as isize);
    let mut b = Builder {
        spec,
        scene: VoxelScene::empty(grid),
    };
    for i in 0..nx as usize {
        for j in 0..ny as usize {
            b.scene.labels[grid.index([i, j, 0])] = SURFACE;
        }
    }
    let top = nz - 1;
    for _ in 0..spec.buildings {
        let ok = b.try_place(rng, BUILDING, |r| {
            let size = [r.gen_range(2..=4), r.gen_range(2..=4), r.gen_range(3..=top)];
            Builder::boxed(r.gen_range(0..nx - size[0] + 1), r.gen_range(0..ny - size[1] + 1), 1, size)
        });
        if !ok {
            return None;
        }
    }
    for _ in 0..spec.poles {
        let ok = b.try_place(rng, POLE, |r| {
            let cx = r.gen_range(1.0..(nx - 1) as f64);
            let cy = r.gen_range(1.0..(ny - 1) as f64);
            let radius = r.gen_range(0.4..0.9);
            let height = r.gen_range(4..=top);
            let mut cells = Vec::new();
            for i in (cx - radius) as isize..=(cx + radius) as isize {
                for j in (cy - radius) as isize..=(cy + radius) as isize {
                    let (dx, dy) = (i as f64 + 0.5 - cx, j as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= radius * radius {
                        cells.extend((1..=height).map(|k| [i, j, k]));
                    }
                }
            }
            if cells.is_empty() {
                cells.extend((1..=height).map(|k| [cx as isize, cy as isize, k]));
            }
            cells
        });
        if !ok {
            return None;
        }
    }
    for _ in 0..spec.vehicles {
        let ok = b.try_place(rng, VEHICLE, |r| {
            let long = r.gen_range(3..=4);
            let size = if r.gen_bool(0.5) { [long, 2, 2] } else { [2, long, 2] };
            Builder::boxed(r.gen_range(0..nx - size[0] + 1), r.gen_range(0..ny - size[1] + 1), 1, size)
        });
        if !ok {
            return None;
        }
    }
    for _ in 0..spec.pedestrians {
        let ok = b.try_place(rng, PEDESTRIAN, |r| {
            Builder::boxed(r.gen_range(0..nx), r.gen_range(0..ny), 1, [1, 1, r.gen_range(3..=4)])
        });
        if !ok {
            return None;
        }
    }
    for _ in 0..spec.vegetation {
        let ok = b.try_place(rng, VEGETATION, |r| {
            let (i, j) = (r.gen_range(0..nx), r.gen_range(0..ny));
            let h = r.gen_range(1..=2);
            (1..=h).map(|k| [i, j, k]).collect()
        });
        if !ok {
            return None;
        }
    }
    Some(b.scene)
}

/// Deterministic scene for `seed`. When objects do not fit the counts are
/// halved (up to three times) before giving up.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<VoxelScene> {
    spec.validate()?;
    let mut rng = crate::seeded_rng(seed);
    let mut current = spec.clone();
    for _ in 0..4 {
        if let Some(scene) = attempt(&current, &mut rng) {
            return Ok(scene);
        }
        current = current.halved();
    }
    bail!(Data, "objects do not fit into the grid for seed {}", seed)
}

/// Voxel count per class id.
pub fn class_histogram(labels: &[u8], classes: usize) -> Vec<u64> {
    let mut h = vec![0u64; classes + 1];
    for &l in labels {
        h[usize::from(l)] += 1;
    }
    h
}
