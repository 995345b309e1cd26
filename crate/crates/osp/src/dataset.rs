//! On-disk synthetic datasets.
//!
//! ```text
//! DIR/dataset.toml
//! DIR/scene_0000/{labels.ospt, visible.ospt, render_cam0.ospt .., rig.txt, manifest.toml}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use osp_core::diffcore::Tensor;
use osp_core::geometry::{visibility_mask, CameraRig, GridSpec, SceneBounds};
use osp_core::synthworld::{class_histogram, generate_scene, render_views, SceneSpec, CLASS_NAMES};
use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedTensor, TensorData};
use crate::error::{usage, OspError, Result};

pub const DATASET_FILE: &str = "dataset.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub voxel: f64,
    pub dims: [usize; 3],
}

impl GridRecord {
    pub fn from_grid(g: &GridSpec) -> Self {
        Self {
            min: g.bounds.min,
            max: g.bounds.max,
            voxel: g.voxel[0],
            dims: g.dims,
        }
    }

    pub fn to_grid(&self) -> Result<GridSpec> {
        let g = GridSpec::with_voxel_size(SceneBounds::new(self.min, self.max)?, self.voxel)?;
        if g.dims != self.dims {
            return Err(OspError::Data(format!("grid dims {:?} disagree with extent and voxel {}", self.dims, self.voxel)));
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub buildings: usize,
    pub poles: usize,
    pub vehicles: usize,
    pub pedestrians: usize,
    pub vegetation: usize,
    pub ego_clearance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub scenes: usize,
    pub seed: u64,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub grid: GridRecord,
    pub objects: ObjectCounts,
    pub cameras: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub index: usize,
    pub seed: u64,
    pub histogram: Vec<u64>,
    pub visible: usize,
    pub cameras: usize,
}

/// Seed of scene `index` in a dataset generated with `seed`; 63 bits so
/// manifests stay within TOML's signed integers.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer keeps nearby dataset seeds from sharing scenes
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

/// Scene spec with the default object counts on a grid of the given voxel size.
pub fn scene_spec(voxel: f64) -> Result<SceneSpec> {
    let base = SceneSpec::default();
    let grid = GridSpec::with_voxel_size(base.grid.bounds, voxel)?;
    Ok(SceneSpec { grid, ..base })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| OspError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| OspError::io(path, e))
}

fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("manifest types serialize")
}

fn grid_tensor(grid: &GridSpec) -> Result<NamedTensor> {
    let b = &grid.bounds;
    let v = vec![b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2], grid.voxel[0]];
    NamedTensor::new("grid", &[7], TensorData::F64(v))
}

/// Grid stored alongside a label volume.
pub fn read_grid_tensor(c: &Container) -> Result<GridSpec> {
    let t = c.require("grid")?.to_tensor()?;
    let v = t.data();
    if v.len() != 7 {
        return Err(OspError::Data("grid tensor must hold 7 values".into()));
    }
    Ok(GridSpec::with_voxel_size(SceneBounds::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])?, v[6])?)
}

/// A label volume with its grid, as stored in `labels.ospt` and refined outputs.
pub fn label_container(grid: &GridSpec, labels: &[u8]) -> Result<Container> {
    let mut c = Container::new();
    c.push(NamedTensor::new("labels", &grid.dims, TensorData::U8(labels.to_vec()))?)?;
    c.push(grid_tensor(grid)?)?;
    Ok(c)
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let entries: Vec<_> = fs::read_dir(out).map_err(|e| OspError::io(out, e))?.collect::<std::io::Result<_>>().map_err(|e| OspError::io(out, e))?;
        if !entries.is_empty() {
            if !force {
                usage!("{} exists and is not empty (use --force to overwrite)", out.display());
            }
            for e in entries {
                let name = e.file_name();
                let name = name.to_string_lossy();
                if name.starts_with("scene_") && e.path().is_dir() {
                    fs::remove_dir_all(e.path()).map_err(|err| OspError::io(e.path(), err))?;
                } else if name.starts_with(DATASET_FILE) {
                    fs::remove_file(e.path()).map_err(|err| OspError::io(e.path(), err))?;
                }
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| OspError::io(out, e))
}

/// Generates `scenes` scenes with renderings and visibility into `out`.
pub fn generate(out: &Path, scenes: usize, seed: u64, voxel: f64, force: bool) -> Result<DatasetManifest> {
    if scenes == 0 {
        usage!("--scenes must be at least 1");
    }
    let spec = scene_spec(voxel)?;
    let rig = CameraRig::default_surround();
    prepare_out_dir(out, force)?;
    let classes = spec.classes;
    for i in 0..scenes {
        let dir = scene_dir(out, i);
        fs::create_dir_all(&dir).map_err(|e| OspError::io(&dir, e))?;
        let s = scene_seed(seed, i);
        let scene = generate_scene(s, &spec)?;
        let visible = visibility_mask(&scene.labels, &scene.grid, &rig)?;
        label_container(&scene.grid, &scene.labels)?.save(&dir.join("labels.ospt"))?;
        let mut vis = Container::new();
        vis.push(NamedTensor::new("visible", &scene.grid.dims, TensorData::U8(visible.iter().map(|&v| u8::from(v)).collect()))?)?;
        vis.save(&dir.join("visible.ospt"))?;
        for (v, img) in render_views(&scene, &rig, classes).into_iter().enumerate() {
            let mut c = Container::new();
            // renderings are exactly representable in f32
            let data = img.data().iter().map(|&x| x as f32).collect();
            c.push(NamedTensor::new("image", img.dims(), TensorData::F32(data))?)?;
            c.save(&dir.join(format!("render_cam{v}.ospt")))?;
        }
        write_text(&dir.join("rig.txt"), &rig.to_text())?;
        let m = SceneManifest {
            index: i,
            seed: s,
            histogram: class_histogram(&scene.labels, classes),
            visible: visible.iter().filter(|&&v| v).count(),
            cameras: rig.len(),
        };
        write_text(&dir.join("manifest.toml"), &to_toml(&m))?;
    }
    let manifest = DatasetManifest {
        format: String::from("osp-dataset"),
        version: 1,
        scenes,
        seed,
        classes,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        grid: GridRecord::from_grid(&spec.grid),
        objects: ObjectCounts {
            buildings: spec.buildings,
            poles: spec.poles,
            vehicles: spec.vehicles,
            pedestrians: spec.pedestrians,
            vegetation: spec.vegetation,
            ego_clearance: spec.ego_clearance,
        },
        cameras: rig.len(),
    };
    write_text(&out.join(DATASET_FILE), &to_toml(&manifest))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct SceneData {
    pub index: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub labels: Vec<u8>,
    pub visible: Vec<bool>,
    /// Per camera `[H, W, classes + 2]`.
    pub renders: Vec<Tensor>,
    pub rig: CameraRig,
}

impl SceneData {
    pub fn visible_voxels(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.visible[i]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub scenes: Vec<SceneData>,
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(DATASET_FILE);
    if !path.is_file() {
        usage!("{} is not a dataset directory (no {})", root.display(), DATASET_FILE);
    }
    let m: DatasetManifest = toml::from_str(&read_text(&path)?).map_err(|e| OspError::Data(format!("{}: {e}", path.display())))?;
    if m.format != "osp-dataset" || m.version != 1 {
        return Err(OspError::Data(format!("{}: unsupported dataset format {} v{}", path.display(), m.format, m.version)));
    }
    Ok(m)
}

pub fn load_scene(root: &Path, index: usize, m: &DatasetManifest) -> Result<SceneData> {
    let dir = scene_dir(root, index);
    let grid = m.grid.to_grid()?;
    let sm: SceneManifest = toml::from_str(&read_text(&dir.join("manifest.toml"))?).map_err(|e| OspError::Data(format!("{}: {e}", dir.display())))?;
    let labels_c = Container::load(&dir.join("labels.ospt"))?;
    let lt = labels_c.require("labels")?;
    let TensorData::U8(labels) = &lt.data else {
        return Err(OspError::Data(format!("{}: labels must be u8", dir.display())));
    };
    if lt.dims != grid.dims || read_grid_tensor(&labels_c)? != grid {
        return Err(OspError::Data(format!("{}: label grid disagrees with dataset manifest", dir.display())));
    }
    if labels.iter().any(|&l| usize::from(l) > m.classes) {
        return Err(OspError::Data(format!("{}: label above class count {}", dir.display(), m.classes)));
    }
    let vc = Container::load(&dir.join("visible.ospt"))?;
    let vt = vc.require("visible")?;
    let TensorData::U8(vis) = &vt.data else {
        return Err(OspError::Data(format!("{}: visibility must be u8", dir.display())));
    };
    if vt.dims != grid.dims {
        return Err(OspError::Data(format!("{}: visibility dims {:?}", dir.display(), vt.dims)));
    }
    let rig = CameraRig::from_text(&read_text(&dir.join("rig.txt"))?)?;
    let renders = (0..rig.len())
        .map(|v| {
            let c = Container::load(&dir.join(format!("render_cam{v}.ospt")))?;
            let t = c.require("image")?.to_tensor()?;
            let cam = &rig.cameras[v];
            if t.dims() != [cam.height, cam.width, m.classes + 2] {
                return Err(OspError::Data(format!("{}: render {v} has dims {:?}", dir.display(), t.dims())));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneData {
        index,
        seed: sm.seed,
        grid,
        labels: labels.clone(),
        visible: vis.iter().map(|&v| v != 0).collect(),
        renders,
        rig,
    })
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = read_manifest(root)?;
        let scenes = (0..manifest.scenes).map(|i| load_scene(root, i, &manifest)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            scenes,
        })
    }

    /// Training and validation scenes: the last `val` scenes validate.
    pub fn split(&self, val: usize) -> Result<(Vec<&SceneData>, Vec<&SceneData>)> {
        if val == 0 || val >= self.scenes.len() {
            usage!("validation needs between 1 and {} scenes, got {}", self.scenes.len().saturating_sub(1), val);
        }
        let cut = self.scenes.len() - val;
        Ok((self.scenes[..cut].iter().collect(), self.scenes[cut..].iter().collect()))
    }

    pub fn grid(&self) -> Result<GridSpec> {
        self.manifest.grid.to_grid()
    }
}
