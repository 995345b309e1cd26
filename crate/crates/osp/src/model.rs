//! Point and volume-baseline models with their checkpoint representation.

use std::path::Path;

use osp_core::decoder::{softmax_rows, Decoder, EarlyExit};
use osp_core::diffcore::{AdamState, Bound, Graph, ParamStore, Tensor};
use osp_core::geometry::GridSpec;
use osp_core::math::Vec3;
use osp_core::refine::{VolumeBaseline, VolumePrediction};
use osp_core::seeded_rng;
use osp_core::synthworld::{conv_stem, FeaturePyramid, Stem};

use crate::config::{BaselineSpec, ModelSpec};
use crate::container::{Container, NamedTensor, TensorData};
use crate::dataset::SceneData;
use crate::error::{OspError, Result};

pub const STEM_PREFIX: &str = "stem";

pub fn is_stem_param(name: &str) -> bool {
    name.starts_with("stem.")
}

fn text_tensor(name: &str, text: &str) -> Result<NamedTensor> {
    NamedTensor::new(name, &[text.len()], TensorData::U8(text.as_bytes().to_vec()))
}

fn read_text_tensor(c: &Container, name: &str) -> Result<String> {
    let t = c.require(name)?;
    let TensorData::U8(bytes) = &t.data else {
        return Err(OspError::Data(format!("{name} must be u8 text")));
    };
    String::from_utf8(bytes.clone()).map_err(|_| OspError::Data(format!("{name} is not UTF-8")))
}

/// Writes every parameter as `param.<name>` and, when given, the optimizer
/// moments as `adam.m.<name>` / `adam.v.<name>` plus `adam.step`.
fn push_params(c: &mut Container, store: &ParamStore, adam: Option<&AdamState>) -> Result<()> {
    for (_, name, t) in store.iter() {
        c.push(NamedTensor::from_tensor(&format!("param.{name}"), t)?)?;
    }
    if let Some(a) = adam {
        for (i, (_, name, _)) in store.iter().enumerate() {
            c.push(NamedTensor::from_tensor(&format!("adam.m.{name}"), &a.m[i])?)?;
            c.push(NamedTensor::from_tensor(&format!("adam.v.{name}"), &a.v[i])?)?;
        }
        c.push(NamedTensor::new("adam.step", &[], TensorData::F64(vec![a.step as f64]))?)?;
    }
    Ok(())
}

/// Fills a freshly initialized store from `param.*` entries; every
/// parameter must be present with matching dims.
fn load_params(c: &Container, store: &mut ParamStore) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in &names {
        let t = c.require(&format!("param.{name}"))?.to_tensor()?;
        store.set(name, t)?;
    }
    let stored = c.tensors.iter().filter(|t| t.name.starts_with("param.")).count();
    if stored != names.len() {
        return Err(OspError::Data(format!("checkpoint holds {stored} parameters, model expects {}", names.len())));
    }
    Ok(())
}

fn load_adam(c: &Container, store: &ParamStore) -> Result<Option<AdamState>> {
    let Some(step) = c.get("adam.step") else {
        return Ok(None);
    };
    let mut a = AdamState::new(store);
    for (i, (_, name, _)) in store.iter().enumerate() {
        a.m[i] = c.require(&format!("adam.m.{name}"))?.to_tensor()?;
        a.v[i] = c.require(&format!("adam.v.{name}"))?.to_tensor()?;
    }
    a.step = step.to_tensor()?.data()[0] as u64;
    Ok(Some(a))
}

/// Image constants of a scene bound into `g`.
pub fn scene_images(g: &mut Graph, scene: &SceneData) -> Vec<osp_core::diffcore::Var> {
    scene.renders.iter().map(|r| g.constant(r.clone())).collect()
}

#[derive(Clone, Debug)]
pub struct PointModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub stem: Stem,
    pub decoder: Decoder,
}

impl PointModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let stem = Stem::init(&mut store, STEM_PREFIX, spec.stem(), &mut rng)?;
        let decoder = Decoder::init(&mut store, spec.decoder(), &mut rng)?;
        Ok(Self { spec, store, stem, decoder })
    }

    pub fn pyramid(&self, g: &mut Graph, b: &Bound, scene: &SceneData) -> Result<FeaturePyramid> {
        let images = scene_images(g, scene);
        Ok(conv_stem(g, b, &self.stem, &images)?)
    }

    /// Logits at the centers of `voxels`, full mode when `threshold` is `None`.
    pub fn predict(&self, scene: &SceneData, voxels: &[usize], threshold: Option<f64>, chunk: usize) -> Result<EarlyExit> {
        let points: Vec<Vec3> = voxels.iter().map(|&i| scene.grid.center(i)).collect();
        self.predict_points(scene, &points, threshold, chunk)
    }

    pub fn predict_points(&self, scene: &SceneData, points: &[Vec3], threshold: Option<f64>, chunk: usize) -> Result<EarlyExit> {
        if points.is_empty() {
            return Ok(EarlyExit {
                logits: Tensor::zeros(&[0, self.spec.classes]),
                exit_layer: Vec::new(),
                active: vec![0; self.spec.layers],
            });
        }
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, |_| false);
        let pyr = self.pyramid(&mut g, &b, scene)?;
        let prep = self.decoder.prepare(&mut g, &b, &pyr)?;
        Ok(self.decoder.infer(&mut g, &b, &prep, points, &scene.grid.bounds, &scene.rig, threshold, chunk)?)
    }

    pub fn to_container(&self, adam: Option<&AdamState>) -> Result<Container> {
        let mut c = Container::new();
        c.push(text_tensor("model.point", &toml::to_string(&self.spec).expect("spec serializes"))?)?;
        push_params(&mut c, &self.store, adam)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<(Self, Option<AdamState>)> {
        let text = read_text_tensor(c, "model.point")?;
        let spec: ModelSpec = toml::from_str(&text).map_err(|e| OspError::Data(format!("model spec: {e}")))?;
        let mut m = Self::new(spec, 0)?;
        load_params(c, &mut m.store)?;
        let adam = load_adam(c, &m.store)?;
        Ok((m, adam))
    }

    pub fn save(&self, path: &Path, adam: Option<&AdamState>) -> Result<()> {
        self.to_container(adam)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_container(&Container::load(path)?)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub spec: BaselineSpec,
    /// Stem parameters copied from the point model plus `volume.*`.
    pub store: ParamStore,
    pub stem: Stem,
    pub base: VolumeBaseline,
}

impl BaselineModel {
    /// A fresh baseline over a copy of `point`'s stem.
    pub fn new(point: &PointModel, hidden: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        for (_, name, t) in point.store.iter() {
            if is_stem_param(name) {
                store.add(name, t.clone())?;
            }
        }
        let stem = Stem::attach(&store, STEM_PREFIX, point.spec.stem())?;
        let base = VolumeBaseline::init(&mut store, point.spec.d, hidden, point.spec.classes, &mut seeded_rng(seed))?;
        let spec = BaselineSpec {
            classes: point.spec.classes,
            d: point.spec.d,
            hidden,
            stem: point.spec.clone(),
        };
        Ok(Self { spec, store, stem, base })
    }

    /// Level-0 stem features of every view, computed once since the stem is frozen.
    pub fn level0(&self, scene: &SceneData) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, |_| false);
        let images = scene_images(&mut g, scene);
        let pyr = conv_stem(&mut g, &b, &self.stem, &images)?;
        Ok(pyr.maps.iter().map(|v| g.value(v[0]).clone()).collect())
    }

    /// Class distributions of every voxel of the scene grid.
    pub fn predict_volume(&self, scene: &SceneData, level0: &[Tensor]) -> Result<VolumePrediction> {
        let grid: &GridSpec = &scene.grid;
        let points: Vec<Vec3> = (0..grid.len()).map(|i| grid.center(i)).collect();
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, |_| false);
        let pyr = FeaturePyramid {
            maps: level0.iter().map(|m| vec![g.constant(m.clone())]).collect(),
        };
        let logits = self.base.forward(&mut g, &b, &pyr, &points, &grid.bounds, &scene.rig)?;
        Ok(VolumePrediction::new(softmax_rows(g.value(logits)))?)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push(text_tensor("model.baseline", &toml::to_string(&self.spec).expect("spec serializes"))?)?;
        push_params(&mut c, &self.store, None)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let text = read_text_tensor(c, "model.baseline")?;
        let spec: BaselineSpec = toml::from_str(&text).map_err(|e| OspError::Data(format!("baseline spec: {e}")))?;
        let shell = PointModel::new(spec.stem.clone(), 0)?;
        let mut m = Self::new(&shell, spec.hidden, 0)?;
        load_params(c, &mut m.store)?;
        m.spec = spec;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
