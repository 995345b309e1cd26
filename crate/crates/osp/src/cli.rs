//! Command-line interface. Every command writes a run manifest next to its
//! primary output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use osp_core::gradcheck::{grad_check_suite, SuiteOptions};
use osp_core::refine::{FuseMode, RegionMode};

use crate::config::{BaselineConfig, TrainConfig, MAX_SEED};
use crate::container::{Container, NamedTensor, TensorData};
use crate::dataset::{generate, label_container, read_grid_tensor, Dataset, DATASET_FILE};
use crate::error::{usage, OspError, Result};
use crate::eval::{evaluate_point, Range};
use crate::experiment::{beyond, refine, refine_inputs};
use crate::manifest::{manifest_path, RunManifest};
use crate::model::{BaselineModel, PointModel};
use crate::report::{kv_path, Report};
use crate::train::{train_baseline, train_points, EpochLog};

fn parse_seed(s: &str) -> std::result::Result<u64, String> {
    let v: u64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > MAX_SEED {
        return Err(format!("seed must be at most {MAX_SEED}"));
    }
    Ok(v)
}

#[derive(Debug, Parser)]
#[command(name = "osp", version, about = "Point-query occupancy prediction on synthetic multi-camera scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a point model.
    Train(TrainArgs),
    /// Train the volume baseline on the frozen stem of a point model.
    TrainBaseline(TrainBaselineArgs),
    /// Evaluate a point model on validation scenes.
    Eval(EvalArgs),
    /// Evaluate inside, across and outside a centered training box.
    Beyond(BeyondArgs),
    /// Fuse point predictions into the volume baseline.
    Refine(RefineArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
    /// Export a label volume as a CSV point list.
    ExportCsv(ExportCsvArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, value_parser = parse_seed)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Voxel edge length in meters.
    #[arg(long, default_value_t = 0.5)]
    pub voxel: f64,
    /// Replace the scenes of an existing dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with any subset of the training settings; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_scenes: Option<usize>,
    /// Training points per scene and step.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub stem_lr_mult: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub stem_hidden: Option<usize>,
    #[arg(long)]
    pub ffn_hidden: Option<usize>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub perturb: Option<f64>,
    #[arg(long, conflicts_with = "perturb")]
    pub no_perturb: bool,
    #[arg(long)]
    pub no_dice: bool,
    /// Sum group-member features instead of averaging them.
    #[arg(long)]
    pub no_member_mean: bool,
    #[arg(long, value_parser = parse_seed)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_scenes: Option<usize>,
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Restrict supervision to this centered fraction of the scene.
    #[arg(long)]
    pub inner: Option<f64>,
    #[arg(long)]
    pub chunk: Option<usize>,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(epochs, batch_scenes, points, lr, stem_lr_mult, weight_decay, layers, levels, groups, heads, samples, d, stem_hidden, ffn_hidden, head_hidden, perturb, seed, val_scenes, val_every, chunk);
        if self.inner.is_some() {
            c.inner = self.inner;
        }
        if self.no_perturb {
            c.perturb = 0.0;
        }
        if self.no_dice {
            c.dice = false;
        }
        if self.no_member_mean {
            c.member_mean = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainBaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Point-model checkpoint whose stem is frozen and shared.
    #[arg(long)]
    pub stem: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub no_dice: bool,
    #[arg(long, value_parser = parse_seed)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_scenes: Option<usize>,
}

impl TrainBaselineArgs {
    pub fn resolve(&self) -> Result<BaselineConfig> {
        let mut c = match &self.config {
            Some(p) => BaselineConfig::load(p)?,
            None => BaselineConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(epochs, points, lr, weight_decay, hidden, seed, val_scenes);
        if self.no_dice {
            c.dice = false;
        }
        c.validate()?;
        Ok(c)
    }
}

/// `grid` or `early-exit:T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    Grid,
    EarlyExit(f64),
}

impl EvalMode {
    fn threshold(self) -> Option<f64> {
        match self {
            Self::Grid => None,
            Self::EarlyExit(t) => Some(t),
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    if s == "grid" {
        return Ok(EvalMode::Grid);
    }
    let t = s.strip_prefix("early-exit:").ok_or_else(|| String::from("expected `grid` or `early-exit:T`"))?;
    let t: f64 = t.parse().map_err(|e| format!("threshold: {e}"))?;
    if !(t.is_finite() && t > 0.0) {
        return Err(String::from("threshold must be positive"));
    }
    Ok(EvalMode::EarlyExit(t))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "grid", value_parser = parse_mode)]
    pub mode: EvalMode,
    /// Text report path; defaults to `<ckpt>.eval.txt`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Number of trailing scenes evaluated.
    #[arg(long, default_value_t = 16)]
    pub val_scenes: usize,
    #[arg(long, default_value_t = 1024)]
    pub chunk: usize,
}

#[derive(Debug, Args)]
pub struct BeyondArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    pub inner: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub val_scenes: usize,
    #[arg(long, default_value_t = 1024)]
    pub chunk: usize,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub points: PathBuf,
    /// Centered box side as a fraction of the scene extent; several
    /// comma-separated values give one row each.
    #[arg(long, value_delimiter = ',', required_unless_present_any = ["adaptive", "top_fraction"], conflicts_with_all = ["adaptive", "top_fraction"])]
    pub scale: Vec<f64>,
    /// Fuse where the baseline's max probability is below this threshold.
    #[arg(long, conflicts_with = "top_fraction")]
    pub adaptive: Option<f64>,
    /// Fuse at this fraction of least confident baseline voxels.
    #[arg(long)]
    pub top_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub lambda: Vec<f64>,
    /// Fuse log-probabilities instead of probabilities.
    #[arg(long)]
    pub logit: bool,
    /// Refined label volumes of the first configuration; defaults to
    /// `<baseline>.refined.ospt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub val_scenes: usize,
    #[arg(long, default_value_t = 1024)]
    pub chunk: usize,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0, value_parser = parse_seed)]
    pub seed: u64,
    /// Include an operation with a deliberately wrong gradient.
    #[arg(long)]
    pub corrupted_fixture: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportCsvArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Label tensor to export; containers with one labels tensor need none.
    #[arg(long)]
    pub tensor: Option<String>,
    /// Also list empty voxels.
    #[arg(long)]
    pub include_empty: bool,
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_manifest(primary: &Path, command: &str, seed: Option<u64>, config: String, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    RunManifest::new(command, seed, config, inputs, outputs)?.write(&manifest_path(primary))
}

fn finish_report(report: &Report, path: &Path) -> Result<()> {
    print!("{}", report.text());
    report.write(path)
}

fn classes(ds: &Dataset) -> usize {
    ds.manifest.classes + 1
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::TrainBaseline(a) => train_base(&a),
        Command::Eval(a) => eval(&a),
        Command::Beyond(a) => run_beyond(&a),
        Command::Refine(a) => run_refine(&a),
        Command::GradCheck(a) => grad_check(&a),
        Command::ExportCsv(a) => export_csv(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let m = generate(&a.out, a.scenes, a.seed, a.voxel, a.force)?;
    let d = m.grid.dims;
    println!("wrote {} scenes of {}x{}x{} voxels to {}", m.scenes, d[0], d[1], d[2], a.out.display());
    let config = format!("scenes = {}\nseed = {}\nvoxel = {}\n", a.scenes, a.seed, a.voxel);
    // the hash covers the generated files; the manifest lands next to
    // dataset.toml and is replaced by the next forced run
    let rm = RunManifest::new("gen-data", Some(a.seed), config, &[a.out.as_path()], &[a.out.as_path()])?;
    rm.write(&manifest_path(&a.out.join(DATASET_FILE)))
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let ds = Dataset::load(&a.data)?;
    let (tr, va) = ds.split(cfg.val_scenes)?;
    let log_path = suffixed(&a.out, ".log");
    let mut log = String::new();
    let out = train_points(&cfg, classes(&ds), &tr, &va, &mut |e: &EpochLog| {
        println!("{}", e.line());
    })?;
    for e in &out.log {
        // the log file leaves out wall time so reruns are byte-identical
        let val = e.val_miou.map_or_else(|| String::from("-"), |v| format!("{v:.6}"));
        let _ = writeln!(log, "epoch={} steps={} loss={:.6} train_miou={:.6} val_miou={}", e.epoch, e.steps, e.loss, e.train_miou, val);
    }
    if let (Some(ep), Some(ev)) = (out.best_epoch, &out.best_eval) {
        let _ = writeln!(log, "best_epoch={ep} best_val_miou={:.6}", ev.miou());
    }
    out.model.save(&a.out, Some(&out.adam))?;
    fs::write(&log_path, &log).map_err(|e| OspError::io(&log_path, e))?;
    write_manifest(&a.out, "train", Some(cfg.seed), cfg.to_toml(), &[a.data.as_path()], &[a.out.as_path(), log_path.as_path()])?;
    if let Some((epoch, step)) = out.diverged {
        return Err(OspError::Divergence { epoch, step });
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train_base(a: &TrainBaselineArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let ds = Dataset::load(&a.data)?;
    let point = PointModel::load(&a.stem)?;
    if point.spec.classes != classes(&ds) {
        return Err(OspError::Data(format!("checkpoint has {} classes, dataset {}", point.spec.classes, classes(&ds))));
    }
    let (tr, _) = ds.split(cfg.val_scenes)?;
    let out = train_baseline(&cfg, &point, &tr, &mut |e: &EpochLog| println!("{}", e.line()))?;
    if let Some((epoch, step)) = out.diverged {
        return Err(OspError::Divergence { epoch, step });
    }
    out.model.save(&a.out)?;
    write_manifest(&a.out, "train-baseline", Some(cfg.seed), cfg.to_toml(), &[a.data.as_path(), a.stem.as_path()], &[a.out.as_path()])?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn load_point(ckpt: &Path, ds: &Dataset) -> Result<PointModel> {
    let m = PointModel::load(ckpt)?;
    if m.spec.classes != classes(ds) {
        return Err(OspError::Data(format!("checkpoint has {} classes, dataset {}", m.spec.classes, classes(ds))));
    }
    Ok(m)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let model = load_point(&a.ckpt, &ds)?;
    let (_, va) = ds.split(a.val_scenes)?;
    let ev = evaluate_point(&model, &va, Range::All, a.mode.threshold(), a.chunk)?;
    let mut r = Report::new("point-model evaluation");
    r.push("mode", match a.mode {
        EvalMode::Grid => String::from("grid"),
        EvalMode::EarlyExit(t) => format!("early-exit:{t}"),
    });
    r.push("scenes", va.len());
    r.push("voxels", ev.scenes.iter().map(|s| s.voxels.len()).sum::<usize>());
    r.push_miou("val", &ev.report);
    r.push_f("relative_computation", ev.relative_computation);
    let path = a.report.clone().unwrap_or_else(|| suffixed(&a.ckpt, ".eval.txt"));
    finish_report(&r, &path)?;
    let config = format!("mode = \"{}\"\nval_scenes = {}\nchunk = {}\n", r.get("mode").unwrap_or("grid"), a.val_scenes, a.chunk);
    write_manifest(&path, "eval", None, config, &[a.data.as_path(), a.ckpt.as_path()], &[path.as_path(), kv_path(&path).as_path()])
}

fn run_beyond(a: &BeyondArgs) -> Result<()> {
    if !(a.inner > 0.0 && a.inner <= 1.0) {
        usage!("--inner must be in (0, 1], got {}", a.inner);
    }
    let ds = Dataset::load(&a.data)?;
    let model = load_point(&a.ckpt, &ds)?;
    let (tr, va) = ds.split(a.val_scenes)?;
    let out = beyond(&model, &tr, &va, a.inner, a.chunk)?;
    let path = a.report.clone().unwrap_or_else(|| suffixed(&a.ckpt, ".beyond.txt"));
    finish_report(&out.report(), &path)?;
    let config = format!("inner = {}\nval_scenes = {}\nchunk = {}\n", a.inner, a.val_scenes, a.chunk);
    write_manifest(&path, "beyond", None, config, &[a.data.as_path(), a.ckpt.as_path()], &[path.as_path(), kv_path(&path).as_path()])
}

fn run_refine(a: &RefineArgs) -> Result<()> {
    for &l in &a.lambda {
        if !(0.0..=1.0).contains(&l) {
            usage!("--lambda must be in [0, 1], got {l}");
        }
    }
    let ds = Dataset::load(&a.data)?;
    let point = load_point(&a.points, &ds)?;
    let base = BaselineModel::load(&a.baseline)?;
    if base.spec.classes != point.spec.classes {
        usage!("baseline and point checkpoints disagree on the class count");
    }
    let (_, va) = ds.split(a.val_scenes)?;
    let grid = ds.grid()?;
    let extent = (grid.bounds.max[0] - grid.bounds.min[0]).max(grid.bounds.max[1] - grid.bounds.min[1]);
    let regions: Vec<RegionMode> = if let Some(t) = a.adaptive {
        vec![RegionMode::Threshold(t)]
    } else if let Some(f) = a.top_fraction {
        vec![RegionMode::TopFraction(f)]
    } else {
        for &s in &a.scale {
            if !(s.is_finite() && s >= 0.0) {
                usage!("--scale must be non-negative, got {s}");
            }
        }
        a.scale.iter().map(|s| RegionMode::Box(s * extent)).collect()
    };
    let mode = if a.logit { FuseMode::Logit } else { FuseMode::Probability };
    let inputs = refine_inputs(&point, &base, &va, a.chunk, None)?;
    let out = refine(&inputs, &va, &regions, &a.lambda, mode)?;
    let mut grids = Container::new();
    for (s, labels) in va.iter().zip(&out.first_grids) {
        let c = label_container(&s.grid, labels)?;
        for t in c.tensors {
            grids.push(NamedTensor { name: format!("scene_{:04}.{}", s.index, t.name), ..t })?;
        }
    }
    let grid_path = a.out.clone().unwrap_or_else(|| suffixed(&a.baseline, ".refined.ospt"));
    grids.save(&grid_path)?;
    let path = a.report.clone().unwrap_or_else(|| suffixed(&a.baseline, ".refine.txt"));
    finish_report(&out.report(mode), &path)?;
    let config = format!(
        "regions = {:?}\nlambda = {:?}\nlogit = {}\nval_scenes = {}\nchunk = {}\n",
        regions.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>(),
        a.lambda,
        a.logit,
        a.val_scenes,
        a.chunk
    );
    write_manifest(
        &path,
        "refine",
        None,
        config,
        &[a.data.as_path(), a.baseline.as_path(), a.points.as_path()],
        &[path.as_path(), kv_path(&path).as_path(), grid_path.as_path()],
    )
}

fn grad_check(a: &GradCheckArgs) -> Result<()> {
    if a.seeds == 0 {
        usage!("--seeds must be positive");
    }
    let opts = SuiteOptions {
        seeds: a.seeds,
        base_seed: a.seed,
        include_corrupted: a.corrupted_fixture,
    };
    let rep = grad_check_suite(opts)?;
    let text = rep.to_string();
    print!("{text}");
    if let Some(p) = &a.report {
        fs::write(p, &text).map_err(|e| OspError::io(p, e))?;
        let config = format!("seeds = {}\nseed = {}\ncorrupted_fixture = {}\n", a.seeds, a.seed, a.corrupted_fixture);
        write_manifest(p, "grad-check", Some(a.seed), config, &[], &[p.as_path()])?;
    }
    if !rep.passed() {
        return Err(OspError::Verification(format!("{} operation(s) exceed the gradient tolerance", rep.failures().len())));
    }
    Ok(())
}

fn export_csv(a: &ExportCsvArgs) -> Result<()> {
    let c = Container::load(&a.input)?;
    let name = match &a.tensor {
        Some(n) => n.clone(),
        None => {
            let names: Vec<&str> = c.tensors.iter().filter(|t| t.name.ends_with("labels")).map(|t| t.name.as_str()).collect();
            match names.as_slice() {
                [one] => one.to_string(),
                [] => usage!("{} has no labels tensor", a.input.display()),
                _ => usage!("{} has several label tensors; pick one with --tensor", a.input.display()),
            }
        }
    };
    let t = c.require(&name)?;
    let TensorData::U8(labels) = &t.data else {
        return Err(OspError::Data(format!("{name} is not a u8 label tensor")));
    };
    // scene-prefixed label tensors carry a matching prefixed grid
    let grid_name = format!("{}grid", name.strip_suffix("labels").unwrap_or(""));
    let grid = match c.get(&grid_name) {
        Some(g) => {
            let mut one = Container::new();
            one.push(NamedTensor { name: String::from("grid"), ..g.clone() })?;
            read_grid_tensor(&one)?
        }
        None => return Err(OspError::Data(format!("{} has no {grid_name} tensor", a.input.display()))),
    };
    if t.dims != grid.dims {
        return Err(OspError::Data(format!("{name} dims {:?} disagree with grid {:?}", t.dims, grid.dims)));
    }
    let mut csv = String::from("x,y,z,label\n");
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 || a.include_empty {
            let p = grid.center(i);
            let _ = writeln!(csv, "{},{},{},{l}", p[0], p[1], p[2]);
        }
    }
    fs::write(&a.out, csv).map_err(|e| OspError::io(&a.out, e))?;
    write_manifest(&a.out, "export-csv", None, format!("tensor = \"{name}\"\ninclude_empty = {}\n", a.include_empty), &[a.input.as_path()], &[a.out.as_path()])
}
