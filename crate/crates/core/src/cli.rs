//! Command-line front end: dataset generation, priors, training, rendering,
//! evaluation and mode comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::camera::{CameraIntrinsics, RigConfig};
use crate::dataset::{
    dataset_hash, read_dataset, read_depth_png, read_manifest, read_rgb_png, write_depth_png, write_priors, write_rgb_png, Dataset, Split,
};
use crate::field::{Checkpoint, VoxelField};
use crate::geometry::Pose;
use crate::metrics::{evaluate_field, evaluate_renders, EvalReport, RenderSettings};
use crate::priors::{compute_dataset_priors, prior_accuracy, CalibrationInput, DatasetPriors, PriorAccuracy, ViewGeometry, WallFitConfig};
use crate::render::{render_image, ImageRender};
use crate::scene::{build_scene, generate_dataset};
use crate::train::{far_plane, train, TrainConfig, TrainData, TrainMode};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG_FILE: &str = "log.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const PRIOR_REPORT: &str = "priors_report.json";
const POSE_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(
    name = "archdepth",
    version,
    about = "Depth-guided voxel radiance fields for indoor 360-degree captures"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural room with the capture rig and write a dataset.
    Generate(GenerateArgs),
    /// Compute architectural depth priors and store them in the dataset.
    Priors(PriorsArgs),
    /// Optimize a voxel field on a dataset.
    Train(TrainArgs),
    /// Render color and depth images from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint or a directory of renders on the evaluation views.
    Eval(EvalArgs),
    /// Train or load several modes on one dataset and tabulate their scores.
    Compare(CompareArgs),
}

/// Station grid given as `NxM`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StationGrid(pub [usize; 2]);

impl FromStr for StationGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected NxM, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        Ok(StationGrid([parse(a)?, parse(b)?]))
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value = "bedroom_like")]
    pub preset: String,
    #[arg(long, default_value = "2x2")]
    pub stations: StationGrid,
    /// Seeds the scene layout, rig jitter and train/eval split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 160)]
    pub width: usize,
    #[arg(long, default_value_t = 288)]
    pub height: usize,
    /// Station grid spacing in meters.
    #[arg(long, default_value_t = 2.0)]
    pub spacing: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PriorsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Accuracy report path; defaults to `priors_report.json` in the dataset.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainOverrides {
    /// JSON training config; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cubic field resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub rays: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Output directory for checkpoint, config and log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Eval,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON list of `{ "camera_to_world": 4x4, "intrinsics": {..} }`; intrinsics
    /// default to the first dataset view. Renders dataset views when absent.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "eval")]
    pub split: SplitChoice,
    #[command(flatten)]
    pub settings: SettingsArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SettingsArgs {
    #[arg(long)]
    pub near: Option<f64>,
    #[arg(long)]
    pub far: Option<f64>,
    #[arg(long = "ray-samples")]
    pub ray_samples: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "renders", required_unless_present = "renders")]
    pub checkpoint: Option<PathBuf>,
    /// Directory with `rgb/NNNNN.png` and `depth/NNNNN.png` per evaluation view.
    #[arg(long)]
    pub renders: Option<PathBuf>,
    #[command(flatten)]
    pub settings: SettingsArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "rgb_only,depth_mse,depth_boundl")]
    pub modes: Vec<TrainMode>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Load `<out>/<mode>/checkpoint.bin` when it exists instead of training.
    #[arg(long)]
    pub reuse: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a).map(|_| ()),
        Command::Priors(a) => priors(&a).map(|_| ()),
        Command::Train(a) => train_cmd(&a).map(|_| ()),
        Command::Render(a) => render_cmd(&a).map(|_| ()),
        Command::Eval(a) => eval_cmd(&a).map(|_| ()),
        Command::Compare(a) => compare(&a).map(|_| ()),
    }
}

/// Parses `args` (program name first), runs, and maps failure to exit code 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn generate(a: &GenerateArgs) -> anyhow::Result<usize> {
    let scene = build_scene(&a.preset, a.seed)?;
    let rig = RigConfig {
        stations: a.stations.0,
        spacing: [a.spacing; 2],
        seed: a.seed,
        width: a.width,
        height: a.height,
        ..RigConfig::default()
    };
    fs::create_dir_all(&a.out)?;
    let views = generate_dataset(&scene, a.seed, &rig, &a.out)?;
    println!("wrote {} views of {} to {}", views.len(), a.preset, a.out.display());
    Ok(views.len())
}

/// Wall-plane priors for every view of a loaded dataset, calibrated with the
/// recorded room height.
pub fn dataset_priors(ds: &Dataset) -> crate::Result<DatasetPriors> {
    let geo: Vec<ViewGeometry> = ds
        .views
        .iter()
        .map(|v| ViewGeometry {
            seg: &v.seg,
            intrinsics: &v.intrinsics,
            pose: &v.pose,
        })
        .collect();
    compute_dataset_priors(
        &geo,
        &CalibrationInput::calibrated(ds.manifest.room_height()),
        &WallFitConfig::default(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorReport {
    /// Against the stored (millimeter-quantized) reference depth.
    pub accuracy: PriorAccuracy,
    pub walls: usize,
    pub per_view_coverage: Vec<f64>,
}

pub fn priors(a: &PriorsArgs) -> anyhow::Result<PriorReport> {
    let ds = read_dataset(&a.data)?;
    let p = dataset_priors(&ds)?;
    let accuracy = prior_accuracy(p.maps.iter().zip(&ds.views).map(|(m, v)| (m, v.depth.as_slice(), v.seg.as_slice())));
    let per_view_coverage = p
        .maps
        .iter()
        .zip(&ds.views)
        .map(|(m, v)| {
            let arch = v.seg.iter().filter(|c| c.is_architectural()).count();
            if arch == 0 {
                1.0
            } else {
                m.covered() as f64 / arch as f64
            }
        })
        .collect();
    let mut manifest = read_manifest(&a.data)?;
    write_priors(&a.data, &mut manifest, &p.maps.iter().map(|m| m.depth.clone()).collect::<Vec<_>>())?;
    let report = PriorReport {
        accuracy,
        walls: p.walls.len(),
        per_view_coverage,
    };
    write_json(&a.report.clone().unwrap_or_else(|| a.data.join(PRIOR_REPORT)), &report)?;
    println!(
        "priors: {} walls, rmse {:.6} m, coverage {:.2}%",
        report.walls,
        accuracy.rmse,
        100.0 * accuracy.coverage
    );
    Ok(report)
}

fn train_config(mode: Option<TrainMode>, o: &TrainOverrides) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = mode {
        if m != cfg.mode {
            // Mode-specific defaults only apply when no config file set them.
            let fresh = TrainConfig::for_mode(m);
            if o.config.is_none() {
                cfg = fresh;
            } else {
                cfg.mode = m;
                cfg.filter.guide = fresh.filter.guide;
            }
        }
    }
    if let Some(v) = o.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.resolution {
        cfg.resolution = [v; 3];
    }
    if let Some(v) = o.rays {
        cfg.rays_per_batch = v;
    }
    if let Some(v) = o.samples {
        cfg.samples_per_ray = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_into(ds: &Dataset, cfg: &TrainConfig, out: &Path) -> anyhow::Result<Checkpoint> {
    fs::create_dir_all(out)?;
    let data = TrainData::from_dataset(ds);
    let start = Instant::now();
    let outcome = train(&data, cfg)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    outcome.log.save(&out.join(TRAIN_LOG_FILE))?;
    write_json(&out.join(TRAIN_CONFIG_FILE), cfg)?;
    println!(
        "trained {} for {} iterations in {:.1} s -> {}",
        cfg.mode,
        cfg.iterations,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(outcome.checkpoint)
}

pub fn train_cmd(a: &TrainArgs) -> anyhow::Result<Checkpoint> {
    let cfg = train_config(a.mode, &a.overrides)?;
    let ds = read_dataset(&a.data)?;
    train_into(&ds, &cfg, &a.out)
}

/// Render settings from flags, falling back to the training config stored
/// next to the checkpoint and then to defaults.
fn render_settings(ds: &Dataset, checkpoint: Option<&Path>, s: &SettingsArgs) -> anyhow::Result<RenderSettings> {
    let stored = checkpoint
        .and_then(|c| c.parent())
        .map(|d| d.join(TRAIN_CONFIG_FILE))
        .filter(|p| p.exists())
        .map(|p| read_json::<TrainConfig>(&p))
        .transpose()?
        .unwrap_or_default();
    Ok(RenderSettings {
        near: s.near.unwrap_or(stored.near),
        far: s.far.unwrap_or_else(|| far_plane(ds.manifest.meta.room, &stored)),
        samples: s.ray_samples.unwrap_or(stored.samples_per_ray),
    })
}

#[derive(Deserialize)]
struct PoseEntry {
    camera_to_world: [[f64; 4]; 4],
    intrinsics: Option<CameraIntrinsics>,
}

fn save_render(out: &Path, index: usize, r: &ImageRender, depth_scale: f64) -> anyhow::Result<()> {
    let name = format!("{index:05}.png");
    write_rgb_png(&out.join("rgb").join(&name), r.width, r.height, &r.rgb)?;
    write_depth_png(&out.join("depth").join(&name), r.width, r.height, &r.depth, depth_scale)?;
    write_rgb_png(&out.join("depth_vis").join(&name), r.width, r.height, &colorize_depth(&r.depth))?;
    Ok(())
}

/// Maps depth to a blue-to-yellow ramp scaled to the image's own range.
/// Zero depth stays black.
pub fn colorize_depth(depth: &[f64]) -> Vec<[f64; 3]> {
    const STOPS: [[f64; 3]; 5] = [
        [0.267, 0.005, 0.329],
        [0.229, 0.322, 0.546],
        [0.128, 0.567, 0.551],
        [0.369, 0.789, 0.383],
        [0.993, 0.906, 0.144],
    ];
    let valid = depth.iter().copied().filter(|d| *d > 0.0);
    let lo = valid.clone().fold(f64::INFINITY, f64::min);
    let hi = valid.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    depth
        .iter()
        .map(|&d| {
            if d <= 0.0 {
                return [0.0; 3];
            }
            let x = ((d - lo) / span).clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
            let i = (x as usize).min(STOPS.len() - 2);
            let f = x - i as f64;
            [0, 1, 2].map(|k| STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k]))
        })
        .collect()
}

pub fn render_cmd(a: &RenderArgs) -> anyhow::Result<usize> {
    let ds = read_dataset(&a.data)?;
    let field = Checkpoint::load(&a.checkpoint)?.field;
    let settings = render_settings(&ds, Some(&a.checkpoint), &a.settings)?;
    let cameras: Vec<(usize, CameraIntrinsics, Pose)> = match &a.poses {
        Some(p) => {
            let entries: Vec<PoseEntry> = read_json(p)?;
            let default = ds.views.first().map(|v| v.intrinsics);
            entries
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let pose = Pose::from_rows(&e.camera_to_world, POSE_TOL).ok_or_else(|| anyhow!("pose {i} is not rigid"))?;
                    let intr = e.intrinsics.or(default).ok_or_else(|| anyhow!("pose {i} has no intrinsics"))?;
                    Ok((i, intr, pose))
                })
                .collect::<anyhow::Result<_>>()?
        }
        None => {
            let idx = match a.split {
                SplitChoice::Train => ds.split_indices(Split::Train),
                SplitChoice::Eval => ds.split_indices(Split::Eval),
                SplitChoice::All => (0..ds.views.len()).collect(),
            };
            idx.into_iter().map(|i| (i, ds.views[i].intrinsics, ds.views[i].pose)).collect()
        }
    };
    for sub in ["rgb", "depth", "depth_vis"] {
        fs::create_dir_all(a.out.join(sub))?;
    }
    for (i, intr, pose) in &cameras {
        let r = render_image(&field, intr, pose, settings.near, settings.far, settings.samples)?;
        save_render(&a.out, *i, &r, ds.manifest.meta.depth_scale)?;
    }
    println!("rendered {} views to {}", cameras.len(), a.out.display());
    Ok(cameras.len())
}

fn field_echo(field: &VoxelField, iteration: u64) -> serde_json::Value {
    json!({ "resolution": field.resolution(), "bbox": field.bbox(), "iteration": iteration })
}

/// Writes `report.json` and `report.txt`; only the text carries wall-clock time.
fn write_report(out: &Path, report: &EvalReport, seconds: f64) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join(REPORT_JSON), report)?;
    let mut text = report.to_text();
    let _ = writeln!(text, "eval time {seconds:.2} s");
    fs::write(out.join(REPORT_TEXT), text)?;
    Ok(())
}

fn eval_checkpoint(ds: &Dataset, hash: &str, checkpoint: &Path, s: &SettingsArgs) -> anyhow::Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let settings = render_settings(ds, Some(checkpoint), s)?;
    let stored = checkpoint.parent().map(|d| d.join(TRAIN_CONFIG_FILE)).filter(|p| p.exists());
    let train_cfg = stored.map(|p| read_json::<serde_json::Value>(&p)).transpose()?;
    let config = json!({
        "settings": settings,
        "field": field_echo(&ck.field, ck.iteration),
        "train": train_cfg,
    });
    let mut report = evaluate_field(&ck.field, ds, &settings, config)?;
    report.dataset_hash = Some(hash.to_string());
    Ok(report)
}

fn load_renders(ds: &Dataset, dir: &Path) -> anyhow::Result<Vec<(usize, ImageRender)>> {
    let scale = ds.manifest.meta.depth_scale;
    ds.split_indices(Split::Eval)
        .into_iter()
        .map(|i| {
            let name = format!("{i:05}.png");
            let (width, height, rgb) = read_rgb_png(&dir.join("rgb").join(&name))?;
            let (dw, dh, depth) = read_depth_png(&dir.join("depth").join(&name), scale)?;
            if (dw, dh) != (width, height) {
                bail!("render {i}: color {width}x{height} but depth {dw}x{dh}");
            }
            Ok((i, ImageRender { width, height, rgb, depth }))
        })
        .collect()
}

pub fn eval_cmd(a: &EvalArgs) -> anyhow::Result<EvalReport> {
    let start = Instant::now();
    let ds = read_dataset(&a.data)?;
    let hash = dataset_hash(&a.data)?;
    let report = match (&a.checkpoint, &a.renders) {
        (Some(c), _) => eval_checkpoint(&ds, &hash, c, &a.settings)?,
        (None, Some(dir)) => {
            let renders = load_renders(&ds, dir)?;
            let mut r = evaluate_renders(&ds, &renders, json!({ "source": "renders" }))?;
            r.dataset_hash = Some(hash);
            r
        }
        (None, None) => bail!("eval needs --checkpoint or --renders"),
    };
    write_report(&a.out, &report, start.elapsed().as_secs_f64())?;
    print!("{}", report.to_text());
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: TrainMode,
    pub psnr: f64,
    pub ssim: f64,
    /// Not computed; always "n/a".
    pub lpips: String,
    pub depth_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub dataset_hash: String,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22}  {:>9}  {:>7}  {:>6}  {:>11}",
            "mode", "PSNR(dB)", "SSIM", "LPIPS", "depth RMSE"
        );
        for r in &self.rows {
            let d = r.depth_rmse.map_or("n/a".to_string(), |d| format!("{d:.5}"));
            let _ = writeln!(
                s,
                "{:<22}  {:>9.3}  {:>7.4}  {:>6}  {:>11}",
                r.mode.name(),
                r.psnr,
                r.ssim,
                r.lpips,
                d
            );
        }
        let _ = writeln!(s, "dataset {}", self.dataset_hash);
        s
    }
}

pub fn compare(a: &CompareArgs) -> anyhow::Result<CompareReport> {
    if a.modes.is_empty() {
        bail!("no modes to compare");
    }
    let ds = read_dataset(&a.data)?;
    let hash = dataset_hash(&a.data)?;
    let mut rows = Vec::with_capacity(a.modes.len());
    for &mode in &a.modes {
        let dir = a.out.join(mode.name());
        let ck_path = dir.join(CHECKPOINT_FILE);
        if !(a.reuse && ck_path.exists()) {
            let cfg = train_config(Some(mode), &a.overrides)?;
            train_into(&ds, &cfg, &dir)?;
        }
        let start = Instant::now();
        let report = eval_checkpoint(&ds, &hash, &ck_path, &SettingsArgs::default())?;
        write_report(&dir, &report, start.elapsed().as_secs_f64())?;
        rows.push(CompareRow {
            mode,
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
            lpips: "n/a".into(),
            depth_rmse: report.depth_rmse,
        });
    }
    let report = CompareReport { dataset_hash: hash, rows };
    write_json(&a.out.join("compare.json"), &report)?;
    fs::write(a.out.join("compare.txt"), report.to_text())?;
    print!("{}", report.to_text());
    Ok(report)
}
