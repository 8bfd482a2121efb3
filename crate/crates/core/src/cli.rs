//! Command-line entry point: simulation, reconstruction, training, inference,
//! evaluation, rendering and self-tests.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O or data error. Failures print one JSON object on stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::suite::{check_primitive, Primitive};
use crate::autodiff::Precision;
use crate::datamodel::{read_masks, read_projections, read_volume, write_projections, write_volume, VolumeGrid};
use crate::error::{Error, Result};
use crate::geometry::{
    adjoint_residual, back_project, build_geometry, build_system_matrix, forward_project, AngleSet, GeometryConfig,
    GridSpec, SystemMatrix,
};
use crate::metrics::{evaluate, MetricReport, SubjectMetrics};
use crate::mlem::{mlem_reconstruct, Mlem, MlemConfig};
use crate::model::{ModelConfig, ModelShapes, TipNet};
use crate::phantom::{generate_phantom, make_dataset, simulate_acquisition, AcquisitionSpec, Dataset, DatasetConfig, PhantomSpec};
use crate::training::{evaluate_subject, train, TrainConfig};

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

/// Every setting a run depends on. Configuration files are merged over the
/// defaults of the chosen scale; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub geometry: GeometryConfig,
    pub mlem: MlemConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub dataset: DatasetConfig,
}

impl RunConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let (grid, geometry) = match scale {
            Scale::Desk => (GridSpec::desk(), GeometryConfig::desk()),
            Scale::Paper => (GridSpec::paper(), GeometryConfig::paper()),
        };
        RunConfig {
            grid,
            geometry,
            mlem: MlemConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }

    /// Defaults of `scale`, overlaid with `overrides` key by key.
    pub fn merged(scale: Scale, overrides: Option<Value>) -> Result<Self> {
        let mut base = serde_json::to_value(Self::for_scale(scale))?;
        if let Some(o) = overrides {
            if !o.is_object() {
                return Err(Error::Config("configuration must be a JSON object".into()));
            }
            merge(&mut base, o);
        }
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.mlem.validate()?;
        self.training.validate()
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[derive(Debug, Parser)]
#[command(name = "tipnet", version, about = "Few-view cardiac SPECT: simulation, MLEM and TIP-Net")]
pub struct Cli {
    /// Seed for phantoms, noise and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration merged over the scale defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub scale: Scale,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Angles {
    One,
    Four,
}

impl Angles {
    fn set(self) -> AngleSet {
        match self {
            Angles::One => AngleSet::one_angle(),
            Angles::Four => AngleSet::four_angle(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Png,
    Pgm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with one- and four-angle reconstructions.
    Phantom {
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Forward-project a volume (with Poisson noise when --counts is given).
    Project {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_enum, default_value = "one")]
        angles: Angles,
        /// Expected counts per angular position.
        #[arg(long)]
        counts: Option<f64>,
    },
    /// MLEM reconstruction of a projection set (one or four angles).
    Mlem {
        #[arg(long)]
        proj: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Train TIP-Net on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Synthetic dataset fitted before the main dataset.
        #[arg(long)]
        pretrain_dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        pretrain_steps: usize,
    },
    /// Run a trained model; writes IMG_p and the final volume per subject.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        subject: Option<String>,
    },
    /// Metric report against the four-angle reference.
    Eval {
        #[arg(long, conflicts_with_all = ["pred", "reference"])]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        model: Option<PathBuf>,
        #[arg(long, requires = "reference")]
        pred: Option<PathBuf>,
        #[arg(long = "ref", requires = "pred")]
        reference: Option<PathBuf>,
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Short- and long-axis slice grids with a shared intensity window.
    Render {
        #[arg(long = "volume", required = true)]
        volumes: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "png")]
        format: ImageFormat,
        /// Pixels per voxel.
        #[arg(long, default_value_t = 4)]
        zoom: usize,
    },
    /// Adjoint, gradient and MLEM-monotonicity checks.
    Selftest,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Geometry(_) | Error::Shape(_) => 2,
        Error::Numerical(_) | Error::Reconstruction(_) => 3,
        Error::Io { .. } | Error::Format { .. } | Error::Dataset(_) => 4,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        Error::Config(_) => "config",
        Error::Geometry(_) => "geometry",
        Error::Shape(_) => "shape",
        Error::Numerical(_) => "numerical",
        Error::Reconstruction(_) => "reconstruction",
        Error::Dataset(_) => "dataset",
    }
}

pub fn error_json(e: &Error) -> Value {
    serde_json::json!({
        "error": {
            "kind": error_kind(e),
            "message": e.to_string(),
            "exit_code": exit_code(e),
        }
    })
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = Error::Config(e.to_string().trim().to_string());
            eprintln!("{}", error_json(&err));
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let overrides = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let mut cfg = RunConfig::merged(cli.scale, overrides)?;
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
        cfg.dataset.seed = seed;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match &cli.command {
        Command::Phantom { subjects } => {
            if let Some(n) = subjects {
                cfg.dataset.n_subjects = *n;
            }
            echo_config(out, &cfg)?;
            let m = make_dataset(out, &cfg.grid, &cfg.geometry, &cfg.dataset)?;
            let n_defect = m.subjects.iter().filter(|s| s.has_defect).count();
            println!("{} subjects ({} with defects) in {}", m.subjects.len(), n_defect, out.display());
        }
        Command::Project { volume, angles, counts } => {
            echo_config(out, &cfg)?;
            let x = read_volume(volume)?;
            let set = angles.set();
            let s = matrix(&cfg, &set)?;
            let y = match counts {
                Some(c) => {
                    let acq = AcquisitionSpec {
                        counts_per_angle: *c,
                        seed: cfg.dataset.seed,
                    };
                    simulate_acquisition(&x, &s, set.ids(), &acq)?
                }
                None => forward_project(&s, &x, set.ids())?,
            };
            let path = out.join("projections.proj.json");
            write_projections(&path, &y)?;
            println!("{}", path.display());
        }
        Command::Mlem { proj, iters } => {
            if let Some(n) = iters {
                cfg.mlem.n_iters = *n;
            }
            echo_config(out, &cfg)?;
            let y = read_projections(proj)?;
            let set = match y.dims().n_angles {
                1 => AngleSet::one_angle(),
                4 => AngleSet::four_angle(),
                n => return Err(Error::Config(format!("no angle set with {n} angular positions"))),
            };
            let s = matrix(&cfg, &set)?;
            let x = mlem_reconstruct(&s, &y, &cfg.mlem, cfg.grid.voxel_size)?;
            let path = out.join("mlem.vol.json");
            write_volume(&path, &x)?;
            let bp = back_project(&s, &y, cfg.grid.voxel_size)?;
            write_volume(out.join("backprojection.vol.json"), &bp)?;
            println!("{}", path.display());
        }
        Command::Train {
            dataset,
            steps,
            pretrain_dataset,
            pretrain_steps,
        } => {
            if let Some(n) = steps {
                cfg.training.steps = *n;
            }
            cfg.validate()?;
            echo_config(out, &cfg)?;
            let ds = Dataset::load(dataset)?;
            let shapes = ModelShapes::new(ds.manifest.grid.dims, ds.subjects[0].proj_one.dims());
            let net = TipNet::new(&cfg.model, &shapes, cfg.training.seed)?;
            let pre = match pretrain_dataset {
                Some(p) => Some(Dataset::load(p)?),
                None => None,
            };
            let (_, report) = train(&ds, net, &cfg.training, Some(out), pre.as_ref().map(|d| (d, *pretrain_steps)))?;
            if !report.heldout.is_empty() {
                print!("{}", MetricReport::new("mlem_four", report.heldout).to_csv());
            }
            if let Some(p) = report.final_model {
                println!("{}", p.display());
            }
        }
        Command::Infer { model, dataset, subject } => {
            echo_config(out, &cfg)?;
            let net = TipNet::load(model)?;
            let ds = Dataset::load(dataset)?;
            let chosen: Vec<_> = ds.subjects.iter().filter(|s| subject.as_ref().is_none_or(|id| &s.id == id)).collect();
            if chosen.is_empty() {
                return Err(Error::Dataset(format!("subject {} not in dataset", subject.clone().unwrap_or_default())));
            }
            for s in chosen {
                let inf = net.infer(&s.proj_one, &s.bp_one, &s.mlem_one)?;
                let dir = out.join(&s.id);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_volume(dir.join("img_p.vol.json"), &inf.img_p)?;
                write_volume(dir.join("output.vol.json"), &inf.output)?;
                println!("{}", dir.display());
            }
        }
        Command::Eval {
            dataset,
            model,
            pred,
            reference,
            masks,
        } => {
            echo_config(out, &cfg)?;
            let report = match (dataset, pred, reference) {
                (Some(d), _, _) => eval_dataset(&Dataset::load(d)?, model.as_deref())?,
                (None, Some(p), Some(r)) => eval_pair(p, r, masks.as_deref())?,
                _ => return Err(Error::Config("eval needs --dataset or --pred with --ref".into())),
            };
            write_text(&out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
            let csv = report.to_csv();
            write_text(&out.join("metrics.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Render { volumes, format, zoom } => {
            let vols = volumes.iter().map(read_volume).collect::<Result<Vec<_>>>()?;
            for p in render(&vols, volumes, out, *format, *zoom)? {
                println!("{}", p.display());
            }
        }
        Command::Selftest => {
            echo_config(out, &cfg)?;
            let results = selftest(&cfg)?;
            let mut stdout = std::io::stdout().lock();
            for r in &results {
                writeln!(stdout, "{}", serde_json::to_string(r)?).map_err(|e| Error::io("stdout", e))?;
            }
            if let Some(f) = results.iter().find(|r| !r.pass) {
                return Err(Error::Numerical(format!(
                    "self-test {} failed: {} > {}",
                    f.check, f.value, f.threshold
                )));
            }
        }
    }
    Ok(())
}

fn echo_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&out.join(EFFECTIVE_CONFIG), &serde_json::to_string_pretty(cfg)?)
}

fn matrix(cfg: &RunConfig, set: &AngleSet) -> Result<SystemMatrix> {
    let geom = build_geometry(&cfg.geometry)?;
    build_system_matrix(&geom, set, &cfg.grid)
}

/// Methods one-angle MLEM, IMG_p and TIP-Net (when a model is given) against
/// the four-angle MLEM reference for every subject.
pub fn eval_dataset(ds: &Dataset, model: Option<&Path>) -> Result<MetricReport> {
    let net = model.map(TipNet::load).transpose()?;
    let mut rows = Vec::new();
    for s in &ds.subjects {
        match &net {
            Some(net) => rows.extend(evaluate_subject(net, s)?.into_iter().filter(|r| r.method != "mlem_four")),
            None => rows.push(SubjectMetrics {
                subject: s.id.clone(),
                method: "mlem_one".into(),
                has_defect: s.has_defect,
                values: evaluate(&s.mlem_one, &s.mlem_four, Some(&s.masks.myocardium), Some(&s.masks.blood_pool))?,
            }),
        }
    }
    Ok(MetricReport::new("mlem_four", rows))
}

fn eval_pair(pred: &Path, reference: &Path, masks: Option<&Path>) -> Result<MetricReport> {
    let x = read_volume(pred)?;
    let r = read_volume(reference)?;
    let m = masks.map(read_masks).transpose()?;
    let values = evaluate(
        &x,
        &r,
        m.as_ref().map(|m| m.myocardium.as_slice()),
        m.as_ref().map(|m| m.blood_pool.as_slice()),
    )?;
    let row = SubjectMetrics {
        subject: pred.display().to_string(),
        method: "prediction".into(),
        has_defect: m.as_ref().is_some_and(|m| m.has_defect()),
        values,
    };
    Ok(MetricReport::new(reference.display().to_string(), vec![row]))
}

/// 8-bit grey image, row-major.
struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// Paint an `h × w` plane at `(x0, y0)`, each sample a `zoom²` block.
    fn paint(&mut self, plane: &[f32], w: usize, h: usize, x0: usize, y0: usize, zoom: usize, window: f32) {
        for r in 0..h {
            for c in 0..w {
                let v = (plane[r * w + c] / window).clamp(0.0, 1.0);
                let g = (v * 255.0).round() as u8;
                for dy in 0..zoom {
                    let row = y0 + r * zoom + dy;
                    let start = row * self.width + x0 + c * zoom;
                    self.pixels[start..start + zoom].fill(g);
                }
            }
        }
    }

    fn save(&self, path: &Path, format: ImageFormat) -> Result<()> {
        let io = |e: std::io::Error| Error::io(path, e);
        match format {
            ImageFormat::Pgm => {
                let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
                bytes.extend_from_slice(&self.pixels);
                fs::write(path, bytes).map_err(io)
            }
            ImageFormat::Png => {
                let f = fs::File::create(path).map_err(io)?;
                let mut enc = png::Encoder::new(std::io::BufWriter::new(f), self.width as u32, self.height as u32);
                enc.set_color(png::ColorType::Grayscale);
                enc.set_depth(png::BitDepth::Eight);
                let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
                let mut w = enc.write_header().map_err(png_err)?;
                w.write_image_data(&self.pixels).map_err(png_err)
            }
        }
    }
}

fn render_short_axis(v: &VolumeGrid, zoom: usize, window: f32) -> Image {
    let d = v.dims();
    let cols = (d.nz as f64).sqrt().ceil() as usize;
    let rows = d.nz.div_ceil(cols);
    let (tw, th) = (d.nx * zoom + 1, d.ny * zoom + 1);
    let mut img = Image::new(cols * tw, rows * th);
    for z in 0..d.nz {
        // image rows run along -y so anterior is up
        let plane: Vec<f32> = (0..d.ny).rev().flat_map(|y| (0..d.nx).map(move |x| (x, y))).map(|(x, y)| v.get(x, y, z)).collect();
        img.paint(&plane, d.nx, d.ny, (z % cols) * tw, (z / cols) * th, zoom, window);
    }
    img
}

fn render_long_axis(v: &VolumeGrid, zoom: usize, window: f32) -> Image {
    let d = v.dims();
    let (cx, cy) = (d.nx / 2, d.ny / 2);
    let xz: Vec<f32> = (0..d.nz).rev().flat_map(|z| (0..d.nx).map(move |x| (x, z))).map(|(x, z)| v.get(x, cy, z)).collect();
    let yz: Vec<f32> = (0..d.nz).rev().flat_map(|z| (0..d.ny).map(move |y| (y, z))).map(|(y, z)| v.get(cx, y, z)).collect();
    let mut img = Image::new((d.nx + d.ny) * zoom + 1, d.nz * zoom);
    img.paint(&xz, d.nx, d.nz, 0, 0, zoom, window);
    img.paint(&yz, d.ny, d.nz, d.nx * zoom + 1, 0, zoom, window);
    img
}

/// Write `<name>_short.<ext>` and `<name>_long.<ext>` per volume, all mapped
/// through the window `[0, max over every volume]`.
pub fn render(vols: &[VolumeGrid], names: &[PathBuf], out: &Path, format: ImageFormat, zoom: usize) -> Result<Vec<PathBuf>> {
    if zoom == 0 {
        return Err(Error::Config("zoom must be >= 1".into()));
    }
    let window = vols.iter().map(|v| v.max()).fold(0.0f32, f32::max);
    let window = if window > 0.0 { window } else { 1.0 };
    let ext = match format {
        ImageFormat::Png => "png",
        ImageFormat::Pgm => "pgm",
    };
    let mut written = Vec::new();
    for (k, (v, name)) in vols.iter().zip(names).enumerate() {
        let file = name.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let stem = file.split('.').next().filter(|s| !s.is_empty()).map(String::from).unwrap_or(format!("volume{k}"));
        let stem = format!("{k:02}_{stem}");
        for (kind, img) in [("short", render_short_axis(v, zoom, window)), ("long", render_long_axis(v, zoom, window))] {
            let p = out.join(format!("{stem}_{kind}.{ext}"));
            img.save(&p, format)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn check(name: &str, value: f64, threshold: f64) -> CheckResult {
    CheckResult {
        check: name.to_string(),
        value,
        threshold,
        pass: value <= threshold,
    }
}

/// Largest relative adjoint residual over `pairs` random nonnegative `(x, y)`.
pub fn adjoint_suite(s: &SystemMatrix, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let x: Vec<f64> = (0..s.n_cols()).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..s.n_rows()).map(|_| rng.random::<f64>()).collect();
        worst = worst.max(adjoint_residual(s, &x, &y)?);
    }
    Ok(worst)
}

/// Largest relative log-likelihood decrease over `n_iters` MLEM iterations
/// (0 when monotone) and whether any iterate had a negative voxel.
pub fn mlem_monotonicity(s: &SystemMatrix, y: &[f64], n_iters: usize) -> Result<(f64, bool)> {
    let cfg = MlemConfig {
        n_iters,
        ..MlemConfig::default()
    };
    let mut m = Mlem::new(s, y, &cfg)?;
    let mut prev = m.loglik()?;
    let mut worst = 0.0f64;
    let mut negative = false;
    for _ in 0..n_iters {
        m.step()?;
        let l = m.loglik()?;
        worst = worst.max((prev - l) / prev.abs().max(1.0));
        negative |= m.estimate().iter().any(|&v| v < 0.0);
        prev = l;
    }
    Ok((worst, negative))
}

pub fn selftest(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let one = matrix(cfg, &AngleSet::one_angle())?;
    let four = matrix(cfg, &AngleSet::four_angle())?;
    out.push(check("adjoint_one_angle", adjoint_suite(&one, 20, 1)?, 1e-5));
    out.push(check("adjoint_four_angle", adjoint_suite(&four, 20, 2)?, 1e-5));

    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    for p in Primitive::ALL {
        worst64 = worst64.max(check_primitive(p, 7, Precision::F64)?.max_rel_error);
        worst32 = worst32.max(check_primitive(p, 7, Precision::F32)?.max_rel_error);
    }
    out.push(check("gradient_primitives_f64", worst64, 1e-5));
    out.push(check("gradient_primitives_f32", worst32, 1e-3));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = PhantomSpec::random(&mut rng, true);
    let (x, _) = generate_phantom(&spec, &cfg.grid)?;
    let acq = AcquisitionSpec {
        counts_per_angle: cfg.dataset.counts_per_angle,
        seed: 4,
    };
    let y = simulate_acquisition(&x, &one, AngleSet::one_angle().ids(), &acq)?;
    let ys: Vec<f64> = y.values().iter().map(|&v| v as f64).collect();
    let (drop, negative) = mlem_monotonicity(&one, &ys, 50)?;
    out.push(check("mlem_loglik_decrease", drop, 1e-9));
    out.push(check("mlem_negative_voxels", if negative { 1.0 } else { 0.0 }, 0.0));
    Ok(out)
}
