use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use tipnet::autodiff::suite::{check_primitive, Primitive};
use tipnet::autodiff::{grad_check_each, GradCheckOptions, Input, ParamId, ParamStore, Precision, Real, Tape, TapeFn, Var};
use tipnet::cli::{adjoint_suite, RunConfig, Scale};
use tipnet::datamodel::{Dims3, ProjDims, VolumeGrid};
use tipnet::error::Result;
use tipnet::geometry::{build_geometry, build_system_matrix, AngleSet, GeometryConfig, GridSpec, SystemMatrix};
use tipnet::losses::{composite_loss, critic_objective, generator_objective, gradient_penalty, GeneratorSample, LossWeights};
use tipnet::metrics::{fwhm, psnr, rmse, ssim, MetricReport, SsimParams};
use tipnet::mlem::{Mlem, MlemConfig};
use tipnet::model::{Critic, CriticFn, Generator, ModelConfig, ModelShapes, TipNet};
use tipnet::phantom::{generate_phantom, make_dataset, simulate_acquisition, AcquisitionSpec, Dataset, DatasetConfig, PhantomSpec};
use tipnet::training::{train, LogEntry, TrainConfig};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the stderr handle directly so the line survives output capture.
fn report(n: usize, pass: bool, detail: String) {
    let _ = writeln!(std::io::stderr(), "criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn desk_matrix(set: &AngleSet) -> SystemMatrix {
    let geom = build_geometry(&GeometryConfig::desk()).unwrap();
    build_system_matrix(&geom, set, &GridSpec::desk()).unwrap()
}

#[test]
fn criterion_1_adjoint() {
    let _g = serial();
    let t0 = Instant::now();
    let one = desk_matrix(&AngleSet::one_angle());
    let four = desk_matrix(&AngleSet::four_angle());
    let worst = adjoint_suite(&one, 20, 11).unwrap().max(adjoint_suite(&four, 20, 12).unwrap());
    let secs = t0.elapsed().as_secs_f64();
    report(1, worst <= 1e-5 && secs <= 30.0, format!("max residual {worst:.3e} (<= 1e-5), {secs:.1}s (<= 30s)"));
}

/// Log-likelihood after every iteration of 50 MLEM steps on each of 10 noisy
/// phantoms, and whether any iterate went negative.
fn mlem_traces() -> (Vec<Vec<f64>>, bool) {
    let s = desk_matrix(&AngleSet::one_angle());
    let grid = GridSpec::desk();
    let mut traces = Vec::new();
    let mut negative = false;
    for k in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k);
        let spec = PhantomSpec::random(&mut rng, k % 2 == 0);
        let (x, _) = generate_phantom(&spec, &grid).unwrap();
        let acq = AcquisitionSpec {
            counts_per_angle: 5e5,
            seed: 200 + k,
        };
        let y = simulate_acquisition(&x, &s, AngleSet::one_angle().ids(), &acq).unwrap();
        let y: Vec<f64> = y.values().iter().map(|&v| v as f64).collect();
        let mut m = Mlem::new(&s, &y, &MlemConfig::default()).unwrap();
        let mut trace = vec![m.loglik().unwrap()];
        for _ in 0..50 {
            m.step().unwrap();
            trace.push(m.loglik().unwrap());
            negative |= m.estimate().iter().any(|&v| v < 0.0);
        }
        traces.push(trace);
    }
    (traces, negative)
}

#[test]
fn criterion_2_mlem_monotonicity() {
    let _g = serial();
    let t0 = Instant::now();
    let (traces, negative) = mlem_traces();
    let secs = t0.elapsed().as_secs_f64();
    let worst = traces
        .iter()
        .flat_map(|tr| tr.windows(2).map(|w| (w[0] - w[1]) / w[0].abs().max(1.0)))
        .fold(0.0f64, f64::max);
    report(
        2,
        worst <= 1e-9 && !negative && secs <= 120.0,
        format!("worst relative decrease {worst:.3e} (<= 1e-9), negative voxels {negative}, {secs:.1}s (<= 120s)"),
    );
}

#[test]
fn criterion_3_scalar_mlem() {
    let _g = serial();
    let mut worst = 0.0f64;
    for (a, y) in [(0.37, 5.0), (2.5, 1234.0), (1e-3, 0.5), (7.0, 7.0)] {
        let dims = ProjDims {
            n_angles: 1,
            n_modules: 1,
            nu: 1,
            nv: 1,
        };
        let s = SystemMatrix::from_rows(dims, Dims3::new(1, 1, 1), vec![vec![(0, a)]]).unwrap();
        let cfg = MlemConfig {
            epsilon: Some(0.0),
            ..MlemConfig::default()
        };
        let mut m = Mlem::new(&s, &[y], &cfg).unwrap();
        m.step().unwrap();
        let x = m.estimate()[0];
        worst = worst.max((x - y / a).abs() / (y / a));
    }
    report(3, worst <= 1e-12, format!("max relative deviation from y/a {worst:.3e} (<= 1e-12)"));
}

const SHAPE: [usize; 4] = [1, 16, 24, 24];

/// Gradient penalty of the critic at an input, with selected critic
/// parameters exposed as inputs after the first.
struct PenaltyFn {
    critic: Critic,
    store: ParamStore<f64>,
    ids: Vec<ParamId>,
}

impl TapeFn for PenaltyFn {
    fn eval<T: Real>(&self, t: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let store = self.store.cast::<T>();
        for (&id, &v) in self.ids.iter().zip(&inputs[1..]) {
            t.bind_param(&store, id, v)?;
        }
        let bound = self.critic.bind(&store);
        gradient_penalty(t, &bound, inputs[0])
    }
}

struct CompositeFn;

impl TapeFn for CompositeFn {
    fn eval<T: Real>(&self, t: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        Ok(composite_loss(t, inputs[0], inputs[1], &LossWeights::default())?.total)
    }
}

/// Full generator objective with the selected generator parameters as inputs.
struct GeneratorFn {
    generator: Generator,
    critic: Critic,
    store: ParamStore<f64>,
    ids: Vec<ParamId>,
    proj: Vec<f32>,
    bp: Vec<f32>,
    mlem: Vec<f32>,
    target: Vec<f64>,
}

impl TapeFn for GeneratorFn {
    fn eval<T: Real>(&self, t: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let store = self.store.cast::<T>();
        for (&id, &v) in self.ids.iter().zip(inputs) {
            t.bind_param(&store, id, v)?;
        }
        let x = self.generator.inputs(t, &self.proj, &self.bp, &self.mlem)?;
        let o = self.generator.forward(t, &store, &x)?;
        let target = t.constant(self.target.iter().map(|&v| T::of(v)).collect(), &SHAPE)?;
        let sample = GeneratorSample {
            output: o.output,
            img_p: Some(o.img_p),
            target,
        };
        let critic = self.critic.bind(&store);
        Ok(generator_objective(t, &[sample], &critic, &LossWeights::default())?.total)
    }
}

fn param_inputs(store: &ParamStore<f64>, names: &[&str]) -> (Vec<ParamId>, Vec<Input>) {
    names
        .iter()
        .map(|n| {
            let id = store.id(n).unwrap_or_else(|| panic!("no parameter {n}"));
            let p = store.get(id);
            (id, Input::new(p.values.clone(), &p.shape))
        })
        .unzip()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// One line per check: name, precision, worst relative error, and the
/// analytic value, numeric value and step at the worst coordinate.
fn gradient_suite() -> Vec<(String, Precision, f64, f64, f64, f64)> {
    let mut log = Vec::new();
    let precisions = [Precision::F64, Precision::F32];
    for p in Primitive::ALL {
        for prec in precisions {
            let r = check_primitive(p, 7, prec).unwrap();
            log.push((p.name().to_string(), prec, r.max_rel_error, r.analytic, r.numeric, r.step));
        }
    }

    let cfg = ModelConfig::default();
    let shapes = ModelShapes::new(GridSpec::desk().dims, build_geometry(&GeometryConfig::desk()).unwrap().proj_dims(1));
    let mut store = ParamStore::<f64>::new();
    let generator = Generator::new(&cfg, &shapes, &mut store).unwrap();
    let critic = Critic::new(&cfg, &mut store).unwrap();
    store.init(&mut ChaCha8Rng::seed_from_u64(17));
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let nvox: usize = SHAPE.iter().product();

    let critic_names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with("critic.") && p.shape.len() > 1)
        .map(|(_, p)| p.name.clone())
        .collect();
    let names: Vec<&str> = critic_names.iter().map(String::as_str).collect();
    let (ids, mut inputs) = param_inputs(&store, &names);
    inputs.insert(0, Input::new(uniform(&mut rng, nvox, 0.0, 1.0), &SHAPE));
    let penalty = PenaltyFn {
        critic: critic.clone(),
        store: store.clone(),
        ids,
    };

    let composite = [
        Input::new(uniform(&mut rng, nvox, 0.0, 1.0), &SHAPE),
        Input::new(uniform(&mut rng, nvox, 0.0, 1.0), &SHAPE),
    ];

    let (ids, gen_inputs) = param_inputs(
        &store,
        &[
            "pnet.slice005.embed.w",
            "pnet.slice005.block0.attn.q.w",
            "pnet.slice005.block0.mlp.fc1.w",
            "pnet.slice005.slice_head.w",
            "pnet.slice005.cnn0.w",
            "inet.cnn1.enc0.a.w",
            "inet.cnn2.dec0.a.w",
            "inet.cnn2.out.w",
        ],
    );
    let f32s = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let full = GeneratorFn {
        generator,
        critic,
        store,
        ids,
        proj: f32s(uniform(&mut rng, shapes.projection_shape().iter().product(), 0.0, 1.0)),
        bp: f32s(uniform(&mut rng, nvox, 0.0, 1.0)),
        mlem: f32s(uniform(&mut rng, nvox, 0.0, 1.0)),
        target: uniform(&mut rng, nvox, 0.0, 1.0),
    };

    let opts = |k: usize, seed: u64| GradCheckOptions {
        step: 1e-3,
        max_coords_per_input: Some(k),
        seed,
        avoid_kinks: true,
        ..GradCheckOptions::default()
    };
    let checks = [
        ("critic_input_gradient", grad_check_each(&penalty, &inputs, &opts(6, 1), &precisions).unwrap()),
        ("composite_loss", grad_check_each(&CompositeFn, &composite, &opts(24, 2), &precisions).unwrap()),
        ("generator", grad_check_each(&full, &gen_inputs, &opts(8, 3), &precisions).unwrap()),
    ];
    for (name, reports) in checks {
        for (prec, r) in precisions.iter().zip(reports) {
            log.push((name.to_string(), *prec, r.max_rel_error, r.analytic, r.numeric, r.step));
        }
    }
    log
}

#[test]
fn criterion_4_gradient_suite() {
    let _g = serial();
    let t0 = Instant::now();
    let log = gradient_suite();
    let secs = t0.elapsed().as_secs_f64();
    let mut failures = Vec::new();
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    let mut model_level = Vec::new();
    for (name, prec, err, a, n, h) in &log {
        if !Primitive::ALL.iter().any(|p| p.name() == name) {
            model_level.push(format!("{name} {prec:?} {err:.2e}"));
        }
        let tol = if *prec == Precision::F64 { 1e-5 } else { 1e-3 };
        match prec {
            Precision::F64 => w64 = w64.max(*err),
            Precision::F32 => w32 = w32.max(*err),
        }
        if *err > tol || !err.is_finite() {
            failures.push(format!("{name} {prec:?} {err:.3e} (analytic {a:.6e}, numeric {n:.6e}, step {h:.2e})"));
        }
    }
    report(
        4,
        failures.is_empty() && secs <= 300.0,
        format!(
            "{} checks, worst f64 {w64:.3e} (<= 1e-5), worst f32 {w32:.3e} (<= 1e-3), [{}], {secs:.1}s (<= 300s){}",
            log.len(),
            model_level.join(", "),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    );
}

const VOL: [usize; 4] = [1, 6, 7, 8];

struct LinearCritic(Vec<f64>);

impl<T: Real> CriticFn<T> for LinearCritic {
    fn score(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let v = t.constant(self.0.iter().map(|&a| T::of(a)).collect(), &VOL)?;
        let p = t.mul(v, x)?;
        t.sum(p)
    }
    fn input_grad(&self, t: &mut Tape<T>, _x: Var) -> Result<Var> {
        t.constant(self.0.iter().map(|&a| T::of(a)).collect(), &VOL)
    }
}

struct ConstCritic;

impl<T: Real> CriticFn<T> for ConstCritic {
    fn score(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let m = t.mean(x)?;
        let z = t.scale(m, 0.0)?;
        t.add_scalar(z, 2.0)
    }
    fn input_grad(&self, t: &mut Tape<T>, _x: Var) -> Result<Var> {
        t.constant(vec![T::zero(); VOL.iter().product()], &VOL)
    }
}

#[test]
fn criterion_5_loss_identities() {
    let _g = serial();
    let n: usize = VOL.iter().product();
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut self_loss = 0.0f64;
    for _ in 0..5 {
        let x = uniform(&mut rng, n, 0.0, 3.0);
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone(), &VOL).unwrap();
        let yv = t.constant(x, &VOL).unwrap();
        let l = composite_loss(&mut t, xv, yv, &w).unwrap().total;
        self_loss = self_loss.max(t.scalar(l).abs());
    }
    let v = uniform(&mut rng, n, -1.0, 1.0);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let lin = LinearCritic(v.into_iter().map(|a| a / norm).collect());
    let real = uniform(&mut rng, n, 0.0, 1.0);
    let fake = uniform(&mut rng, n, 0.0, 1.0);
    let terms = |c: &dyn Fn(&mut Tape<f64>, Var, Var) -> (Var, Var)| {
        let mut t = Tape::<f64>::new();
        let r = t.constant(real.clone(), &VOL).unwrap();
        let f = t.constant(fake.clone(), &VOL).unwrap();
        let (total, pen) = c(&mut t, r, f);
        (t.scalar(total), t.scalar(pen))
    };
    let (_, lin_pen) = terms(&|t, r, f| {
        let c = critic_objective(t, &lin, &[r], &[f], &[0.4], w.lambda_gp).unwrap();
        (c.total, c.penalty)
    });
    let (const_total, _) = terms(&|t, r, f| {
        let c = critic_objective(t, &ConstCritic, &[r], &[f], &[0.6], w.lambda_gp).unwrap();
        (c.total, c.penalty)
    });
    let mut t = Tape::<f64>::new();
    let xh = t.constant(real.clone(), &VOL).unwrap();
    let p = gradient_penalty(&mut t, &lin, xh).unwrap();
    let lin_pen = lin_pen.abs().max(t.scalar(p).abs());
    let const_err = (const_total - w.lambda_gp).abs();
    report(
        5,
        self_loss <= 1e-6 && lin_pen <= 1e-6 && const_err <= 1e-6,
        format!("l(X,X) {self_loss:.3e}, linear-critic penalty {lin_pen:.3e}, constant-critic |total - lambda_gp| {const_err:.3e} (each <= 1e-6)"),
    );
}

#[test]
fn criterion_6_metric_closed_forms() {
    let _g = serial();
    let d = Dims3::new(12, 11, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = VolumeGrid::new(d, [1.0; 3], (0..d.len()).map(|_| rng.random_range(0.0f32..5.0)).collect()).unwrap();
    let p = SsimParams::default();
    let self_ssim = ssim(&x, &x, p, 5.0).unwrap();
    let (a, b, peak) = (1.5f64, 4.0f64, 5.0f64);
    let ca = VolumeGrid::filled(d, [1.0; 3], a as f32);
    let cb = VolumeGrid::filled(d, [1.0; 3], b as f32);
    let c1 = (p.k1 * peak).powi(2);
    let closed = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let const_err = (ssim(&ca, &cb, p, peak).unwrap() - closed).abs();
    let r = rmse(&ca, &cb).unwrap();
    let zero = VolumeGrid::filled(d, [1.0; 3], 0.0);
    let one = VolumeGrid::filled(d, [1.0; 3], 1.0);
    let arithmetic = r == 2.5
        && rmse(&zero, &one).unwrap() == 1.0
        && psnr(&zero, &one, 10.0).unwrap() == 20.0
        && psnr(&zero, &one, 100.0).unwrap() == 40.0
        && psnr(&x, &x, 5.0).unwrap() == f64::INFINITY;
    let sigma = 2.0;
    let profile: Vec<f64> = (0..401).map(|i| (-((i as f64 - 200.0) * 0.05).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let width = fwhm(&profile, 0.05).unwrap();
    let fwhm_err = (width - 2.355 * sigma).abs() / (2.355 * sigma);
    report(
        6,
        (self_ssim - 1.0).abs() <= 1e-12 && const_err <= 1e-9 && arithmetic && fwhm_err <= 0.02,
        format!("ssim(x,x) {self_ssim}, constant ssim error {const_err:.3e} (<= 1e-9), psnr/rmse exact {arithmetic}, fwhm {width:.4} vs {:.4} ({:.2}% <= 2%)", 2.355 * sigma, 100.0 * fwhm_err),
    );
}

#[test]
fn criterion_7_architecture() {
    let _g = serial();
    let cfg = ModelConfig::default();
    let desk = ModelShapes::new(GridSpec::desk().dims, build_geometry(&GeometryConfig::desk()).unwrap().proj_dims(1));
    let mut store = ParamStore::<f32>::new();
    let g = Generator::new(&cfg, &desk, &mut store).unwrap();
    store.init(&mut ChaCha8Rng::seed_from_u64(51));
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let nvox = desk.volume_shape().iter().product();
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect::<Vec<_>>();
    let proj = draw(desk.projection_shape().iter().product());
    let bp = draw(nvox);
    let mlem = draw(nvox);
    let img_p = |s: &ParamStore<f32>| {
        let mut t = Tape::<f32>::new();
        let x = g.inputs(&mut t, &proj, &bp, &mlem).unwrap();
        let o = g.forward(&mut t, s, &x).unwrap();
        t.value(o.img_p).to_vec()
    };
    let base = img_p(&store);
    let desk_channels = {
        let mut t = Tape::<f32>::new();
        let x = g.inputs(&mut t, &proj, &bp, &mlem).unwrap();
        let o = g.forward(&mut t, &store, &x).unwrap();
        t.shape(o.slices[0].fused)[0]
    };
    let plane = desk.ny * desk.nx;
    let nz = desk.nz;
    let mut isolated = true;
    for i in [0, 7, nz - 1] {
        let mut s = store.clone();
        let prefix = format!("pnet.slice{i:03}.");
        let ids: Vec<ParamId> = s.iter().filter(|(_, p)| p.name.starts_with(&prefix)).map(|(id, _)| id).collect();
        for id in ids {
            s.get_mut(id).values.iter_mut().for_each(|v| *v += 0.05);
        }
        let moved = img_p(&s);
        for z in 0..nz {
            let same = base[z * plane..(z + 1) * plane] == moved[z * plane..(z + 1) * plane];
            isolated &= same == (z != i);
        }
    }

    let paper_cfg = RunConfig::for_scale(Scale::Paper);
    let paper_geom = build_geometry(&paper_cfg.geometry).unwrap();
    let paper = ModelShapes::new(paper_cfg.grid.dims, paper_geom.proj_dims(1));
    let mut pstore = ParamStore::<f32>::new();
    let pg = Generator::with_groups(&paper_cfg.model, &paper, &mut pstore, 1).unwrap();
    pstore.init(&mut ChaCha8Rng::seed_from_u64(53));
    let mut t = Tape::<f32>::new();
    let n_proj: usize = paper.projection_shape().iter().product();
    let proj = t.constant(vec![0.5; n_proj], &paper.projection_shape()).unwrap();
    let bp0 = t.constant(vec![0.5; paper.ny * paper.nx], &[1, paper.ny, paper.nx]).unwrap();
    let tokens = pg.pnet.tokenize(&mut t, proj).unwrap();
    let resized = pg.pnet.resized_projections(&mut t, proj).unwrap();
    let tr = pg.pnet.slice_forward(&mut t, &pstore, 0, tokens, resized, bp0).unwrap();
    let fused = t.shape(tr.fused).to_vec();
    let slice_out = t.shape(tr.output).to_vec();
    let s = build_system_matrix(&paper_geom, &AngleSet::one_angle(), &paper_cfg.grid).unwrap();
    let s_shape = (s.n_rows(), s.n_cols());

    report(
        7,
        isolated
            && desk_channels == desk.n_modules + 2
            && fused == [21, 70, 70]
            && slice_out == [1, 70, 70]
            && s_shape == (19_456, 245_000),
        format!(
            "slice isolation {isolated}, desk fused channels {desk_channels}, paper fused {fused:?}, paper slice output {slice_out:?}, paper S {}x{}",
            s_shape.0, s_shape.1
        ),
    );
}

struct TrendRun {
    seed: u64,
    log: Vec<LogEntry>,
    report: MetricReport,
    secs: f64,
}

struct Trend {
    _dir: TempDir,
    dataset: Dataset,
    runs: Vec<TrendRun>,
    secs: f64,
}

const TREND_SEEDS: [u64; 3] = [0, 1, 2];

fn read_log(path: &Path) -> Vec<LogEntry> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<LogEntry>(l).unwrap().without_time())
        .collect()
}

fn trend_run(ds: &Dataset, seed: u64, out: &Path) -> TrendRun {
    let t0 = Instant::now();
    let shapes = ModelShapes::new(ds.manifest.grid.dims, ds.subjects[0].proj_one.dims());
    let net = TipNet::new(&ModelConfig::default(), &shapes, seed).unwrap();
    let cfg = TrainConfig {
        steps: 500,
        seed,
        checkpoint_interval: 0,
        holdout: (56..64).collect(),
        ..TrainConfig::default()
    };
    let (_, rep) = train(ds, net, &cfg, Some(out), None).unwrap();
    TrendRun {
        seed,
        log: read_log(&out.join("train_log.jsonl")),
        report: MetricReport::new("mlem_four", rep.heldout),
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn trend() -> &'static Trend {
    static TREND: OnceLock<Trend> = OnceLock::new();
    TREND.get_or_init(|| {
        let t0 = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let cfg = DatasetConfig {
            n_subjects: 64,
            seed: 0,
            counts_per_angle: 5e5,
            ..DatasetConfig::default()
        };
        make_dataset(&data, &GridSpec::desk(), &GeometryConfig::desk(), &cfg).unwrap();
        let dataset = Dataset::load(&data).unwrap();
        let runs = TREND_SEEDS
            .iter()
            .map(|&s| trend_run(&dataset, s, &dir.path().join(format!("seed{s}"))))
            .collect();
        Trend {
            _dir: dir,
            dataset,
            runs,
            secs: t0.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_8_trend() {
    let _g = serial();
    let tr = trend();
    let mut pass = tr.secs <= 45.0 * 60.0;
    let mut lines = Vec::new();
    for run in &tr.runs {
        let m = |name: &str| run.report.method(name).unwrap_or_else(|| panic!("{name} missing"));
        let (one, net, four) = (m("mlem_one"), m("tipnet"), m("mlem_four"));
        let mean = |a: &Option<tipnet::metrics::Aggregate>| a.as_ref().unwrap().mean;
        let margin = mean(&net.ssim) - mean(&one.ssim);
        let ref_ds = mean(&four.defect_size);
        let gap_net = (mean(&net.defect_size) - ref_ds).abs();
        let gap_one = (mean(&one.defect_size) - ref_ds).abs();
        let ok = margin >= 0.002 && gap_net < gap_one;
        pass &= ok;
        lines.push(format!(
            "seed {} ssim tipnet {:.4} vs mlem_one {:.4} (margin {margin:.4} >= 0.002), defect size gap {gap_net:.2} vs {gap_one:.2} ({:.0}s)",
            run.seed,
            mean(&net.ssim),
            mean(&one.ssim),
            run.secs
        ));
    }
    report(8, pass, format!("{}; total {:.0}s (<= 2700s)", lines.join("; "), tr.secs));
}

#[test]
fn criterion_9_determinism() {
    let _g = serial();
    let (a, na) = mlem_traces();
    let (b, nb) = mlem_traces();
    let bits = |t: &[Vec<f64>]| t.iter().flatten().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let mlem_same = bits(&a) == bits(&b) && na == nb;

    let g1 = gradient_suite();
    let g2 = gradient_suite();
    let key = |g: &[(String, Precision, f64, f64, f64, f64)]| {
        g.iter()
            .map(|(n, p, e, a, x, h)| (n.clone(), *p == Precision::F64, e.to_bits(), a.to_bits(), x.to_bits(), h.to_bits()))
            .collect::<Vec<_>>()
    };
    let grad_same = key(&g1) == key(&g2);

    let tr = trend();
    let first = &tr.runs[0];
    let dir = tempfile::tempdir().unwrap();
    let again = trend_run(&tr.dataset, first.seed, dir.path());
    let train_same = first.log == again.log && first.report == again.report;
    report(
        9,
        mlem_same && grad_same && train_same,
        format!(
            "mlem log identical {mlem_same}, gradient log identical {grad_same}, training log seed {} identical {train_same} ({} entries)",
            first.seed,
            first.log.len()
        ),
    );
}
