//! WGAN-GP training of TIP-Net: Adam, the critic/generator alternation,
//! JSON-lines logging, checkpoints and held-out evaluation.
//!
//! Each cycle draws one batch, runs the generator once (keeping its tape),
//! takes `critic_steps_per_gen` critic updates against those outputs with
//! fresh interpolation weights, then scores the same outputs with the updated
//! critic for the generator update.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Real, Tape};
use crate::error::{Error, Result};
use crate::losses::{critic_objective, generator_objective, GeneratorSample, LossWeights};
use crate::metrics::{evaluate, SubjectMetrics};
use crate::model::{Prepared, TipNet};
use crate::phantom::{Dataset, Subject};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub critic_steps_per_gen: usize,
    pub seed: u64,
    /// Write a checkpoint every this many generator steps (0: final only).
    pub checkpoint_interval: usize,
    /// Leave-one-out: exclude this subject from training and report its metrics.
    pub fold_index: Option<usize>,
    /// Further subjects kept out of training and evaluated at the end.
    pub holdout: Vec<usize>,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 2,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            critic_steps_per_gen: 5,
            seed: 0,
            checkpoint_interval: 100,
            fold_index: None,
            holdout: Vec::new(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be >= 1".into());
        }
        if self.critic_steps_per_gen == 0 {
            return bad("critic_steps_per_gen must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("Adam betas must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam moments for a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<T: Real>(store: &ParamStore<T>, ids: &[ParamId]) -> Self {
        let zeros = || ids.iter().map(|&id| vec![0.0; store.get(id).values.len()]).collect();
        OptimState {
            step: 0,
            ids: ids.to_vec(),
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }
}

/// Xavier-uniform weights, zero biases, in registration order.
pub fn xavier_init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R) {
    store.init(rng);
}

/// Bias-corrected Adam update of every parameter in `state`. Parameters
/// without an entry in `grads` see a zero gradient.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Vec<T>)],
    state: &mut OptimState,
    hp: AdamParams,
) -> Result<()> {
    let by_id: HashMap<ParamId, &[T]> = grads.iter().map(|(id, g)| (*id, g.as_slice())).collect();
    for (id, g) in &by_id {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {} at element {i}",
                store.get(*id).name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (k, &id) in state.ids.iter().enumerate() {
        let g = by_id.get(&id).copied();
        let p = store.get_mut(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.values.len() {
            let gi = g.map_or(0.0, |g| g[i].f64());
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            let update = hp.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
            p.values[i] = T::of(p.values[i].f64() - update);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Critic {
        phase: String,
        step: usize,
        iter: usize,
        total: f64,
        wasserstein: f64,
        penalty: f64,
        wall_time: f64,
    },
    Generator {
        phase: String,
        step: usize,
        total: f64,
        main: f64,
        intermediate: f64,
        adversarial: f64,
        batch: Vec<String>,
        wall_time: f64,
    },
}

impl LogEntry {
    /// The entry with its wall time zeroed, for run-to-run comparison.
    pub fn without_time(&self) -> LogEntry {
        let mut e = self.clone();
        match &mut e {
            LogEntry::Critic { wall_time, .. } | LogEntry::Generator { wall_time, .. } => *wall_time = 0.0,
        }
        e
    }
}

/// Optimiser state and bookkeeping across one or more training phases.
pub struct Trainer {
    pub net: TipNet,
    pub cfg: TrainConfig,
    gen_state: OptimState,
    critic_state: OptimState,
    rng: ChaCha8Rng,
    pub log: Vec<LogEntry>,
    sink: Option<BufWriter<File>>,
    out_dir: Option<PathBuf>,
    start: Instant,
}

/// Where the trained model ended up and how it did on held-out subjects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_model: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub trained_on: Vec<String>,
    pub heldout: Vec<SubjectMetrics>,
}

impl Trainer {
    pub fn new(net: TipNet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let gen_state = OptimState::new(&net.store, &net.generator_ids());
        let critic_state = OptimState::new(&net.store, &net.critic_ids());
        Ok(Trainer {
            net,
            cfg: cfg.clone(),
            gen_state,
            critic_state,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e),
            log: Vec::new(),
            sink: None,
            out_dir: None,
            start: Instant::now(),
        })
    }

    /// Mirror log lines to `<dir>/train_log.jsonl` and write checkpoints there.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.sink = Some(BufWriter::new(f));
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    fn record(&mut self, e: LogEntry) -> Result<()> {
        if let (Some(sink), Some(dir)) = (&mut self.sink, &self.out_dir) {
            let line = serde_json::to_string(&e)?;
            writeln!(sink, "{line}").map_err(|err| Error::io(dir.join("train_log.jsonl"), err))?;
        }
        self.log.push(e);
        Ok(())
    }

    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    /// Run `steps` generator updates over `samples` (which must carry targets).
    pub fn fit(&mut self, samples: &[Prepared], steps: usize, phase: &str) -> Result<Vec<PathBuf>> {
        if samples.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.target.is_none()) {
            return Err(Error::Dataset(format!("{} has no training target", s.id)));
        }
        let mut order: Vec<usize> = Vec::new();
        let mut checkpoints = Vec::new();
        for step in 0..steps {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            while batch.len() < self.cfg.batch_size {
                if order.is_empty() {
                    order = (0..samples.len()).collect();
                    order.shuffle(&mut self.rng);
                }
                batch.push(order.pop().expect("refilled above"));
            }
            self.cycle(samples, &batch, step, phase)?;
            let interval = self.cfg.checkpoint_interval;
            if interval > 0 && (step + 1) % interval == 0 && step + 1 < steps {
                if let Some(dir) = &self.out_dir {
                    let stem = dir.join(format!("{phase}_step{:06}", step + 1));
                    checkpoints.push(self.net.save(&stem)?);
                }
            }
        }
        if let Some(sink) = &mut self.sink {
            sink.flush().map_err(|e| Error::io(self.out_dir.clone().unwrap_or_default(), e))?;
        }
        Ok(checkpoints)
    }

    fn cycle(&mut self, samples: &[Prepared], batch: &[usize], step: usize, phase: &str) -> Result<()> {
        let w = self.cfg.loss;
        let net = &self.net;
        let vshape = net.shapes.volume_shape();

        let mut gt = Tape::<f32>::new();
        let mut gen_samples = Vec::with_capacity(batch.len());
        for &k in batch {
            let s = &samples[k];
            let x = net.generator.inputs(&mut gt, &s.proj, &s.bp, &s.mlem)?;
            let o = net.generator.forward(&mut gt, &net.store, &x)?;
            let target = gt.constant(s.target.clone().expect("checked in fit"), &vshape)?;
            gen_samples.push(GeneratorSample {
                output: o.output,
                img_p: Some(o.img_p),
                target,
            });
        }
        let fakes: Vec<Vec<f32>> = gen_samples.iter().map(|g| gt.value(g.output).to_vec()).collect();

        for iter in 0..self.cfg.critic_steps_per_gen {
            let u: Vec<f64> = batch.iter().map(|_| self.rng.random::<f64>()).collect();
            let mut ct = Tape::<f32>::new();
            let mut real = Vec::new();
            let mut fake = Vec::new();
            for (&k, f) in batch.iter().zip(&fakes) {
                real.push(ct.constant(samples[k].target.clone().expect("checked in fit"), &vshape)?);
                fake.push(ct.constant(f.clone(), &vshape)?);
            }
            let critic = self.net.critic.bind(&self.net.store);
            let terms = critic_objective(&mut ct, &critic, &real, &fake, &u, w.lambda_gp)?;
            let grads = ct.backward(terms.total)?.params(&ct);
            let entry = LogEntry::Critic {
                phase: phase.to_string(),
                step,
                iter,
                total: ct.scalar(terms.total) as f64,
                wasserstein: ct.scalar(terms.wasserstein) as f64,
                penalty: ct.scalar(terms.penalty) as f64,
                wall_time: self.elapsed(),
            };
            adam_step(&mut self.net.store, &grads, &mut self.critic_state, self.cfg.adam())?;
            self.record(entry)?;
        }

        let critic = self.net.critic.bind(&self.net.store);
        let terms = generator_objective(&mut gt, &gen_samples, &critic, &w)?;
        let total = gt.scalar(terms.total) as f64;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("generator loss diverged at step {step}")));
        }
        let grads = gt.backward(terms.total)?.params(&gt);
        let critic_ids: BTreeSet<ParamId> = self.critic_state.ids().iter().copied().collect();
        let grads: Vec<_> = grads.into_iter().filter(|(id, _)| !critic_ids.contains(id)).collect();
        let entry = LogEntry::Generator {
            phase: phase.to_string(),
            step,
            total,
            main: gt.scalar(terms.main) as f64,
            intermediate: gt.scalar(terms.intermediate) as f64,
            adversarial: gt.scalar(terms.adversarial) as f64,
            batch: batch.iter().map(|&k| samples[k].id.clone()).collect(),
            wall_time: self.elapsed(),
        };
        drop(gt);
        adam_step(&mut self.net.store, &grads, &mut self.gen_state, self.cfg.adam())?;
        self.record(entry)
    }
}

pub fn prepare_subject(s: &Subject) -> Result<Prepared> {
    Prepared::new(&s.id, &s.proj_one, &s.bp_one, &s.mlem_one, Some(&s.mlem_four))
}

/// Split a dataset into training and held-out indices per `cfg`.
pub fn split(n: usize, cfg: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut held: BTreeSet<usize> = cfg.holdout.iter().copied().collect();
    held.extend(cfg.fold_index);
    if let Some(&bad) = held.iter().find(|&&k| k >= n) {
        return Err(Error::Config(format!("held-out index {bad} outside a dataset of {n}")));
    }
    let train: Vec<usize> = (0..n).filter(|k| !held.contains(k)).collect();
    if train.is_empty() {
        return Err(Error::Dataset("no subjects left for training".into()));
    }
    Ok((train, held.into_iter().collect()))
}

/// Metrics of every method against the four-angle reference for one subject.
pub fn evaluate_subject(net: &TipNet, s: &Subject) -> Result<Vec<SubjectMetrics>> {
    let inf = net.infer(&s.proj_one, &s.bp_one, &s.mlem_one)?;
    let myo = Some(s.masks.myocardium.as_slice());
    let bp = Some(s.masks.blood_pool.as_slice());
    [("mlem_one", &s.mlem_one), ("img_p", &inf.img_p), ("tipnet", &inf.output), ("mlem_four", &s.mlem_four)]
        .into_iter()
        .map(|(method, x)| {
            Ok(SubjectMetrics {
                subject: s.id.clone(),
                method: method.to_string(),
                has_defect: s.has_defect,
                values: evaluate(x, &s.mlem_four, myo, bp)?,
            })
        })
        .collect()
}

/// Train on `dataset` (minus held-out subjects) and evaluate the held-out ones.
/// With `pretrain`, the model first fits that dataset for `pretrain_steps`.
pub fn train(
    dataset: &Dataset,
    net: TipNet,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    pretrain: Option<(&Dataset, usize)>,
) -> Result<(TipNet, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let (train_idx, held_idx) = split(dataset.len(), cfg)?;
    let mut trainer = Trainer::new(net, cfg)?;
    if let Some(dir) = out_dir {
        trainer = trainer.with_output(dir)?;
    }
    let mut checkpoints = Vec::new();
    if let Some((pre, steps)) = pretrain {
        let samples = pre.subjects.iter().map(prepare_subject).collect::<Result<Vec<_>>>()?;
        checkpoints.extend(trainer.fit(&samples, steps, "pretrain")?);
    }
    let samples = train_idx
        .iter()
        .map(|&k| prepare_subject(&dataset.subjects[k]))
        .collect::<Result<Vec<_>>>()?;
    checkpoints.extend(trainer.fit(&samples, cfg.steps, "train")?);

    let held_ids: BTreeSet<&str> = held_idx.iter().map(|&k| dataset.subjects[k].id.as_str()).collect();
    for e in &trainer.log {
        if let LogEntry::Generator { phase, batch, .. } = e {
            if phase == "train" {
                if let Some(id) = batch.iter().find(|id| held_ids.contains(id.as_str())) {
                    return Err(Error::Dataset(format!("held-out subject {id} appeared in a training batch")));
                }
            }
        }
    }

    let final_model = match out_dir {
        Some(dir) => Some(trainer.net.save(dir.join("final"))?),
        None => None,
    };
    let mut heldout = Vec::new();
    for &k in &held_idx {
        heldout.extend(evaluate_subject(&trainer.net, &dataset.subjects[k])?);
    }
    let report = TrainReport {
        final_model,
        checkpoints,
        trained_on: train_idx.iter().map(|&k| dataset.subjects[k].id.clone()).collect(),
        heldout,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("train_report.json");
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok((trainer.net, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", &[values.len()], crate::autodiff::Init::Zeros).unwrap();
        s.get_mut(id).values = values;
        (s, id)
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut s, id) = store_with(vec![1.0, -2.0, 0.5]);
        let mut st = OptimState::new(&s, &[id]);
        let hp = TrainConfig::default().adam();
        adam_step(&mut s, &[(id, vec![0.3, -7.0, 1e-3])], &mut st, hp).unwrap();
        let v = &s.get(id).values;
        assert!((v[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((v[1] - (-2.0 + 1e-4)).abs() < 1e-9);
        assert!((v[2] - (0.5 - 1e-4)).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store_with(vec![1.0, 2.0]);
        let mut st = OptimState::new(&s, &[id]);
        for _ in 0..10 {
            adam_step(&mut s, &[(id, vec![0.0, 0.0])], &mut st, TrainConfig::default().adam()).unwrap();
        }
        assert_eq!(s.get(id).values, vec![1.0, 2.0]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let (mut s, id) = store_with(vec![1.0]);
        let mut st = OptimState::new(&s, &[id]);
        let r = adam_step(&mut s, &[(id, vec![f64::NAN])], &mut st, TrainConfig::default().adam());
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert_eq!(s.get(id).values, vec![1.0]);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        for c in [
            TrainConfig { steps: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { adam_beta2: 1.0, ..TrainConfig::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn split_excludes_fold_and_holdout() {
        let cfg = TrainConfig {
            fold_index: Some(1),
            holdout: vec![3],
            ..TrainConfig::default()
        };
        let (t, h) = split(5, &cfg).unwrap();
        assert_eq!(t, vec![0, 2, 4]);
        assert_eq!(h, vec![1, 3]);
        assert!(split(2, &TrainConfig { fold_index: Some(2), ..TrainConfig::default() }).is_err());
    }
}
