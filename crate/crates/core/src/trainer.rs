//! Minibatch Adam training with per-epoch GZSL evaluation, best-H selection and
//! resumable checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, ZslDataset};
use crate::error::{Error, Result};
use crate::eval::{self, EvalMode, DEFAULT_TAU};
use crate::model::ZslVit;
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::{Graph, L1Reduction, Tensor};
use crate::objectives::LossWeights;
use crate::params::ParamStore;

pub const LOG_FILE: &str = "train_log.tsv";
pub const STATE_FILE: &str = "state.toml";
pub const BEST_DIR: &str = "best";
pub const FINAL_DIR: &str = "final";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine_decay: bool,
    /// Global gradient-norm cap; zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub l1_reduction: L1Reduction,
    /// Calibration used for the per-epoch GZSL evaluation.
    pub tau: f64,
    /// Evaluate every this many epochs (and after the last); zero disables.
    pub eval_every: usize,
    /// Write a resumable checkpoint every this many epochs; zero disables.
    pub checkpoint_every: usize,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            cosine_decay: false,
            grad_clip: 5.0,
            seed: 0,
            weights: LossWeights::default(),
            l1_reduction: L1Reduction::Mean,
            tau: DEFAULT_TAU,
            eval_every: 1,
            checkpoint_every: 0,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(k, format!("{b} outside (0, 1)")));
            }
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("divergence_threshold", self.divergence_threshold),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("{v} must be positive")));
            }
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be non-negative"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be non-negative"));
        }
        self.weights.validate()
    }
}

/// Adam moments aligned with a [`ParamStore`]'s order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. `grads` is aligned with `params`.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, _), g) in params.iter().zip(grads) {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in `{name}` at element {i}")));
        }
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn learning_rate(cfg: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    if cfg.cosine_decay && total_steps > 0 {
        let t = (step as f64 / total_steps as f64).min(1.0);
        cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    } else {
        cfg.learning_rate
    }
}

/// Losses of one epoch (batch-size weighted means) and its evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_set: f64,
    pub l_pre: f64,
    pub total: f64,
    /// GZSL unseen, seen and harmonic accuracies; `None` when not evaluated.
    pub u: Option<f64>,
    pub s: Option<f64>,
    pub h: Option<f64>,
}

impl EpochLog {
    pub fn header() -> &'static str {
        "epoch\tl_set\tl_pre\ttotal\tU\tS\tH"
    }

    pub fn row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        format!(
            "{}\t{:.10}\t{:.10}\t{:.10}\t{}\t{}\t{}",
            self.epoch,
            self.l_set,
            self.l_pre,
            self.total,
            opt(self.u),
            opt(self.s),
            opt(self.h)
        )
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub adam: AdamState,
    pub best_h: Option<f64>,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    step: u64,
    best_h: Option<f64>,
    best_epoch: Option<usize>,
}

impl TrainState {
    pub fn new(params: &ParamStore) -> Self {
        TrainState {
            epoch: 0,
            adam: AdamState::new(params),
            best_h: None,
            best_epoch: None,
            log: Vec::new(),
        }
    }

    /// Writes model, moments and counters into `dir`.
    pub fn save(&self, model: &ZslVit, dir: &Path) -> Result<()> {
        model.save(dir)?;
        let moments = dir.join("adam");
        fs::create_dir_all(&moments).map_err(|e| Error::io(&moments, e))?;
        for (i, (name, _)) in model.params().iter().enumerate() {
            write_tensor(&moments.join(format!("{name}.m.zvt")), &self.adam.m[i])?;
            write_tensor(&moments.join(format!("{name}.v.zvt")), &self.adam.v[i])?;
        }
        let meta = StateMeta {
            epoch: self.epoch,
            step: self.adam.step,
            best_h: self.best_h,
            best_epoch: self.best_epoch,
        };
        let path = dir.join(STATE_FILE);
        fs::write(&path, toml::to_string(&meta).map_err(|e| Error::Contract(e.to_string()))?)
            .map_err(|e| Error::io(&path, e))?;
        write_log(&dir.join(LOG_FILE), &self.log)
    }

    pub fn load(dir: &Path) -> Result<(ZslVit, TrainState)> {
        let model = ZslVit::load(dir)?;
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: StateMeta = toml::from_str(&text).map_err(|e| Error::format(&path, None, e.message().to_string()))?;
        let moments = dir.join("adam");
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in model.params().iter() {
            for (buf, kind) in [(&mut m, "m"), (&mut v, "v")] {
                let tp = moments.join(format!("{name}.{kind}.zvt"));
                let t = read_tensor(&tp)?;
                if t.shape() != p.shape() {
                    return Err(Error::format(&tp, None, format!("moment shape {:?} vs parameter {:?}", t.shape(), p.shape())));
                }
                buf.push(t);
            }
        }
        let log = read_log(&dir.join(LOG_FILE))?;
        Ok((
            model,
            TrainState {
                epoch: meta.epoch,
                adam: AdamState { step: meta.step, m, v },
                best_h: meta.best_h,
                best_epoch: meta.best_epoch,
                log,
            },
        ))
    }
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = String::new();
    writeln!(s, "{}", EpochLog::header()).unwrap();
    for e in log {
        writeln!(s, "{}", e.row()).unwrap();
    }
    s
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    fs::write(path, format_log(log)).map_err(|e| Error::io(path, e))
}

fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, r: &str| Error::format(path, Some(line), r.to_string());
    let mut out = Vec::new();
    for (i, row) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(i + 1, "expected 7 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        let opt = |s: &str| if s == "-" { Ok(None) } else { num(s).map(Some) };
        out.push(EpochLog {
            epoch: f[0].parse().map_err(|_| bad(i + 1, "bad epoch"))?,
            l_set: num(f[1])?,
            l_pre: num(f[2])?,
            total: num(f[3])?,
            u: opt(f[4])?,
            s: opt(f[5])?,
            h: opt(f[6])?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters of the best-H epoch, when any evaluation ran.
    pub best: Option<ParamStore>,
}

/// Trains `model` on the seen training split, continuing from `resume` if given.
/// With `out` set, the loss log, periodic checkpoints, the best-H model and the
/// final state are written there.
pub fn train(
    model: &mut ZslVit,
    ds: &ZslDataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::TrainSeen);
    if train_idx.is_empty() {
        return Err(Error::Contract("no seen-class training images".into()));
    }
    if ds.attr_dim() != model.config().attr_dim {
        return Err(Error::dim(
            "train",
            format!("dataset has {} attributes, model expects {}", ds.attr_dim(), model.config().attr_dim),
        ));
    }
    let mut state = resume.unwrap_or_else(|| TrainState::new(model.params()));
    if state.adam.m.len() != model.params().len() {
        return Err(Error::Contract("resume state does not match the model".into()));
    }
    let can_eval = !ds.indices(Split::TestSeen).is_empty() && !ds.indices(Split::TestUnseen).is_empty();
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut best: Option<ParamStore> = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in state.epoch + 1..=cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut l_set, mut l_pre, mut total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &ds.images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| ds.samples[i].class_id).collect();
            let mut g = Graph::new();
            let pv = model.params().attach(&mut g, true);
            let (loss, b) = model.loss(&mut g, &pv, &images, &labels, &ds.prototypes, &cfg.weights, cfg.l1_reduction)?;
            if !b.total.is_finite() || b.total > cfg.divergence_threshold {
                return Err(Error::Numerical(format!(
                    "diverged at epoch {epoch}, step {}: l_set={} l_pre={} total={}",
                    state.adam.step + 1,
                    b.l_set,
                    b.l_pre,
                    b.total
                )));
            }
            g.backward(loss)?;
            let mut grads = Vec::with_capacity(model.params().len());
            for (name, p) in model.params().iter() {
                let v = pv.get(name)?;
                grads.push(g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())));
            }
            drop(g);
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let lr = learning_rate(cfg, state.adam.step, total_steps);
            adam_step(model.params_mut(), &grads, &mut state.adam, lr, cfg)?;
            let w = batch.len() as f64;
            l_set += b.l_set * w;
            l_pre += b.l_pre * w;
            total += b.total * w;
        }
        let n = train_idx.len() as f64;
        let mut entry = EpochLog {
            epoch,
            l_set: l_set / n,
            l_pre: l_pre / n,
            total: total / n,
            u: None,
            s: None,
            h: None,
        };
        let due = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        if can_eval && due {
            let r = eval::evaluate(&*model, ds, EvalMode::Gzsl, cfg.tau)?;
            entry.u = r.u;
            entry.s = r.s;
            entry.h = r.h;
            let h = r.h.unwrap_or(0.0);
            if state.best_h.is_none_or(|b| h > b) {
                state.best_h = Some(h);
                state.best_epoch = Some(epoch);
                best = Some(model.params().clone());
                if let Some(dir) = out {
                    model.save(&dir.join(BEST_DIR))?;
                }
            }
        }
        log::info!("{}", entry.row());
        state.log.push(entry);
        state.epoch = epoch;
        if let Some(dir) = out {
            write_log(&dir.join(LOG_FILE), &state.log)?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                state.save(model, &checkpoint_dir(dir, epoch))?;
            }
        }
    }
    if let Some(dir) = out {
        state.save(model, &dir.join(FINAL_DIR))?;
    }
    Ok(TrainOutcome { state, best })
}

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("ckpt-{epoch:04}"))
}
