//! Training objective, AdamW, the training loop with checkpoints, evaluation
//! over input shifts, and the equivariance audit.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{self, Section};
use crate::data::{sample_task, shift_task, TaskCache, TaskSamplerConfig};
use crate::error::{Error, Result};
use crate::gp;
use crate::models::{Model, ModelConfig, Task};
use crate::nn::{Bound, ParamStore, Predictive};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    /// Clamp every element to `[-max, max]`.
    Value,
    /// Rescale the whole gradient so its global L2 norm is at most `max`.
    Norm,
}

impl fmt::Display for ClipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipMode::Value => "value",
            ClipMode::Norm => "norm",
        })
    }
}

impl FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" => Ok(ClipMode::Value),
            "norm" => Ok(ClipMode::Norm),
            _ => Err(Error::Config(format!(
                "unknown clip mode {s:?} (expected value or norm)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub weight_decay: f64,
    /// Seeds both the initial parameters and the stream of training tasks.
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 writes only the last.
    pub checkpoint_every: usize,
    /// Threads sharing the per-task work of a batch. Results do not depend
    /// on this value.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 16,
            clip: 0.5,
            clip_mode: ClipMode::Value,
            epochs: 20,
            iterations_per_epoch: 500,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_every: 500,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Invalid("clip must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid("weight_decay must be non-negative".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("iterations_per_epoch", self.iterations_per_epoch),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> u64 {
        (self.epochs * self.iterations_per_epoch) as u64
    }

    pub fn tasks_per_epoch(&self) -> usize {
        self.iterations_per_epoch * self.batch_size
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

impl Section for TrainConfig {
    const NAME: &'static str = "train";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("clip", self.clip.to_string()),
            ("clip_mode", self.clip_mode.to_string()),
            ("epochs", self.epochs.to_string()),
            ("iterations_per_epoch", self.iterations_per_epoch.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("workers", self.workers.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = config::parse_value(key, v)?,
            "batch_size" => self.batch_size = config::parse_value(key, v)?,
            "clip" => self.clip = config::parse_value(key, v)?,
            "clip_mode" => self.clip_mode = v.parse()?,
            "epochs" => self.epochs = config::parse_value(key, v)?,
            "iterations_per_epoch" => self.iterations_per_epoch = config::parse_value(key, v)?,
            "weight_decay" => self.weight_decay = config::parse_value(key, v)?,
            "seed" => self.seed = config::parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = config::parse_value(key, v)?,
            "workers" => self.workers = config::parse_value(key, v)?,
            _ => return Err(config::unknown_key(key)),
        }
        Ok(())
    }
}

/// Negative mean over tasks of the summed target log densities.
pub fn np_objective<'t>(model: &Model, p: &Bound<'t>, tasks: &[Task]) -> Result<Var<'t>> {
    if tasks.is_empty() {
        return Err(Error::Empty("np_objective batch"));
    }
    let mut total: Option<Var<'t>> = None;
    for t in tasks {
        let ll = model.log_likelihood(p, t)?;
        total = Some(match total {
            Some(acc) => acc.add(&ll)?,
            None => ll,
        });
    }
    Ok(total.expect("non-empty batch").scale(-1.0 / tasks.len() as f64))
}

/// Objective value and its gradient, one tape per task so memory stays at a
/// single task's graph. Per-task terms are combined in batch order, so the
/// result does not depend on `workers`.
pub fn objective_and_gradients(
    model: &Model,
    tasks: &[Task],
    workers: usize,
) -> Result<(f64, Vec<Tensor>)> {
    if tasks.is_empty() {
        return Err(Error::Empty("np_objective batch"));
    }
    let per_task = parallel_map(tasks, workers, |t| {
        let flag = |msg: String| {
            Error::NonFinite(format!(
                "{msg} (task seed {}, index {})",
                t.meta.seed, t.meta.index
            ))
        };
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let ll = model.log_likelihood(&p, t).map_err(|e| match e {
            Error::NonFinite(msg) => flag(msg),
            e => e,
        })?;
        let value = ll.value().item();
        if !value.is_finite() {
            return Err(flag(format!("log-likelihood {value}")));
        }
        let g = tape.backward(ll)?;
        Ok((value, p.grads(&g)))
    })?;
    let scale = -1.0 / tasks.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = model
        .params
        .values()
        .iter()
        .map(|v| vec![0.0; v.numel()])
        .collect();
    for (value, g) in &per_task {
        loss += value;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    let grads = grads
        .into_iter()
        .zip(model.params.values())
        .map(|(mut g, v)| {
            g.iter_mut().for_each(|x| *x *= scale);
            Tensor::new(v.shape().to_vec(), g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss * scale, grads))
}

/// Applies `f` to every item on up to `workers` scoped threads and returns
/// the results in input order.
pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Clips in place. `Value` clamps elements; `Norm` rescales by the global norm.
pub fn clip_gradients(grads: &mut [Tensor], max: f64, mode: ClipMode) -> Result<()> {
    if !(max > 0.0) {
        return Err(Error::Invalid("clip bound must be positive".into()));
    }
    match mode {
        ClipMode::Value => {
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = x.clamp(-max, max));
            }
        }
        ClipMode::Norm => {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let s = max / norm;
                for g in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW step: decay `theta *= 1 - lr * lambda`, then the bias-corrected
/// adaptive update.
pub fn optimizer_step(
    state: &mut AdamState,
    params: &mut ParamStore,
    grads: &[Tensor],
    opt: &AdamW,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Invalid(format!(
            "optimizer expects {n} tensors, got {} grads and {}/{} moments",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for i in 0..n {
        let shape = params.values()[i].shape();
        for other in [grads[i].shape(), state.m[i].shape(), state.v[i].shape()] {
            if other != shape {
                return Err(Error::shape("optimizer_step", shape, other));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - opt.learning_rate * opt.weight_decay;
    for (i, theta) in params.values_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, th) in theta.data_mut().iter_mut().enumerate() {
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *th = *th * decay - opt.learning_rate * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Seed of the training task stream, kept apart from cache seeds.
fn train_stream_seed(seed: u64) -> u64 {
    let digest = Sha256::digest(format!("train-stream/{seed}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// The batch used at global iteration `iteration` (0-based).
pub fn training_batch(
    sampler: &TaskSamplerConfig,
    train: &TrainConfig,
    iteration: u64,
) -> Result<Vec<Task>> {
    let stream = train_stream_seed(train.seed);
    (0..train.batch_size)
        .map(|j| {
            let index = iteration * train.batch_size as u64 + j as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            rng.set_stream(index);
            let mut t = sample_task(&mut rng, sampler)?;
            t.meta.seed = train.seed;
            t.meta.index = index;
            Ok(t)
        })
        .collect()
}

const CKPT_MAGIC: &[u8; 8] = b"TNPCKPT\0";
const CKPT_VERSION: u32 = 1;

/// Everything needed to resume training or evaluate a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub sampler: TaskSamplerConfig,
    /// Completed iterations.
    pub iteration: u64,
    pub adam: AdamState,
}

/// Hex SHA-256 of the `[model]` section, used to match checkpoints to configs.
pub fn model_config_hash(cfg: &ModelConfig) -> String {
    hex::encode(Sha256::digest(cfg.emit().as_bytes()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("implausible length {n}")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Format(format!("bad utf-8: {e}")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.len()?;
        let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u64(out, t.ndim() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn config_text(&self) -> String {
        format!(
            "{}\n{}\n{}",
            self.model.config.emit(),
            self.train.emit(),
            self.sampler.emit()
        )
    }

    /// Layout (little-endian): magic `TNPCKPT\0`, `u32` version, config text,
    /// 32-byte model config hash, `u64` iteration, `u64` parameter count, then
    /// per parameter its name and tensor, then the Adam step and moments in
    /// parameter order. Strings and tensors carry `u64` lengths and shapes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text());
        out.extend_from_slice(
            &hex::decode(model_config_hash(&self.model.config)).expect("hex digest"),
        );
        put_u64(&mut out, self.iteration);
        put_u64(&mut out, self.model.params.len() as u64);
        for (name, t) in self.model.params.iter() {
            put_str(&mut out, name);
            put_tensor(&mut out, t);
        }
        put_u64(&mut out, self.adam.step);
        for t in self.adam.m.iter().chain(&self.adam.v) {
            put_tensor(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
            )));
        }
        let text = r.string()?;
        let entries = config::parse_entries(&text)?;
        let mut model_cfg = ModelConfig::new(crate::models::Variant::Cnp);
        let mut train = TrainConfig::default();
        let mut sampler = TaskSamplerConfig::default();
        config::apply(&mut model_cfg, &entries)?;
        config::apply(&mut train, &entries)?;
        config::apply(&mut sampler, &entries)?;
        let hash = hex::encode(r.take(32)?);
        if hash != model_config_hash(&model_cfg) {
            return Err(Error::Format(
                "model config hash does not match the stored config".into(),
            ));
        }
        let iteration = r.u64()?;
        let mut model = Model::new(model_cfg, train.seed)?;
        let count = r.len()?;
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, model expects {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let name = r.string()?;
            let t = r.tensor()?;
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::Format(format!("shape mismatch for {name}")));
            }
            model.params.set(id, t);
        }
        let step = r.u64()?;
        let mut moments = (0..2 * count)
            .map(|_| r.tensor())
            .collect::<Result<Vec<_>>>()?;
        let v = moments.split_off(count);
        let adam = AdamState { step, m: moments, v };
        for (i, p) in model.params.values().iter().enumerate() {
            if adam.m[i].shape() != p.shape() || adam.v[i].shape() != p.shape() {
                return Err(Error::Format("optimizer moment shape mismatch".into()));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model,
            train,
            sampler,
            iteration,
            adam,
        })
    }

    /// Writes via a temporary file and rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Where training writes its artifacts. Unset paths are skipped.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    /// Directory for the diagnostic bundle written on a non-finite loss.
    pub diagnostics: Option<PathBuf>,
}

/// Trains from scratch, or continues `resume` up to `train.epochs *
/// train.iterations_per_epoch` iterations. `progress` sees every
/// `(iteration, loss)`.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sampler: &TaskSamplerConfig,
    resume: Option<Checkpoint>,
    outputs: &TrainOutputs,
    mut progress: impl FnMut(u64, f64),
) -> Result<Checkpoint> {
    train_cfg.validate()?;
    sampler.validate()?;
    let mut ckpt = match resume {
        Some(c) => {
            if model_config_hash(&c.model.config) != model_config_hash(model_cfg) {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different model config".into(),
                ));
            }
            Checkpoint {
                train: train_cfg.clone(),
                sampler: sampler.clone(),
                ..c
            }
        }
        None => {
            let model = Model::new(model_cfg.clone(), train_cfg.seed)?;
            let adam = AdamState::new(&model.params);
            Checkpoint {
                model,
                train: train_cfg.clone(),
                sampler: sampler.clone(),
                iteration: 0,
                adam,
            }
        }
    };
    let mut loss_out = match &outputs.loss_csv {
        Some(path) => {
            let fresh = ckpt.iteration == 0 || !path.exists();
            let f = if fresh {
                File::create(path)?
            } else {
                OpenOptions::new().append(true).open(path)?
            };
            let mut w = BufWriter::new(f);
            if fresh {
                writeln!(w, "iteration,loss")?;
            }
            Some(w)
        }
        None => None,
    };
    let opt = train_cfg.adamw();
    let total = train_cfg.total_iterations();
    while ckpt.iteration < total {
        let it = ckpt.iteration;
        let batch = training_batch(sampler, train_cfg, it)?;
        let (loss, mut grads) =
            match objective_and_gradients(&ckpt.model, &batch, train_cfg.workers) {
                Ok(r) => r,
                Err(Error::NonFinite(msg)) => {
                    let bundle = write_diagnostics(outputs, &ckpt, &batch, it)?;
                    return Err(Error::NonFinite(format!(
                        "training seed {}, iteration {it}: {msg}{bundle}",
                        train_cfg.seed
                    )));
                }
                Err(e) => return Err(e),
            };
        clip_gradients(&mut grads, train_cfg.clip, train_cfg.clip_mode)?;
        optimizer_step(&mut ckpt.adam, &mut ckpt.model.params, &grads, &opt)?;
        ckpt.iteration += 1;
        if let Some(w) = loss_out.as_mut() {
            writeln!(w, "{it},{loss}")?;
        }
        progress(it, loss);
        let due = train_cfg.checkpoint_every > 0
            && ckpt.iteration % train_cfg.checkpoint_every as u64 == 0;
        if due || ckpt.iteration == total {
            if let Some(w) = loss_out.as_mut() {
                w.flush()?;
            }
            if let Some(path) = &outputs.checkpoint {
                ckpt.write(path)?;
            }
        }
    }
    if let Some(w) = loss_out.as_mut() {
        w.flush()?;
    }
    Ok(ckpt)
}

fn write_diagnostics(
    outputs: &TrainOutputs,
    ckpt: &Checkpoint,
    batch: &[Task],
    iteration: u64,
) -> Result<String> {
    let Some(dir) = &outputs.diagnostics else {
        return Ok(String::new());
    };
    fs::create_dir_all(dir)?;
    let tasks = dir.join(format!("nonfinite-{iteration}.tasks"));
    TaskCache {
        config_hash: ckpt.sampler.hash(batch.len()),
        tasks: batch.to_vec(),
    }
    .write(&tasks)?;
    let state = dir.join(format!("nonfinite-{iteration}.ckpt"));
    ckpt.write(&state)?;
    Ok(format!(
        " (bundle: {} and {})",
        tasks.display(),
        state.display()
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub delta: f64,
    pub mean_ll: f64,
    pub stderr: f64,
    pub n_tasks: usize,
    pub seconds: f64,
}

impl MetricsRow {
    /// Mean and `sample std / sqrt(n)` of per-task values.
    pub fn from_samples(model: &str, delta: f64, samples: &[f64], seconds: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("metrics samples"));
        }
        let (mean, stderr) = mean_stderr(samples);
        Ok(MetricsRow {
            model: model.to_string(),
            delta,
            mean_ll: mean,
            stderr,
            n_tasks: samples.len(),
            seconds,
        })
    }
}

/// Sample mean and standard error; the error is 0 for a single sample.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean per-target log-likelihood of every task.
pub fn per_task_log_likelihoods(model: &Model, tasks: &[Task], workers: usize) -> Result<Vec<f64>> {
    parallel_map(tasks, workers, |t| {
        let ll = model.target_log_likelihoods(t)?;
        Ok(ll.data().iter().sum::<f64>() / t.num_targets() as f64)
    })
}

/// The same for the exact GP posterior under each task's own kernel.
pub fn oracle_log_likelihoods(tasks: &[Task]) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|t| {
            let spec = t.meta.kernel.as_ref().ok_or_else(|| {
                Error::Invalid(format!("task {} has no kernel recorded", t.meta.index))
            })?;
            gp::gp_predictive_ll(spec, &t.xc, &t.yc, &t.xt, &t.yt)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub workers: usize,
    /// Record wall-clock seconds; off keeps the CSV reproducible.
    pub timing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            workers: 1,
            timing: false,
        }
    }
}

/// One row per `delta`: every task shifted by `delta` and scored. The same
/// tasks are used for every shift.
pub fn evaluate(
    model: &Model,
    model_id: &str,
    tasks: &[Task],
    deltas: &[f64],
    opts: EvalOptions,
) -> Result<Vec<MetricsRow>> {
    if tasks.is_empty() {
        return Err(Error::Empty("evaluation cache"));
    }
    deltas
        .iter()
        .map(|&d| {
            let start = Instant::now();
            let shifted: Vec<Task> = tasks.iter().map(|t| shift_task(t, d)).collect();
            let ll = per_task_log_likelihoods(model, &shifted, opts.workers)?;
            let seconds = if opts.timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            MetricsRow::from_samples(model_id, d, &ll, seconds)
        })
        .collect()
}

pub const METRICS_HEADER: &str = "model,delta,mean_ll,stderr,n_tasks,seconds";

pub fn write_metrics_csv(rows: &[MetricsRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.model, r.delta, r.mean_ll, r.stderr, r.n_tasks, r.seconds
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("missing metrics header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("bad metrics row {l:?}")));
            }
            Ok(MetricsRow {
                model: f[0].to_string(),
                delta: config::parse_value("delta", f[1])?,
                mean_ll: config::parse_value("mean_ll", f[2])?,
                stderr: config::parse_value("stderr", f[3])?,
                n_tasks: config::parse_value("n_tasks", f[4])?,
                seconds: config::parse_value("seconds", f[5])?,
            })
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-3)`, maximized over paired entries.
pub fn max_relative_deviation(a: &Predictive, b: &Predictive) -> f64 {
    a.mean
        .data()
        .iter()
        .zip(b.mean.data())
        .chain(a.var.data().iter().zip(b.var.data()))
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d == 0.0 {
                0.0
            } else {
                d / x.abs().max(y.abs()).max(1e-3)
            }
        })
        .fold(0.0, f64::max)
}

/// Largest relative change of any predictive mean or variance when every
/// input of `task` is shifted by one of `taus`.
pub fn equivariance_audit(model: &Model, task: &Task, taus: &[f64]) -> Result<f64> {
    Ok(equivariance_witness(model, task, taus)?.0)
}

/// [`equivariance_audit`] together with the shift that attains the maximum.
pub fn equivariance_witness(model: &Model, task: &Task, taus: &[f64]) -> Result<(f64, f64)> {
    let base = model.predict(task)?;
    let mut worst = (0.0, 0.0);
    for &tau in taus {
        let dev = max_relative_deviation(&base, &model.predict(&shift_task(task, tau))?);
        if dev > worst.0 || dev.is_nan() {
            worst = (dev, tau);
        }
    }
    Ok(worst)
}
