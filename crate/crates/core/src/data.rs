//! Synthetic regression tasks drawn from Gaussian processes, input shifts, and
//! the binary task cache.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::config::{self, Section};
use crate::error::{Error, Result};
use crate::gp;
use crate::models::{Task, TaskMeta};
use crate::tensor::Tensor;

/// Covariance family. The `*Printed` variants follow an alternative written
/// form of the same kernel; see [`KernelSpec::eval`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    Se,
    Periodic,
    PeriodicPrinted,
    Matern52,
    Matern52Printed,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 5] = [
        KernelFamily::Se,
        KernelFamily::Periodic,
        KernelFamily::PeriodicPrinted,
        KernelFamily::Matern52,
        KernelFamily::Matern52Printed,
    ];

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Result<Self> {
        Self::ALL
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown kernel tag {t}")))
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Se => "se",
            KernelFamily::Periodic => "periodic",
            KernelFamily::PeriodicPrinted => "periodic-printed",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::Matern52Printed => "matern52-printed",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel family {s:?}")))
    }
}

/// A stationary kernel with unit signal variance plus observation noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub noise_std: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscale: f64, noise_std: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::Invalid(format!(
                "lengthscale must be positive, got {lengthscale}"
            )));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::Invalid(format!(
                "noise std must be non-negative, got {noise_std}"
            )));
        }
        Ok(KernelSpec {
            family,
            lengthscale,
            noise_std,
        })
    }

    /// Noise-free covariance between two inputs; depends on `|x - x'|` only.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        let r = x
            .iter()
            .zip(x2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let l = self.lengthscale;
        match self.family {
            KernelFamily::Se => (-r * r / (2.0 * l * l)).exp(),
            KernelFamily::Periodic => {
                let s = (PI * r / l).sin();
                (-2.0 * s * s).exp()
            }
            KernelFamily::PeriodicPrinted => {
                let s = (PI * r / l).sin();
                (-2.0 * (s * s).powi(2)).exp()
            }
            KernelFamily::Matern52 => matern52(r, l),
            KernelFamily::Matern52Printed => matern52_bessel(r, l * l),
        }
    }

    /// Covariance of noisy observations at inputs `i` and `j` of one draw.
    pub fn eval_obs(&self, x: &[f64], x2: &[f64], same_point: bool) -> f64 {
        let noise = if same_point {
            self.noise_std * self.noise_std
        } else {
            0.0
        };
        self.eval(x, x2) + noise
    }
}

/// `(1 + sqrt(5) r / l + 5 r^2 / (3 l^2)) exp(-sqrt(5) r / l)`.
pub fn matern52(r: f64, l: f64) -> f64 {
    let a = 5f64.sqrt() * r / l;
    (1.0 + a + a * a / 3.0) * (-a).exp()
}

/// Modified Bessel function of the second kind, order 5/2.
pub fn bessel_k52(z: f64) -> f64 {
    (PI / (2.0 * z)).sqrt() * (-z).exp() * (1.0 + 3.0 / z + 3.0 / (z * z))
}

/// `2^{1-nu} / Gamma(nu) z^nu K_nu(z)` at `nu = 5/2`, `z = sqrt(5) r / scale`.
pub fn matern52_bessel(r: f64, scale: f64) -> f64 {
    let z = 5f64.sqrt() * r / scale;
    if z == 0.0 {
        return 1.0;
    }
    // Gamma(5/2) = 3 sqrt(pi) / 4
    let gamma = 0.75 * PI.sqrt();
    2f64.powf(-1.5) / gamma * z.powf(2.5) * bessel_k52(z)
}

/// Distribution of scalar inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InputDistribution {
    Uniform {
        low: f64,
        high: f64,
    },
    /// Equal mixture of `U(-4, -1)` and `U(1, 4)`.
    Bimodal,
}

impl InputDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        match *self {
            InputDistribution::Uniform { low, high } => {
                (0..n).map(|_| rng.gen_range(low..high)).collect()
            }
            InputDistribution::Bimodal => sample_bimodal_inputs(rng, n),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            InputDistribution::Uniform { low, high }
                if !(low < high && low.is_finite() && high.is_finite()) =>
            {
                Err(Error::Invalid(format!(
                    "degenerate input range [{low}, {high}]"
                )))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for InputDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputDistribution::Uniform { low, high } => write!(f, "uniform:{low}:{high}"),
            InputDistribution::Bimodal => f.write_str("bimodal"),
        }
    }
}

impl FromStr for InputDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "bimodal" {
            return Ok(InputDistribution::Bimodal);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["uniform", lo, hi] => Ok(InputDistribution::Uniform {
                low: config::parse_value("uniform low", lo)?,
                high: config::parse_value("uniform high", hi)?,
            }),
            _ => Err(Error::Config(format!(
                "expected `uniform:LOW:HIGH` or `bimodal`, got {s:?}"
            ))),
        }
    }
}

/// Each input is drawn from `U(-4, -1)` or `U(1, 4)` with probability 1/2.
pub fn sample_bimodal_inputs<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                rng.gen_range(1.0..4.0)
            } else {
                rng.gen_range(-4.0..-1.0)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSamplerConfig {
    /// Inclusive range of the context count.
    pub min_context: usize,
    pub max_context: usize,
    pub num_targets: usize,
    pub context_inputs: InputDistribution,
    pub target_inputs: InputDistribution,
    pub shift: f64,
    pub kernels: Vec<KernelFamily>,
    pub log_lengthscale_low: f64,
    pub log_lengthscale_high: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskSamplerConfig {
    fn default() -> Self {
        TaskSamplerConfig {
            min_context: 1,
            max_context: 64,
            num_targets: 128,
            context_inputs: InputDistribution::Uniform {
                low: -2.0,
                high: 2.0,
            },
            target_inputs: InputDistribution::Uniform {
                low: -3.0,
                high: 3.0,
            },
            shift: 0.0,
            kernels: vec![
                KernelFamily::Se,
                KernelFamily::Periodic,
                KernelFamily::Matern52,
            ],
            log_lengthscale_low: 0.25f64.ln(),
            log_lengthscale_high: 4f64.ln(),
            noise_std: 0.2,
            seed: 0,
        }
    }
}

impl TaskSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_context == 0 || self.min_context > self.max_context {
            return Err(Error::Invalid(format!(
                "context range [{}, {}] must be non-empty with a positive minimum",
                self.min_context, self.max_context
            )));
        }
        if self.num_targets == 0 {
            return Err(Error::Invalid("num_targets must be positive".into()));
        }
        self.context_inputs.validate()?;
        self.target_inputs.validate()?;
        if !self.shift.is_finite() {
            return Err(Error::Invalid("shift must be finite".into()));
        }
        if self.kernels.is_empty() {
            return Err(Error::Invalid(
                "at least one kernel family is required".into(),
            ));
        }
        if !(self.log_lengthscale_low <= self.log_lengthscale_high) {
            return Err(Error::Invalid("lengthscale log-range is inverted".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Invalid("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the emitted config plus the task count.
    pub fn hash(&self, count: usize) -> String {
        let mut h = Sha256::new();
        h.update(self.emit().as_bytes());
        h.update(format!("count = {count}\n").as_bytes());
        hex::encode(h.finalize())
    }
}

impl Section for TaskSamplerConfig {
    const NAME: &'static str = "data";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("min_context", self.min_context.to_string()),
            ("max_context", self.max_context.to_string()),
            ("num_targets", self.num_targets.to_string()),
            ("context_inputs", self.context_inputs.to_string()),
            ("target_inputs", self.target_inputs.to_string()),
            ("shift", self.shift.to_string()),
            ("kernels", config::join(&self.kernels)),
            ("log_lengthscale_low", self.log_lengthscale_low.to_string()),
            (
                "log_lengthscale_high",
                self.log_lengthscale_high.to_string(),
            ),
            ("noise_std", self.noise_std.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "min_context" => self.min_context = config::parse_value(key, v)?,
            "max_context" => self.max_context = config::parse_value(key, v)?,
            "num_targets" => self.num_targets = config::parse_value(key, v)?,
            "context_inputs" => self.context_inputs = v.parse()?,
            "target_inputs" => self.target_inputs = v.parse()?,
            "shift" => self.shift = config::parse_value(key, v)?,
            "kernels" => self.kernels = config::parse_list(key, v)?,
            "log_lengthscale_low" => self.log_lengthscale_low = config::parse_value(key, v)?,
            "log_lengthscale_high" => self.log_lengthscale_high = config::parse_value(key, v)?,
            "noise_std" => self.noise_std = config::parse_value(key, v)?,
            "seed" => self.seed = config::parse_value(key, v)?,
            _ => return Err(config::unknown_key(key)),
        }
        Ok(())
    }
}

/// Independent stream for task `index` under `seed`.
pub fn task_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws one task: kernel family, log-uniform lengthscale, context count,
/// inputs, then joint outputs from the noisy GP. Inputs are sampled
/// unshifted and `cfg.shift` is added afterwards.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R, cfg: &TaskSamplerConfig) -> Result<Task> {
    cfg.validate()?;
    let family = cfg.kernels[rng.gen_range(0..cfg.kernels.len())];
    let log_l = if cfg.log_lengthscale_low == cfg.log_lengthscale_high {
        cfg.log_lengthscale_low
    } else {
        rng.gen_range(cfg.log_lengthscale_low..cfg.log_lengthscale_high)
    };
    let spec = KernelSpec::new(family, log_l.exp(), cfg.noise_std)?;
    let nc = rng.gen_range(cfg.min_context..=cfg.max_context);
    let nt = cfg.num_targets;
    let xc = cfg.context_inputs.sample(rng, nc);
    let xt = cfg.target_inputs.sample(rng, nt);
    let xs: Vec<f64> = xc.iter().chain(&xt).copied().collect();
    let y = sample_gp(rng, &spec, &xs)?;
    let task = Task {
        xc: Tensor::column(&xc),
        yc: Tensor::column(&y[..nc]),
        xt: Tensor::column(&xt),
        yt: Tensor::column(&y[nc..]),
        meta: TaskMeta {
            kernel: Some(spec),
            seed: 0,
            index: 0,
            shift: 0.0,
        },
    };
    Ok(shift_task(&task, cfg.shift))
}

/// One joint draw of noisy GP observations at scalar inputs `xs`.
pub fn sample_gp<R: Rng + ?Sized>(rng: &mut R, spec: &KernelSpec, xs: &[f64]) -> Result<Vec<f64>> {
    let n = xs.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = spec.eval_obs(&[xs[i]], &[xs[j]], i == j);
        }
    }
    let (l, _) = gp::cholesky_jittered(&k, n, 1e-10)?;
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok((0..n)
        .map(|i| (0..=i).map(|j| l[i * n + j] * eps[j]).sum())
        .collect())
}

/// `count` tasks, task `i` drawn from [`task_rng`]`(cfg.seed, i)`.
pub fn sample_tasks(cfg: &TaskSamplerConfig, count: usize) -> Result<Vec<Task>> {
    (0..count)
        .map(|i| {
            let mut rng = task_rng(cfg.seed, i as u64);
            let mut t = sample_task(&mut rng, cfg)?;
            t.meta.seed = cfg.seed;
            t.meta.index = i as u64;
            Ok(t)
        })
        .collect()
}

/// Adds `delta` to every context and target input; outputs are untouched.
pub fn shift_task(task: &Task, delta: f64) -> Task {
    if delta == 0.0 {
        return task.clone();
    }
    let mut t = task.clone();
    t.xc = task.xc.map(|x| x + delta);
    t.xt = task.xt.map(|x| x + delta);
    t.meta.shift = task.meta.shift + delta;
    t
}

const CACHE_MAGIC: &[u8; 8] = b"TNPTASKS";
const CACHE_VERSION: u32 = 1;

/// Tasks plus the hash of the config that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCache {
    pub config_hash: String,
    pub tasks: Vec<Task>,
}

impl TaskCache {
    /// Layout (little-endian): magic `TNPTASKS`, `u32` version, 32-byte
    /// SHA-256 config hash, `u64` task count, then per task a `u64` byte length
    /// followed by the record.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let hash = hex::decode(&self.config_hash)
            .map_err(|e| Error::Format(format!("config hash: {e}")))?;
        if hash.len() != 32 {
            return Err(Error::Format("config hash must be 32 bytes".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&hash);
        out.extend_from_slice(&(self.tasks.len() as u64).to_le_bytes());
        for t in &self.tasks {
            let rec = encode_task(t);
            out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
            out.extend_from_slice(&rec);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8)?;
        if magic != CACHE_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}: not a task cache (expected {:?})",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(CACHE_MAGIC)
            )));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "unsupported task cache version {version} (expected {CACHE_VERSION})"
            )));
        }
        let config_hash = hex::encode(r.take(32)?);
        let count = r.u64()? as usize;
        let mut tasks = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u64()? as usize;
            tasks.push(decode_task(r.take(len)?)?);
        }
        if !r.is_done() {
            return Err(Error::Format(
                "trailing bytes after last task record".into(),
            ));
        }
        Ok(TaskCache { config_hash, tasks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn encode_task(t: &Task) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&t.meta.seed.to_le_bytes());
    out.extend_from_slice(&t.meta.index.to_le_bytes());
    out.extend_from_slice(&t.meta.shift.to_le_bytes());
    match &t.meta.kernel {
        Some(k) => {
            out.push(1);
            out.push(k.family.tag());
            out.extend_from_slice(&k.lengthscale.to_le_bytes());
            out.extend_from_slice(&k.noise_std.to_le_bytes());
        }
        None => out.push(0),
    }
    for d in [t.xc.cols(), t.yc.cols(), t.xc.rows(), t.xt.rows()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for m in [&t.xc, &t.yc, &t.xt, &t.yt] {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_task(bytes: &[u8]) -> Result<Task> {
    let mut r = Reader::new(bytes);
    let seed = r.u64()?;
    let index = r.u64()?;
    let shift = r.f64()?;
    let kernel = match r.take(1)?[0] {
        0 => None,
        1 => {
            let family = KernelFamily::from_tag(r.take(1)?[0])?;
            Some(KernelSpec::new(family, r.f64()?, r.f64()?)?)
        }
        t => return Err(Error::Format(format!("bad kernel marker {t}"))),
    };
    let dx = r.u32()? as usize;
    let dy = r.u32()? as usize;
    let nc = r.u32()? as usize;
    let nt = r.u32()? as usize;
    let mut mat = |rows: usize, cols: usize| -> Result<Tensor> {
        let data = (0..rows * cols)
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![rows, cols], data)
    };
    let task = Task {
        xc: mat(nc, dx)?,
        yc: mat(nc, dy)?,
        xt: mat(nt, dx)?,
        yt: mat(nt, dy)?,
        meta: TaskMeta {
            kernel,
            seed,
            index,
            shift,
        },
    };
    if !r.is_done() {
        return Err(Error::Format("task record longer than its contents".into()));
    }
    Ok(task)
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated input at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
