//! Property suites run by `tetnp verify`: translation equivariance,
//! permutation symmetry, masked-attention equivalence, gradient checks and
//! the GP oracle.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionBlock, AttentionDims, AttentionMask, Located, TeAttentionBlock};
use crate::data::{sample_tasks, KernelFamily, KernelSpec, TaskSamplerConfig};
use crate::error::{Error, Result};
use crate::gp;
use crate::gradcheck::param_grad_check;
use crate::models::{Model, ModelConfig, PseudoLocationInit, PseudoStyle, Task, Variant};
use crate::nn::{LayerNorm, Mlp, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{equivariance_witness, mean_stderr, per_task_log_likelihoods, oracle_log_likelihoods};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Equivariance,
    Permutation,
    Masked,
    GradCheck,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Equivariance,
        Suite::Permutation,
        Suite::Masked,
        Suite::GradCheck,
        Suite::Oracle,
    ];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Equivariance => "equivariance",
            Suite::Permutation => "permutation",
            Suite::Masked => "masked",
            Suite::GradCheck => "gradcheck",
            Suite::Oracle => "oracle",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown suite {s:?} (expected equivariance, permutation, masked, gradcheck or oracle)"
                ))
            })
    }
}

/// Deliberate defects used to confirm that the suites catch real bugs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// TE-PT-TNP pseudo-locations ignore the context inputs.
    FixedPseudoLocations,
}

impl FromStr for Mutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-pseudo-locations" => Ok(Mutation::FixedPseudoLocations),
            _ => Err(Error::Config(format!(
                "unknown mutation {s:?} (expected fixed-pseudo-locations)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random tasks per model in the equivariance, permutation and oracle suites.
    pub tasks: usize,
    /// Random block instances in the masked-attention suite.
    pub masked_instances: usize,
    pub shifts: Vec<f64>,
    /// Denominator floor of the relative gradient error.
    pub grad_floor: f64,
    pub grad_step: f64,
    pub mutation: Option<Mutation>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            tasks: 200,
            masked_instances: 100,
            shifts: vec![-1000.0, -10.0, -1.0, -0.1, 0.1, 1.0, 10.0, 1000.0],
            grad_floor: 1e-5,
            grad_step: 1e-5,
            mutation: None,
        }
    }
}

/// One measured quantity against its threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, threshold: f64, detail: String) -> Self {
        Check {
            name: name.into(),
            passed: value < threshold,
            value,
            threshold,
            detail,
        }
    }

    fn above(name: impl Into<String>, value: f64, threshold: f64, detail: String) -> Self {
        Check {
            name: name.into(),
            passed: value > threshold,
            value,
            threshold,
            detail,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }
}

/// Runs `scope`, or every suite when `None`.
pub fn run(scope: Option<Suite>, opts: &VerifyOptions) -> Result<VerifyReport> {
    let suites = match scope {
        Some(s) => vec![s],
        None => Suite::ALL.to_vec(),
    };
    let suites = suites
        .into_iter()
        .map(|s| run_suite(s, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport { suites })
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match suite {
        Suite::Equivariance => equivariance(opts)?,
        Suite::Permutation => permutation(opts)?,
        Suite::Masked => masked(opts)?,
        Suite::GradCheck => gradcheck(opts)?,
        Suite::Oracle => oracle(opts)?,
    };
    Ok(SuiteReport {
        suite,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn suite_sampler(seed: u64) -> TaskSamplerConfig {
    TaskSamplerConfig {
        max_context: 16,
        num_targets: 16,
        seed,
        ..TaskSamplerConfig::default()
    }
}

/// Tiny randomly initialized models, labelled. Pseudo-token variants appear
/// in both wiring styles.
pub fn tiny_models(seed: u64, variants: &[Variant], mutation: Option<Mutation>) -> Result<Vec<(String, Model)>> {
    let mut out = Vec::new();
    for (i, &v) in variants.iter().enumerate() {
        let styles: &[PseudoStyle] = if v.uses_pseudo_tokens() {
            &[PseudoStyle::Ist, PseudoStyle::Perceiver]
        } else {
            &[PseudoStyle::Ist]
        };
        for (j, &style) in styles.iter().enumerate() {
            let mut cfg = ModelConfig::tiny(v);
            cfg.pseudo_style = style;
            if v == Variant::TePtTnp && mutation == Some(Mutation::FixedPseudoLocations) {
                cfg.pseudo_locations = PseudoLocationInit::Fixed;
            }
            let label = if v.uses_pseudo_tokens() {
                format!("{v}/{style}")
            } else {
                v.to_string()
            };
            out.push((label, Model::new(cfg, seed + 100 * i as u64 + j as u64)?));
        }
    }
    Ok(out)
}

const EQUIVARIANT: [Variant; 3] = [Variant::TeTnp, Variant::TePtTnp, Variant::Rcnp];
const NON_EQUIVARIANT: [Variant; 3] = [Variant::Cnp, Variant::Tnp, Variant::PtTnp];

fn equivariance(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let tasks = sample_tasks(&suite_sampler(opts.seed), opts.tasks)?;
    let mut checks = Vec::new();
    for (label, model) in tiny_models(opts.seed, &EQUIVARIANT, opts.mutation)? {
        let mut worst = (0.0, 0.0, 0);
        for (i, t) in tasks.iter().enumerate() {
            let (dev, tau) = equivariance_witness(&model, t, &opts.shifts)?;
            if dev > worst.0 || dev.is_nan() {
                worst = (dev, tau, i);
            }
        }
        checks.push(Check::below(
            format!("{label} shift invariance"),
            worst.0,
            1e-6,
            format!("worst tau = {}, task {}", worst.1, worst.2),
        ));
    }
    for (label, model) in tiny_models(opts.seed, &NON_EQUIVARIANT, None)? {
        let mut hits = 0;
        for t in &tasks {
            if equivariance_witness(&model, t, &[10.0])?.0 > 1e-3 {
                hits += 1;
            }
        }
        let frac = hits as f64 / tasks.len() as f64;
        checks.push(Check {
            name: format!("{label} breaks shift invariance at tau = 10"),
            passed: frac >= 0.95,
            value: frac,
            threshold: 0.95,
            detail: format!("{hits}/{} tasks deviate by more than 1e-3", tasks.len()),
        });
    }
    Ok(checks)
}

fn max_diff(a: &crate::nn::Predictive, b: &crate::nn::Predictive) -> f64 {
    a.mean.max_abs_diff(&b.mean).max(a.var.max_abs_diff(&b.var))
}

fn permutation(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let tasks = sample_tasks(&suite_sampler(opts.seed + 1), opts.tasks.min(50))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();
    for (label, model) in tiny_models(opts.seed, &Variant::ALL, None)? {
        let (mut ctx, mut tgt) = (0.0f64, 0.0f64);
        for t in &tasks {
            let base = model.predict(t)?;
            let mut pc: Vec<usize> = (0..t.num_context()).collect();
            pc.shuffle(&mut rng);
            ctx = ctx.max(max_diff(&base, &model.predict(&t.permute_context(&pc))?));
            let mut pt: Vec<usize> = (0..t.num_targets()).collect();
            pt.shuffle(&mut rng);
            let moved = model.predict(&t.permute_targets(&pt))?;
            let expected = crate::nn::Predictive {
                mean: base.mean.permute_rows(&pt),
                var: base.var.permute_rows(&pt),
            };
            tgt = tgt.max(max_diff(&expected, &moved));
        }
        checks.push(Check::below(
            format!("{label} context permutation invariance"),
            ctx,
            1e-9,
            String::new(),
        ));
        checks.push(Check::below(
            format!("{label} target permutation equivariance"),
            tgt,
            1e-9,
            String::new(),
        ));
    }
    Ok(checks)
}

fn random_dims<R: Rng>(rng: &mut R) -> AttentionDims {
    AttentionDims {
        token_dim: rng.gen_range(2..10),
        heads: rng.gen_range(1..4),
        qk_dim: rng.gen_range(1..6),
        value_dim: rng.gen_range(1..6),
        scaled: rng.gen_bool(0.5),
    }
}

/// Largest gap between the masked single-stream block and self-attention on
/// the context followed by cross-attention from the targets.
pub fn masked_block_gap<R: Rng>(rng: &mut R) -> Result<f64> {
    let dims = random_dims(rng);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "block", dims, rng);
    let (nc, nt) = (rng.gen_range(1..12), rng.gen_range(1..12));
    let zc = Tensor::randn([nc, dims.token_dim], rng);
    let zt = Tensor::randn([nt, dims.token_dim], rng);
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let (c, t) = (p.constant(zc.clone()), p.constant(zt.clone()));
    let split = Var::concat_rows(&[block.forward_self(&p, c)?, block.forward_cross(&p, t, c)?])?;
    let stream = p.constant(Tensor::concat_rows(&[&zc, &zt])?);
    let joint = block.forward_masked(&p, stream, &AttentionMask::context_only(nc, nt))?;
    Ok(split.value().max_abs_diff(&joint.value()))
}

fn masked(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6d61736b);
    let mut worst = 0.0f64;
    for _ in 0..opts.masked_instances {
        worst = worst.max(masked_block_gap(&mut rng)?);
    }
    Ok(vec![Check::below(
        "masked block equals self + cross decomposition",
        worst,
        1e-10,
        format!("{} random 1-layer instances", opts.masked_instances),
    )])
}

fn random_task<R: Rng>(rng: &mut R, nc: usize, nt: usize) -> Result<Task> {
    let col = |rng: &mut R, n: usize, lo: f64, hi: f64| {
        Tensor::column(&(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>())
    };
    Task::new(
        col(rng, nc, -2.0, 2.0),
        col(rng, nc, -1.5, 1.5),
        col(rng, nt, -3.0, 3.0),
        col(rng, nt, -1.5, 1.5),
    )
}

/// `(label, max relative error)` for every block type and every tiny model,
/// using central differences with `step` and denominator floor `floor`.
pub fn gradient_errors(seed: u64, step: f64, floor: f64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x67726164);
    let mut out = Vec::new();
    let dims = AttentionDims {
        token_dim: 6,
        heads: 2,
        qk_dim: 3,
        value_dim: 3,
        scaled: false,
    };
    let (nc, nt) = (4, 3);
    let zc = Tensor::randn([nc, 6], &mut rng);
    let zt = Tensor::randn([nt, 6], &mut rng);
    let xc = Tensor::randn([nc, 1], &mut rng);
    let xt = Tensor::randn([nt, 1], &mut rng);
    let wc = Tensor::randn([nc, 6], &mut rng);
    let wt = Tensor::randn([nt, 6], &mut rng);
    let wl = Tensor::randn([nt, 1], &mut rng);

    let mut store = ParamStore::new();
    let mlp = Mlp::with_hidden(&mut store, "mlp", 6, 8, 2, 6, &mut rng);
    randomize(&mut store, &mut rng);
    let r = param_grad_check(
        &store,
        |p| Ok(mlp.forward(p, p.constant(zc.clone()))?.mul(&p.constant(wc.clone()))?.sum()),
        step,
        floor,
    )?;
    out.push(("mlp".to_string(), r.max_rel_error));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    randomize(&mut store, &mut rng);
    let r = param_grad_check(
        &store,
        |p| Ok(ln.forward(p, p.constant(zc.clone()))?.mul(&p.constant(wc.clone()))?.sum()),
        step,
        floor,
    )?;
    out.push(("layer norm".to_string(), r.max_rel_error));

    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "block", dims, &mut rng);
    let r = param_grad_check(
        &store,
        |p| {
            let c = p.constant(zc.clone());
            let t = p.constant(zt.clone());
            let a = block.forward_self(p, c)?.mul(&p.constant(wc.clone()))?.sum();
            let b = block.forward_cross(p, t, c)?.mul(&p.constant(wt.clone()))?.sum();
            a.add(&b)
        },
        step,
        floor,
    )?;
    out.push(("attention block".to_string(), r.max_rel_error));

    let r = param_grad_check(
        &store,
        |p| {
            let stream = p.constant(Tensor::concat_rows(&[&zc, &zt])?);
            let w = p.constant(Tensor::concat_rows(&[&wc, &wt])?);
            Ok(block
                .forward_masked(p, stream, &AttentionMask::context_only(nc, nt))?
                .mul(&w)?
                .sum())
        },
        step,
        floor,
    )?;
    out.push(("masked attention block".to_string(), r.max_rel_error));

    let mut store = ParamStore::new();
    let te = TeAttentionBlock::new(&mut store, "te", dims, 1, &mut rng);
    let r = param_grad_check(
        &store,
        |p| {
            let ctx = Located::new(p.constant(zc.clone()), p.constant(xc.clone()))?;
            let tgt = Located::new(p.constant(zt.clone()), p.constant(xt.clone()))?;
            let s = te.forward_self(p, ctx, true)?;
            let c = te.forward_cross(p, tgt, s, true)?;
            let a = s.tokens.mul(&p.constant(wc.clone()))?.sum();
            let b = c.tokens.mul(&p.constant(wt.clone()))?.sum();
            let l = c.locations.mul(&p.constant(wl.clone()))?.sum();
            a.add(&b)?.add(&l)
        },
        step,
        floor,
    )?;
    out.push(("te attention block".to_string(), r.max_rel_error));

    for (label, model) in tiny_models(seed, &Variant::ALL, None)? {
        let task = random_task(&mut rng, 4, 3)?;
        let r = param_grad_check(&model.params, |p| model.log_likelihood(p, &task), step, floor)?;
        out.push((label, r.max_rel_error));
    }
    Ok(out)
}

/// Moves layer-norm gains and shifts off their identity initialization.
fn randomize<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    for t in store.values_mut() {
        let noise = Tensor::uniform(t.shape().to_vec(), 0.5, rng);
        let data: Vec<f64> = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        *t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
    }
}

fn gradcheck(opts: &VerifyOptions) -> Result<Vec<Check>> {
    Ok(gradient_errors(opts.seed, opts.grad_step, opts.grad_floor)?
        .into_iter()
        .map(|(label, err)| {
            Check::below(
                format!("{label} gradient"),
                err,
                1e-4,
                format!("step {:e}, floor {:e}", opts.grad_step, opts.grad_floor),
            )
        })
        .collect())
}

fn oracle(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6f72);
    let mut interp = 0.0f64;
    let mut shift = 0.0f64;
    for i in 0..20 {
        let family = [KernelFamily::Se, KernelFamily::Matern52, KernelFamily::Periodic][i % 3];
        let l = rng.gen_range(0.5..2.0);
        let noiseless = KernelSpec::new(family, l, 0.0)?;
        let n = rng.gen_range(1..8);
        let xs: Vec<f64> = (0..n).map(|k| -2.0 + 4.0 * (k as f64 + rng.gen::<f64>()) / n as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::column(&xs);
        let post = gp::gp_posterior(&noiseless, &x, &Tensor::column(&ys), &x)?;
        for k in 0..n {
            interp = interp.max((post.mean[k] - ys[k]).abs()).max(post.var[k].abs());
        }
        let noisy = KernelSpec::new(family, l, 0.2)?;
        let xt = Tensor::column(&[-2.5, 0.3, 1.7]);
        let a = gp::gp_posterior(&noisy, &x, &Tensor::column(&ys), &xt)?;
        for tau in [-1000.0, -1.0, 0.1, 10.0] {
            let b = gp::gp_posterior(&noisy, &x.map(|v| v + tau), &Tensor::column(&ys), &xt.map(|v| v + tau))?;
            for k in 0..3 {
                shift = shift.max((a.mean[k] - b.mean[k]).abs()).max((a.var[k] - b.var[k]).abs());
            }
        }
    }
    checks.push(Check::below("noiseless oracle interpolates context", interp, 1e-8, String::new()));
    checks.push(Check::below("oracle shift invariance", shift, 1e-8, String::new()));

    let sampler = TaskSamplerConfig {
        kernels: vec![KernelFamily::Se],
        ..suite_sampler(opts.seed + 2)
    };
    let tasks = sample_tasks(&sampler, opts.tasks.min(100))?;
    let oracle = oracle_log_likelihoods(&tasks)?;
    for (label, model) in tiny_models(opts.seed, &Variant::ALL, None)? {
        let ll = per_task_log_likelihoods(&model, &tasks, 1)?;
        let diffs: Vec<f64> = oracle.iter().zip(&ll).map(|(o, m)| o - m).collect();
        let (gap, se) = mean_stderr(&diffs);
        checks.push(Check::above(
            format!("oracle beats untrained {label}"),
            gap - 3.0 * se,
            0.0,
            format!("paired gap {gap:.4} nats, standard error {se:.4}"),
        ));
    }
    Ok(checks)
}
