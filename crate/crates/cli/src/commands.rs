use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use tetnp::config::Section;
use tetnp::data::{sample_tasks, shift_task, TaskCache};
use tetnp::models::{Model, Task};
use tetnp::train::{
    self, model_config_hash, oracle_log_likelihoods, write_metrics_csv, Checkpoint, EvalOptions,
    MetricsRow, TrainOutputs,
};
use tetnp::verify::{self, Mutation, Suite, VerifyOptions, VerifyReport};
use tetnp::Error;

use crate::run_config::RunConfig;
use crate::Common;

pub enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn io_context<'a>(what: &str, path: &'a Path) -> impl Fn(Error) -> Failure + 'a {
    let what = what.to_string();
    move |e| Failure::Run(format!("{what} {}: {e}", path.display()))
}

/// Defaults, then the config file, then environment, then flags.
pub fn load_config(common: &Common, command: &str) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let mut cfg = RunConfig::parse(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            cfg.base = path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            cfg
        }
        None => RunConfig::default(),
    };
    let env = cfg.env_entries(|k| std::env::var(k).ok());
    cfg.apply(&env)
        .map_err(|e| Failure::Usage(format!("environment override: {e}")))?;
    if let Some(v) = common.variant {
        cfg.model.set("variant", &v.to_string()).map_err(usage)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.run.command = command.to_string();
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Outcome {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| {
            Failure::Usage(format!("cannot create directory {}: {e}", dir.display()))
        })?;
    }
    Ok(())
}

pub fn gen_tasks(common: &Common, count: Option<usize>) -> Outcome {
    let mut cfg = load_config(common, "gen-tasks")?;
    if let Some(n) = count {
        if n == 0 {
            return Err(Failure::Usage("--count must be positive".into()));
        }
        cfg.run.tasks = n;
    }
    let path = cfg.resolve(&cfg.paths.cache);
    ensure_parent(&path)?;
    let hash = cfg.data.hash(cfg.run.tasks);
    let cache = TaskCache {
        config_hash: hash.clone(),
        tasks: sample_tasks(&cfg.data, cfg.run.tasks)?,
    };
    cache
        .write(&path)
        .map_err(io_context("cannot write task cache", &path))?;
    eprintln!("wrote {} tasks to {}", cfg.run.tasks, path.display());
    println!("{hash}");
    Ok(())
}

pub fn train(common: &Common, resume: Option<PathBuf>) -> Outcome {
    let cfg = load_config(common, "train")?;
    let dir = cfg.checkpoint_dir();
    fs::create_dir_all(&dir)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    let resume = match resume {
        Some(p) => Some(Checkpoint::read(&p).map_err(io_context("cannot resume from", &p))?),
        None => None,
    };
    fs::write(dir.join("run.conf"), cfg.emit())
        .map_err(|e| Failure::Run(format!("cannot write run.conf: {e}")))?;
    let outputs = TrainOutputs {
        checkpoint: Some(cfg.checkpoint_path()),
        loss_csv: Some(dir.join("loss.csv")),
        diagnostics: Some(dir.clone()),
    };
    let total = cfg.train.total_iterations();
    let every = (total / 20).max(1);
    let start = Instant::now();
    let (mut sum, mut n) = (0.0, 0usize);
    let ckpt = train::train(&cfg.model, &cfg.train, &cfg.data, resume, &outputs, |it, loss| {
        sum += loss;
        n += 1;
        if (it + 1) % every == 0 || it + 1 == total {
            eprintln!(
                "iteration {}/{total}  loss {:.4}  {:.1}s",
                it + 1,
                sum / n as f64,
                start.elapsed().as_secs_f64()
            );
            sum = 0.0;
            n = 0;
        }
    })?;
    println!(
        "trained {} for {} iterations; checkpoint {}",
        cfg.model.variant,
        ckpt.iteration,
        cfg.checkpoint_path().display()
    );
    Ok(())
}

fn load_cache(cfg: &RunConfig) -> std::result::Result<Vec<Task>, Failure> {
    let path = cfg.resolve(&cfg.paths.cache);
    if !path.exists() {
        return Err(Failure::Usage(format!(
            "task cache {} not found; run `tetnp gen-tasks` first",
            path.display()
        )));
    }
    let cache = TaskCache::read(&path).map_err(io_context("cannot read task cache", &path))?;
    let expected = cfg.data.hash(cache.tasks.len());
    if cache.config_hash != expected {
        return Err(Failure::Run(format!(
            "task cache {} was generated from a different [data] config (hash {}, expected {expected})",
            path.display(),
            cache.config_hash
        )));
    }
    Ok(cache.tasks)
}

pub fn eval(
    common: &Common,
    grid: Option<Vec<f64>>,
    checkpoints: Vec<PathBuf>,
    oracle: bool,
) -> Outcome {
    let mut cfg = load_config(common, "eval")?;
    if let Some(g) = grid {
        if g.is_empty() || g.iter().any(|d| !d.is_finite()) {
            return Err(Failure::Usage("--delta-grid needs finite values".into()));
        }
        cfg.run.delta_grid = g;
    }
    let explicit = !checkpoints.is_empty();
    let paths = if explicit {
        checkpoints
    } else {
        vec![cfg.checkpoint_path()]
    };
    for p in &paths {
        if !p.exists() {
            return Err(Failure::Usage(format!("checkpoint {} not found", p.display())));
        }
    }
    let tasks = load_cache(&cfg)?;
    let mut models: Vec<(String, Model)> = Vec::new();
    for p in &paths {
        let ckpt = Checkpoint::read(p).map_err(io_context("cannot read checkpoint", p))?;
        if !explicit && model_config_hash(&ckpt.model.config) != model_config_hash(&cfg.model) {
            return Err(Failure::Run(format!(
                "checkpoint {} does not match the [model] section of the config (hash {} vs {})",
                p.display(),
                model_config_hash(&ckpt.model.config),
                model_config_hash(&cfg.model)
            )));
        }
        let mut id = ckpt.model.config.variant.to_string();
        if models.iter().any(|(m, _)| *m == id) {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned());
            id = format!("{id}:{}", stem.unwrap_or_default());
        }
        models.push((id, ckpt.model));
    }
    let opts = EvalOptions {
        workers: cfg.train.workers,
        timing: cfg.run.timing,
    };
    let mut rows = Vec::new();
    for (id, model) in &models {
        rows.extend(train::evaluate(model, id, &tasks, &cfg.run.delta_grid, opts)?);
    }
    if oracle {
        for &d in &cfg.run.delta_grid {
            let start = Instant::now();
            let shifted: Vec<Task> = tasks.iter().map(|t| shift_task(t, d)).collect();
            let ll = oracle_log_likelihoods(&shifted)?;
            let secs = if opts.timing { start.elapsed().as_secs_f64() } else { 0.0 };
            rows.push(MetricsRow::from_samples("oracle", d, &ll, secs)?);
        }
    }
    let metrics = cfg.resolve(&cfg.paths.metrics);
    ensure_parent(&metrics)?;
    let mut csv = Vec::new();
    write_metrics_csv(&rows, &mut csv)?;
    fs::write(&metrics, &csv)
        .map_err(|e| Failure::Run(format!("cannot write {}: {e}", metrics.display())))?;
    if let Some(plot) = &cfg.paths.plot_data {
        let plot = cfg.resolve(plot);
        ensure_parent(&plot)?;
        fs::write(&plot, plot_data(&rows, &cfg.run.delta_grid))
            .map_err(|e| Failure::Run(format!("cannot write {}: {e}", plot.display())))?;
    }
    for r in &rows {
        println!(
            "{:<16} delta {:<6} mean LL {:>9.4} +- {:.4}",
            r.model, r.delta, r.mean_ll, r.stderr
        );
    }
    Ok(())
}

/// `delta,<model>,...` with the mean log-likelihood in each cell.
fn plot_data(rows: &[MetricsRow], grid: &[f64]) -> String {
    let mut ids: Vec<&str> = Vec::new();
    for r in rows {
        if !ids.contains(&r.model.as_str()) {
            ids.push(&r.model);
        }
    }
    let mut out = format!("delta,{}\n", ids.join(","));
    for &d in grid {
        let cells: Vec<String> = ids
            .iter()
            .map(|id| {
                rows.iter()
                    .find(|r| r.model == *id && r.delta == d)
                    .map(|r| r.mean_ll.to_string())
                    .unwrap_or_default()
            })
            .collect();
        out.push_str(&format!("{d},{}\n", cells.join(",")));
    }
    out
}

fn number(x: f64) -> serde_json::Value {
    serde_json::Number::from_f64(x)
        .map(serde_json::Value::Number)
        .unwrap_or_else(|| json!(x.to_string()))
}

pub fn report_json(report: &VerifyReport) -> serde_json::Value {
    let suites: Vec<serde_json::Value> = report
        .suites
        .iter()
        .map(|s| {
            let checks: Vec<serde_json::Value> = s
                .checks
                .iter()
                .map(|c| {
                    json!({
                        "name": c.name,
                        "passed": c.passed,
                        "value": number(c.value),
                        "threshold": number(c.threshold),
                        "detail": c.detail,
                    })
                })
                .collect();
            json!({
                "suite": s.suite.to_string(),
                "passed": s.passed(),
                "seconds": number(s.seconds),
                "checks": checks,
            })
        })
        .collect();
    json!({ "passed": report.passed(), "suites": suites })
}

pub fn verify(
    scope: Option<Suite>,
    seed: u64,
    tasks: Option<usize>,
    mutation: Option<Mutation>,
    report_path: Option<PathBuf>,
) -> Outcome {
    let mut opts = VerifyOptions {
        seed,
        mutation,
        ..VerifyOptions::default()
    };
    if let Some(n) = tasks {
        if n == 0 {
            return Err(Failure::Usage("--tasks must be positive".into()));
        }
        opts.tasks = n;
    }
    let report = verify::run(scope, &opts)?;
    for s in &report.suites {
        eprintln!(
            "{:<13} {}  ({:.1}s)",
            s.suite.to_string(),
            if s.passed() { "pass" } else { "FAIL" },
            s.seconds
        );
        for c in s.checks.iter().filter(|c| !c.passed) {
            eprintln!("  failed: {} = {:e} (threshold {:e}) {}", c.name, c.value, c.threshold, c.detail);
        }
    }
    let text = serde_json::to_string_pretty(&report_json(&report))
        .map_err(|e| Failure::Run(e.to_string()))?;
    if let Some(p) = report_path {
        ensure_parent(&p)?;
        fs::write(&p, &text).map_err(|e| Failure::Run(format!("cannot write {}: {e}", p.display())))?;
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Failure::Run(e.to_string()))?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Run("verification failed".into()))
    }
}

pub fn show_config(common: &Common) -> Outcome {
    let cfg = load_config(common, "config")?;
    print!("{}", cfg.emit());
    Ok(())
}
