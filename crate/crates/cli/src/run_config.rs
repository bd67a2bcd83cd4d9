//! Run configuration: every section the commands read, in one text file.
//!
//! ```text
//! [run]
//! command = train
//! tasks = 512
//! delta_grid = 0,0.2,0.4,0.6,0.8,1
//! timing = false
//!
//! [paths]
//! checkpoint_dir = runs/te-tnp
//! cache = tasks.bin
//! metrics = metrics.csv
//! plot_data =
//!
//! [model]
//! ...
//! [train]
//! ...
//! [data]
//! ...
//! ```
//!
//! Values are resolved in this order, later sources winning: built-in
//! defaults, the config file, `TETNP_<SECTION>_<KEY>` environment variables
//! (for example `TETNP_TRAIN_LEARNING_RATE=1e-3`), then command-line flags.
//! Relative paths are taken relative to the config file's directory, or to the
//! working directory when no file is given.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tetnp::config::{self, Entry, Section};
use tetnp::data::TaskSamplerConfig;
use tetnp::models::{ModelConfig, Variant};
use tetnp::train::TrainConfig;
use tetnp::{Error, Result};

pub const DEFAULT_DELTA_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    /// The command that last wrote this config.
    pub command: String,
    /// Tasks in a generated evaluation cache.
    pub tasks: usize,
    pub delta_grid: Vec<f64>,
    /// Fill the `seconds` metrics column (makes the CSV run-dependent).
    pub timing: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            command: "train".into(),
            tasks: 512,
            delta_grid: DEFAULT_DELTA_GRID.to_vec(),
            timing: false,
        }
    }
}

impl Section for RunSection {
    const NAME: &'static str = "run";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("command", self.command.clone()),
            ("tasks", self.tasks.to_string()),
            ("delta_grid", config::join(&self.delta_grid)),
            ("timing", self.timing.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "command" => self.command = v.to_string(),
            "tasks" => self.tasks = config::parse_value(key, v)?,
            "delta_grid" => self.delta_grid = config::parse_list(key, v)?,
            "timing" => self.timing = config::parse_bool(key, v)?,
            _ => return Err(config::unknown_key(key)),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    /// Holds `model.ckpt`, `loss.csv`, `run.conf` and diagnostic bundles.
    pub checkpoint_dir: PathBuf,
    pub cache: PathBuf,
    pub metrics: PathBuf,
    /// Optional wide CSV of mean log-likelihood per shift and model.
    pub plot_data: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            checkpoint_dir: "runs".into(),
            cache: "tasks.bin".into(),
            metrics: "metrics.csv".into(),
            plot_data: None,
        }
    }
}

impl Section for Paths {
    const NAME: &'static str = "paths";

    fn entries(&self) -> Vec<(&'static str, String)> {
        let show = |p: &Path| p.display().to_string();
        vec![
            ("checkpoint_dir", show(&self.checkpoint_dir)),
            ("cache", show(&self.cache)),
            ("metrics", show(&self.metrics)),
            (
                "plot_data",
                self.plot_data.as_deref().map(show).unwrap_or_default(),
            ),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let required = |v: &str| {
            if v.is_empty() {
                Err(Error::Config(format!("{key} must not be empty")))
            } else {
                Ok(PathBuf::from(v))
            }
        };
        match key {
            "checkpoint_dir" => self.checkpoint_dir = required(v)?,
            "cache" => self.cache = required(v)?,
            "metrics" => self.metrics = required(v)?,
            "plot_data" => self.plot_data = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(config::unknown_key(key)),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: TaskSamplerConfig,
    /// Directory relative paths are resolved against. Not serialized.
    pub base: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            paths: Paths::default(),
            model: ModelConfig::new(Variant::TeTnp),
            train: TrainConfig::default(),
            data: TaskSamplerConfig::default(),
            base: PathBuf::from("."),
        }
    }
}

const SECTIONS: [&str; 5] = ["run", "paths", "model", "train", "data"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let entries = config::parse_entries(text)?;
        for e in &entries {
            if !SECTIONS.contains(&e.section.as_str()) {
                return Err(Error::Config(format!(
                    "line {}: unknown section [{}]",
                    e.line, e.section
                )));
            }
        }
        let mut cfg = RunConfig::default();
        cfg.apply(&entries)?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        [
            self.run.emit(),
            self.paths.emit(),
            self.model.emit(),
            self.train.emit(),
            self.data.emit(),
        ]
        .join("\n")
    }

    /// Applies entries section by section. A `[model] variant` line is
    /// applied first so the remaining model keys refine that variant.
    pub fn apply(&mut self, entries: &[Entry]) -> Result<()> {
        let (variant, rest): (Vec<Entry>, Vec<Entry>) = entries
            .iter()
            .cloned()
            .partition(|e| e.section == "model" && e.key == "variant");
        config::apply(&mut self.model, &variant)?;
        config::apply(&mut self.run, &rest)?;
        config::apply(&mut self.paths, &rest)?;
        config::apply(&mut self.model, &rest)?;
        config::apply(&mut self.train, &rest)?;
        config::apply(&mut self.data, &rest)
    }

    /// Entries from `TETNP_<SECTION>_<KEY>` variables for every known key.
    pub fn env_entries(&self, lookup: impl Fn(&str) -> Option<String>) -> Vec<Entry> {
        let mut known: BTreeMap<&str, Vec<&'static str>> = BTreeMap::new();
        known.insert("run", self.run.entries().into_iter().map(|e| e.0).collect());
        known.insert("paths", self.paths.entries().into_iter().map(|e| e.0).collect());
        known.insert("model", self.model.entries().into_iter().map(|e| e.0).collect());
        known.insert("train", self.train.entries().into_iter().map(|e| e.0).collect());
        known.insert("data", self.data.entries().into_iter().map(|e| e.0).collect());
        let mut out = Vec::new();
        for section in SECTIONS {
            for key in &known[section] {
                let var = env_var_name(section, key);
                if let Some(value) = lookup(&var) {
                    out.push(Entry {
                        section: section.to_string(),
                        key: key.to_string(),
                        value: value.trim().to_string(),
                        line: 0,
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.run.tasks == 0 {
            return Err(Error::Config("run.tasks must be positive".into()));
        }
        if self.run.delta_grid.is_empty() {
            return Err(Error::Config("run.delta_grid is empty".into()));
        }
        if let Some(d) = self.run.delta_grid.iter().find(|d| !d.is_finite()) {
            return Err(Error::Config(format!("run.delta_grid has non-finite value {d}")));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoint_dir).join("model.ckpt")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoint_dir)
    }
}

pub fn env_var_name(section: &str, key: &str) -> String {
    format!("TETNP_{}_{}", section, key).to_uppercase()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn parse_emit_is_a_fixpoint(
            lr in 1e-6f64..1.0,
            batch in 1usize..64,
            grid in proptest::collection::vec(-10.0f64..10.0, 1..6),
            variant in 0usize..6,
            layers in 1usize..6,
            noise in 0.0f64..1.0,
            seed in any::<u64>(),
            plot in proptest::option::of("[a-z]{1,8}\\.csv"),
        ) {
            let mut cfg = RunConfig::default();
            cfg.model.set("variant", &Variant::ALL[variant].to_string()).unwrap();
            cfg.model.layers = layers;
            cfg.train.learning_rate = lr;
            cfg.train.batch_size = batch;
            cfg.train.seed = seed;
            cfg.data.noise_std = noise;
            cfg.run.delta_grid = grid;
            cfg.paths.plot_data = plot.map(PathBuf::from);
            let text = cfg.emit();
            let back = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.emit(), text);
        }
    }

    #[test]
    fn environment_names() {
        assert_eq!(env_var_name("train", "learning_rate"), "TETNP_TRAIN_LEARNING_RATE");
        let cfg = RunConfig::default();
        let e = cfg.env_entries(|k| (k == "TETNP_DATA_NOISE_STD").then(|| " 0.5 ".to_string()));
        assert_eq!(e.len(), 1);
        assert_eq!((e[0].section.as_str(), e[0].value.as_str()), ("data", "0.5"));
    }

    #[test]
    fn variant_is_applied_before_other_model_keys() {
        let cfg = RunConfig::parse("[model]\npseudo_tokens = 4\nvariant = pt-tnp\n").unwrap();
        assert_eq!(cfg.model.variant, Variant::PtTnp);
        assert_eq!(cfg.model.pseudo_tokens, 4);
    }
}
