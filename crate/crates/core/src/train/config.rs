//! Flat `key = value` run configuration shared by the harness and the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::model::config::parse_value;
use crate::model::{ModelConfig, MODEL_KEYS};
use crate::tasks::{DatasetSpec, LenRange, TaskKind};

/// Everything a run needs: data, model, optimizer, schedule and tool settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    /// Directory with previously generated split files; `None` generates
    /// the data in memory from `data`.
    pub data_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    /// Global gradient-norm clipping threshold.
    pub clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Batch size used for evaluation passes.
    pub eval_batch_size: usize,
    pub bench_sizes: Vec<usize>,
    pub bench_repeats: usize,
    /// Longest greedy output (tokens, excluding `<eos>`).
    pub decode_max_len: usize,
}

/// Every recognized key, sorted.
pub const RUN_KEYS: [&str; 34] = [
    "bench.repeats",
    "bench.sizes",
    "data.dir",
    "data.table",
    "data.task",
    "data.test_count",
    "data.test_ranges",
    "data.train_count",
    "data.train_range",
    "data.valid_count",
    "data.valid_range",
    "data.vocab",
    "decode.max_len",
    MODEL_KEYS[0],
    MODEL_KEYS[1],
    MODEL_KEYS[2],
    MODEL_KEYS[3],
    MODEL_KEYS[4],
    MODEL_KEYS[5],
    MODEL_KEYS[6],
    MODEL_KEYS[7],
    MODEL_KEYS[8],
    MODEL_KEYS[9],
    MODEL_KEYS[10],
    MODEL_KEYS[11],
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.clip",
    "optimizer.eps",
    "optimizer.lr",
    "seed",
    "train.batch_size",
    "train.epochs",
    "train.eval_batch_size",
];

fn list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn join<V: fmt::Display>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Desk-scale relation-composition defaults.
    pub fn relation() -> Self {
        RunConfig {
            seed: 0,
            data: DatasetSpec::relation_default(),
            data_dir: None,
            model: ModelConfig { ffn_residual: true, ..ModelConfig::default() },
            optimizer: AdamConfig::default(),
            clip: 1.0,
            batch_size: 64,
            epochs: 50,
            eval_batch_size: 250,
            bench_sizes: vec![16, 32, 64],
            bench_repeats: 3,
            decode_max_len: 15,
        }
    }

    /// Reverse-task defaults for the encoder-decoder.
    pub fn reverse() -> Self {
        let data = DatasetSpec::reverse_default();
        let model = ModelConfig {
            num_layers: 2,
            d: 32,
            heads: 4,
            tied: false,
            vocab_size: data.vocab,
            num_edge_labels: 0,
            num_output_labels: data.vocab + 2,
            max_len: 16,
            ..ModelConfig::default()
        };
        RunConfig { data, model, batch_size: 32, epochs: 20, eval_batch_size: 100, ..Self::relation() }
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Relation => Self::relation(),
            TaskKind::Reverse => Self::reverse(),
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if key.starts_with("model.") {
            return self.model.get(key);
        }
        let o = &self.optimizer;
        Some(match key {
            "bench.repeats" => self.bench_repeats.to_string(),
            "bench.sizes" => join(&self.bench_sizes),
            "data.dir" => self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "data.table" => self.data.table.to_string(),
            "data.task" => self.data.task.to_string(),
            "data.test_count" => self.data.test_count.to_string(),
            "data.test_ranges" => join(&self.data.tests),
            "data.train_count" => self.data.train_count.to_string(),
            "data.train_range" => self.data.train.to_string(),
            "data.valid_count" => self.data.valid_count.to_string(),
            "data.valid_range" => self.data.valid.to_string(),
            "data.vocab" => self.data.vocab.to_string(),
            "decode.max_len" => self.decode_max_len.to_string(),
            "optimizer.beta1" => o.beta1.to_string(),
            "optimizer.beta2" => o.beta2.to_string(),
            "optimizer.clip" => self.clip.to_string(),
            "optimizer.eps" => o.eps.to_string(),
            "optimizer.lr" => o.lr.to_string(),
            "seed" => self.seed.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.eval_batch_size" => self.eval_batch_size.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if MODEL_KEYS.contains(&key) {
            return self.model.set(key, value);
        }
        let v = value.trim();
        match key {
            "bench.repeats" => self.bench_repeats = parse_value(key, v)?,
            "bench.sizes" => self.bench_sizes = list(key, v)?,
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.table" => self.data.table = v.parse()?,
            "data.task" => self.data.task = v.parse()?,
            "data.test_count" => self.data.test_count = parse_value(key, v)?,
            "data.test_ranges" => self.data.tests = list::<LenRange>(key, v)?,
            "data.train_count" => self.data.train_count = parse_value(key, v)?,
            "data.train_range" => self.data.train = v.parse()?,
            "data.valid_count" => self.data.valid_count = parse_value(key, v)?,
            "data.valid_range" => self.data.valid = v.parse()?,
            "data.vocab" => self.data.vocab = parse_value(key, v)?,
            "decode.max_len" => self.decode_max_len = parse_value(key, v)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse_value(key, v)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse_value(key, v)?,
            "optimizer.clip" => self.clip = parse_value(key, v)?,
            "optimizer.eps" => self.optimizer.eps = parse_value(key, v)?,
            "optimizer.lr" => self.optimizer.lr = parse_value(key, v)?,
            "seed" => {
                self.seed = parse_value(key, v)?;
                self.data.seed = self.seed;
            }
            "train.batch_size" => self.batch_size = parse_value(key, v)?,
            "train.epochs" => self.epochs = parse_value(key, v)?,
            "train.eval_batch_size" => self.eval_batch_size = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}; valid keys: {}", RUN_KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Builds a config from ordered `(key, value)` assignments. Defaults come
    /// from the task named by the last `data.task` assignment (relation if
    /// none); later assignments win.
    pub fn from_assignments(assignments: &[(String, String)]) -> Result<Self> {
        let task = match assignments.iter().rev().find(|(k, _)| k == "data.task") {
            Some((_, v)) => v.trim().parse()?,
            None => TaskKind::Relation,
        };
        let mut cfg = Self::for_task(task);
        for (k, v) in assignments {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse_assignments(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                line: no + 1,
                reason: format!("expected key = value, got {line:?}"),
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("train.batch_size", self.batch_size),
            ("train.eval_batch_size", self.eval_batch_size),
            ("bench.repeats", self.bench_repeats),
            ("decode.max_len", self.decode_max_len),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(Error::Config("optimizer.lr must be a finite nonnegative number".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("optimizer betas must lie in [0, 1) and eps must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("optimizer.clip must be positive".into()));
        }
        if let Some(dir) = &self.data_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("data.dir {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted by key.
    pub fn pairs(&self) -> BTreeMap<&'static str, String> {
        RUN_KEYS.iter().filter_map(|&k| self.get(k).map(|v| (k, v))).collect()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
