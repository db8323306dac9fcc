use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, AdamConfig, Graph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::learner::Learner;

/// ChaCha stream of the seed that drives the per-epoch shuffles; dataset
/// splits use the low streams.
pub const SHUFFLE_STREAM: u64 = 1 << 32;

/// Optimization schedule for [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_batch_size: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// Where `metrics.csv` and `best.ckpt` go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            clip: 1.0,
            batch_size: 64,
            epochs: 50,
            eval_batch_size: 250,
            seed: 0,
            out_dir: None,
        }
    }
}

/// A named evaluation split.
#[derive(Debug, Clone, Copy)]
pub struct EvalSplit<'a, I> {
    pub name: &'a str,
    pub items: &'a [I],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// `(split name, score in [0, 1])` in configuration order.
    pub scores: Vec<(String, f64)>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub metric: &'static str,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose validation score was best (latest on ties; 0 = untrained).
    pub best_epoch: usize,
    pub best_valid: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "epoch,split,metric,value,seconds";

    /// Rows `epoch,split,metric,value,seconds` for one epoch.
    pub fn csv_rows(&self, e: &EpochMetrics) -> Vec<String> {
        let mut rows = vec![format!("{},train,loss,{},{:.3}", e.epoch, e.train_loss, e.seconds)];
        for (split, v) in &e.scores {
            rows.push(format!("{},{split},{},{v},{:.3}", e.epoch, self.metric, e.seconds));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            for r in self.csv_rows(e) {
                s.push_str(&r);
                s.push('\n');
            }
        }
        s
    }

    pub fn score(&self, epoch: usize, split: &str) -> Option<f64> {
        let e = self.epochs.iter().find(|e| e.epoch == epoch)?;
        e.scores.iter().find(|(n, _)| n == split).map(|(_, v)| *v)
    }
}

/// Result of [`train`]: the best-by-validation model and the history.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub best: M,
    pub last: M,
    pub metrics: Metrics,
}

/// Fraction of `items` the model solves, evaluated in batches.
pub fn evaluate<T: Scalar, M: Learner<T>>(model: &M, items: &[M::Item], batch_size: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("cannot score a model on zero instances".into()));
    }
    model.check_label_space(items)?;
    let mut correct = 0;
    for chunk in items.chunks(batch_size.max(1)) {
        correct += model.batch_correct(chunk)?;
    }
    Ok(correct as f64 / items.len() as f64)
}

fn append(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// Mini-batch training with seeded shuffles, clipped Adam and per-epoch
/// evaluation of every split. `valid` selects the best model; `progress` is
/// called after each epoch.
pub fn train<T: Scalar, M: Learner<T>>(
    model: M,
    train_items: &[M::Item],
    valid: EvalSplit<'_, M::Item>,
    tests: &[EvalSplit<'_, M::Item>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<Trained<M>> {
    if train_items.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    model.check_label_space(train_items)?;
    let mut model = model;
    let mut adam = Adam::new(model.store(), cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let csv = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let p = dir.join("metrics.csv");
            std::fs::write(&p, format!("{}\n", Metrics::CSV_HEADER))?;
            Some(p)
        }
        None => None,
    };
    let mut metrics = Metrics { metric: model.metric_name(), epochs: Vec::new(), best_epoch: 0, best_valid: f64::NEG_INFINITY };
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&M::Item> = chunk.iter().map(|&i| &train_items[i]).collect();
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &batch).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite { context: format!("{context} at epoch {epoch}, step {step}") },
                other => other,
            })?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { context: format!("training loss at epoch {epoch}, step {step}") });
            }
            total += value * batch.len() as f64;
            g.backward(loss)?;
            let store = model.store_mut();
            store.zero_grad();
            g.accumulate_param_grads(store);
            store.clip_grad_norm(T::of(cfg.clip));
            adam.step(store).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite { context: format!("{context} at epoch {epoch}, step {step}") },
                other => other,
            })?;
        }
        let mut scores = Vec::with_capacity(1 + tests.len());
        let valid_score = evaluate(&model, valid.items, cfg.eval_batch_size)?;
        scores.push((valid.name.to_string(), valid_score));
        for t in tests {
            scores.push((t.name.to_string(), evaluate(&model, t.items, cfg.eval_batch_size)?));
        }
        if valid_score >= metrics.best_valid {
            metrics.best_valid = valid_score;
            metrics.best_epoch = epoch;
            best = model.clone();
            if let Some(dir) = &cfg.out_dir {
                best.save(&dir.join("best.ckpt"))?;
            }
        }
        let e = EpochMetrics { epoch, train_loss: total / train_items.len() as f64, scores, seconds: start.elapsed().as_secs_f64() };
        if let Some(p) = &csv {
            append(p, &metrics.csv_rows(&e))?;
        }
        progress(&e);
        metrics.epochs.push(e);
    }
    if metrics.epochs.is_empty() {
        metrics.best_valid = evaluate(&model, valid.items, cfg.eval_batch_size)?;
        if let Some(dir) = &cfg.out_dir {
            best.save(&dir.join("best.ckpt"))?;
        }
    }
    Ok(Trained { best, last: model, metrics })
}
