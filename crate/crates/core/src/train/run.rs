//! End-to-end runs driven by a [`RunConfig`]: data, model, training, scoring.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{EncoderModel, Seq2SeqModel};
use crate::tasks::{generate, Split, TaskKind};
use crate::train::config::RunConfig;
use crate::train::trainer::{evaluate, train, EpochMetrics, EvalSplit, Metrics, TrainConfig};

/// ChaCha stream of the seed used for parameter initialization.
pub const INIT_STREAM: u64 = 1 << 33;

/// A trained model of either architecture, in `f32`.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Encoder(EncoderModel<f32>),
    Seq2Seq(Seq2SeqModel<f32>),
}

impl AnyModel {
    /// Freshly initialized model for the configured task.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        Ok(match cfg.data.task {
            TaskKind::Relation => AnyModel::Encoder(EncoderModel::new(cfg.model.clone(), &mut rng)?),
            TaskKind::Reverse => AnyModel::Seq2Seq(Seq2SeqModel::new(cfg.model.clone(), &mut rng)?),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(match crate::model::checkpoint::peek(path)?.0 {
            crate::model::ModelKind::Encoder => AnyModel::Encoder(EncoderModel::load(path)?),
            crate::model::ModelKind::Seq2Seq => AnyModel::Seq2Seq(Seq2SeqModel::load(path)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            AnyModel::Encoder(m) => m.save(path),
            AnyModel::Seq2Seq(m) => m.save(path),
        }
    }

    /// Score on one split (accuracy or exact match).
    pub fn score(&self, split: &Split, batch_size: usize) -> Result<f64> {
        match (self, split.relations(), split.sequences()) {
            (AnyModel::Encoder(m), Some(items), _) => evaluate(m, items, batch_size),
            (AnyModel::Seq2Seq(m), _, Some(items)) => evaluate(m, items, batch_size),
            _ => Err(Error::LabelSpace(format!("split {} does not match the model's task", split.spec.name))),
        }
    }
}

/// The configured splits: read from `data.dir` when set, else generated.
/// The first two are train and valid; the rest are test splits.
pub fn load_splits(cfg: &RunConfig) -> Result<Vec<Split>> {
    let Some(dir) = &cfg.data_dir else {
        return generate(&cfg.data);
    };
    let names: Vec<String> = cfg.data.splits().into_iter().map(|s| s.name).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let split = Split::read(&dir.join(format!("{name}.tsv")))?;
        if split.spec.task != cfg.data.task {
            return Err(Error::Config(format!("{name}.tsv holds a {} split, config says {}", split.spec.task, cfg.data.task)));
        }
        out.push(split);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best: AnyModel,
    pub last: AnyModel,
    pub metrics: Metrics,
}

impl RunConfig {
    pub fn train_config(&self, out_dir: Option<&Path>) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            clip: self.clip,
            batch_size: self.batch_size,
            epochs: self.epochs,
            eval_batch_size: self.eval_batch_size,
            seed: self.seed,
            out_dir: out_dir.map(Path::to_path_buf),
        }
    }
}

/// Trains the configured model on `splits` (train, valid, tests...).
pub fn run_training(
    cfg: &RunConfig,
    splits: &[Split],
    out_dir: Option<&Path>,
    progress: impl FnMut(&EpochMetrics),
) -> Result<RunOutcome> {
    let [train_split, valid, tests @ ..] = splits else {
        return Err(Error::EmptyDataset("a run needs at least a train and a valid split".into()));
    };
    let tc = cfg.train_config(out_dir);
    let name = |s: &Split| s.spec.name.clone();
    let names: Vec<String> = tests.iter().map(name).collect();
    let valid_name = name(valid);
    match AnyModel::init(cfg)? {
        AnyModel::Encoder(model) => {
            let items = |s: &Split| s.relations().ok_or_else(|| mismatch(s)).map(|v| v.to_vec());
            let (train_items, valid_items) = (items(train_split)?, items(valid)?);
            let test_items = tests.iter().map(items).collect::<Result<Vec<_>>>()?;
            let evals: Vec<EvalSplit<_>> =
                names.iter().zip(&test_items).map(|(n, v)| EvalSplit { name: n, items: v }).collect();
            let valid = EvalSplit { name: &valid_name, items: &valid_items };
            let out = train(model, &train_items, valid, &evals, &tc, progress)?;
            Ok(RunOutcome { best: AnyModel::Encoder(out.best), last: AnyModel::Encoder(out.last), metrics: out.metrics })
        }
        AnyModel::Seq2Seq(model) => {
            let items = |s: &Split| s.sequences().ok_or_else(|| mismatch(s)).map(|v| v.to_vec());
            let (train_items, valid_items) = (items(train_split)?, items(valid)?);
            let test_items = tests.iter().map(items).collect::<Result<Vec<_>>>()?;
            let evals: Vec<EvalSplit<_>> =
                names.iter().zip(&test_items).map(|(n, v)| EvalSplit { name: n, items: v }).collect();
            let valid = EvalSplit { name: &valid_name, items: &valid_items };
            let out = train(model, &train_items, valid, &evals, &tc, progress)?;
            Ok(RunOutcome { best: AnyModel::Seq2Seq(out.best), last: AnyModel::Seq2Seq(out.last), metrics: out.metrics })
        }
    }
}

fn mismatch(s: &Split) -> Error {
    Error::Config(format!("split {} holds {} instances", s.spec.name, s.spec.task))
}
