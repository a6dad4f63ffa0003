//! Mini-batch SGD with validation-loss early stopping, and multi-run
//! evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, sgd_step};
use crate::data::{DatasetSplit, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::fusion::VariantSpec;
use crate::metrics::{evaluate, MultiRunReport};
use crate::model::{argmax, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub runs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            runs: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) && self.lr != 0.0 {
            return bad("lr must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// New best validation loss; checkpoint now.
    Improved,
    Continue,
    Stop,
}

/// Stops once validation loss has failed to strictly decrease for
/// `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

fn check_split(spec: &VariantSpec, split: &DatasetSplit) -> Result<()> {
    if split.is_empty() {
        return Err(Error::EmptySplit(format!(
            "`{}` split has no records",
            split.split_name
        )));
    }
    if split.dim_image != spec.dim_image || split.dim_text != spec.dim_text {
        return Err(Error::Dimension(format!(
            "`{}` split has widths {}/{}, variant expects {}/{}",
            split.split_name, split.dim_image, split.dim_text, spec.dim_image, spec.dim_text
        )));
    }
    if split.num_classes != spec.num_classes {
        return Err(Error::Dimension(format!(
            "`{}` split has {} classes, variant expects {}",
            split.split_name, split.num_classes, spec.num_classes
        )));
    }
    if let Some(r) = split.records.iter().find(|r| r.label >= spec.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: r.label,
            num_classes: spec.num_classes,
        });
    }
    Ok(())
}

const EVAL_CHUNK: usize = 256;

/// Mean cross-entropy and accuracy of `model` over `records`.
pub fn loss_and_accuracy(model: &Model, records: &[EmbeddingRecord]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in records.chunks(EVAL_CHUNK) {
        let refs: Vec<_> = chunk.iter().collect();
        for (rec, logits) in chunk.iter().zip(model.batch_logits(&refs)?) {
            loss += kernels::log_sum_exp(&logits) - logits[rec.label];
            correct += usize::from(argmax(&logits) == rec.label);
        }
    }
    let n = records.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// One pass over `records`: shuffles `order` with `rng`, then takes one SGD
/// step per `cfg.batch_size` batch, keeping the short last batch. Returns the
/// mean training loss.
pub fn run_epoch(
    model: &mut Model,
    records: &[EmbeddingRecord],
    order: &mut [usize],
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<f64> {
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let refs: Vec<&EmbeddingRecord> = batch.iter().map(|&i| &records[i]).collect();
        model.zero_grads();
        let loss = model.batch_loss(&refs, true)?;
        loss_sum += loss * refs.len() as f64;
        sgd_step(model.named_params_mut(), cfg.lr)?;
    }
    Ok(loss_sum / records.len() as f64)
}

/// Trains `spec` from a fresh `cfg.seed` initialization.
///
/// Each epoch shuffles the training records (seeded), walks them in
/// `batch_size` batches keeping the short last batch, and takes one SGD step
/// per batch. The returned model carries the parameters of the epoch with the
/// lowest validation loss.
pub fn train(
    spec: &VariantSpec,
    cfg: &TrainConfig,
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
) -> Result<(Model, TrainHistory)> {
    let model = Model::init(spec.clone(), cfg.seed)?;
    train_model(model, cfg, train_split, val_split)
}

/// Like [`train`], starting from an existing model.
pub fn train_model(
    mut model: Model,
    cfg: &TrainConfig,
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    check_split(model.spec(), train_split)?;
    check_split(model.spec(), val_split)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(0x5348_5546); // distinct from the init stream
    let mut order: Vec<usize> = (0..train_split.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let train_loss = run_epoch(&mut model, &train_split.records, &mut order, &mut shuffle_rng, cfg)?;
        let (val_loss, val_accuracy) = loss_and_accuracy(&model, &val_split.records)?;
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best.load_params_from(&model)?,
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    best.zero_grads();
    Ok((
        best,
        TrainHistory {
            epochs,
            best_epoch: stopper.best_epoch(),
            stopped_early,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub model: Model,
    pub history: TrainHistory,
}

#[derive(Debug, Clone)]
pub struct MultiRunOutcome {
    pub report: MultiRunReport,
    pub runs: Vec<RunOutcome>,
}

/// Trains `cfg.runs` models with seeds `cfg.seed + i` and scores each on
/// `test`. Runs may execute concurrently; results stay in run order.
pub fn multi_run(
    spec: &VariantSpec,
    cfg: &TrainConfig,
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
    test_split: &DatasetSplit,
) -> Result<MultiRunOutcome> {
    cfg.validate()?;
    check_split(spec, test_split)?;
    let results: Vec<Result<(RunOutcome, crate::metrics::MetricsReport)>> = (0..cfg.runs)
        .into_par_iter()
        .map(|i| {
            let run_cfg = TrainConfig {
                seed: cfg.seed + i as u64,
                ..cfg.clone()
            };
            let (model, history) = train(spec, &run_cfg, train_split, val_split)?;
            let report = evaluate(&model, test_split)?;
            Ok((
                RunOutcome {
                    seed: run_cfg.seed,
                    model,
                    history,
                },
                report,
            ))
        })
        .collect();
    let mut runs = Vec::with_capacity(cfg.runs);
    let mut reports = Vec::with_capacity(cfg.runs);
    for r in results {
        let (run, report) = r?;
        runs.push(run);
        reports.push(report);
    }
    Ok(MultiRunOutcome {
        report: MultiRunReport::from_runs(reports)?,
        runs,
    })
}
