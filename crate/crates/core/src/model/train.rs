use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelGraph, WeightStore};
use crate::adam::AdamConfig;
use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::layers::log_sum_exp;
use crate::metrics::{derive_metrics, ConfusionMatrix, Metrics};
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 60,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Input(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Input("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Metrics of one epoch. `train_*` come from the training-mode passes of the
/// epoch itself (dropout active), `val_*` from an inference pass afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

const HISTORY_HEADER: &str = "epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc";

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Header row plus one row per epoch; reals use the shortest exact representation.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(Error::Format("history TSV header missing or wrong".into()));
        }
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("history row '{line}' needs 5 fields")));
            }
            let real = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number '{s}' in history")))
            };
            records.push(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad epoch '{}'", f[0])))?,
                train_loss: real(f[1])?,
                train_acc: real(f[2])?,
                val_loss: real(f[3])?,
                val_acc: real(f[4])?,
            });
        }
        Ok(History { records })
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: History,
    /// 1-based epoch with the highest validation accuracy (earliest on ties).
    pub best_epoch: usize,
    pub best_weights: WeightStore<f32>,
}

/// Trains for `cfg.epochs` epochs. The graph keeps the final weights; the
/// best-validation weights are returned alongside the history.
///
/// Each epoch reshuffles with a generator seeded by `seed + epoch`, which
/// also drives dropout. With an empty validation set the validation columns
/// are NaN and the final epoch counts as best.
pub fn fit(
    g: &mut ModelGraph<f32>,
    train: &LabeledSet,
    val: &LabeledSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let adam = cfg.adam();
    let mut history = History::default();
    let mut best: Option<(usize, f64, WeightStore<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for rows in order.chunks(cfg.batch_size) {
            let (batch, labels) = train.batch(rows);
            let (loss, ok) = g.train_step_counted(&batch, &labels, &adam, &mut rng)?;
            loss_sum += loss as f64 * rows.len() as f64;
            correct += ok;
        }
        let (val_loss, val_acc) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let ev = loss_and_accuracy(g, val, cfg.batch_size)?;
            (ev.0, ev.1)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&record);
        history.records.push(record);
        let score = if val_acc.is_nan() { f64::NEG_INFINITY } else { val_acc };
        let improves = match &best {
            None => true,
            Some((_, s, _)) => score > *s || (val.is_empty()),
        };
        if improves {
            best = Some((epoch + 1, score, g.weights().clone()));
        }
    }
    let (best_epoch, _, best_weights) = best.expect("at least one epoch");
    Ok(FitOutcome {
        history,
        best_epoch,
        best_weights,
    })
}

fn predict_all(g: &ModelGraph<f32>, set: &LabeledSet, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let rows: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        let (batch, _) = set.batch(chunk);
        let logits = g.predict_logits(&batch)?;
        for r in 0..chunk.len() {
            out.push(logits.outer_slice(r).to_vec());
        }
    }
    Ok(out)
}

/// Inference-mode mean loss and accuracy.
pub(crate) fn loss_and_accuracy(g: &ModelGraph<f32>, set: &LabeledSet, batch_size: usize) -> Result<(f64, f64)> {
    let logits = predict_all(g, set, batch_size)?;
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (row, &label) in logits.iter().zip(&set.labels) {
        loss += (log_sum_exp(row) - row[label]) as f64;
        correct += (argmax(row) == label) as usize;
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub predictions: Vec<usize>,
}

/// Inference over a labelled set into a confusion matrix and macro metrics.
pub fn evaluate(g: &ModelGraph<f32>, test: &LabeledSet) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let logits = predict_all(g, test, 32)?;
    let mut confusion = ConfusionMatrix::new(g.num_classes());
    let mut predictions = Vec::with_capacity(test.len());
    for (row, &label) in logits.iter().zip(&test.labels) {
        let pred = argmax(row);
        confusion.accumulate(label, pred)?;
        predictions.push(pred);
    }
    let metrics = derive_metrics(&confusion)?;
    Ok(Evaluation {
        confusion,
        metrics,
        predictions,
    })
}
