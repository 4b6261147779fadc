//! Training loop, evaluation and run artifacts.
//!
//! A run directory holds `config.txt`, `metrics.csv` (one row per epoch),
//! `last.ckpt` (rewritten every epoch, resumable), `best.ckpt` (best
//! validation macro-mIoU), `final.ckpt`, and the held-out test report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{augment, collate, generate_dataset, load_dataset, DatasetSplits, SegmentationSample};
use crate::error::{Error, Result};
use crate::losses::{class_frequencies, ClassWeights, LossKind, LossSpec};
use crate::metrics::{ConfusionMatrix, Summary};
use crate::models::{argmax_channels, UNet};
use crate::params::derive_seed;

use super::adam::Adam;
use super::checkpoint::{Checkpoint, EpochRecord, Progress};
use super::config::{DataSource, TrainConfig};
use super::curves;
use super::evaluate::{write_report, EvalReport};
use super::schedule::Plateau;

/// Loads or generates the dataset described by `cfg` and partitions it.
pub fn load_data(cfg: &TrainConfig) -> Result<DatasetSplits> {
    match &cfg.data {
        DataSource::Synthetic { n } => {
            let samples = generate_dataset(*n, cfg.size, cfg.data_seed)?;
            DatasetSplits::from_samples(samples, &cfg.split, cfg.data_seed)
        }
        DataSource::Directory(root) => load_dataset(root, &cfg.split, cfg.data_seed, cfg.size),
    }
}

/// The loss `cfg` asks for; weighted focal loss takes its class weights from
/// training-split pixel frequencies.
pub fn loss_spec(cfg: &TrainConfig, train: &[SegmentationSample], num_classes: usize) -> Result<LossSpec> {
    Ok(match cfg.loss {
        LossKind::CrossEntropy => LossSpec::cross_entropy(),
        LossKind::Focal => LossSpec::focal(cfg.gamma),
        LossKind::WeightedFocal => {
            let freq = class_frequencies(train.iter().map(|s| s.mask.as_slice()), num_classes)?;
            LossSpec::weighted_focal(cfg.gamma, ClassWeights::enet(&freq, cfg.enet_c)?)
        }
    })
}

/// Eval-mode pass over `samples`, one image at a time. Returns the mean
/// per-image loss (if a loss is given) and the confusion matrix.
pub fn evaluate_samples(
    model: &mut UNet<f32>,
    samples: &[SegmentationSample],
    loss: Option<&LossSpec>,
) -> Result<(Option<f64>, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    let mut total = 0.0;
    for s in samples {
        let (x, mask) = collate(&[s])?;
        let mut g = Graph::new();
        let xv = g.input(x)?;
        let logits = model.forward(&mut g, xv, false)?;
        if let Some(spec) = loss {
            let l = spec.apply(&mut g, logits, &mask)?;
            total += g.value(l).data()[0] as f64;
        }
        cm.accumulate(&argmax_channels(g.value(logits)), &mask)?;
    }
    let mean = (loss.is_some() && !samples.is_empty()).then(|| total / samples.len() as f64);
    Ok((mean, cm))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: UNet<f32>,
    pub optimizer: Adam<f32>,
    pub loss: LossSpec,
    pub data: DatasetSplits,
    pub progress: Progress,
    plateau: Plateau,
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights are in `best.ckpt`.
    pub best_epoch: usize,
    /// Test-split evaluation of the selected checkpoint, if the split is non-empty.
    pub test: Option<EvalReport>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: DatasetSplits) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let model = UNet::build(&cfg.model_config(), cfg.seed)?;
        let optimizer = Adam::new(model.store());
        let loss = loss_spec(&cfg, &data.train, model.config().num_classes)?;
        let progress = Progress { lr: cfg.lr as f32, history: Vec::new() };
        let plateau = Plateau::new(cfg.patience);
        Ok(Self { cfg, model, optimizer, loss, data, progress, plateau })
    }

    /// Continues a run from a checkpoint written by [`Trainer::run`].
    pub fn resume(cfg: TrainConfig, data: DatasetSplits, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        if ck.model != t.cfg.model_config() {
            return Err(Error::config("checkpoint model does not match the configuration"));
        }
        t.model = ck.restore_model()?;
        t.optimizer = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::config("checkpoint carries no optimizer state"))?;
        t.progress = ck
            .progress
            .clone()
            .ok_or_else(|| Error::config("checkpoint carries no training progress"))?;
        for rec in &t.progress.history {
            if let Some(v) = rec.val_miou {
                t.plateau.observe(v as f64, rec.lr as f64);
            }
        }
        Ok(t)
    }

    pub fn epochs_done(&self) -> usize {
        self.progress.history.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.optimizer), Some(&self.progress))
    }

    /// One pass over the training split, then validation. Shuffling and
    /// augmentation draw from a stream keyed by (seed, epoch), so a resumed
    /// run repeats an uninterrupted one exactly.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epochs_done();
        let lr = self.progress.lr;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 1 << 32 | epoch as u64));
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut graph = Graph::new();
        for batch in order.chunks(self.cfg.batch_size) {
            let owned: Vec<SegmentationSample> = batch
                .iter()
                .map(|&i| {
                    let s = &self.data.train[i];
                    if self.cfg.augment {
                        augment(s, &mut rng)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&SegmentationSample> = owned.iter().collect();
            let (x, mask) = collate(&refs)?;
            graph.clear();
            let xv = graph.input(x)?;
            let logits = self.model.forward(&mut graph, xv, true)?;
            let l = self.loss.apply(&mut graph, logits, &mask)?;
            loss_sum += graph.value(l).data()[0] as f64 * batch.len() as f64;
            graph.backward(l)?;
            let store = self.model.store_mut();
            store.zero_grad();
            store.accumulate_grads(&graph);
            self.optimizer.step(store, lr as f64)?;
        }
        let train_loss = (loss_sum / self.data.train.len() as f64) as f32;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss in epoch {}", epoch + 1)));
        }

        let (val_loss, val_miou) = if self.data.val.is_empty() {
            (None, None)
        } else {
            let (l, cm) = evaluate_samples(&mut self.model, &self.data.val, Some(&self.loss))?;
            (l.map(|v| v as f32), Some(cm.summary()?.macro_miou as f32))
        };
        let train_miou = if self.cfg.eval_train {
            let (_, cm) = evaluate_samples(&mut self.model, &self.data.train, None)?;
            Some(cm.summary()?.macro_miou as f32)
        } else {
            None
        };
        let next_lr = match val_miou {
            Some(v) => self.plateau.observe(v as f64, lr as f64) as f32,
            None => lr,
        };
        let rec = EpochRecord { epoch: epoch + 1, train_loss, val_loss, val_miou, train_miou, lr };
        self.progress.history.push(rec);
        self.progress.lr = next_lr;
        Ok(rec)
    }

    fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<(usize, f32)> = None;
        for r in &self.progress.history {
            if let Some(v) = r.val_miou {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((r.epoch, v));
                }
            }
        }
        best.map(|(e, _)| e)
    }

    /// Trains up to `cfg.epochs` (or until the train-mIoU target is met),
    /// writing artifacts to `out_dir` after every epoch, then evaluates the
    /// selected checkpoint (best validation, else final) on the test split.
    pub fn run(&mut self, out_dir: &Path, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<RunOutcome> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join("config.txt"), self.cfg.to_text())?;
        let target = self.cfg.stop_at_train_miou;
        let reached = |h: &[EpochRecord]| {
            matches!((target, h.last().and_then(|r| r.train_miou)), (Some(t), Some(v)) if v as f64 >= t)
        };
        while self.epochs_done() < self.cfg.epochs && !reached(&self.progress.history) {
            let rec = self.train_epoch()?;
            write_metrics_csv(&out_dir.join("metrics.csv"), &self.progress.history)?;
            let ck = self.checkpoint();
            ck.save(&out_dir.join("last.ckpt"))?;
            if self.best_epoch() == Some(rec.epoch) {
                ck.save(&out_dir.join("best.ckpt"))?;
            }
            on_epoch(&rec);
        }
        let ck = self.checkpoint();
        ck.save(&out_dir.join("final.ckpt"))?;
        let best_epoch = match self.best_epoch() {
            Some(e) => e,
            None => {
                ck.save(&out_dir.join("best.ckpt"))?;
                self.epochs_done()
            }
        };
        fs::write(out_dir.join("curves.svg"), curves::svg(&self.progress.history))?;

        let test = if self.data.test.is_empty() {
            None
        } else {
            let mut selected = Checkpoint::load(&out_dir.join("best.ckpt"))?.restore_model()?;
            let (_, cm) = evaluate_samples(&mut selected, &self.data.test, None)?;
            let report = EvalReport::new(self.cfg.label(), "test", cm)?;
            write_report(out_dir, &report)?;
            Some(report)
        };
        Ok(RunOutcome { history: self.progress.history.clone(), best_epoch, test })
    }

    /// Eval-mode summary of a named split.
    pub fn score(&mut self, split: &str) -> Result<Summary> {
        let samples = self.data.get(split)?.to_vec();
        let (_, cm) = evaluate_samples(&mut self.model, &samples, None)?;
        cm.summary()
    }
}

fn opt(v: Option<f32>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

/// `epoch,train_loss,val_loss,val_miou,train_miou,lr`; missing values empty.
pub fn write_metrics_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss,val_miou,train_miou,lr\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_miou),
            opt(r.train_miou),
            r.lr
        );
    }
    fs::write(path, s)?;
    Ok(())
}
