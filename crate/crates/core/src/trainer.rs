//! Head fine-tuning against a frozen base, evaluation, and the
//! data-vs-epochs experiment grid.
//!
//! The base is frozen, so its encoding of a given pair never changes; every
//! pair is encoded once up front and only the head runs per step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::base_lm::{BaseLM, Encoding};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, Sgd};
use crate::ph_head::{head_file_size, LinearHead, PHConfig, PairClassifier, PersonalizationHead, FALSE_INDEX, TRUE_INDEX};
use crate::task_data::{
    encode_pair, make_binary_pairs, subsample_per_class, verbalize, BinaryTaskExample, Dataset, LabeledExample, Split,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub anneal_factor: f64,
    pub anneal_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub negatives_per_example: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 0.02,
            epochs: 50,
            anneal_factor: 0.5,
            anneal_patience: 3,
            min_lr: 1e-4,
            seed: 0,
            negatives_per_example: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor < 1.0) {
            return Err(Error::Config(format!("anneal_factor {} outside (0, 1)", self.anneal_factor)));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config(format!("min_lr {} must be in (0, lr]", self.min_lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean training batch loss per epoch.
    pub epoch_losses: Vec<f32>,
    /// Learning rate in effect at the end of each epoch.
    pub epoch_lrs: Vec<f64>,
    pub trainable_param_count: usize,
    pub wall_time_secs: f64,
    pub base_checksum_before: u64,
    pub base_checksum_after: u64,
    pub final_lr: f64,
    pub optimizer: String,
    pub n_pairs: usize,
}

/// Trains a classifier one epoch at a time so a run can be evaluated at
/// checkpoints and then continued with its optimizer state intact.
pub struct HeadTrainer<'b, C: PairClassifier> {
    base: &'b BaseLM,
    head: C,
    cfg: TrainConfig,
    data: Vec<(Encoding, usize)>,
    opt: Sgd,
    best_loss: f32,
    bad_epochs: usize,
    epoch_losses: Vec<f32>,
    epoch_lrs: Vec<f64>,
    checksum_before: u64,
    elapsed: f64,
}

impl<'b, C: PairClassifier> HeadTrainer<'b, C> {
    pub fn new(base: &'b BaseLM, head: C, pairs: &[BinaryTaskExample], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if !base.is_frozen() {
            return Err(Error::BaseNotFrozen);
        }
        if pairs.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        if head.d_model() != base.config.d_model {
            return Err(Error::Config(format!(
                "head d_model {} does not match base d_model {}",
                head.d_model(),
                base.config.d_model
            )));
        }
        let start = Instant::now();
        let checksum_before = base.compute_checksum();
        let data = pairs
            .par_iter()
            .map(|p| {
                let target = if p.target { TRUE_INDEX } else { FALSE_INDEX };
                Ok((encode_pair(base, &p.label_text, &p.input_text)?, target))
            })
            .collect::<Result<Vec<_>>>()?;
        let opt = Sgd::new(&head.tensors(), cfg.lr)?;
        Ok(HeadTrainer {
            base,
            head,
            cfg: cfg.clone(),
            data,
            opt,
            best_loss: f32::INFINITY,
            bad_epochs: 0,
            epoch_losses: Vec::new(),
            epoch_lrs: Vec::new(),
            checksum_before,
            elapsed: start.elapsed().as_secs_f64(),
        })
    }

    pub fn head(&self) -> &C {
        &self.head
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch_losses.len()
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr()
    }

    /// Runs `n` more epochs and returns their losses.
    pub fn run_epochs(&mut self, n: usize) -> Result<&[f32]> {
        let start = Instant::now();
        let first = self.epoch_losses.len();
        for _ in 0..n {
            let loss = self.epoch()?;
            self.epoch_losses.push(loss);
            self.anneal(loss);
            self.epoch_lrs.push(self.opt.lr());
        }
        self.elapsed += start.elapsed().as_secs_f64();
        Ok(&self.epoch_losses[first..])
    }

    fn epoch(&mut self) -> Result<f32> {
        let epoch = self.epoch_losses.len() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0f64;
            for t in self.head.tensors_mut() {
                t.zero_grad();
            }
            for &i in batch {
                let (enc, target) = &self.data[i];
                let mut g = Graph::<f32>::new();
                let ids: Vec<NodeId> = self.head.tensors().into_iter().map(|t| g.param(t)).collect();
                let h = g.constant(&enc.hidden);
                let logits = self.head.logits_graph(&mut g, &ids, h, enc.cls_index, true, &mut rng)?;
                let loss = g.cross_entropy(logits, &[*target])?;
                batch_loss += g.value(loss)[0] as f64;
                let scaled = g.scale(loss, scale);
                g.backward(scaled)?;
                for (t, &id) in self.head.tensors_mut().into_iter().zip(&ids) {
                    if let Some(grad) = g.grad(id) {
                        t.accumulate_grad(grad);
                    }
                }
            }
            self.opt.step(&mut self.head.tensors_mut());
            total += batch_loss * scale;
            batches += 1;
        }
        let loss = (total / batches as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::Domain(format!(
                "training diverged at epoch {} (loss {loss})",
                self.epoch_losses.len() + 1
            )));
        }
        Ok(loss)
    }

    fn anneal(&mut self, loss: f32) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.bad_epochs = 0;
            return;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.cfg.anneal_patience {
            let lr = (self.opt.lr() * self.cfg.anneal_factor).max(self.cfg.min_lr);
            self.opt.set_lr(lr);
            self.bad_epochs = 0;
        }
    }

    pub fn report(&self) -> TrainingReport {
        TrainingReport {
            epoch_losses: self.epoch_losses.clone(),
            epoch_lrs: self.epoch_lrs.clone(),
            trainable_param_count: self.head.param_count(),
            wall_time_secs: self.elapsed,
            base_checksum_before: self.checksum_before,
            base_checksum_after: self.base.compute_checksum(),
            final_lr: self.opt.lr(),
            optimizer: format!(
                "sgd(lr={}, anneal_factor={}, patience={}, min_lr={})",
                self.cfg.lr, self.cfg.anneal_factor, self.cfg.anneal_patience, self.cfg.min_lr
            ),
            n_pairs: self.data.len(),
        }
    }

    pub fn finish(self) -> (C, TrainingReport) {
        let report = self.report();
        (self.head, report)
    }
}

/// Trains a personalization head for `cfg.epochs` epochs over `pairs`.
pub fn train_head(
    base: &BaseLM,
    head: PersonalizationHead,
    pairs: &[BinaryTaskExample],
    cfg: &TrainConfig,
) -> Result<(PersonalizationHead, TrainingReport)> {
    let mut t = HeadTrainer::new(base, head, pairs, cfg)?;
    t.run_epochs(cfg.epochs)?;
    Ok(t.finish())
}

/// The linear-only baseline: same loop, output layer on the [CLS] encoding only.
pub fn train_linear_only(
    base: &BaseLM,
    cfg: &TrainConfig,
    pairs: &[BinaryTaskExample],
) -> Result<(LinearHead, TrainingReport)> {
    let head = LinearHead::init(base.config.d_model, cfg.seed)?;
    let mut t = HeadTrainer::new(base, head, pairs, cfg)?;
    t.run_epochs(cfg.epochs)?;
    Ok(t.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][predicted]`, indexed by class order.
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl EvalMetrics {
    /// Metrics from class indices. Classes that never occur and are never
    /// predicted still count toward the macro average, with F1 = 0.
    pub fn from_predictions(classes: &[String], truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim("metrics", &[truth.len()], &[predicted.len()]));
        }
        if truth.is_empty() {
            return Err(Error::Data("no predictions to score".into()));
        }
        let c = classes.len();
        let mut confusion = vec![vec![0usize; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= c || p >= c {
                return Err(Error::Data(format!("class index out of range for {c} classes")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|i| {
                let tp = confusion[i][i];
                let support: usize = confusion[i].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[i]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                ClassMetrics {
                    class: classes[i].clone(),
                    precision,
                    recall,
                    f1: f1(precision, recall),
                    support,
                }
            })
            .collect();
        // single-label decoding over the full class set: total FP == total FN,
        // so micro precision, recall and F1 all equal accuracy
        let accuracy = ratio(correct, truth.len());
        Ok(EvalMetrics {
            accuracy,
            macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64,
            micro_f1: f1(accuracy, accuracy),
            per_class,
            confusion,
            n: truth.len(),
        })
    }
}

/// Test examples with every `(class, text)` pair encoded by the base.
pub struct EncodedTestSet {
    classes: Vec<String>,
    truth: Vec<usize>,
    /// `encodings[example][class]`
    encodings: Vec<Vec<Encoding>>,
}

impl EncodedTestSet {
    pub fn new(base: &BaseLM, test: &[LabeledExample], classes: &[String]) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::Data("empty test set".into()));
        }
        if classes.is_empty() {
            return Err(Error::Data("no classes to decode over".into()));
        }
        let labels: Vec<String> = classes.iter().map(|c| verbalize(c)).collect();
        let truth = test
            .iter()
            .map(|e| {
                classes
                    .iter()
                    .position(|c| *c == e.class_name)
                    .ok_or_else(|| Error::Data(format!("test label {:?} not among the classes", e.class_name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let encodings = test
            .par_iter()
            .map(|e| labels.iter().map(|l| encode_pair(base, l, &e.text)).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedTestSet {
            classes: classes.to_vec(),
            truth,
            encodings,
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn evaluate<C: PairClassifier>(&self, head: &C) -> Result<EvalMetrics> {
        let predicted = self
            .encodings
            .par_iter()
            .map(|row| {
                let mut k = 0;
                let p = crate::task_data::predict_class(
                    |_| {
                        k += 1;
                        head.confidence(&row[k - 1])
                    },
                    &self.classes,
                )?;
                Ok(self.classes.iter().position(|c| *c == p.class).unwrap_or(0))
            })
            .collect::<Result<Vec<_>>>()?;
        EvalMetrics::from_predictions(&self.classes, &self.truth, &predicted)
    }
}

/// Decodes every test example over all classes and scores the predictions.
pub fn evaluate<C: PairClassifier>(
    base: &BaseLM,
    head: &C,
    test: &[LabeledExample],
    classes: &[String],
) -> Result<EvalMetrics> {
    EncodedTestSet::new(base, test, classes)?.evaluate(head)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub ph: PHConfig,
    pub per_class: usize,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub params: usize,
    pub head_bytes: usize,
    /// Cumulative training time up to this checkpoint.
    pub wall_time_secs: f64,
}

fn check_ascending(name: &str, v: &[usize]) -> Result<()> {
    if v.is_empty() || v[0] == 0 || v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("{name} must be positive and strictly ascending, got {v:?}")));
    }
    Ok(())
}

/// One grid row: a fresh head trained on `per_class` examples per class,
/// evaluated at each epoch checkpoint and continued from there.
pub fn run_grid_row(
    base: &BaseLM,
    cfg: &TrainConfig,
    ds: &Dataset,
    test: &EncodedTestSet,
    per_class: usize,
    epoch_checkpoints: &[usize],
    ph: PHConfig,
) -> Result<Vec<GridCell>> {
    check_ascending("epoch checkpoints", epoch_checkpoints)?;
    let sub = subsample_per_class(ds, Split::Train, per_class, cfg.seed)?;
    let pairs = make_binary_pairs(&sub, cfg.negatives_per_example, cfg.seed)?;
    let head = PersonalizationHead::init(ph)?;
    let params = head.param_count();
    let mut trainer = HeadTrainer::new(base, head, &pairs, cfg)?;
    let mut cells = Vec::with_capacity(epoch_checkpoints.len());
    for &ckpt in epoch_checkpoints {
        trainer.run_epochs(ckpt - trainer.epochs_done())?;
        cells.push(GridCell {
            ph,
            per_class,
            epoch: ckpt,
            seed: cfg.seed,
            metrics: test.evaluate(trainer.head())?,
            params,
            head_bytes: head_file_size(&ph),
            wall_time_secs: trainer.report().wall_time_secs,
        });
    }
    Ok(cells)
}

/// The data-vs-epochs protocol: for every head config and per-class count,
/// train on a nested subsample and evaluate at each checkpoint without
/// re-initializing. Cells come out in (config, count, checkpoint) order.
pub fn run_data_epoch_grid(
    base: &BaseLM,
    cfg: &TrainConfig,
    ds: &Dataset,
    per_class_counts: &[usize],
    epoch_checkpoints: &[usize],
    ph_configs: &[PHConfig],
) -> Result<Vec<GridCell>> {
    check_ascending("per-class counts", per_class_counts)?;
    check_ascending("epoch checkpoints", epoch_checkpoints)?;
    let test = EncodedTestSet::new(base, &ds.test, &ds.classes)?;
    let mut cells = Vec::new();
    for ph in ph_configs {
        for &k in per_class_counts {
            cells.extend(run_grid_row(base, cfg, ds, &test, k, epoch_checkpoints, ph.with_seed(cfg.seed))?);
        }
    }
    Ok(cells)
}

/// Macro-F1 of each (count, checkpoint) cell minus the first cell's, for one
/// head config: `out[count][checkpoint]`, in points.
pub fn differential_matrix(cells: &[GridCell], counts: &[usize], checkpoints: &[usize]) -> Option<Vec<Vec<f64>>> {
    let find = |k: usize, e: usize| cells.iter().find(|c| c.per_class == k && c.epoch == e);
    let origin = find(*counts.first()?, *checkpoints.first()?)?.metrics.macro_f1;
    counts
        .iter()
        .map(|&k| {
            checkpoints
                .iter()
                .map(|&e| find(k, e).map(|c| 100.0 * (c.metrics.macro_f1 - origin)))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_predictions() {
        let m = EvalMetrics::from_predictions(&names(&["a", "b", "c"]), &[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.micro_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_one_class() {
        let m = EvalMetrics::from_predictions(&names(&["a", "b"]), &[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.micro_f1, m.accuracy);
        assert_eq!(m.confusion, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let m = EvalMetrics::from_predictions(&names(&["a", "b", "c"]), &[0, 1], &[0, 1]).unwrap();
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { anneal_factor: 1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn differential_is_relative_to_first_cell() {
        let m = |f: f64| EvalMetrics {
            accuracy: f,
            macro_f1: f,
            micro_f1: f,
            per_class: vec![],
            confusion: vec![],
            n: 1,
        };
        let cell = |k, e, f| GridCell {
            ph: PHConfig::new(4, 4, 1),
            per_class: k,
            epoch: e,
            seed: 0,
            metrics: m(f),
            params: 0,
            head_bytes: 0,
            wall_time_secs: 0.0,
        };
        let cells = vec![cell(1, 1, 0.5), cell(1, 2, 0.6), cell(2, 1, 0.75), cell(2, 2, 0.8)];
        let d = differential_matrix(&cells, &[1, 2], &[1, 2]).unwrap();
        assert_eq!(d[0][0], 0.0);
        assert!((d[1][1] - 30.0).abs() < 1e-9);
    }
}
