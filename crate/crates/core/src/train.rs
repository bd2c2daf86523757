//! Training and evaluation loops.
//!
//! Each epoch takes one learning rate from the schedule, walks the shuffled
//! and augmented training split once, then evaluates the test split with
//! running batch-norm statistics. Every reduction runs in a fixed order, so a
//! given seed reproduces the same weights on any thread count.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::model::RecNetModel;
use crate::ops::{argmax_rows, softmax_cross_entropy};
use crate::optim::{sgd_step, Schedule, SgdConfig, SgdState};
use crate::state::Module;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub dampening: f64,
    pub nesterov: bool,
    pub batch: usize,
    pub epochs: usize,
    pub restarts: Vec<usize>,
    pub eta_min: f64,
    pub seed: u64,
    pub augment: bool,
    /// Writes 0 in the wall-clock column so logs of repeated runs compare equal.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            dampening: 0.0,
            nesterov: true,
            batch: 64,
            epochs: 200,
            restarts: vec![20, 60, 120],
            eta_min: 0.0,
            seed: 0,
            augment: true,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr0: self.lr0,
            eta_min: self.eta_min,
            epochs: self.epochs,
            restarts: self.restarts.clone(),
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            dampening: self.dampening,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::config(format!(
                "learning rate {} must be finite and non-negative",
                self.lr0
            )));
        }
        self.schedule().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_loss,test_acc,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.test_loss, self.test_acc, self.seconds
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Loss of the very first minibatch, before any update.
    pub initial_loss: Option<f64>,
}

/// Anything that maps a batch of images to logits.
pub trait Classifier {
    fn logits(&mut self, x: &Tensor4<f32>) -> Result<Tensor4<f32>>;
}

impl Classifier for RecNetModel<f32> {
    fn logits(&mut self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self.set_training(false);
        self.forward(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Top-1 accuracy and mean cross-entropy over a split, in order, without augmentation.
pub fn evaluate<C: Classifier + ?Sized>(
    model: &mut C,
    ds: &Dataset,
    norm: Normalizer,
    batch: usize,
) -> Result<Evaluation> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (x, labels) in minibatches::<f32>(ds, norm, batch, 0, 0, false, false) {
        let logits = model.logits(&x)?;
        let (l, _) = softmax_cross_entropy(&logits, &labels)?;
        loss += l * labels.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    let n = ds.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each with the metrics
/// row and the updated model.
pub fn train(
    model: &mut RecNetModel<f32>,
    train_ds: &Dataset,
    test_ds: &Dataset,
    norm: Normalizer,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &mut RecNetModel<f32>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n_classes = model.config().n_classes;
    for (name, ds) in [("train", train_ds), ("test", test_ds)] {
        if let Some(&l) = ds.labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::config(format!(
                "{name} split has label {l} but the model has {n_classes} classes"
            )));
        }
    }
    let schedule = cfg.schedule();
    let sgd = cfg.sgd();
    let mut state = SgdState::default();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = schedule.lr_at(epoch)?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (b, (x, labels)) in
            minibatches::<f32>(train_ds, norm, cfg.batch, cfg.seed, epoch, true, cfg.augment).enumerate()
        {
            model.set_training(true);
            model.zero_grad();
            let (logits, trace) = model.forward_traced(&x)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, loss });
            }
            report.initial_loss.get_or_insert(loss);
            model.backward(&trace, &grad)?;
            sgd_step(model, &mut state, lr, &sgd)?;
            loss_sum += loss * labels.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
        }
        let test = evaluate(model, test_ds, norm, cfg.batch)?;
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_loss: test.loss,
            test_acc: test.accuracy,
            seconds: if cfg.deterministic {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            },
        };
        on_epoch(&m, model)?;
        report.epochs.push(m);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, DatasetKind, Split};
    use crate::model::RecNetConfig;
    use crate::tensor::Dims4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Constant(Vec<f32>);

    impl Classifier for Constant {
        fn logits(&mut self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
            let n = x.dims().n;
            let k = self.0.len();
            Tensor4::new(Dims4::new(n, k, 1, 1), self.0.repeat(n))
        }
    }

    struct Oracle(Vec<usize>, usize);

    impl Classifier for Oracle {
        fn logits(&mut self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
            let n = x.dims().n;
            let out = Tensor4::from_fn(
                Dims4::new(n, 3, 1, 1),
                |i, c, _, _| if self.0[self.1 + i] == c { 5.0 } else { 0.0 },
            );
            self.1 += n;
            Ok(out)
        }
    }

    fn ds() -> Dataset {
        synthetic(DatasetKind::Cifar10, Split::Test, 30, 3, 0).unwrap()
    }

    #[test]
    fn constant_logits_score_the_favoured_class_frequency() {
        let ds = ds();
        let norm = Normalizer::fit(&ds);
        let tie = evaluate(&mut Constant(vec![1.0, 1.0, 1.0]), &ds, norm, 7).unwrap();
        assert!((tie.accuracy - 1.0 / 3.0).abs() < 1e-12);
        let e = evaluate(&mut Constant(vec![0.0, 0.0, 2.0]), &ds, norm, 7).unwrap();
        assert!((e.accuracy - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_scores_one_and_evaluation_repeats() {
        let ds = ds();
        let norm = Normalizer::fit(&ds);
        let labels: Vec<usize> = (0..ds.len()).map(|i| ds.label(i)).collect();
        let a = evaluate(&mut Oracle(labels.clone(), 0), &ds, norm, 8).unwrap();
        assert_eq!(a.accuracy, 1.0);
        let b = evaluate(&mut Oracle(labels, 0), &ds, norm, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_leave_model_untouched() {
        let ds = ds();
        let norm = Normalizer::fit(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = RecNetModel::new(RecNetConfig::new([1; 7]).classes(3), &mut rng).unwrap();
        let before = m.flat_params();
        let cfg = TrainConfig {
            epochs: 0,
            restarts: vec![],
            ..Default::default()
        };
        let r = train(&mut m, &ds, &ds, norm, &cfg, |_, _| Ok(())).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(m.flat_params(), before);
    }

    #[test]
    fn zero_learning_rate_changes_no_parameter() {
        let ds = ds().take(8);
        let norm = Normalizer::fit(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = RecNetModel::new(RecNetConfig::new([1; 7]).classes(3), &mut rng).unwrap();
        let before = m.flat_params();
        let cfg = TrainConfig {
            lr0: 0.0,
            epochs: 1,
            restarts: vec![],
            batch: 4,
            ..Default::default()
        };
        train(&mut m, &ds, &ds, norm, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(m.flat_params(), before);
    }

    #[test]
    fn label_outside_model_range_is_rejected() {
        let ds = ds();
        let norm = Normalizer::fit(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = RecNetModel::new(RecNetConfig::new([1; 7]).classes(2), &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            restarts: vec![],
            ..Default::default()
        };
        assert!(matches!(
            train(&mut m, &ds, &ds, norm, &cfg, |_, _| Ok(())),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nan_loss_aborts_with_location() {
        let ds = ds().take(8);
        let norm = Normalizer::fit(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = RecNetModel::new(RecNetConfig::new([1; 7]).classes(3), &mut rng).unwrap();
        m.fc_b.value[0] = f32::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            restarts: vec![],
            batch: 4,
            ..Default::default()
        };
        let err = train(&mut m, &ds, &ds, norm, &cfg, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFinite { epoch: 0, batch: 0, .. }), "{err}");
    }

    #[test]
    fn csv_layout() {
        let m = EpochMetrics {
            epoch: 1,
            lr: 0.05,
            train_loss: 0.5,
            train_acc: 0.75,
            test_loss: 0.25,
            test_acc: 1.0,
            seconds: 0.0,
        };
        assert_eq!(
            metrics_csv(&[m]),
            format!("{METRICS_HEADER}\n1,0.05,0.5,0.75,0.25,1,0\n")
        );
    }
}
