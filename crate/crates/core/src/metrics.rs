//! Accuracy bookkeeping, H-Mean, old-task accuracy, and the head-only
//! recovery probe.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{Dataset, ForgettingScenario};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::model::{argmax, MicroTransformer};
use crate::optim::OptimizerConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One evaluation row per task. Accuracies and `h_mean` are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task_id: u32,
    pub method: String,
    pub seed: u64,
    pub acc_r: f64,
    pub acc_f: f64,
    /// Absent for the first task.
    pub acc_o: Option<f64>,
    /// Accuracy on remaining classes that had no training samples.
    pub acc_m: Option<f64>,
    pub h_mean: f64,
    pub zero_group_ratio: f64,
    pub tunable_ratio: f64,
    pub wall_ms: Option<u64>,
}

impl MetricRecord {
    /// Checks the range invariants of every field.
    pub fn validate(&self) -> Result<()> {
        let pct = [
            Some(self.acc_r),
            Some(self.acc_f),
            self.acc_o,
            self.acc_m,
            Some(self.h_mean),
        ];
        if pct.iter().flatten().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::invalid(format!(
                "task {}: percentage outside [0, 100]",
                self.task_id
            )));
        }
        if ![self.zero_group_ratio, self.tunable_ratio]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
        {
            return Err(Error::invalid(format!("task {}: ratio outside [0, 1]", self.task_id)));
        }
        Ok(())
    }
}

/// Predicted classes for a fixed dataset, so several class filters can be
/// scored from one forward pass.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Predictions {
    pub fn new(model: &MicroTransformer, data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptySelection("dataset has no samples".into()));
        }
        Ok(Predictions {
            predicted: model.predict(&data.to_tensor())?,
            labels: data.labels().to_vec(),
        })
    }

    /// Percentage correct over samples whose label is in `classes` (all
    /// samples when `None`).
    pub fn accuracy(&self, classes: Option<&[usize]>) -> Result<f64> {
        accuracy_of(&self.predicted, &self.labels, classes)
    }
}

/// Percentage of matching predictions, restricted to labels in `classes`.
pub fn accuracy_of(predicted: &[usize], labels: &[usize], classes: Option<&[usize]>) -> Result<f64> {
    let keep: Option<BTreeSet<usize>> = classes.map(|c| c.iter().copied().collect());
    let (mut hit, mut n) = (0usize, 0usize);
    for (&p, &y) in predicted.iter().zip(labels) {
        if keep.as_ref().is_none_or(|k| k.contains(&y)) {
            n += 1;
            hit += usize::from(p == y);
        }
    }
    if n == 0 {
        return Err(Error::EmptySelection(match classes {
            Some(c) => format!("no samples for classes {c:?}"),
            None => "dataset has no samples".into(),
        }));
    }
    Ok(100.0 * hit as f64 / n as f64)
}

/// Argmax accuracy over all `C` logits, as a percentage.
pub fn accuracy(model: &MicroTransformer, data: &Dataset, classes: Option<&[usize]>) -> Result<f64> {
    let sel = match classes {
        Some(c) => data.filter_classes(c),
        None => data.clone(),
    };
    if sel.is_empty() {
        return Err(Error::EmptySelection(format!("no samples for classes {classes:?}")));
    }
    Predictions::new(model, &sel)?.accuracy(None)
}

/// Harmonic mean of retained accuracy and the drop on forgotten classes.
/// A negative drop counts as no forgetting.
pub fn h_mean(acc_r: f64, acc_f_origin: f64, acc_f_now: f64) -> f64 {
    let mut drop = acc_f_origin - acc_f_now;
    if drop < 0.0 {
        log::warn!("forgotten-class accuracy rose from {acc_f_origin:.2} to {acc_f_now:.2}; drop clamped to 0");
        drop = 0.0;
    }
    if acc_r + drop <= 0.0 {
        return 0.0;
    }
    2.0 * acc_r * drop / (acc_r + drop)
}

/// Accuracy on the classes forgotten by tasks before `task_id` (1-based);
/// `None` for the first task.
pub fn old_accuracy(preds: &Predictions, scenario: &ForgettingScenario, task_id: u32) -> Result<Option<f64>> {
    if task_id < 2 {
        return Ok(None);
    }
    let old: Vec<usize> = scenario
        .tasks
        .iter()
        .take_while(|t| t.task_id < task_id)
        .flat_map(|t| t.forget_classes.iter().copied())
        .collect();
    preds.accuracy(Some(&old)).map(Some)
}

/// Head fine-tuning schedule for the recovery probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryConfig {
    #[serde(default = "recovery_defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "recovery_defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "recovery_defaults::optimizer")]
    pub optimizer: OptimizerConfig,
    /// Bias given to masked head columns of the comparator.
    #[serde(default = "recovery_defaults::mask_bias")]
    pub mask_bias: f64,
}

mod recovery_defaults {
    use crate::optim::OptimizerConfig;
    pub fn epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn optimizer() -> OptimizerConfig {
        OptimizerConfig::adam(1e-3)
    }
    pub fn mask_bias() -> f64 {
        0.0
    }
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            epochs: recovery_defaults::epochs(),
            batch_size: recovery_defaults::batch_size(),
            optimizer: recovery_defaults::optimizer(),
            mask_bias: recovery_defaults::mask_bias(),
        }
    }
}

/// Test accuracies on forgotten and retained classes after each epoch;
/// entry 0 is before any fine-tuning.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCurve {
    pub forgotten: Vec<f64>,
    pub retained: Vec<f64>,
}

/// Copy of `model` whose head columns for `classes` have zero weight and a
/// bias of `bias`.
pub fn mask_head(model: &MicroTransformer, classes: &[usize], bias: f64) -> Result<MicroTransformer> {
    let c = model.num_classes();
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::invalid(format!("cannot mask unknown class {bad}")));
    }
    let mut out = model.clone();
    let [w, b] = out.head_params();
    let store = out.params_mut();
    let wd = store.value_mut(w);
    let rows = wd.rows();
    for r in 0..rows {
        for &k in classes {
            wd.data_mut()[r * c + k] = 0.0;
        }
    }
    for &k in classes {
        store.value_mut(b).data_mut()[k] = bias;
    }
    Ok(out)
}

/// Fine-tunes only the classification head on `train` (backbone frozen) and
/// records test accuracy on `forgotten` and the remaining classes per epoch.
pub fn recovery_probe(
    model: &MicroTransformer,
    train: &Dataset,
    test: &Dataset,
    forgotten: &[usize],
    cfg: &RecoveryConfig,
    seed: u64,
) -> Result<RecoveryCurve> {
    if train.is_empty() {
        return Err(Error::invalid("recovery probe needs training data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("recovery batch size must be positive"));
    }
    let retained: Vec<usize> = (0..model.num_classes()).filter(|k| !forgotten.contains(k)).collect();
    let ftrain = model.feature_matrix(&train.to_tensor())?;
    let ftest = model.feature_matrix(&test.to_tensor())?;
    let d = ftrain.last_dim();

    let mut head = ParamStore::new();
    let [w0, b0] = model.head_params();
    let w = head.insert("head.w", model.params().value(w0).clone())?;
    let b = head.insert("head.b", model.params().value(b0).clone())?;

    let score = |head: &ParamStore, curve: &mut RecoveryCurve| -> Result<()> {
        let mut g = Graph::inference();
        let x = g.constant(ftest.clone());
        let wv = g.param(head, w);
        let bv = g.param(head, b);
        let z = g.matmul(x, wv)?;
        let z = g.add_bias(z, bv)?;
        let logits = g.value(z);
        let pred: Vec<usize> = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
        curve
            .forgotten
            .push(accuracy_of(&pred, test.labels(), Some(forgotten))?);
        curve.retained.push(accuracy_of(&pred, test.labels(), Some(&retained))?);
        Ok(())
    };

    let mut curve = RecoveryCurve::default();
    score(&head, &mut curve)?;
    let mut opt = cfg.optimizer.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<f64> = batch.iter().flat_map(|&i| ftrain.row(i).iter().copied()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[batch.len(), d], rows)?);
            let wv = g.param(&head, w);
            let bv = g.param(&head, b);
            let z = g.matmul(x, wv)?;
            let z = g.add_bias(z, bv)?;
            let loss = cross_entropy(&mut g, z, &labels)?;
            let grads = g.backward(loss)?;
            opt.step(&mut head, grads.params())?;
        }
        score(&head, &mut curve)?;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_row_h_mean() {
        let h = h_mean(71.35, 72.74, 0.0);
        assert!((h - 72.04).abs() < 0.01, "{h}");
    }

    #[test]
    fn h_mean_edge_cases() {
        assert!((h_mean(40.0, 90.0, 50.0) - 40.0).abs() < 1e-12);
        assert_eq!(h_mean(80.0, 50.0, 50.0), 0.0);
        assert_eq!(h_mean(80.0, 50.0, 60.0), 0.0);
        assert_eq!(h_mean(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn counting_accuracy() {
        let labels = [0, 1, 2, 0, 1, 2];
        assert_eq!(accuracy_of(&labels, &labels, None).unwrap(), 100.0);
        let shifted: Vec<usize> = labels.iter().map(|y| (y + 1) % 3).collect();
        assert_eq!(accuracy_of(&shifted, &labels, None).unwrap(), 0.0);
        let pred = [0, 2, 2, 1, 1, 0];
        assert_eq!(accuracy_of(&pred, &labels, Some(&[0, 1])).unwrap(), 50.0);
        assert!(matches!(
            accuracy_of(&pred, &labels, Some(&[7])),
            Err(Error::EmptySelection(_))
        ));
    }
}
