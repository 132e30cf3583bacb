//! Dataset and label containers shared by the rest of the engine.

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Tolerance for probability-simplex membership checks.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Unlabeled instances with optional ground truth for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    true_labels: Option<Vec<usize>>,
    num_classes: usize,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        true_labels: Option<Vec<usize>>,
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if features.cols() == 0 {
            return Err(Error::InvalidInput(
                "feature dimension must be at least 1".into(),
            ));
        }
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidInput(
                "features contain non-finite values".into(),
            ));
        }
        if let Some(t) = &true_labels {
            if t.len() != features.rows() {
                return Err(Error::Format(format!(
                    "{} true labels for {} instances",
                    t.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = t.iter().find(|&&y| y >= num_classes) {
                return Err(Error::InvalidInput(format!(
                    "true label {bad} outside [0, {num_classes})"
                )));
            }
        }
        if let Some(names) = &class_names {
            if names.len() != num_classes {
                return Err(Error::Format(format!(
                    "{} class names for {num_classes} classes",
                    names.len()
                )));
            }
        }
        Ok(Self {
            features,
            true_labels,
            num_classes,
            class_names,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Population standard deviation of each feature column.
    pub fn feature_std(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mean = self.features.col_sums().scale(1.0 / n);
        let mut var = vec![0.0; self.dim()];
        for row in self.features.row_iter() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(mean.data()) {
                *v += (x - m) * (x - m);
            }
        }
        var.into_iter().map(|v| (v / n).sqrt()).collect()
    }
}

/// Soft training labels together with the frozen initial labels and the
/// running sum of per-epoch predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub(crate) soft_labels: Matrix,
    pub(crate) initial_labels: Matrix,
    pub(crate) epoch: usize,
    pub(crate) prediction_sum: Matrix,
}

impl LabelMatrix {
    /// Starts a store at epoch 0 with `soft_labels = initial_labels`.
    pub fn new(initial_labels: Matrix) -> Result<Self> {
        if initial_labels.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if initial_labels.cols() < 2 {
            return Err(Error::InvalidInput("labels need at least 2 classes".into()));
        }
        check_simplex_rows(&initial_labels, "initial labels")?;
        let (n, c) = initial_labels.shape();
        Ok(Self {
            soft_labels: initial_labels.clone(),
            initial_labels,
            epoch: 0,
            prediction_sum: Matrix::zeros(n, c),
        })
    }

    pub fn soft_labels(&self) -> &Matrix {
        &self.soft_labels
    }

    pub fn initial_labels(&self) -> &Matrix {
        &self.initial_labels
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn prediction_sum(&self) -> &Matrix {
        &self.prediction_sum
    }

    pub fn len(&self) -> usize {
        self.soft_labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.soft_labels.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.soft_labels.cols()
    }

    /// Hard labels from the current soft labels.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.soft_labels.argmax_rows()
    }

    /// Fraction of rows whose current argmax equals the truth.
    pub fn accuracy_against(&self, truth: &[usize]) -> f64 {
        accuracy(&self.hard_labels(), truth)
    }

    pub(crate) fn debug_check(&self) {
        debug_assert!(check_simplex_rows(&self.soft_labels, "soft labels").is_ok());
        debug_assert!(self
            .prediction_sum
            .row_iter()
            .all(|r| (r.iter().sum::<f64>() - self.epoch as f64).abs() < 1e-6));
    }
}

/// Row-stochastic class-conditional corruption matrix. Entry `(j, k)` is the
/// probability that a true-class-`j` instance is labeled `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMatrix {
    matrix: Matrix,
    /// Rows that had no supporting instances and were filled uniformly.
    flagged_rows: Vec<bool>,
}

impl NoiseMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() || matrix.rows() < 2 {
            return Err(Error::InvalidInput(format!(
                "noise matrix must be square with C >= 2, got {:?}",
                matrix.shape()
            )));
        }
        if matrix.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput(
                "noise matrix entries must lie in [0, 1]".into(),
            ));
        }
        check_simplex_rows(&matrix, "noise matrix")?;
        let c = matrix.rows();
        Ok(Self {
            matrix,
            flagged_rows: vec![false; c],
        })
    }

    pub fn identity(c: usize) -> Self {
        Self {
            matrix: Matrix::identity(c),
            flagged_rows: vec![false; c],
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn flagged_rows(&self) -> &[bool] {
        &self.flagged_rows
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|j| self.matrix[(j, j)])
            .collect()
    }
}

/// Empirical noise matrix of `pred_labels` against `true_labels`.
///
/// Rows for classes with no true instances are uniform and flagged.
pub fn empirical_noise_matrix(
    pred_labels: &[usize],
    true_labels: &[usize],
    num_classes: usize,
) -> Result<NoiseMatrix> {
    if pred_labels.is_empty() || true_labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if pred_labels.len() != true_labels.len() {
        return Err(Error::Dimension {
            op: "empirical_noise_matrix",
            left: (pred_labels.len(), 1),
            right: (true_labels.len(), 1),
        });
    }
    if num_classes < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    let mut counts = Matrix::zeros(num_classes, num_classes);
    for (&p, &t) in pred_labels.iter().zip(true_labels) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidInput(format!(
                "label pair ({t}, {p}) outside [0, {num_classes})"
            )));
        }
        counts[(t, p)] += 1.0;
    }
    let mut flagged_rows = vec![false; num_classes];
    for (j, flag) in flagged_rows.iter_mut().enumerate() {
        let row = counts.row_mut(j);
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            row.fill(1.0 / num_classes as f64);
            *flag = true;
        } else {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(NoiseMatrix {
        matrix: counts,
        flagged_rows,
    })
}

/// Clamps negatives to zero and renormalizes to sum 1; all-zero rows become uniform.
pub fn simplex_project(row: &[f64]) -> Result<Vec<f64>> {
    if row.is_empty() {
        return Err(Error::InvalidInput("empty probability row".into()));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite entry in {row:?}")));
    }
    let clamped: Vec<f64> = row.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / row.len() as f64; row.len()]);
    }
    Ok(clamped.into_iter().map(|v| v / total).collect())
}

pub(crate) fn check_simplex_rows(m: &Matrix, what: &str) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL
            || row.iter().any(|&v| v < -SIMPLEX_TOL || !v.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "{what}: row {i} is not on the probability simplex (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Fraction of positions where `pred == truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    debug_assert_eq!(pred.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Per-class recall; `None` for classes without true instances.
pub fn per_class_accuracy(pred: &[usize], truth: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    hits.into_iter()
        .zip(support)
        .map(|(h, s)| (s > 0).then(|| h as f64 / s as f64))
        .collect()
}

/// Fraction of positions whose label changed.
pub fn flip_rate(previous: &[usize], current: &[usize]) -> f64 {
    debug_assert_eq!(previous.len(), current.len());
    if current.is_empty() {
        return 0.0;
    }
    let flips = previous.iter().zip(current).filter(|(a, b)| a != b).count();
    flips as f64 / current.len() as f64
}

/// Metrics for one completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Accuracy of the epoch's inference-mode predictions; needs truth.
    pub accuracy: Option<f64>,
    pub per_class_accuracy: Option<Vec<Option<f64>>>,
    /// Accuracy of the training labels after this epoch's label update.
    pub label_accuracy: Option<f64>,
    /// Mean per-sample KL term over the epoch's minibatches.
    pub mean_kl: f64,
    /// Mean per-sample contrastive term, when the objective has one.
    pub mean_contrastive: Option<f64>,
    /// Fraction of instances whose argmax prediction changed since the
    /// previous epoch (epoch 1 compares against the initial labels).
    pub flip_rate: f64,
    pub seconds: f64,
}

/// How the minibatch objective was normalized before differentiation.
pub const OBJECTIVE_SCALING: &str = "batch_sum_over_m";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub records: Vec<EpochRecord>,
    pub objective_scaling: String,
}

impl RunReport {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            objective_scaling: OBJECTIVE_SCALING.to_string(),
        }
    }

    pub fn push(&mut self, record: EpochRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.epoch < record.epoch));
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.last().and_then(|r| r.accuracy)
    }

    /// Mean flip rate over the last `k` epochs (or all, if fewer).
    pub fn mean_flip_rate_last(&self, k: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(k)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|r| r.flip_rate).sum::<f64>() / tail.len() as f64
    }
}
