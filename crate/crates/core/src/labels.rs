//! Training-label lifecycle: power sharpening applied when labels are
//! consumed, and the per-epoch update strategies.

use std::fmt;
use std::str::FromStr;

use crate::datamodel::{check_simplex_rows, LabelMatrix};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescaleConfig {
    /// Exponent applied to every label entry before renormalizing.
    pub tau: f64,
}

impl Default for RescaleConfig {
    fn default() -> Self {
        Self { tau: 2.0 }
    }
}

impl RescaleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Raises each entry to the power `tau` and renormalizes every row.
///
/// The input is left untouched; callers apply this to the labels they feed
/// to the loss, never to the stored labels.
pub fn rescale(labels: &Matrix, cfg: RescaleConfig) -> Result<Matrix> {
    cfg.validate()?;
    let mut out = labels.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        // Divide by the row max first so small entries raised to large powers
        // do not all underflow to zero.
        let max = row.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "label row {r} has no positive entry"
            )));
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v / max).powf(cfg.tau);
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// How training labels evolve between epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateStrategy {
    /// Running mean of the initial labels and every epoch's predictions.
    EnsembleLabels,
    /// Replace labels with the latest epoch's predictions.
    PseudoLabels,
    /// Keep the initial labels forever.
    ClipLabels,
}

impl UpdateStrategy {
    pub const ALL: [UpdateStrategy; 3] =
        [Self::EnsembleLabels, Self::PseudoLabels, Self::ClipLabels];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::EnsembleLabels => "ensemble",
            Self::PseudoLabels => "pseudo",
            Self::ClipLabels => "clip",
        }
    }
}

impl fmt::Display for UpdateStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UpdateStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ensemble" => Ok(Self::EnsembleLabels),
            "pseudo" => Ok(Self::PseudoLabels),
            "clip" => Ok(Self::ClipLabels),
            other => Err(Error::Config(format!(
                "unknown label update `{other}` (expected ensemble|pseudo|clip)"
            ))),
        }
    }
}

impl LabelMatrix {
    /// Applies one epoch's full-dataset predictions with the given strategy.
    pub fn update(&mut self, strategy: UpdateStrategy, epoch_predictions: &Matrix) -> Result<()> {
        match strategy {
            UpdateStrategy::EnsembleLabels => self.update_ensemble(epoch_predictions),
            UpdateStrategy::PseudoLabels => self.update_pseudo(epoch_predictions),
            UpdateStrategy::ClipLabels => self.update_clip(epoch_predictions),
        }
    }

    /// `soft = (initial + Σ predictions) / (epochs + 1)`, every epoch weighted equally.
    pub fn update_ensemble(&mut self, epoch_predictions: &Matrix) -> Result<()> {
        self.record(epoch_predictions)?;
        let denom = (self.epoch + 1) as f64;
        self.soft_labels = self
            .initial_labels
            .add(&self.prediction_sum)?
            .scale(1.0 / denom);
        self.debug_check();
        Ok(())
    }

    pub fn update_pseudo(&mut self, epoch_predictions: &Matrix) -> Result<()> {
        self.record(epoch_predictions)?;
        self.soft_labels = epoch_predictions.clone();
        self.debug_check();
        Ok(())
    }

    /// Soft labels stay at the initial labels; only the epoch counter and
    /// the prediction sum advance.
    pub fn update_clip(&mut self, epoch_predictions: &Matrix) -> Result<()> {
        self.record(epoch_predictions)?;
        self.debug_check();
        Ok(())
    }

    fn record(&mut self, epoch_predictions: &Matrix) -> Result<()> {
        if epoch_predictions.shape() != self.soft_labels.shape() {
            return Err(Error::Dimension {
                op: "label update",
                left: self.soft_labels.shape(),
                right: epoch_predictions.shape(),
            });
        }
        check_simplex_rows(epoch_predictions, "epoch predictions")?;
        self.prediction_sum.add_assign(epoch_predictions)?;
        self.epoch += 1;
        Ok(())
    }

    /// Sharpened copy of the given rows, as consumed by the loss.
    pub fn rescaled_rows(&self, indices: &[usize], cfg: RescaleConfig) -> Result<Matrix> {
        rescale(&self.soft_labels.select_rows(indices), cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn entropy(row: &[f64]) -> f64 {
        -row.iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    #[test]
    fn rescale_fixed_points() {
        let cfg = RescaleConfig::default();
        let uniform = m(&[&[0.25; 4]]);
        assert_eq!(rescale(&uniform, cfg).unwrap(), uniform);
        let onehot = m(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(rescale(&onehot, cfg).unwrap(), onehot);
    }

    #[test]
    fn rescale_two_class_example() {
        let out = rescale(&m(&[&[0.6, 0.4]]), RescaleConfig { tau: 2.0 }).unwrap();
        assert!((out[(0, 0)] - 0.36 / 0.52).abs() < 1e-15);
        assert!((out[(0, 1)] - 0.16 / 0.52).abs() < 1e-15);
    }

    #[test]
    fn rescale_rejects_nonpositive_tau() {
        let x = m(&[&[0.6, 0.4]]);
        assert!(matches!(
            rescale(&x, RescaleConfig { tau: 0.0 }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            rescale(&x, RescaleConfig { tau: -1.0 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rescale_does_not_touch_store() {
        let store = LabelMatrix::new(m(&[&[0.6, 0.4], &[0.3, 0.7]])).unwrap();
        let before = store.clone();
        let view = store
            .rescaled_rows(&[1, 0], RescaleConfig::default())
            .unwrap();
        assert_eq!(store, before);
        assert!((view[(1, 0)] - 0.36 / 0.52).abs() < 1e-15);
    }

    #[test]
    fn ensemble_two_class_example() {
        let mut s = LabelMatrix::new(m(&[&[0.8, 0.2]])).unwrap();
        s.update_ensemble(&m(&[&[0.4, 0.6]])).unwrap();
        assert!(s.soft_labels().max_abs_diff(&m(&[&[0.6, 0.4]])).unwrap() < 1e-15);
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn ensemble_fixed_point() {
        let init = m(&[&[0.8, 0.2], &[0.1, 0.9]]);
        let mut s = LabelMatrix::new(init.clone()).unwrap();
        s.update_ensemble(&init).unwrap();
        assert!(s.soft_labels().max_abs_diff(&init).unwrap() < 1e-15);
    }

    #[test]
    fn ensemble_running_mean_closed_form() {
        let init = m(&[&[0.9, 0.05, 0.05]]);
        let p = m(&[&[0.2, 0.5, 0.3]]);
        let mut s = LabelMatrix::new(init.clone()).unwrap();
        for _ in 0..10 {
            s.update_ensemble(&p).unwrap();
        }
        let expected = init.add(&p.scale(10.0)).unwrap().scale(1.0 / 11.0);
        assert!(s.soft_labels().max_abs_diff(&expected).unwrap() < 1e-14);
        assert!((s.prediction_sum().row_sums()[(0, 0)] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn pseudo_has_no_memory() {
        let init = m(&[&[0.8, 0.2]]);
        let p = m(&[&[0.3, 0.7]]);
        let q = m(&[&[0.55, 0.45]]);
        let mut s = LabelMatrix::new(init.clone()).unwrap();
        s.update_pseudo(&p).unwrap();
        assert_eq!(s.soft_labels(), &p);
        s.update_pseudo(&q).unwrap();
        assert_eq!(s.soft_labels(), &q);
        assert_eq!(s.epoch(), 2);

        let mut a = LabelMatrix::new(init.clone()).unwrap();
        let mut b = LabelMatrix::new(init.clone()).unwrap();
        a.update_pseudo(&init).unwrap();
        b.update_clip(&init).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clip_never_moves() {
        let init = m(&[&[0.8, 0.2], &[0.4, 0.6]]);
        let mut s = LabelMatrix::new(init.clone()).unwrap();
        let p = m(&[&[0.1, 0.9], &[0.9, 0.1]]);
        for _ in 0..100 {
            s.update_clip(&p).unwrap();
            assert_eq!(s.soft_labels(), &init);
            assert_eq!(s.hard_labels(), vec![0, 1]);
        }
        assert_eq!(s.epoch(), 100);
        assert_eq!(s.initial_labels(), &init);
    }

    #[test]
    fn updates_reject_shape_mismatch() {
        let mut s = LabelMatrix::new(m(&[&[0.8, 0.2]])).unwrap();
        for strat in UpdateStrategy::ALL {
            assert!(matches!(
                s.update(strat, &m(&[&[0.5, 0.5], &[0.5, 0.5]])),
                Err(Error::Dimension { .. })
            ));
        }
    }

    #[test]
    fn strategy_parsing() {
        for s in UpdateStrategy::ALL {
            assert_eq!(s.as_str().parse::<UpdateStrategy>().unwrap(), s);
        }
        assert!("bogus".parse::<UpdateStrategy>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex_row(c: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.01f64..1.0, c).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        fn stack(rows: &[Vec<f64>]) -> Matrix {
            Matrix::from_rows(rows).unwrap()
        }

        proptest! {
            #[test]
            fn rescale_keeps_argmax_and_sharpens(row in simplex_row(5), tau in 1.1f64..5.0) {
                let x = stack(std::slice::from_ref(&row));
                let y = rescale(&x, RescaleConfig { tau }).unwrap();
                prop_assert_eq!(x.argmax_rows(), y.argmax_rows());
                prop_assert!((y.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let uniform = row.iter().all(|&v| (v - row[0]).abs() < 1e-12);
                if !uniform {
                    prop_assert!(entropy(y.row(0)) < entropy(&row));
                }
            }

            #[test]
            fn ensemble_equals_brute_force_mean_and_ignores_order(
                init in proptest::collection::vec(simplex_row(3), 4),
                preds in proptest::collection::vec(proptest::collection::vec(simplex_row(3), 4), 1..12),
            ) {
                let init = stack(&init);
                let preds: Vec<Matrix> = preds.iter().map(|p| stack(p)).collect();
                let mut forward = LabelMatrix::new(init.clone()).unwrap();
                for p in &preds {
                    forward.update_ensemble(p).unwrap();
                }
                let mut backward = LabelMatrix::new(init.clone()).unwrap();
                for p in preds.iter().rev() {
                    backward.update_ensemble(p).unwrap();
                }
                let mut mean = init.clone();
                for p in &preds {
                    mean = mean.add(p).unwrap();
                }
                let mean = mean.scale(1.0 / (preds.len() + 1) as f64);
                prop_assert!(forward.soft_labels().max_abs_diff(&mean).unwrap() < 1e-12);
                prop_assert!(forward.soft_labels().max_abs_diff(backward.soft_labels()).unwrap() < 1e-12);
            }

            #[test]
            fn every_strategy_keeps_rows_on_simplex(
                init in proptest::collection::vec(simplex_row(4), 3),
                preds in proptest::collection::vec(proptest::collection::vec(simplex_row(4), 3), 1..6),
            ) {
                for strat in UpdateStrategy::ALL {
                    let mut s = LabelMatrix::new(stack(&init)).unwrap();
                    for p in &preds {
                        s.update(strat, &stack(p)).unwrap();
                        prop_assert!(check_simplex_rows(s.soft_labels(), "soft").is_ok());
                    }
                    prop_assert_eq!(s.initial_labels(), &stack(&init));
                }
            }
        }
    }
}
