//! Trainer behaviour checked against independent recomputation.

use noisylab_core::datamodel::{Dataset, LabelMatrix, NoiseMatrix};
use noisylab_core::labels::UpdateStrategy;
use noisylab_core::losses::LossKind;
use noisylab_core::model::{ClassifierParams, ParamId};
use noisylab_core::numkernel::Matrix;
use noisylab_core::synth::{generate_gaussian_mixture, inject_noise, NoiseSpec, SynthConfig};
use noisylab_core::trainer::{run_epoch, run_training, TrainConfig, TrainState};

/// Straight-line objective on flat parameters, written without the tape.
struct Oracle {
    x: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    d: usize,
    h: usize,
    c: usize,
    temperature: f64,
    lambda: f64,
}

impl Oracle {
    fn objective(&self, p: &[f64]) -> f64 {
        let (d, h, c) = (self.d, self.h, self.c);
        let (w1, rest) = p.split_at(d * h);
        let (b1, rest) = rest.split_at(h);
        let (gamma, rest) = rest.split_at(h);
        let (beta, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h * c);
        let m = self.x.len();

        let z: Vec<Vec<f64>> = self
            .x
            .iter()
            .map(|row| {
                (0..h)
                    .map(|j| b1[j] + (0..d).map(|k| row[k] * w1[k * h + j]).sum::<f64>())
                    .collect()
            })
            .collect();
        let mut probs = vec![vec![0.0; c]; m];
        for j in 0..h {
            let mu = z.iter().map(|r| r[j]).sum::<f64>() / m as f64;
            let var = z.iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / m as f64;
            for (i, zr) in z.iter().enumerate() {
                let a = (gamma[j] * (zr[j] - mu) / (var + 1e-5).sqrt() + beta[j]).max(0.0);
                for k in 0..c {
                    probs[i][k] += a * w2[j * c + k];
                }
            }
        }
        for row in probs.iter_mut() {
            row.iter_mut().zip(b2).for_each(|(v, b)| *v += b);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - mx).exp() / s);
        }

        let mut kl = 0.0;
        for (p, t) in probs.iter().zip(&self.targets) {
            let sq: f64 = t.iter().map(|v| v * v).sum();
            for (&pk, &tk) in p.iter().zip(t) {
                let q = (tk * tk / sq).clamp(1e-12, 1.0);
                let pc = pk.clamp(1e-12, 1.0);
                kl += pc * (pc.ln() - q.ln());
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
        };
        let mut cc = 0.0;
        for i in 0..m {
            let denom: f64 = (0..m)
                .map(|k| (cos(&probs[i], &probs[k]) / self.temperature).exp())
                .sum();
            cc -= cos(&probs[i], &probs[i]) / self.temperature - denom.ln();
        }
        (kl + self.lambda * cc) / m as f64
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        let mut q = p.to_vec();
        (0..p.len())
            .map(|i| {
                q[i] = p[i] + eps;
                let up = self.objective(&q);
                q[i] = p[i] - eps;
                let down = self.objective(&q);
                q[i] = p[i];
                (up - down) / (2.0 * eps)
            })
            .collect()
    }
}

fn flatten(params: &ClassifierParams) -> Vec<f64> {
    ParamId::ALL
        .iter()
        .flat_map(|&id| params.get(id).data().to_vec())
        .collect()
}

#[test]
fn single_batch_losses_match_a_hand_stepped_oracle() {
    let dataset = generate_gaussian_mixture(&SynthConfig {
        num_classes: 3,
        per_class_count: 2,
        feature_dim: 4,
        class_center_separation: 2.0,
        intra_class_std: 1.0,
        seed: 5,
    })
    .unwrap();
    let labels = inject_noise(&dataset, &NoiseSpec::Accuracy(vec![0.5, 0.5, 0.5]), 0.7, 6).unwrap();
    let mut cfg = TrainConfig {
        epochs: 3,
        batch_size: dataset.len(),
        hidden_dim: 3,
        loss: LossKind::C3l,
        strategy: UpdateStrategy::ClipLabels,
        lr_backbone: 0.05,
        lr_head: 0.2,
        seed: 9,
        ..TrainConfig::default()
    };
    cfg.augment.gaussian_sigma = 0.0;
    cfg.augment.dropout_prob = 0.0;

    let mut state = TrainState::new(&dataset, &cfg).unwrap();
    let oracle = Oracle {
        x: dataset.features().row_iter().map(<[f64]>::to_vec).collect(),
        targets: labels
            .soft_labels()
            .row_iter()
            .map(<[f64]>::to_vec)
            .collect(),
        d: 4,
        h: 3,
        c: 3,
        temperature: cfg.loss_cfg.temperature,
        lambda: cfg.loss_cfg.lambda,
    };
    let mut p = flatten(&state.params);
    let mut v = vec![0.0; p.len()];
    let backbone = 4 * 3 + 3;

    let mut store = labels;
    for epoch in 1..=3 {
        let out = run_epoch(&dataset, &store, &mut state, &cfg, epoch).unwrap();
        store.update(cfg.strategy, &out.predictions).unwrap();
        assert_eq!(out.stats.step_losses.len(), 1);

        let expected = oracle.objective(&p);
        let got = out.stats.step_losses[0];
        assert!(
            (got - expected).abs() < 1e-9 * expected.abs().max(1.0),
            "epoch {epoch}: {got} vs {expected}"
        );

        let g = oracle.gradient(&p);
        for i in 0..p.len() {
            let lr = if i < backbone {
                cfg.lr_backbone
            } else {
                cfg.lr_head
            };
            v[i] = cfg.momentum * v[i] + g[i];
            p[i] -= lr * v[i];
        }
        let engine = flatten(&state.params);
        let drift = engine
            .iter()
            .zip(&p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-7, "epoch {epoch}: parameters drifted by {drift}");
    }
}

fn separable(seed: u64) -> Dataset {
    generate_gaussian_mixture(&SynthConfig {
        num_classes: 4,
        per_class_count: 250,
        feature_dim: 8,
        class_center_separation: 6.0,
        intra_class_std: 1.0,
        seed,
    })
    .unwrap()
}

#[test]
fn clean_labels_reach_99_percent_within_30_epochs() {
    let dataset = separable(11);
    for strategy in UpdateStrategy::ALL {
        let labels = inject_noise(
            &dataset,
            &NoiseSpec::Matrix(NoiseMatrix::identity(4)),
            0.9,
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            strategy,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = run_training(&dataset, labels, &cfg, |_| {}).unwrap();
        let best = out
            .report
            .records
            .iter()
            .filter_map(|r| r.accuracy)
            .fold(0.0, f64::max);
        assert!(best >= 0.99, "{strategy}: best accuracy {best}");
    }
}

#[test]
fn ensemble_store_is_the_mean_of_retained_snapshots() {
    let dataset = separable(3);
    let labels = inject_noise(
        &dataset,
        &NoiseSpec::Accuracy(vec![0.3, 0.9, 0.6, 0.5]),
        0.8,
        4,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 200,
        strategy: UpdateStrategy::EnsembleLabels,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&dataset, &cfg).unwrap();
    let mut store = labels.clone();
    let mut snapshots: Vec<Matrix> = Vec::new();
    for epoch in 1..=cfg.epochs {
        let out = run_epoch(&dataset, &store, &mut state, &cfg, epoch).unwrap();
        store.update(cfg.strategy, &out.predictions).unwrap();
        snapshots.push(out.predictions);
    }
    let k = (snapshots.len() + 1) as f64;
    for i in 0..dataset.len() {
        for j in 0..dataset.num_classes() {
            let total =
                labels.initial_labels()[(i, j)] + snapshots.iter().map(|s| s[(i, j)]).sum::<f64>();
            assert!((store.soft_labels()[(i, j)] - total / k).abs() < 1e-12);
        }
    }
    assert_eq!(store.epoch(), 20);
}

#[test]
fn lambda_zero_clip_matches_kl_only_clip() {
    let dataset = separable(8);
    let labels = inject_noise(&dataset, &NoiseSpec::Accuracy(vec![0.7; 4]), 0.9, 8).unwrap();
    let base = TrainConfig {
        epochs: 3,
        strategy: UpdateStrategy::ClipLabels,
        kl_on_aug: false,
        seed: 1,
        ..TrainConfig::default()
    };
    let kl = run_training(
        &dataset,
        labels.clone(),
        &TrainConfig {
            loss: LossKind::KlOnly,
            ..base.clone()
        },
        |_| {},
    )
    .unwrap();
    let mut zero = TrainConfig {
        loss: LossKind::C3l,
        ..base
    };
    zero.loss_cfg.lambda = 0.0;
    let c3l = run_training(&dataset, labels, &zero, |_| {}).unwrap();
    let a = kl
        .report
        .records
        .iter()
        .map(|r| r.accuracy)
        .collect::<Vec<_>>();
    let b = c3l
        .report
        .records
        .iter()
        .map(|r| r.accuracy)
        .collect::<Vec<_>>();
    assert_eq!(a, b);
    assert_eq!(kl.params.w2, c3l.params.w2);
}

#[test]
fn identical_seed_and_config_reproduce_bit_for_bit() {
    let dataset = separable(21);
    let labels = inject_noise(
        &dataset,
        &NoiseSpec::Accuracy(vec![0.5, 0.8, 0.6, 0.4]),
        0.9,
        2,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        seed: 77,
        ..TrainConfig::default()
    };
    let strip = |mut r: noisylab_core::datamodel::RunReport| {
        r.records.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    };
    let a = run_training(&dataset, labels.clone(), &cfg, |_| {}).unwrap();
    let b = run_training(&dataset, labels, &cfg, |_| {}).unwrap();
    assert_eq!(strip(a.report), strip(b.report));
    assert_eq!(a.labels, b.labels);
    assert_eq!(
        a.params.to_checkpoint_string(),
        b.params.to_checkpoint_string()
    );
}

#[test]
fn store_invariants_hold_after_training() {
    let dataset = separable(30);
    let labels = inject_noise(
        &dataset,
        &NoiseSpec::Accuracy(vec![0.2, 0.9, 0.5, 0.7]),
        0.9,
        3,
    )
    .unwrap();
    for strategy in UpdateStrategy::ALL {
        let cfg = TrainConfig {
            epochs: 5,
            strategy,
            ..TrainConfig::default()
        };
        let out = run_training(&dataset, labels.clone(), &cfg, |_| {}).unwrap();
        let store: &LabelMatrix = &out.labels;
        assert_eq!(store.initial_labels(), labels.initial_labels());
        for (row, sum_row) in store
            .soft_labels()
            .row_iter()
            .zip(store.prediction_sum().row_iter())
        {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((sum_row.iter().sum::<f64>() - 5.0).abs() < 1e-6);
        }
    }
}
