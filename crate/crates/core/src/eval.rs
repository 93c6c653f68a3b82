//! Evaluation protocols: frozen-encoder linear probe and 5-nearest-neighbor
//! classification, plus embedding-collapse instrumentation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::data::Dataset;
use crate::linalg::Matrix;
use crate::model::{Model, ModelError};
use crate::scalar::Scalar;
use crate::train::{adam_step, probe_optimizer_config, AdamState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid probe config: {0}")]
    BadConfig(String),
    #[error("label {label} out of range for {classes} classes (sample {index})")]
    ClassMismatch { label: usize, classes: usize, index: usize },
    #[error("k-NN needs at least {k} train points, got {have}")]
    TooFewTrainPoints { have: usize, k: usize },
    #[error("feature matrices disagree: train width {train}, test width {test}")]
    FeatureWidthMismatch { train: usize, test: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<V> = std::result::Result<V, EvalError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr_start")]
    pub lr_start: f64,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_probe_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
}

fn default_probe_epochs() -> usize {
    500
}
fn default_lr_start() -> f64 {
    1e-2
}
fn default_lr_end() -> f64 {
    1e-6
}
fn default_probe_weight_decay() -> f64 {
    5e-6
}
fn default_probe_batch() -> usize {
    256
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: default_probe_epochs(),
            lr_start: default_lr_start(),
            lr_end: default_lr_end(),
            weight_decay: default_probe_weight_decay(),
            batch_size: default_probe_batch(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_start <= 0.0 || self.lr_end <= 0.0 || self.lr_end > self.lr_start {
            return Err(EvalError::BadConfig(format!(
                "lr schedule must decrease through positive values, got {} -> {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size == 0 {
            return Err(EvalError::BadConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Exponential decay from `lr_start` to `lr_end` across the epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}

/// Eval-mode encoder features h for a list of images, computed in batches
/// with frozen parameters and running BN statistics.
pub fn extract_features<T: Scalar>(
    model: &Model<T>,
    images: &[crate::augment::Image],
    batch_size: usize,
) -> Result<Matrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let mut g: Graph<T> = Graph::new();
        g.train_mode = false;
        let x = g.input("x");
        let h = model.encoder_forward(&mut g, x);
        g.set_output(h);
        let mut bindings = HashMap::new();
        bindings.insert("x".to_string(), model.batch_input(chunk)?);
        let out = g.forward_eval(&bindings)?;
        for i in 0..out.rows() {
            rows.push((0..out.cols()).map(|j| out[(i, j)].cast_f64()).collect());
        }
    }
    Ok(Matrix::from_rows(&rows))
}

/// Predictions of a k-nearest-neighbor vote under cosine similarity. Vote
/// ties break toward the class with the larger summed similarity among the
/// k neighbors, then toward the lower class id.
pub fn knn_predict(
    train_feats: &Matrix<f64>,
    train_labels: &[usize],
    test_feats: &Matrix<f64>,
    k: usize,
    classes: usize,
) -> Result<Vec<usize>> {
    if train_feats.rows() < k {
        return Err(EvalError::TooFewTrainPoints { have: train_feats.rows(), k });
    }
    if train_feats.cols() != test_feats.cols() {
        return Err(EvalError::FeatureWidthMismatch {
            train: train_feats.cols(),
            test: test_feats.cols(),
        });
    }
    for (index, &label) in train_labels.iter().enumerate() {
        if label >= classes {
            return Err(EvalError::ClassMismatch { label, classes, index });
        }
    }
    let normalize = |m: &Matrix<f64>| -> Vec<Vec<f64>> {
        (0..m.rows())
            .map(|i| {
                let row = m.row(i);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter().map(|v| v / n).collect()
            })
            .collect()
    };
    let train_n = normalize(train_feats);
    let test_n = normalize(test_feats);
    let mut preds = Vec::with_capacity(test_n.len());
    for q in &test_n {
        let mut sims: Vec<(f64, usize)> = train_n
            .iter()
            .enumerate()
            .map(|(i, t)| (q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>(), i))
            .collect();
        // Descending similarity; equal similarities favor the lower index so
        // the order (hence the vote) is deterministic.
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        let mut sum_sim = vec![0.0f64; classes];
        for &(s, i) in sims.iter().take(k) {
            votes[train_labels[i]] += 1;
            sum_sim[train_labels[i]] += s;
        }
        let mut best = 0usize;
        for c in 1..classes {
            let better = votes[c] > votes[best]
                || (votes[c] == votes[best] && sum_sim[c] > sum_sim[best]);
            if better {
                best = c;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

/// k-NN accuracy of a frozen encoder on h features (deterministic).
pub fn knn_classify<T: Scalar>(
    model: &Model<T>,
    train: &Dataset,
    test: &Dataset,
    k: usize,
) -> Result<f64> {
    let train_feats = extract_features(model, &train.images, 256)?;
    let test_feats = extract_features(model, &test.images, 256)?;
    let preds = knn_predict(&train_feats, &train.labels, &test_feats, k, train.class_count)?;
    let correct = preds.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / test.labels.len().max(1) as f64)
}

/// Train a softmax linear classifier on fixed features; returns the probe
/// weights (D+1 rows: weights then bias) and top-1 accuracy on the test set.
pub fn fit_probe_on_features(
    train_feats: &Matrix<f64>,
    train_labels: &[usize],
    test_feats: &Matrix<f64>,
    test_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(Matrix<f64>, f64)> {
    cfg.validate()?;
    for (index, &label) in train_labels.iter().chain(test_labels).enumerate() {
        if label >= classes {
            return Err(EvalError::ClassMismatch { label, classes, index });
        }
    }
    if train_feats.cols() != test_feats.cols() {
        return Err(EvalError::FeatureWidthMismatch {
            train: train_feats.cols(),
            test: test_feats.cols(),
        });
    }
    let dim = train_feats.cols();
    let mut params = std::collections::BTreeMap::new();
    params.insert("probe.w".to_string(), Matrix::<f64>::zeros(dim, classes));
    params.insert("probe.b".to_string(), Matrix::<f64>::zeros(1, classes));
    let mut state = AdamState::new(&params);
    let adam_cfg = probe_optimizer_config(cfg.weight_decay);
    let n = train_feats.rows();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut g: Graph<f64> = Graph::new();
            let x = g.input("x");
            let w = g.parameter("probe.w", params["probe.w"].clone());
            let b = g.parameter("probe.b", params["probe.b"].clone());
            let logits = g.matmul(x, w);
            let logits = g.add_bias(logits, b);
            let targets: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let loss = g.softmax_cross_entropy(logits, targets);
            g.set_output(loss);
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| train_feats.row(i).to_vec()).collect();
            let mut bindings = HashMap::new();
            bindings.insert("x".to_string(), Matrix::from_rows(&rows));
            g.forward_eval(&bindings)?;
            let grads = g.backward()?;
            adam_step(&mut params, &grads, &mut state, lr, &adam_cfg)
                .map_err(|name| EvalError::BadConfig(format!("non-finite gradient in {name}")))?;
            start = end;
        }
    }
    // Assemble [W; b] and score the test split.
    let mut out = Matrix::<f64>::zeros(dim + 1, classes);
    for i in 0..dim {
        for j in 0..classes {
            out[(i, j)] = params["probe.w"][(i, j)];
        }
    }
    for j in 0..classes {
        out[(dim, j)] = params["probe.b"][(0, j)];
    }
    let mut correct = 0usize;
    for i in 0..test_feats.rows() {
        let row = test_feats.row(i);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for j in 0..classes {
            let score: f64 =
                row.iter().zip(0..dim).map(|(&v, d)| v * out[(d, j)]).sum::<f64>() + out[(dim, j)];
            if score > best.0 {
                best = (score, j);
            }
        }
        if best.1 == test_labels[i] {
            correct += 1;
        }
    }
    Ok((out, correct as f64 / test_feats.rows().max(1) as f64))
}

/// Linear-probe evaluation of a frozen encoder: h features are extracted
/// without augmentation, then a single linear layer is trained on them.
pub fn fit_linear_probe<T: Scalar>(
    model: &Model<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<(Matrix<f64>, f64)> {
    if train.class_count != test.class_count {
        return Err(EvalError::ClassMismatch {
            label: test.class_count,
            classes: train.class_count,
            index: 0,
        });
    }
    let train_feats = extract_features(model, &train.images, 256)?;
    let test_feats = extract_features(model, &test.images, 256)?;
    fit_probe_on_features(
        &train_feats,
        &train.labels,
        &test_feats,
        &test.labels,
        train.class_count,
        cfg,
    )
}

/// Per-dimension unbiased variance and the mean absolute off-diagonal
/// correlation — the collapse diagnostics.
pub fn embedding_stats(features: &Matrix<f64>) -> (Vec<f64>, f64) {
    let (n, d) = features.shape();
    assert!(n >= 2, "embedding_stats needs at least 2 rows");
    let mean: Vec<f64> =
        (0..d).map(|j| (0..n).map(|i| features[(i, j)]).sum::<f64>() / n as f64).collect();
    let mut var = vec![0.0f64; d];
    for j in 0..d {
        var[j] = (0..n).map(|i| (features[(i, j)] - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for a in 0..d {
        for b in a + 1..d {
            let cov: f64 = (0..n)
                .map(|i| (features[(i, a)] - mean[a]) * (features[(i, b)] - mean[b]))
                .sum::<f64>()
                / (n - 1) as f64;
            let denom = (var[a] * var[b]).sqrt();
            // Exactly-constant dimensions have no defined correlation, so
            // pairs touching one are excluded from the average entirely;
            // shrinking-but-correlated dimensions still count.
            if denom > 0.0 {
                acc += (cov / denom).abs();
                count += 1;
            }
        }
    }
    let corr = if count == 0 { 0.0 } else { acc / count as f64 };
    (var, corr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_feats(rng: &mut StdRng, n: usize, d: usize) -> Matrix<f64> {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn probe_separable_features_hit_full_accuracy() {
        // Two classes split by the first coordinate with margin 1.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = StdRng::seed_from_u64(0);
        for i in 0..40 {
            let c = i % 2;
            let base = if c == 0 { -2.0 } else { 2.0 };
            rows.push(vec![base + rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0)]);
            labels.push(c);
        }
        let feats = Matrix::from_rows(&rows);
        let cfg = ProbeConfig { epochs: 100, ..Default::default() };
        let (_, acc) = fit_probe_on_features(&feats, &labels, &feats, &labels, 2, &cfg).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_shuffled_labels_near_chance() {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut rng = StdRng::seed_from_u64(seed);
            let train = random_feats(&mut rng, 400, 8);
            let test = random_feats(&mut rng, 400, 8);
            let labels: Vec<usize> = (0..400).map(|_| rng.gen_range(0..4)).collect();
            let test_labels: Vec<usize> = (0..400).map(|_| rng.gen_range(0..4)).collect();
            let cfg = ProbeConfig { epochs: 30, ..Default::default() };
            let (_, acc) =
                fit_probe_on_features(&train, &labels, &test, &test_labels, 4, &cfg).unwrap();
            accs.push(acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.25).abs() < 0.05, "chance-level accuracy, got {mean}");
    }

    #[test]
    fn probe_rejects_bad_labels() {
        let feats = Matrix::<f64>::zeros(4, 2);
        let labels = vec![0, 1, 2, 5];
        let cfg = ProbeConfig::default();
        assert!(matches!(
            fit_probe_on_features(&feats, &labels, &feats, &labels, 3, &cfg),
            Err(EvalError::ClassMismatch { label: 5, .. })
        ));
    }

    #[test]
    fn probe_accuracy_invariant_under_rotation() {
        let mut rng = StdRng::seed_from_u64(4);
        let n = 120;
        let d = 6;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let mut r: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect();
            r[c] += 1.5;
            rows.push(r);
            labels.push(c);
        }
        let feats = Matrix::from_rows(&rows);
        // Random orthogonal matrix via Gram-Schmidt on a random square matrix.
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for u in &q {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                q.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let rot = Matrix::from_rows(&q);
        let rotated = feats.matmul(&rot);
        let cfg = ProbeConfig { epochs: 60, ..Default::default() };
        let (_, acc) = fit_probe_on_features(&feats, &labels, &feats, &labels, 3, &cfg).unwrap();
        let (_, acc_rot) =
            fit_probe_on_features(&rotated, &labels, &rotated, &labels, 3, &cfg).unwrap();
        assert_eq!(acc, acc_rot, "rotation must not change probe accuracy");
        assert!(acc > 0.95);
    }

    #[test]
    fn knn_self_neighbor_k1() {
        let mut rng = StdRng::seed_from_u64(1);
        let train = random_feats(&mut rng, 20, 4);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let test_rows: Vec<Vec<f64>> = vec![train.row(7).to_vec()];
        let test = Matrix::from_rows(&test_rows);
        let preds = knn_predict(&train, &labels, &test, 1, 3).unwrap();
        assert_eq!(preds, vec![labels[7]]);
    }

    #[test]
    fn knn_antipodal_clusters_perfect() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = StdRng::seed_from_u64(2);
        for i in 0..40 {
            let c = i % 2;
            let sign = if c == 0 { 1.0 } else { -1.0 };
            rows.push(vec![sign * 1.0 + rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]);
            labels.push(c);
        }
        let feats = Matrix::from_rows(&rows);
        let preds = knn_predict(&feats, &labels, &feats, 5, 2).unwrap();
        let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        assert_eq!(acc, 40);
    }

    #[test]
    fn knn_too_few_train_points() {
        let feats = Matrix::<f64>::zeros(3, 2);
        let labels = vec![0, 1, 0];
        assert!(matches!(
            knn_predict(&feats, &labels, &feats, 5, 2),
            Err(EvalError::TooFewTrainPoints { have: 3, k: 5 })
        ));
    }

    /// Independent brute-force oracle: recompute every cosine similarity with
    /// a separate code path and apply the documented vote and tie-breaks.
    fn knn_oracle(
        train: &Matrix<f64>,
        labels: &[usize],
        test: &Matrix<f64>,
        k: usize,
        classes: usize,
    ) -> Vec<usize> {
        let cos = |a: &[f64], b: &[f64]| {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        };
        (0..test.rows())
            .map(|t| {
                let q = test.row(t);
                let mut order: Vec<usize> = (0..train.rows()).collect();
                order.sort_by(|&a, &b| {
                    cos(q, train.row(b))
                        .partial_cmp(&cos(q, train.row(a)))
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let top = &order[..k];
                let mut best: Option<usize> = None;
                for c in 0..classes {
                    let votes = top.iter().filter(|&&i| labels[i] == c).count();
                    let sim: f64 =
                        top.iter().filter(|&&i| labels[i] == c).map(|&i| cos(q, train.row(i))).sum();
                    let better = match best {
                        None => votes > 0 || c == 0,
                        Some(b) => {
                            let bv = top.iter().filter(|&&i| labels[i] == b).count();
                            let bs: f64 = top
                                .iter()
                                .filter(|&&i| labels[i] == b)
                                .map(|&i| cos(q, train.row(i)))
                                .sum();
                            votes > bv || (votes == bv && sim > bs)
                        }
                    };
                    if better {
                        best = Some(c);
                    }
                }
                best.unwrap()
            })
            .collect()
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.gen_range(8..64);
            let d = rng.gen_range(2..6);
            let classes = rng.gen_range(2..5);
            let train = random_feats(&mut rng, n, d);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let test = random_feats(&mut rng, 10, d);
            let k = rng.gen_range(1..=5.min(n));
            let got = knn_predict(&train, &labels, &test, k, classes).unwrap();
            let want = knn_oracle(&train, &labels, &test, k, classes);
            assert_eq!(got, want, "n={n} d={d} k={k} classes={classes}");
        }
    }

    #[test]
    fn knn_repeat_calls_identical() {
        let mut rng = StdRng::seed_from_u64(3);
        let train = random_feats(&mut rng, 64, 8);
        let labels: Vec<usize> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let test = random_feats(&mut rng, 16, 8);
        let a = knn_predict(&train, &labels, &test, 5, 4).unwrap();
        let b = knn_predict(&train, &labels, &test, 5, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_stats_white_and_rank1() {
        let mut rng = StdRng::seed_from_u64(5);
        let white = random_feats(&mut rng, 4000, 4);
        let (_, corr) = embedding_stats(&white);
        assert!(corr < 0.05, "independent dims, got corr {corr}");

        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64; 5]).collect();
        let (var, corr1) = embedding_stats(&Matrix::from_rows(&rows));
        assert!((corr1 - 1.0).abs() < 1e-12);
        assert!(var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn embedding_stats_matches_scratch_formula() {
        let feats = Matrix::from_rows(&[
            vec![1.0, 2.0, 0.5],
            vec![-1.0, 0.5, 1.5],
            vec![2.0, -0.5, 0.0],
            vec![0.5, 1.0, -1.0],
        ]);
        let (var, corr) = embedding_stats(&feats);
        // Scratch recomputation with explicit sums.
        let n = 4.0;
        let col = |j: usize| (0..4).map(|i| feats[(i, j)]).collect::<Vec<f64>>();
        let mut want_var = Vec::new();
        let mut means = Vec::new();
        for j in 0..3 {
            let c = col(j);
            let m = c.iter().sum::<f64>() / n;
            means.push(m);
            want_var.push(c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0));
        }
        for j in 0..3 {
            assert!((var[j] - want_var[j]).abs() < 1e-10);
        }
        let mut acc = 0.0;
        for a in 0..3 {
            for b in a + 1..3 {
                let (ca, cb) = (col(a), col(b));
                let cov = ca
                    .iter()
                    .zip(&cb)
                    .map(|(x, y)| (x - means[a]) * (y - means[b]))
                    .sum::<f64>()
                    / (n - 1.0);
                acc += (cov / (want_var[a] * want_var[b]).sqrt()).abs();
            }
        }
        assert!((corr - acc / 3.0).abs() < 1e-10);
    }

    #[test]
    fn probe_leaves_encoder_untouched() {
        use crate::data::gen_synthetic;
        use crate::model::{EncoderConfig, ProjectorConfig};
        let model: Model<f64> =
            Model::init(EncoderConfig::mlp(16, 32), ProjectorConfig::new(8), 0).unwrap();
        let mut train = gen_synthetic(2, 8, 0).unwrap();
        let mut test = gen_synthetic(2, 4, 1).unwrap();
        train.truncate(16);
        test.truncate(8);
        let before = model.to_tensors();
        let cfg = ProbeConfig { epochs: 3, ..Default::default() };
        fit_linear_probe(&model, &train, &test, &cfg).unwrap();
        let after = model.to_tensors();
        for (name, m) in &before {
            assert_eq!(m.data(), after[name].data(), "{name}");
        }
    }
}
