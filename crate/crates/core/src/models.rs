//! Differentiable models, losses, gradients, and the SGD step.
//!
//! Two model families over flat parameter vectors:
//!
//! - softmax regression: `logits = W x + b`, params `[W (C x F), b (C)]`;
//! - one-hidden-layer MLP with tanh: `logits = W2 tanh(W1 x + b1) + b2`,
//!   params `[W1 (H x F), b1 (H), W2 (C x H), b2 (C)]`.
//!
//! The loss is mean categorical cross-entropy over the given samples,
//! stabilized by max-subtraction:
//!
//! ```text
//! loss = mean_j [ logsumexp(logits_j) - logits_j[label_j] ]  >= 0
//! ```
//!
//! so the all-zero model on C classes scores exactly `ln C`. Gradients are
//! analytic (softmax-minus-one-hot backpropagation) and deterministic:
//! the same (params, batch) gives a bit-identical gradient.
//!
//! [`sample_batch`] draws the mini-batch for a logical step: uniform with
//! replacement from the client shard, seeded by (seed, client, step), so two
//! engines replaying the same logical step see the same batch. A batch size
//! at or above the shard size degrades to the full shard in order, which
//! makes full-batch runs (zero gradient variance) exactly reproducible.

use crate::data::Dataset;
use crate::rng::{stream, StreamKind};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::Distribution;

/// Model family plus its dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSpec {
    /// Linear softmax regression.
    Softmax { feature_dim: usize, num_classes: usize },
    /// One hidden tanh layer of the given width.
    Mlp {
        feature_dim: usize,
        hidden: usize,
        num_classes: usize,
    },
}

/// A parameter vector tagged with its family.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

impl ModelSpec {
    /// Softmax regression sized for a dataset.
    pub fn softmax_for(ds: &Dataset) -> ModelSpec {
        ModelSpec::Softmax {
            feature_dim: ds.feature_dim(),
            num_classes: ds.num_classes(),
        }
    }

    /// One-hidden-layer MLP sized for a dataset.
    pub fn mlp_for(ds: &Dataset, hidden: usize) -> ModelSpec {
        ModelSpec::Mlp {
            feature_dim: ds.feature_dim(),
            hidden,
            num_classes: ds.num_classes(),
        }
    }

    /// Flat parameter count M.
    pub fn param_count(&self) -> usize {
        match *self {
            ModelSpec::Softmax {
                feature_dim,
                num_classes,
            } => num_classes * feature_dim + num_classes,
            ModelSpec::Mlp {
                feature_dim,
                hidden,
                num_classes,
            } => hidden * feature_dim + hidden + num_classes * hidden + num_classes,
        }
    }

    /// Seeded Gaussian initialization (std 0.01). Every client starts from
    /// this same vector.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let m = self.param_count();
        let mut rng = stream(seed, StreamKind::Init, &[m as u64]);
        (0..m)
            .map(|_| {
                let draw: f64 = rand_distr::StandardNormal.sample(&mut rng);
                0.01 * draw
            })
            .collect()
    }

    /// Class logits for one feature row.
    pub fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        match *self {
            ModelSpec::Softmax {
                feature_dim,
                num_classes,
            } => {
                let (w, b) = params.split_at(num_classes * feature_dim);
                (0..num_classes)
                    .map(|c| {
                        b[c] + dot(&w[c * feature_dim..(c + 1) * feature_dim], x)
                    })
                    .collect()
            }
            ModelSpec::Mlp {
                feature_dim,
                hidden,
                num_classes,
            } => {
                let (w1, rest) = params.split_at(hidden * feature_dim);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(num_classes * hidden);
                let h: Vec<f64> = (0..hidden)
                    .map(|j| (b1[j] + dot(&w1[j * feature_dim..(j + 1) * feature_dim], x)).tanh())
                    .collect();
                (0..num_classes)
                    .map(|c| b2[c] + dot(&w2[c * hidden..(c + 1) * hidden], &h))
                    .collect()
            }
        }
    }

    /// Mean cross-entropy over the given sample indices.
    pub fn loss(&self, params: &[f64], ds: &Dataset, indices: &[usize]) -> f64 {
        assert!(!indices.is_empty(), "loss over an empty sample set");
        let mut acc = 0.0;
        for &i in indices {
            let logits = self.logits(params, ds.feature(i));
            acc += log_sum_exp(&logits) - logits[ds.label(i)];
        }
        acc / indices.len() as f64
    }

    /// Analytic gradient of [`ModelSpec::loss`] on the given batch.
    pub fn grad(&self, params: &[f64], ds: &Dataset, batch: &[usize]) -> Vec<f64> {
        assert!(!batch.is_empty(), "gradient over an empty batch");
        let mut g = vec![0.0; self.param_count()];
        match *self {
            ModelSpec::Softmax {
                feature_dim,
                num_classes,
            } => {
                for &i in batch {
                    let x = ds.feature(i);
                    let mut p = softmax(&self.logits(params, x));
                    p[ds.label(i)] -= 1.0;
                    let (gw, gb) = g.split_at_mut(num_classes * feature_dim);
                    for c in 0..num_classes {
                        for f in 0..feature_dim {
                            gw[c * feature_dim + f] += p[c] * x[f];
                        }
                        gb[c] += p[c];
                    }
                }
            }
            ModelSpec::Mlp {
                feature_dim,
                hidden,
                num_classes,
            } => {
                let (w1, rest) = params.split_at(hidden * feature_dim);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(num_classes * hidden);
                for &i in batch {
                    let x = ds.feature(i);
                    let h: Vec<f64> = (0..hidden)
                        .map(|j| {
                            (b1[j] + dot(&w1[j * feature_dim..(j + 1) * feature_dim], x)).tanh()
                        })
                        .collect();
                    let logits: Vec<f64> = (0..num_classes)
                        .map(|c| b2[c] + dot(&w2[c * hidden..(c + 1) * hidden], &h))
                        .collect();
                    let mut dl = softmax(&logits);
                    dl[ds.label(i)] -= 1.0;

                    let w1_len = hidden * feature_dim;
                    let w2_off = w1_len + hidden;
                    let b2_off = w2_off + num_classes * hidden;
                    let mut dh = vec![0.0; hidden];
                    for c in 0..num_classes {
                        for j in 0..hidden {
                            g[w2_off + c * hidden + j] += dl[c] * h[j];
                            dh[j] += dl[c] * w2[c * hidden + j];
                        }
                        g[b2_off + c] += dl[c];
                    }
                    for j in 0..hidden {
                        let dpre = dh[j] * (1.0 - h[j] * h[j]);
                        for f in 0..feature_dim {
                            g[j * feature_dim + f] += dpre * x[f];
                        }
                        g[w1_len + j] += dpre;
                    }
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for v in &mut g {
            *v *= scale;
        }
        g
    }

    /// Fraction of the given samples whose argmax logit matches the label.
    pub fn accuracy(&self, params: &[f64], ds: &Dataset, indices: &[usize]) -> f64 {
        assert!(!indices.is_empty(), "accuracy over an empty sample set");
        let hits = indices
            .iter()
            .filter(|&&i| {
                let logits = self.logits(params, ds.feature(i));
                let best = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                best == ds.label(i)
            })
            .count();
        hits as f64 / indices.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// One SGD step in place: `w <- w - eta * grad(batch; w)`.
///
/// `step` only labels the error when the gradient turns non-finite.
///
/// # Errors
///
/// [`Error::Diverged`] if any gradient entry is non-finite.
pub fn sgd_step(
    spec: &ModelSpec,
    params: &mut [f64],
    ds: &Dataset,
    batch: &[usize],
    eta: f64,
    step: usize,
) -> Result<()> {
    let g = spec.grad(params, ds, batch);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged(step));
    }
    for (w, gi) in params.iter_mut().zip(&g) {
        *w -= eta * gi;
    }
    Ok(())
}

/// Mini-batch for the logical step `(client, step)`: `batch_size` uniform
/// with-replacement draws from the shard, or the whole shard in order when
/// `batch_size >= shard len`. Deterministic in all arguments.
pub fn sample_batch(
    shard: &[usize],
    batch_size: usize,
    seed: u64,
    client: u64,
    step: u64,
) -> Vec<usize> {
    assert!(!shard.is_empty(), "cannot sample from an empty shard");
    if batch_size >= shard.len() {
        return shard.to_vec();
    }
    let mut rng = stream(seed, StreamKind::BatchDraw, &[client, step]);
    (0..batch_size)
        .map(|_| shard[rng.gen_range(0..shard.len())])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use proptest::prelude::*;

    fn random_params(spec: &ModelSpec, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = stream(seed, StreamKind::Probe, &[spec.param_count() as u64]);
        (0..spec.param_count())
            .map(|_| {
                let draw: f64 = rand_distr::StandardNormal.sample(&mut rng);
                scale * draw
            })
            .collect()
    }

    #[test]
    fn zero_params_ten_classes_gives_ln_ten() {
        let ds = synth_dataset(10, 2, 4, 5).unwrap();
        let spec = ModelSpec::softmax_for(&ds);
        let params = vec![0.0; spec.param_count()];
        let indices: Vec<usize> = (0..ds.len()).collect();
        let loss = spec.loss(&params, &ds, &indices);
        assert!(
            (loss - 10.0f64.ln()).abs() < 1e-12,
            "uniform prediction loss = {loss}, want ln 10"
        );
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let ds = Dataset::new(vec![1.0, 1.0], 1, vec![0, 1]).unwrap();
        let spec = ModelSpec::Softmax { feature_dim: 1, num_classes: 2 };
        // Class-0 logit 50, class-1 logit -50 on x = 1.
        let params = vec![50.0, -50.0, 0.0, 0.0];
        let loss = spec.loss(&params, &ds, &[0]);
        assert!(loss < 1e-12, "confident correct loss = {loss}");
    }

    #[test]
    fn loss_matches_naive_per_sample_oracle() {
        let ds = synth_dataset(3, 5, 2, 8).unwrap();
        for spec in [
            ModelSpec::softmax_for(&ds),
            ModelSpec::mlp_for(&ds, 4),
        ] {
            let params = random_params(&spec, 17, 0.3);
            let indices: Vec<usize> = (0..ds.len()).collect();
            let got = spec.loss(&params, &ds, &indices);
            // Unstabilized oracle: fine at these magnitudes.
            let mut want = 0.0;
            for &i in &indices {
                let logits = spec.logits(&params, ds.feature(i));
                let total: f64 = logits.iter().map(|&l| l.exp()).sum();
                want -= (logits[ds.label(i)].exp() / total).ln();
            }
            want /= indices.len() as f64;
            assert!(
                (got - want).abs() < 1e-12,
                "{spec:?}: stabilized {got} vs naive {want}"
            );
        }
    }

    #[test]
    fn loss_decomposes_over_shard_regrouping() {
        let ds = synth_dataset(3, 10, 2, 4).unwrap();
        let spec = ModelSpec::softmax_for(&ds);
        let params = random_params(&spec, 3, 0.2);
        let all: Vec<usize> = (0..ds.len()).collect();
        let whole = spec.loss(&params, &ds, &all);
        let (left, right) = all.split_at(12);
        let split = (left.len() as f64 * spec.loss(&params, &ds, left)
            + right.len() as f64 * spec.loss(&params, &ds, right))
            / all.len() as f64;
        assert!(
            (whole - split).abs() < 1e-12,
            "weighted regrouping: {whole} vs {split}"
        );
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let ds = synth_dataset(3, 6, 3, 12).unwrap();
        let batch: Vec<usize> = (0..ds.len()).collect();
        for spec in [
            ModelSpec::softmax_for(&ds),
            ModelSpec::mlp_for(&ds, 5),
        ] {
            for point in 0..3 {
                let params = random_params(&spec, 100 + point, 0.5);
                let analytic = spec.grad(&params, &ds, &batch);
                let h = 1e-5;
                let mut fd = vec![0.0; params.len()];
                let mut probe = params.clone();
                for j in 0..params.len() {
                    probe[j] = params[j] + h;
                    let up = spec.loss(&probe, &ds, &batch);
                    probe[j] = params[j] - h;
                    let down = spec.loss(&probe, &ds, &batch);
                    probe[j] = params[j];
                    fd[j] = (up - down) / (2.0 * h);
                }
                let diff_norm: f64 = analytic
                    .iter()
                    .zip(&fd)
                    .map(|(a, f)| (a - f) * (a - f))
                    .sum::<f64>()
                    .sqrt();
                let fd_norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
                let rel = diff_norm / fd_norm.max(1e-12);
                assert!(
                    rel < 1e-4,
                    "{spec:?} point {point}: gradient relative error {rel}"
                );
            }
        }
    }

    #[test]
    fn gradient_is_deterministic_and_unbiased_over_disjoint_batches() {
        let ds = synth_dataset(4, 10, 3, 6).unwrap();
        let spec = ModelSpec::softmax_for(&ds);
        let params = random_params(&spec, 9, 0.4);
        let all: Vec<usize> = (0..ds.len()).collect();

        let once = spec.grad(&params, &ds, &all);
        let twice = spec.grad(&params, &ds, &all);
        assert_eq!(once, twice, "same batch must give bit-identical gradients");

        // Mean over disjoint batches of equal size equals the full gradient.
        let full = spec.grad(&params, &ds, &all);
        let mut mean = vec![0.0; params.len()];
        let b = 8;
        let chunks: Vec<&[usize]> = all.chunks(b).collect();
        for chunk in &chunks {
            for (m, g) in mean.iter_mut().zip(spec.grad(&params, &ds, chunk)) {
                *m += g;
            }
        }
        for m in &mut mean {
            *m /= chunks.len() as f64;
        }
        for (j, (m, f)) in mean.iter().zip(&full).enumerate() {
            assert!(
                (m - f).abs() < 1e-10,
                "coordinate {j}: batch mean {m} vs full {f}"
            );
        }
    }

    #[test]
    fn sgd_step_matches_manual_update_and_eta_zero_is_identity() {
        let ds = synth_dataset(2, 4, 2, 3).unwrap();
        let spec = ModelSpec::softmax_for(&ds);
        let start = random_params(&spec, 21, 0.1);
        let batch = vec![0, 3, 5];

        let mut frozen = start.clone();
        sgd_step(&spec, &mut frozen, &ds, &batch, 0.0, 0).unwrap();
        assert_eq!(frozen, start, "eta = 0 must not move the model");

        let mut stepped = start.clone();
        sgd_step(&spec, &mut stepped, &ds, &batch, 0.25, 0).unwrap();
        let g = spec.grad(&start, &ds, &batch);
        for j in 0..start.len() {
            let want = start[j] - 0.25 * g[j];
            assert!(
                (stepped[j] - want).abs() < 1e-15,
                "coordinate {j}: {} vs manual {want}",
                stepped[j]
            );
        }
    }

    #[test]
    fn full_batch_descent_is_monotone_on_separable_data() {
        let ds = synth_dataset(3, 30, 4, 11).unwrap();
        let spec = ModelSpec::softmax_for(&ds);
        let mut params = spec.init(60);
        let all: Vec<usize> = (0..ds.len()).collect();
        let mut last = spec.loss(&params, &ds, &all);
        for step in 0..200 {
            sgd_step(&spec, &mut params, &ds, &all, 0.05, step).unwrap();
            let now = spec.loss(&params, &ds, &all);
            assert!(
                now < last,
                "step {step}: loss rose from {last} to {now}"
            );
            last = now;
        }
    }

    #[test]
    fn centralized_softmax_reaches_high_training_accuracy() {
        let ds = synth_dataset(10, 100, 8, 1).unwrap();
        let spec = ModelSpec::softmax_for(&ds);
        let mut params = spec.init(60);
        let all: Vec<usize> = (0..ds.len()).collect();
        for step in 0..200 {
            sgd_step(&spec, &mut params, &ds, &all, 0.1, step).unwrap();
        }
        let acc = spec.accuracy(&params, &ds, &all);
        assert!(acc > 0.9, "train accuracy after 200 full-batch steps: {acc}");
    }

    #[test]
    fn sample_batch_degrades_to_full_shard_and_is_seeded() {
        let shard = vec![4, 9, 2, 7];
        assert_eq!(sample_batch(&shard, 10, 1, 0, 0), shard, "oversized batch = whole shard");
        assert_eq!(sample_batch(&shard, 4, 1, 0, 0), shard, "exact-size batch = whole shard");

        let a = sample_batch(&shard, 2, 1, 3, 5);
        let b = sample_batch(&shard, 2, 1, 3, 5);
        assert_eq!(a, b, "same key, same batch");
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|v| shard.contains(v)));
        let c = sample_batch(&shard, 2, 1, 3, 6);
        let d = sample_batch(&shard, 2, 1, 4, 5);
        assert!(a != c || a != d, "step and client must influence the draw");
    }

    #[test]
    fn init_is_deterministic_with_small_scale() {
        let spec = ModelSpec::Softmax { feature_dim: 6, num_classes: 3 };
        let a = spec.init(5);
        let b = spec.init(5);
        assert_eq!(a, b);
        assert_eq!(a.len(), spec.param_count());
        let max = a.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max < 0.1, "std-0.01 init should stay small, max |w| = {max}");
        assert!(a.iter().any(|&v| v != 0.0), "init must not be all zero");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn loss_is_nonnegative(seed in 0u64..300, scale in 0.01f64..2.0) {
            let ds = synth_dataset(3, 4, 2, 2).unwrap();
            let spec = ModelSpec::mlp_for(&ds, 3);
            let params = random_params(&spec, seed, scale);
            let all: Vec<usize> = (0..ds.len()).collect();
            prop_assert!(spec.loss(&params, &ds, &all) >= 0.0);
        }

        #[test]
        fn batches_stay_inside_the_shard(
            shard_len in 1usize..20,
            batch in 1usize..25,
            seed in 0u64..200,
        ) {
            let shard: Vec<usize> = (0..shard_len).map(|v| v * 3).collect();
            let drawn = sample_batch(&shard, batch, seed, 1, 2);
            let want_len = if batch >= shard_len { shard_len } else { batch };
            prop_assert_eq!(drawn.len(), want_len);
            prop_assert!(drawn.iter().all(|v| shard.contains(v)));
        }
    }
}
