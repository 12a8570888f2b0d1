//! Frozen-feature linear probing.
//!
//! The encoder under test is never updated: its block outputs at one layer
//! become fixed features for a multinomial logistic regression trained by
//! full-batch gradient descent. Utterances split 80/20 into train and
//! held-out sets; accuracy is reported on the held-out frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::{Encoder, TapKind};
use crate::error::{Error, Result};
use crate::features::Corpus;
use crate::rng::SeedTree;

/// Held-out accuracy of a probe run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Held-out accuracy per class; null for classes absent from the
    /// held-out split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub layer: usize,
    pub seed: u64,
}

/// Frame representations plus labels for one utterance.
#[derive(Debug, Clone)]
pub struct ProbeUtterance {
    pub reps: Tensor<f32>,
    pub labels: Vec<u32>,
}

/// Extract frozen representations from `layer`'s block output for every
/// labeled utterance. No parameters are updated.
pub fn extract_frozen(
    encoder: &Encoder<f32>,
    corpus: &Corpus,
    layer: usize,
) -> Result<Vec<ProbeUtterance>> {
    if layer == 0 || layer > encoder.config().layers {
        return Err(Error::usage(format!(
            "layer {layer} out of range 1..={}",
            encoder.config().layers
        )));
    }
    let mut out = Vec::with_capacity(corpus.len());
    for item in &corpus.items {
        let labels = item.labels.clone().ok_or_else(|| {
            Error::usage(format!(
                "utterance '{}' has no labels",
                item.seq.utterance_id
            ))
        })?;
        let taps = encoder.forward_with_taps(&item.seq, None, &[layer], TapKind::BlockOutput)?;
        let reps = taps.taps.into_iter().next().unwrap().1;
        debug_assert_eq!(reps.shape()[0], labels.len());
        out.push(ProbeUtterance { reps, labels });
    }
    Ok(out)
}

struct Split {
    train_x: Vec<f32>,
    train_y: Vec<u32>,
    test_x: Vec<f32>,
    test_y: Vec<u32>,
    dim: usize,
}

fn split_by_utterance(data: &[ProbeUtterance], seed: u64) -> Result<Split> {
    if data.is_empty() {
        return Err(Error::usage("no utterances to probe".to_string()));
    }
    let dim = data[0].reps.shape()[1];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = SeedTree::new(seed).stream("probe-split", &[]);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let test_count = (data.len() / 5).max(1);
    let (test_ids, train_ids) = order.split_at(test_count);
    let mut split = Split {
        train_x: Vec::new(),
        train_y: Vec::new(),
        test_x: Vec::new(),
        test_y: Vec::new(),
        dim,
    };
    for &u in test_ids {
        split.test_x.extend_from_slice(data[u].reps.data());
        split.test_y.extend_from_slice(&data[u].labels);
    }
    for &u in train_ids {
        split.train_x.extend_from_slice(data[u].reps.data());
        split.train_y.extend_from_slice(&data[u].labels);
    }
    if split.train_y.is_empty() || split.test_y.is_empty() {
        return Err(Error::usage("split produced an empty partition".to_string()));
    }
    Ok(split)
}

/// Train a multinomial logistic regression on frozen representations and
/// report held-out accuracy. Deterministic given the seed.
pub fn train_linear_probe(data: &[ProbeUtterance], seed: u64) -> Result<ProbeResult> {
    train_linear_probe_at(data, seed, 0)
}

/// Like [`train_linear_probe`], recording which layer produced the
/// representations.
pub fn train_linear_probe_at(
    data: &[ProbeUtterance],
    seed: u64,
    layer: usize,
) -> Result<ProbeResult> {
    let num_classes = data
        .iter()
        .flat_map(|u| u.labels.iter())
        .copied()
        .max()
        .map(|m| m as usize + 1)
        .unwrap_or(0);
    let mut present = vec![false; num_classes];
    for u in data {
        for &l in &u.labels {
            present[l as usize] = true;
        }
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::usage(
            "probe needs at least 2 classes present".to_string(),
        ));
    }

    let split = split_by_utterance(data, seed)?;
    let d = split.dim;
    let n_train = split.train_y.len();

    // Standardize features with train-split statistics.
    let mut mean = vec![0.0f64; d];
    for row in split.train_x.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n_train as f64;
    }
    let mut var = vec![0.0f64; d];
    for row in split.train_x.chunks_exact(d) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let diff = v as f64 - m;
            *s += diff * diff;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|&s| 1.0 / ((s / n_train as f64).sqrt() + 1e-6))
        .collect();
    let standardize = |x: &[f32]| -> Vec<f64> {
        x.chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&inv_std)
                    .map(|((&v, &m), &is)| (v as f64 - m) * is)
            })
            .collect()
    };
    let train_x = standardize(&split.train_x);
    let test_x = standardize(&split.test_x);

    // Full-batch gradient descent on the softmax cross-entropy with a
    // small ridge penalty; bold-driver step size control keeps it
    // deterministic while converging quickly.
    let c = num_classes;
    let mut w = vec![0.0f64; d * c];
    let mut bias = vec![0.0f64; c];
    let ridge = 1e-4;
    let mut lr = 1.0;
    let mut prev_loss = f64::INFINITY;
    let inv_n = 1.0 / n_train as f64;
    for _iter in 0..400 {
        let mut gw = vec![0.0f64; d * c];
        let mut gb = vec![0.0f64; c];
        let mut loss = 0.0f64;
        for (row, &y) in train_x.chunks_exact(d).zip(&split.train_y) {
            let mut logits = bias.clone();
            for (j, &xj) in row.iter().enumerate() {
                let wrow = &w[j * c..(j + 1) * c];
                for (l, &wv) in logits.iter_mut().zip(wrow) {
                    *l += xj * wv;
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                denom += *l;
            }
            loss -= (logits[y as usize] / denom).ln();
            for (k, l) in logits.iter().enumerate() {
                let p = l / denom - if k == y as usize { 1.0 } else { 0.0 };
                gb[k] += p;
                for (j, &xj) in row.iter().enumerate() {
                    gw[j * c + k] += xj * p;
                }
            }
        }
        loss *= inv_n;
        for (g, &wv) in gw.iter_mut().zip(&w) {
            *g = *g * inv_n + ridge * wv;
        }
        for g in gb.iter_mut() {
            *g *= inv_n;
        }
        let grad_max = gw
            .iter()
            .chain(gb.iter())
            .fold(0.0f64, |acc, &g| acc.max(g.abs()));
        if grad_max < 1e-5 {
            break;
        }
        if loss > prev_loss {
            lr *= 0.5;
        } else {
            lr *= 1.05;
        }
        prev_loss = loss;
        for (wv, &g) in w.iter_mut().zip(&gw) {
            *wv -= lr * g;
        }
        for (bv, &g) in bias.iter_mut().zip(&gb) {
            *bv -= lr * g;
        }
    }

    // Held-out accuracy.
    let mut correct = 0usize;
    let mut per_class_total = vec![0usize; c];
    let mut per_class_correct = vec![0usize; c];
    for (row, &y) in test_x.chunks_exact(d).zip(&split.test_y) {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for k in 0..c {
            let mut score = bias[k];
            for (j, &xj) in row.iter().enumerate() {
                score += xj * w[j * c + k];
            }
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        per_class_total[y as usize] += 1;
        if best == y as usize {
            correct += 1;
            per_class_correct[y as usize] += 1;
        }
    }
    let accuracy = correct as f64 / split.test_y.len() as f64;
    let per_class_accuracy = per_class_total
        .iter()
        .zip(&per_class_correct)
        .map(|(&t, &c)| if t == 0 { None } else { Some(c as f64 / t as f64) })
        .collect();
    Ok(ProbeResult {
        accuracy,
        per_class_accuracy,
        layer,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Distribution;

    fn gaussian_utterances(
        seed: u64,
        utts: usize,
        frames: usize,
        dim: usize,
        classes: usize,
        sep: f64,
    ) -> Vec<ProbeUtterance> {
        let tree = SeedTree::new(seed);
        let mut mean_rng = tree.stream("means", &[]);
        let normal = rand_distr::StandardNormal;
        let means: Vec<f64> = (0..classes * dim)
            .map(|_| -> f64 { normal.sample(&mut mean_rng) })
            .map(|v| v * sep)
            .collect();
        (0..utts)
            .map(|u| {
                let mut rng = tree.stream("utt", &[u as u64]);
                let mut labels = Vec::with_capacity(frames);
                let mut data = Vec::with_capacity(frames * dim);
                for _ in 0..frames {
                    let y = rng.gen_range(0..classes);
                    labels.push(y as u32);
                    for j in 0..dim {
                        let noise: f64 = normal.sample(&mut rng);
                        data.push((means[y * dim + j] + noise) as f32);
                    }
                }
                ProbeUtterance {
                    reps: Tensor::matrix(frames, dim, data).unwrap(),
                    labels,
                }
            })
            .collect()
    }

    #[test]
    fn separable_two_class_data_scores_high() {
        let data = gaussian_utterances(1, 20, 30, 8, 2, 4.0);
        let result = train_linear_probe(&data, 3).unwrap();
        assert!(result.accuracy > 0.95, "accuracy {}", result.accuracy);
    }

    #[test]
    fn shuffled_labels_score_at_chance() {
        // Labels carry no information about the features: four classes,
        // so held-out accuracy sits near 0.25.
        let mut data = gaussian_utterances(2, 40, 40, 8, 4, 0.0);
        let mut rng = SeedTree::new(5).stream("shuffle", &[]);
        for u in data.iter_mut() {
            for l in u.labels.iter_mut() {
                *l = rng.gen_range(0..4);
            }
        }
        let result = train_linear_probe(&data, 4).unwrap();
        assert!(
            (result.accuracy - 0.25).abs() < 0.05,
            "accuracy {}",
            result.accuracy
        );
    }

    #[test]
    fn probe_is_deterministic() {
        let data = gaussian_utterances(3, 10, 20, 6, 3, 1.0);
        let a = train_linear_probe(&data, 9).unwrap();
        let b = train_linear_probe(&data, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_is_usage_error() {
        let mut data = gaussian_utterances(4, 6, 10, 4, 2, 1.0);
        for u in data.iter_mut() {
            u.labels.iter_mut().for_each(|l| *l = 0);
        }
        assert!(train_linear_probe(&data, 1).is_err());
    }

    #[test]
    fn extract_layers_differ_and_are_deterministic() {
        use crate::encoder::{build_encoder, EncoderConfig};
        use crate::features::{Corpus, SynthCorpusSpec, SynthParams};
        let spec = SynthCorpusSpec {
            utterances: 3,
            frames_min: 30,
            frames_max: 40,
            dim: 8,
            classes: 2,
            stack_factor: 2,
            params: SynthParams::default(),
        };
        let corpus = Corpus::synthesize(&spec, &SeedTree::new(12)).unwrap();
        let cfg = EncoderConfig {
            layers: 3,
            dim: 16,
            ffn: 24,
            heads: 2,
            conv_kernel: 3,
            input_dim: 16,
            preset_name: None,
        };
        let enc = build_encoder::<f32>(&cfg, 6).unwrap();
        let a = extract_frozen(&enc, &corpus, 1).unwrap();
        let a2 = extract_frozen(&enc, &corpus, 1).unwrap();
        let b = extract_frozen(&enc, &corpus, 3).unwrap();
        assert_eq!(a[0].reps, a2[0].reps);
        assert_ne!(a[0].reps, b[0].reps);
        assert_eq!(a[0].reps.shape()[0], corpus.items[0].seq.frames);
        assert!(extract_frozen(&enc, &corpus, 4).is_err());
    }
}
