//! Weighted cross-entropy, class weights and the minibatch training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{backward, forward, EncoderParams, HapticEncoderConfig};
use super::metrics::evaluate;
use super::params::{Adam, Parameters};
use crate::error::{validation, ClampError, Result};
use crate::features::FeatureTensor;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(n_classes: usize) -> Self {
        Self { weights: vec![1.0; n_classes] }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { weights: self.weights.iter().map(|w| w * k).collect() }
    }
}

/// Inverse-frequency weights rescaled to mean 1. Classes absent from
/// `labels` get the largest weight among present classes.
pub fn compute_class_weights(labels: &[usize], n_classes: usize) -> Result<ClassWeights> {
    if labels.is_empty() {
        return Err(ClampError::Empty("class weights need at least one label".into()));
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(validation(format!("label {l} outside [0, {n_classes})")));
        }
        counts[l] += 1;
    }
    let inv: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0).then(|| 1.0 / c as f64)).collect();
    let max_present = inv.iter().flatten().copied().fold(0.0, f64::max);
    let raw: Vec<f64> = inv.iter().map(|w| w.unwrap_or(max_present)).collect();
    let mean = raw.iter().sum::<f64>() / n_classes as f64;
    Ok(ClassWeights { weights: raw.into_iter().map(|w| w / mean).collect() })
}

/// `−w_label · log softmax(logits)_label`.
pub fn weighted_ce_loss(logits: &[f64], label: usize, weights: &ClassWeights) -> f64 {
    -weights.weights[label] * log_softmax(logits)[label]
}

/// Loss and its gradient with respect to the logits, `w_label · (p − onehot)`.
pub fn weighted_ce_grad(logits: &[f64], label: usize, weights: &ClassWeights) -> (f64, Vec<f64>) {
    let w = weights.weights[label];
    let p = softmax(logits);
    let loss = -w * log_softmax(logits)[label];
    let grad = p.iter().enumerate().map(|(i, pi)| w * (pi - if i == label { 1.0 } else { 0.0 })).collect();
    (loss, grad)
}

/// Mean of per-sample weighted losses.
pub fn batch_weighted_ce(logits: &[Vec<f64>], labels: &[usize], weights: &ClassWeights) -> f64 {
    logits.iter().zip(labels).map(|(z, &y)| weighted_ce_loss(z, y, weights)).sum::<f64>() / logits.len().max(1) as f64
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a FeatureTensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_nmcc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc,val_nmcc\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_acc, r.val_nmcc);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (1-based).
    pub selected_epoch: usize,
}

impl TrainOutcome {
    /// Validation accuracy of the returned parameters.
    pub fn final_val_acc(&self) -> f64 {
        self.history.get(self.selected_epoch.wrapping_sub(1)).map_or(f64::NAN, |r| r.val_acc)
    }
}

pub fn predict_logits(params: &EncoderParams, xs: &[&FeatureTensor]) -> Result<Vec<Vec<f64>>> {
    xs.iter().map(|x| Ok(forward(params, x)?.logits().to_vec())).collect()
}

/// Logits and pooled latents in one pass.
pub fn logits_and_latents(params: &EncoderParams, xs: &[&FeatureTensor]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut logits = Vec::with_capacity(xs.len());
    let mut latents = Vec::with_capacity(xs.len());
    for x in xs {
        let c = forward(params, x)?;
        logits.push(c.logits().to_vec());
        latents.push(c.latent);
    }
    Ok((logits, latents))
}

pub fn predict_classes(params: &EncoderParams, xs: &[&FeatureTensor]) -> Result<Vec<usize>> {
    Ok(predict_logits(params, xs)?.iter().map(|z| argmax(z)).collect())
}

/// Loss and accumulated parameter gradient over a batch (mean over samples).
pub fn batch_gradient(
    params: &EncoderParams,
    batch: &[Example<'_>],
    weights: &ClassWeights,
) -> Result<(f64, EncoderParams)> {
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for ex in batch {
        let cache = forward(params, ex.x)?;
        let (l, d) = weighted_ce_grad(cache.logits(), ex.label, weights);
        loss += l;
        backward(params, &cache, &d, &mut grads);
    }
    let n = batch.len().max(1) as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

fn check_examples(examples: &[Example<'_>], n_classes: usize) -> Result<()> {
    if examples.is_empty() {
        return Err(ClampError::Empty("training set".into()));
    }
    if let Some(bad) = examples.iter().find(|e| e.label >= n_classes) {
        return Err(validation(format!("label {} outside [0, {n_classes})", bad.label)));
    }
    Ok(())
}

/// Fresh encoder: seeded init, input statistics from `train`, then
/// [`continue_training`] with inverse-frequency class weights.
pub fn train_encoder(train: &[Example<'_>], val: &[Example<'_>], cfg: &HapticEncoderConfig) -> Result<TrainOutcome> {
    check_examples(train, cfg.n_classes)?;
    let mut params = EncoderParams::init(cfg)?;
    let xs: Vec<&FeatureTensor> = train.iter().map(|e| e.x).collect();
    params.fit_input_stats(&xs);
    let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
    let weights = compute_class_weights(&labels, cfg.n_classes)?;
    continue_training(params, train, val, cfg, &weights)
}

/// Minibatch Adam from the given parameters for `cfg.epochs` epochs. Batch
/// order is drawn from `cfg.seed` and the epoch number, so runs are
/// reproducible bit for bit.
pub fn continue_training(
    mut params: EncoderParams,
    train: &[Example<'_>],
    val: &[Example<'_>],
    cfg: &HapticEncoderConfig,
    weights: &ClassWeights,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_examples(train, cfg.n_classes)?;
    let mut opt = Adam::new(cfg.optimizer.clone(), &params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grads) = batch_gradient(&params, &batch, weights)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(ClampError::NonFinite {
                    stage: "encoder training".into(),
                    diagnostics: format!("epoch {epoch}, batch {b}: loss {loss}"),
                });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut params, &grads);
        }
        let (val_acc, val_nmcc) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let xs: Vec<&FeatureTensor> = val.iter().map(|e| e.x).collect();
            let preds = predict_classes(&params, &xs)?;
            let labels: Vec<usize> = val.iter().map(|e| e.label).collect();
            let m = evaluate(&preds, &labels, cfg.n_classes)?;
            (m.accuracy, m.nmcc)
        };
        let rec = EpochRecord { epoch, train_loss: total / train.len() as f64, val_acc, val_nmcc };
        log::info!("epoch {epoch}: loss {:.4} val_acc {:.4} val_nmcc {:.4}", rec.train_loss, rec.val_acc, rec.val_nmcc);
        if cfg.keep_best && !val.is_empty() && best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, params.clone()));
        }
        history.push(rec);
    }
    let (params, selected_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (params, cfg.epochs),
    };
    Ok(TrainOutcome { params, history, selected_epoch })
}

/// Trains with seeds `seed, seed+1, seed+2` and keeps the run with the lowest
/// final validation accuracy (ties go to the earliest seed).
pub fn worst_of_seeds(train: &[Example<'_>], val: &[Example<'_>], cfg: &HapticEncoderConfig) -> Result<TrainOutcome> {
    let mut worst: Option<TrainOutcome> = None;
    for k in 0..3 {
        let run_cfg = HapticEncoderConfig { seed: cfg.seed.wrapping_add(k), ..cfg.clone() };
        let out = train_encoder(train, val, &run_cfg)?;
        log::info!("seed {}: val_acc {:.4}", run_cfg.seed, out.final_val_acc());
        if worst.as_ref().is_none_or(|w| out.final_val_acc() < w.final_val_acc()) {
            worst = Some(out);
        }
    }
    Ok(worst.expect("three runs"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{N_CHANNELS, SEGMENT_LEN};
    use crate::labels::Embodiment;
    use rand::Rng;

    #[test]
    fn loss_examples() {
        let w = ClassWeights::uniform(3);
        assert!(weighted_ce_loss(&[50.0, 0.0, 0.0], 0, &w) < 1e-20);
        assert!((weighted_ce_loss(&[0.3; 5], 2, &ClassWeights::uniform(5)) - 5f64.ln()).abs() < 1e-12);
        let hand = {
            let z = [2.0f64, 1.0, 0.0];
            let denom = z.iter().map(|v| v.exp()).sum::<f64>();
            2.0 * -(1f64.exp() / denom).ln()
        };
        let w = ClassWeights { weights: vec![1.0, 2.0, 1.0] };
        assert!((weighted_ce_loss(&[2.0, 1.0, 0.0], 1, &w) - hand).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_difference() {
        let w = ClassWeights { weights: vec![0.5, 2.0, 1.5, 1.0] };
        let z = [0.3, -1.2, 2.0, 0.1];
        let (_, g) = weighted_ce_grad(&z, 2, &w);
        for i in 0..4 {
            let mut zp = z;
            zp[i] += 1e-6;
            let mut zm = z;
            zm[i] -= 1e-6;
            let num = (weighted_ce_loss(&zp, 2, &w) - weighted_ce_loss(&zm, 2, &w)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(compute_class_weights(&[0, 1, 2, 0, 1, 2], 3).unwrap().weights, vec![1.0; 3]);
        let w = compute_class_weights(&[0, 0, 1], 2).unwrap().weights;
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 4.0 / 3.0).abs() < 1e-12);
        let w = compute_class_weights(&[0, 0, 1], 3).unwrap().weights;
        assert_eq!(w[2], w[1]);
        assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!(compute_class_weights(&[], 3).is_err());
        assert!(compute_class_weights(&[4], 3).is_err());
    }

    fn tiny_cfg(n_classes: usize) -> HapticEncoderConfig {
        HapticEncoderConfig {
            n_blocks: 2,
            n_filters: 8,
            bottleneck: 8,
            kernel_lengths: vec![3, 9],
            head_hidden: vec![16, 16],
            n_classes,
            batch_size: 8,
            ..HapticEncoderConfig::tiny()
        }
    }

    fn separable(n: usize, seed: u64) -> Vec<(FeatureTensor, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let level = if label == 0 { -1.0 } else { 1.0 };
                let data = (0..N_CHANNELS * SEGMENT_LEN)
                    .map(|k| {
                        if k / SEGMENT_LEN == 2 {
                            level + rng.random_range(-0.3f32..0.3)
                        } else {
                            rng.random_range(-1.0f32..1.0)
                        }
                    })
                    .collect();
                (FeatureTensor::from_data(data, Embodiment::ClampDevice, SEGMENT_LEN).unwrap(), label)
            })
            .collect()
    }

    fn examples(d: &[(FeatureTensor, usize)]) -> Vec<Example<'_>> {
        d.iter().map(|(x, l)| Example { x, label: *l }).collect()
    }

    #[test]
    fn separable_fixture_is_learned() {
        let data = separable(32, 1);
        let ex = examples(&data);
        let cfg = HapticEncoderConfig { epochs: 15, ..tiny_cfg(2) };
        let out = train_encoder(&ex, &ex, &cfg).unwrap();
        assert!(out.final_val_acc() >= 0.99, "{:?}", out.history);
        assert!(out.history[0].train_loss > out.history.last().unwrap().train_loss);
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let data = separable(8, 2);
        let ex = examples(&data);
        let cfg = HapticEncoderConfig { epochs: 0, ..tiny_cfg(2) };
        let out = train_encoder(&ex, &[], &cfg).unwrap();
        let mut init = EncoderParams::init(&cfg).unwrap();
        let xs: Vec<&FeatureTensor> = data.iter().map(|d| &d.0).collect();
        init.fit_input_stats(&xs);
        assert_eq!(out.params, init);
        let cfg = HapticEncoderConfig { epochs: 2, ..tiny_cfg(2) };
        let a = train_encoder(&ex, &[], &cfg).unwrap();
        let b = train_encoder(&ex, &[], &cfg).unwrap();
        assert_eq!(a.params.hash_hex(), b.params.hash_hex());
    }

    #[test]
    fn weight_scaling_scales_loss_and_keeps_direction() {
        let data = separable(4, 3);
        let ex = examples(&data);
        let p = EncoderParams::init(&tiny_cfg(2)).unwrap();
        let w = ClassWeights { weights: vec![0.7, 1.3] };
        let (l1, g1) = batch_gradient(&p, &ex, &w).unwrap();
        let (l2, g2) = batch_gradient(&p, &ex, &w.scaled(3.0)).unwrap();
        assert!((l2 - 3.0 * l1).abs() < 1e-12 * l2.abs());
        let (mut dot, mut n1, mut n2) = (0.0, 0.0, 0.0);
        for ((_, a), (_, b)) in g1.tensors().iter().zip(g2.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                dot += x * y;
                n1 += x * x;
                n2 += y * y;
            }
        }
        assert!((dot / (n1.sqrt() * n2.sqrt()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nan_input_aborts_training() {
        let mut data = separable(4, 4);
        data[1].0.channel_mut(0)[5] = f32::NAN;
        let ex = examples(&data);
        let cfg = HapticEncoderConfig { epochs: 1, ..tiny_cfg(2) };
        let mut p = EncoderParams::init(&cfg).unwrap();
        p.fit_input_stats(&[&data[0].0]);
        let err = continue_training(p, &ex, &[], &cfg, &ClassWeights::uniform(2)).unwrap_err();
        assert!(matches!(err, ClampError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn encoder_gradient_with_residual_blocks() {
        // Three blocks so the shortcut path is exercised.
        let cfg = HapticEncoderConfig {
            n_blocks: 3,
            n_filters: 3,
            bottleneck: 2,
            kernel_lengths: vec![2, 5],
            head_hidden: vec![5, 4],
            n_classes: 3,
            ..HapticEncoderConfig::tiny()
        };
        let mut p = EncoderParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, t) in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
        let data = separable(2, 5);
        let ex = examples(&data);
        let w = ClassWeights { weights: vec![1.0, 0.5, 2.0] };
        let (_, g) = batch_gradient(&p, &ex, &w).unwrap();
        let loss = |p: &EncoderParams| batch_gradient(p, &ex, &w).unwrap().0;
        let n = p.n_params();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..80 {
            let i = rng.random_range(0..n);
            let orig = p.get_flat(i);
            p.set_flat(i, orig + h);
            let up = loss(&p);
            p.set_flat(i, orig - h);
            let down = loss(&p);
            p.set_flat(i, orig);
            let num = (up - down) / (2.0 * h);
            let ana = g.get_flat(i);
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
