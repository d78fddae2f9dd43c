//! Classification heads trained on frozen encoder latents.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::EncoderParams;
use super::mlp::Mlp;
use super::params::{Adam, AdamConfig, Parameters};
use super::train::{argmax, compute_class_weights, logits_and_latents, weighted_ce_grad};
use crate::error::{validation, ClampError, Result};
use crate::features::FeatureTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub hidden: Vec<usize>,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self { hidden: vec![32, 32], optimizer: AdamConfig::with_lr(1e-3), batch_size: 64, epochs: 60, seed: 0 }
    }
}

/// MLP over standardized latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentHead {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub mlp: Mlp,
}

impl LatentHead {
    fn standardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn logits(&self, latent: &[f64]) -> Vec<f64> {
        self.mlp.predict(&self.standardize(latent))
    }

    pub fn predict(&self, latent: &[f64]) -> usize {
        argmax(&self.logits(latent))
    }
}

/// Fits a fresh head on latents with weighted cross-entropy.
pub fn train_latent_head(
    latents: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    cfg: &HeadTrainConfig,
) -> Result<LatentHead> {
    if latents.is_empty() {
        return Err(ClampError::Empty("head training set".into()));
    }
    if latents.len() != labels.len() {
        return Err(ClampError::Shape { expected: format!("{} labels", latents.len()), got: labels.len().to_string() });
    }
    cfg.optimizer.validate()?;
    let dim = latents[0].len();
    let n = latents.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| latents.iter().map(|z| z[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            let v = latents.iter().map(|z| (z[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v.sqrt() > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut dims = vec![dim];
    dims.extend(&cfg.hidden);
    dims.push(n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = LatentHead { mean, std, mlp: Mlp::init(&dims, &mut rng) };
    let weights = compute_class_weights(labels, n_classes)?;
    let xs: Vec<Vec<f64>> = latents.iter().map(|z| head.standardize(z)).collect();
    let mut opt = Adam::new(cfg.optimizer.clone(), &head.mlp);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed);
        erng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut erng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = head.mlp.zeros_like();
            let mut loss = 0.0;
            for &i in chunk {
                let cache = head.mlp.forward(&xs[i]);
                let (l, d) = weighted_ce_grad(&cache.output, labels[i], &weights);
                loss += l;
                head.mlp.backward(&cache, &d, &mut grads);
            }
            if !loss.is_finite() {
                return Err(ClampError::NonFinite {
                    stage: "head training".into(),
                    diagnostics: format!("epoch {epoch}: loss {loss}"),
                });
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(&mut head.mlp, &grads);
        }
    }
    Ok(head)
}

/// New soft/hard head on top of a frozen encoder; the encoder is only read.
pub fn fit_compliance_head(
    encoder: &EncoderParams,
    xs: &[&FeatureTensor],
    labels: &[usize],
    cfg: &HeadTrainConfig,
) -> Result<LatentHead> {
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(validation(format!("compliance labels must be 0 (soft) or 1 (hard), got {bad}")));
    }
    if labels.iter().all(|&l| l == labels[0]) && !labels.is_empty() {
        log::warn!("compliance head trained on a single class; it will predict that class");
    }
    let (_, latents) = logits_and_latents(encoder, xs)?;
    train_latent_head(&latents, labels, 2, cfg)
}
