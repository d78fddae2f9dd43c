//! Fusion network over haptic logits and the standardized visual prior,
//! the composite loss, and the pretraining / finetuning loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prior::VisionPrior;
use crate::error::{validation, ClampError, Result};
use crate::features::FeatureTensor;
use crate::models::checkpoint::Checkpoint;
use crate::models::encoder::{backward, forward, EncoderParams};
use crate::models::metrics::evaluate;
use crate::models::mlp::{Mlp, MlpCache};
use crate::models::params::{Adam, AdamConfig, Parameters, TensorList, TensorListMut};
use crate::models::train::{argmax, compute_class_weights, predict_logits, softmax, ClassWeights, EpochRecord};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub mlp: Mlp,
    pub lambda_kl: f64,
}

impl FusionParams {
    /// `2·n_classes → hidden → n_classes`.
    pub fn init(n_classes: usize, hidden: usize, lambda_kl: f64, seed: u64) -> Result<Self> {
        if !(lambda_kl >= 0.0 && lambda_kl.is_finite()) {
            return Err(validation(format!("lambda_kl must be finite and >= 0, got {lambda_kl}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { mlp: Mlp::init(&[2 * n_classes, hidden, n_classes], &mut rng), lambda_kl })
    }

    pub fn n_classes(&self) -> usize {
        self.mlp.dims().last().copied().unwrap_or(0)
    }
}

impl Parameters for FusionParams {
    fn tensors(&self) -> TensorList<'_> {
        self.mlp.tensors().into_iter().map(|(n, t)| (format!("fusion.{n}"), t)).collect()
    }

    fn tensors_mut(&mut self) -> TensorListMut<'_> {
        self.mlp.tensors_mut().into_iter().map(|(n, t)| (format!("fusion.{n}"), t)).collect()
    }

    fn zeros_like(&self) -> Self {
        Self { mlp: self.mlp.zeros_like(), lambda_kl: self.lambda_kl }
    }
}

fn fusion_input(haptic_logits: &[f64], prior: &VisionPrior, params: &FusionParams) -> Result<Vec<f64>> {
    let n = params.n_classes();
    if haptic_logits.len() != n || prior.std_logits.len() != n {
        return Err(ClampError::Shape {
            expected: format!("{n} haptic logits and {n} prior logits"),
            got: format!("{} and {}", haptic_logits.len(), prior.std_logits.len()),
        });
    }
    Ok(haptic_logits.iter().chain(&prior.std_logits).copied().collect())
}

/// Class probabilities of the fused model.
pub fn fuse_forward(haptic_logits: &[f64], prior: &VisionPrior, params: &FusionParams) -> Result<Vec<f64>> {
    Ok(softmax(&params.mlp.predict(&fusion_input(haptic_logits, prior, params)?)))
}

fn kl_term(p: &[f64], v: &[f64]) -> f64 {
    v.iter().zip(p).filter(|(vi, _)| **vi > 0.0).map(|(vi, pi)| vi * (vi / pi.max(PROB_FLOOR)).ln()).sum()
}

/// `w_label · −ln P_label + λ · KL(V ‖ P)`, natural log, `P` floored at
/// [`PROB_FLOOR`], `0 · ln 0 = 0`.
pub fn composite_loss(p: &[f64], label: usize, v: &[f64], weights: &ClassWeights, lambda_kl: f64) -> f64 {
    let ce = -weights.weights[label] * p[label].max(PROB_FLOOR).ln();
    if lambda_kl == 0.0 {
        ce
    } else {
        ce + lambda_kl * kl_term(p, v)
    }
}

/// Gradient of [`composite_loss`] with respect to the logits behind `p`:
/// `w (P − onehot) + λ (P ΣV − V)`.
pub fn composite_grad(p: &[f64], label: usize, v: &[f64], weights: &ClassWeights, lambda_kl: f64) -> Vec<f64> {
    let w = weights.weights[label];
    let sv: f64 = v.iter().sum();
    p.iter()
        .zip(v)
        .enumerate()
        .map(|(i, (pi, vi))| w * (pi - if i == label { 1.0 } else { 0.0 }) + lambda_kl * (pi * sv - vi))
        .collect()
}

struct FusedCache {
    mlp: MlpCache,
    probs: Vec<f64>,
}

fn fused_cache(haptic_logits: &[f64], prior: &VisionPrior, params: &FusionParams) -> Result<FusedCache> {
    let mlp = params.mlp.forward(&fusion_input(haptic_logits, prior, params)?);
    let probs = softmax(&mlp.output);
    Ok(FusedCache { mlp, probs })
}

/// Loss of one example through encoder and fusion, accumulating gradients
/// for both into `enc_grads` / `fusion_grads` (the encoder part is skipped
/// when `enc_grads` is `None`).
pub fn fused_gradient(
    encoder: &EncoderParams,
    fusion: &FusionParams,
    x: &FeatureTensor,
    label: usize,
    prior: &VisionPrior,
    weights: &ClassWeights,
    enc_grads: Option<&mut EncoderParams>,
    fusion_grads: &mut FusionParams,
) -> Result<f64> {
    let ec = forward(encoder, x)?;
    let fc = fused_cache(ec.logits(), prior, fusion)?;
    let loss = composite_loss(&fc.probs, label, &prior.probs, weights, fusion.lambda_kl);
    let d = composite_grad(&fc.probs, label, &prior.probs, weights, fusion.lambda_kl);
    let dx = fusion.mlp.backward(&fc.mlp, &d, &mut fusion_grads.mlp);
    if let Some(g) = enc_grads {
        backward(encoder, &ec, &dx[..fusion.n_classes()], g);
    }
    Ok(loss)
}

#[derive(Serialize, Deserialize)]
struct FusionMeta {
    dims: Vec<usize>,
    lambda_kl: f64,
}

pub fn fusion_checkpoint(params: &FusionParams) -> Result<Checkpoint> {
    let meta = FusionMeta { dims: params.mlp.dims(), lambda_kl: params.lambda_kl };
    Checkpoint::from_params("fusion", &meta, params)
}

pub fn fusion_from_checkpoint(ck: &Checkpoint) -> Result<FusionParams> {
    if ck.kind != "fusion" {
        return Err(ClampError::Schema {
            file: "checkpoint".into(),
            msg: format!("expected a fusion checkpoint, found {}", ck.kind),
        });
    }
    let meta: FusionMeta = ck.meta_as()?;
    if meta.dims.len() != 3 || meta.dims[0] != 2 * meta.dims[2] {
        return Err(ClampError::Schema {
            file: "checkpoint".into(),
            msg: format!("fusion dims {:?} are not [2n, hidden, n]", meta.dims),
        });
    }
    let mut params = FusionParams::init(meta.dims[2], meta.dims[1], meta.lambda_kl, 0)?;
    ck.fill(&mut params)?;
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionTrainConfig {
    pub hidden: usize,
    pub lambda_kl: f64,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self { hidden: 64, lambda_kl: 0.1, optimizer: AdamConfig::with_lr(1e-5), batch_size: 64, epochs: 120, seed: 0 }
    }
}

impl FusionTrainConfig {
    /// Desk-scale schedule: larger step, fewer epochs.
    pub fn tiny() -> Self {
        Self { optimizer: AdamConfig::with_lr(1e-3), epochs: 40, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(validation("fusion hidden width and batch size must be positive"));
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_kl.is_finite()) {
            return Err(validation("lambda_kl must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionExample<'a> {
    pub x: &'a FeatureTensor,
    pub prior: &'a VisionPrior,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome {
    pub params: FusionParams,
    pub history: Vec<EpochRecord>,
}

fn check(examples: &[FusionExample<'_>], n: usize, what: &str) -> Result<()> {
    if examples.is_empty() {
        return Err(ClampError::Empty(what.into()));
    }
    if let Some(e) = examples.iter().find(|e| e.label >= n) {
        return Err(validation(format!("label {} outside [0, {n})", e.label)));
    }
    Ok(())
}

fn val_metrics(encoder: &EncoderParams, fusion: &FusionParams, val: &[FusionExample<'_>]) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let preds = predict_fused(encoder, fusion, val)?;
    let labels: Vec<usize> = val.iter().map(|e| e.label).collect();
    let m = evaluate(&preds, &labels, fusion.n_classes())?;
    Ok((m.accuracy, m.nmcc))
}

fn non_finite(stage: &str, epoch: usize, loss: f64) -> ClampError {
    ClampError::NonFinite { stage: stage.into(), diagnostics: format!("epoch {epoch}: loss {loss}") }
}

/// Fused class probabilities for each example.
pub fn fused_probs(encoder: &EncoderParams, fusion: &FusionParams, xs: &[FusionExample<'_>]) -> Result<Vec<Vec<f64>>> {
    let tensors: Vec<&FeatureTensor> = xs.iter().map(|e| e.x).collect();
    let logits = predict_logits(encoder, &tensors)?;
    logits.iter().zip(xs).map(|(z, e)| fuse_forward(z, e.prior, fusion)).collect()
}

pub fn predict_fused(encoder: &EncoderParams, fusion: &FusionParams, xs: &[FusionExample<'_>]) -> Result<Vec<usize>> {
    Ok(fused_probs(encoder, fusion, xs)?.iter().map(|p| argmax(p)).collect())
}

/// Trains a fresh fusion network on a frozen encoder; haptic logits are
/// computed once up front.
pub fn pretrain_fusion(
    encoder: &EncoderParams,
    train: &[FusionExample<'_>],
    val: &[FusionExample<'_>],
    cfg: &FusionTrainConfig,
) -> Result<FusionOutcome> {
    cfg.validate()?;
    let n = encoder.config.n_classes;
    check(train, n, "fusion training set")?;
    let mut params = FusionParams::init(n, cfg.hidden, cfg.lambda_kl, cfg.seed)?;
    let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
    let weights = compute_class_weights(&labels, n)?;
    let tensors: Vec<&FeatureTensor> = train.iter().map(|e| e.x).collect();
    let logits = predict_logits(encoder, &tensors)?;
    let mut opt = Adam::new(cfg.optimizer.clone(), &params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            for &i in chunk {
                let e = &train[i];
                let fc = fused_cache(&logits[i], e.prior, &params)?;
                total += composite_loss(&fc.probs, e.label, &e.prior.probs, &weights, params.lambda_kl);
                let d = composite_grad(&fc.probs, e.label, &e.prior.probs, &weights, params.lambda_kl);
                params.mlp.backward(&fc.mlp, &d, &mut grads.mlp);
            }
            if !total.is_finite() {
                return Err(non_finite("fusion pretraining", epoch, total));
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(&mut params, &grads);
        }
        let (val_acc, val_nmcc) = val_metrics(encoder, &params, val)?;
        history.push(EpochRecord { epoch, train_loss: total / train.len() as f64, val_acc, val_nmcc });
    }
    Ok(FusionOutcome { params, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Fraction of the target-embodiment training pool used.
    pub fraction: f64,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Re-estimate the encoder's input standardization on the subset before
    /// updating weights.
    pub refit_input_stats: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            fraction: 0.3,
            optimizer: AdamConfig::with_lr(1e-5),
            batch_size: 64,
            epochs: 30,
            seed: 0,
            refit_input_stats: true,
        }
    }
}

impl FinetuneConfig {
    pub const PRESET_FRACTIONS: [(&'static str, f64); 3] = [("7%", 0.07), ("15%", 0.15), ("30%", 0.30)];

    pub fn tiny() -> Self {
        Self { optimizer: AdamConfig::with_lr(1e-3), batch_size: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(validation(format!("finetune fraction must be in (0, 1], got {}", self.fraction)));
        }
        if self.batch_size == 0 {
            return Err(validation("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
    pub weights: ClassWeights,
    pub history: Vec<EpochRecord>,
}

/// Updates encoder and fusion jointly on `subset` (already drawn at the
/// configured fraction), with class weights recomputed from the subset.
pub fn finetune_fusion(
    encoder: &EncoderParams,
    fusion: &FusionParams,
    subset: &[FusionExample<'_>],
    val: &[FusionExample<'_>],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let n = fusion.n_classes();
    check(subset, n, "finetuning subset")?;
    let labels: Vec<usize> = subset.iter().map(|e| e.label).collect();
    let weights = compute_class_weights(&labels, n)?;
    let mut enc = encoder.clone();
    if cfg.refit_input_stats {
        let xs: Vec<&FeatureTensor> = subset.iter().map(|e| e.x).collect();
        enc.fit_input_stats(&xs);
    }
    let mut fus = fusion.clone();
    let mut enc_opt = Adam::new(cfg.optimizer.clone(), &enc);
    let mut fus_opt = Adam::new(cfg.optimizer.clone(), &fus);
    let mut order: Vec<usize> = (0..subset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut eg = enc.zeros_like();
            let mut fg = fus.zeros_like();
            for &i in chunk {
                let e = &subset[i];
                total += fused_gradient(&enc, &fus, e.x, e.label, e.prior, &weights, Some(&mut eg), &mut fg)?;
            }
            if !total.is_finite() || !eg.all_finite() {
                return Err(non_finite("fusion finetuning", epoch, total));
            }
            let k = 1.0 / chunk.len() as f64;
            eg.scale(k);
            fg.scale(k);
            enc_opt.step(&mut enc, &eg);
            fus_opt.step(&mut fus, &fg);
        }
        let (val_acc, val_nmcc) = val_metrics(&enc, &fus, val)?;
        log::info!("finetune epoch {epoch}: loss {:.4} val_acc {val_acc:.4}", total / subset.len() as f64);
        history.push(EpochRecord { epoch, train_loss: total / subset.len() as f64, val_acc, val_nmcc });
    }
    Ok(FinetuneOutcome { encoder: enc, fusion: fus, weights, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::train::weighted_ce_loss;
    use rand::Rng;

    fn random_probs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        softmax(&z)
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = FusionParams::init(14, 64, 0.1, 3).unwrap();
        for (_, t) in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let ck = Checkpoint::from_bytes(&fusion_checkpoint(&p).unwrap().to_bytes().unwrap()).unwrap();
        assert_eq!(fusion_from_checkpoint(&ck).unwrap(), p);
    }

    #[test]
    fn zero_params_are_uniform() {
        let mut p = FusionParams::init(14, 64, 0.1, 0).unwrap();
        p.scale(0.0);
        let out = fuse_forward(&[1.0; 14], &VisionPrior::uniform(14), &p).unwrap();
        assert!(out.iter().all(|&q| (q - 1.0 / 14.0).abs() < 1e-15));
        assert!(fuse_forward(&[1.0; 13], &VisionPrior::uniform(14), &p).is_err());
    }

    #[test]
    fn output_sums_to_one() {
        let p = FusionParams::init(14, 64, 0.1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let z: Vec<f64> = (0..14).map(|_| rng.random_range(-10.0..10.0)).collect();
            let prior = VisionPrior::from_probs(random_probs(&mut rng, 14));
            let out = fuse_forward(&z, &prior, &p).unwrap();
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = ClassWeights { weights: (0..5).map(|_| rng.random_range(0.5..2.0)).collect() };
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = softmax(&z);
        let v = random_probs(&mut rng, 5);
        assert!((composite_loss(&p, 2, &v, &w, 0.0) - weighted_ce_loss(&z, 2, &w)).abs() < 1e-12);
        assert_eq!(composite_loss(&p, 2, &v, &w, 0.0), -w.weights[2] * p[2].ln());
        let same = composite_loss(&p, 2, &p, &w, 0.7);
        assert!((same - composite_loss(&p, 2, &p, &w, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_example() {
        let mut p = vec![0.25, 0.75];
        p.extend(std::iter::repeat_n(1e-20, 12));
        let mut v = vec![0.5, 0.5];
        v.extend(std::iter::repeat_n(0.0, 12));
        let w = ClassWeights::uniform(14);
        let expected = -(0.25f64.ln()) + 0.1 * (0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln());
        assert!((composite_loss(&p, 0, &v, &w, 0.1) - expected).abs() < 1e-15);
    }

    #[test]
    fn loss_is_non_negative_and_zero_at_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = random_probs(&mut rng, 6);
            let v = random_probs(&mut rng, 6);
            let w = ClassWeights { weights: (0..6).map(|_| rng.random_range(0.0..2.0)).collect() };
            assert!(composite_loss(&p, rng.random_range(0..6), &v, &w, 0.3) >= -1e-15);
        }
        let mut onehot = vec![0.0; 6];
        onehot[3] = 1.0;
        assert_eq!(composite_loss(&onehot, 3, &onehot, &ClassWeights::uniform(6), 0.1), 0.0);
    }

    #[test]
    fn grad_matches_finite_differences_on_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v = random_probs(&mut rng, 7);
        let w = ClassWeights { weights: (0..7).map(|_| rng.random_range(0.5..2.0)).collect() };
        let g = composite_grad(&softmax(&z), 4, &v, &w, 0.1);
        let h = 1e-6;
        for i in 0..7 {
            let (mut a, mut b) = (z.clone(), z.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (composite_loss(&softmax(&a), 4, &v, &w, 0.1) - composite_loss(&softmax(&b), 4, &v, &w, 0.1))
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn fusion_weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fusion = FusionParams::init(14, 64, 0.1, 2).unwrap();
        let z: Vec<f64> = (0..14).map(|_| rng.random_range(-3.0..3.0)).collect();
        let prior = VisionPrior::from_probs(random_probs(&mut rng, 14));
        let w = ClassWeights::uniform(14);
        let loss =
            |f: &FusionParams| composite_loss(&fuse_forward(&z, &prior, f).unwrap(), 5, &prior.probs, &w, f.lambda_kl);
        let fc = fused_cache(&z, &prior, &fusion).unwrap();
        let mut g = fusion.zeros_like();
        let d = composite_grad(&fc.probs, 5, &prior.probs, &w, 0.1);
        fusion.mlp.backward(&fc.mlp, &d, &mut g.mlp);
        let h = 1e-5;
        for idx in 0..fusion.n_params() {
            let mut a = fusion.clone();
            a.set_flat(idx, fusion.get_flat(idx) + h);
            let mut b = fusion.clone();
            b.set_flat(idx, fusion.get_flat(idx) - h);
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let an = g.get_flat(idx);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {idx}: fd {fd} analytic {an}");
        }
    }
}
