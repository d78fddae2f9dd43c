//! Visual material prior: token log-probabilities → class probabilities →
//! standardized fusion logits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::labels::Material;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionPrior {
    pub probs: Vec<f64>,
    /// Fourth root of `probs`, standardized to zero mean and unit std; all
    /// zeros when the fourth roots are constant.
    pub std_logits: Vec<f64>,
}

impl VisionPrior {
    /// No visual information.
    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n], std_logits: vec![0.0; n] }
    }

    pub fn from_probs(probs: Vec<f64>) -> Self {
        let roots: Vec<f64> = probs.iter().map(|p| p.powf(0.25)).collect();
        let n = roots.len() as f64;
        let mean = roots.iter().sum::<f64>() / n;
        let std = (roots.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let std_logits =
            if std > 1e-12 { roots.iter().map(|r| (r - mean) / std).collect() } else { vec![0.0; roots.len()] };
        Self { probs, std_logits }
    }

    pub fn is_degenerate(&self) -> bool {
        self.std_logits.iter().all(|&v| v == 0.0)
    }
}

/// Lowercase, trimmed, inner spaces and hyphens as underscores.
pub fn normalize_token(token: &str) -> String {
    token
        .trim()
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

pub fn model_vocabulary() -> Vec<&'static str> {
    Material::MODEL_CLASSES.iter().map(|m| m.name()).collect()
}

/// Tokens outside `vocab` are dropped; repeated tokens for one class keep
/// the highest log-probability. Classes without a token get probability 0.
pub fn vision_prior_from_logprobs(token_logprobs: &BTreeMap<String, f64>, vocab: &[&str]) -> VisionPrior {
    let mut best: Vec<Option<f64>> = vec![None; vocab.len()];
    for (token, &lp) in token_logprobs {
        let t = normalize_token(token);
        if let Some(i) = vocab.iter().position(|v| *v == t) {
            if !lp.is_nan() {
                best[i] = Some(best[i].map_or(lp, |b: f64| b.max(lp)));
            }
        }
    }
    let max = best.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        log::warn!("no vocabulary material among provider tokens; using a uniform prior");
        return VisionPrior::uniform(vocab.len());
    }
    let exp: Vec<f64> = best.iter().map(|b| b.map_or(0.0, |lp| (lp - max).exp())).collect();
    let sum: f64 = exp.iter().sum();
    VisionPrior::from_probs(exp.into_iter().map(|e| e / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn equal_logprobs_are_degenerate() {
        let vocab = model_vocabulary();
        let lp: BTreeMap<String, f64> = vocab.iter().map(|v| (v.to_string(), -2.0)).collect();
        let p = vision_prior_from_logprobs(&lp, &vocab);
        assert!(p.probs.iter().all(|&q| (q - 1.0 / 14.0).abs() < 1e-15));
        assert!(p.is_degenerate());
    }

    #[test]
    fn one_hot_standardizes_in_closed_form() {
        let vocab = model_vocabulary();
        let p = vision_prior_from_logprobs(&map(&[("steel", -0.2), ("a cup", -0.1)]), &vocab);
        let k = Material::Steel.class_index().unwrap();
        assert_eq!(p.probs[k], 1.0);
        // Population std of a one-hot over n entries is sqrt(n-1)/n.
        let n = 14f64;
        let hot = (1.0 - 1.0 / n) / ((n - 1.0).sqrt() / n);
        let cold = (-1.0 / n) / ((n - 1.0).sqrt() / n);
        assert!((p.std_logits[k] - hot).abs() < 1e-12);
        assert!((hot - 13f64.sqrt()).abs() < 1e-12);
        for (i, v) in p.std_logits.iter().enumerate() {
            if i != k {
                assert!((v - cold).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_normalization() {
        let vocab = model_vocabulary();
        let p = vision_prior_from_logprobs(
            &map(&[(" Hard Plastic", -0.5), ("vegetable-matter", -1.5), ("dry wall", -0.1)]),
            &vocab,
        );
        assert!(p.probs[Material::HardPlastic.class_index().unwrap()] > 0.7);
        assert!(p.probs[Material::VegetableMatter.class_index().unwrap()] > 0.2);
        // Not a model class.
        assert!(Material::DryWall.class_index().is_none());
    }

    #[test]
    fn no_vocabulary_token_gives_uniform() {
        let vocab = model_vocabulary();
        let p = vision_prior_from_logprobs(&map(&[("unobtainium", -0.1)]), &vocab);
        assert_eq!(p, VisionPrior::uniform(14));
    }

    proptest! {
        #[test]
        fn invariants(lps in proptest::collection::vec(-8.0f64..0.0, 14), keep in proptest::collection::vec(any::<bool>(), 14)) {
            let vocab = model_vocabulary();
            let lp: BTreeMap<String, f64> = vocab.iter().zip(&lps).zip(&keep)
                .filter(|(_, &k)| k).map(|((v, &l), _)| (v.to_string(), l)).collect();
            let p = vision_prior_from_logprobs(&lp, &vocab);
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.probs.iter().all(|&q| q >= 0.0));
            let mean = p.std_logits.iter().sum::<f64>() / 14.0;
            prop_assert!(mean.abs() < 1e-9);
            let std = (p.std_logits.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 14.0).sqrt();
            prop_assert!(std == 0.0 || (std - 1.0).abs() < 1e-9);
            for a in 0..14 {
                for b in 0..14 {
                    if p.probs[a] > p.probs[b] {
                        prop_assert!(p.std_logits[a] > p.std_logits[b]);
                    }
                }
            }
        }

        #[test]
        fn permutation_equivariant(lps in proptest::collection::vec(-8.0f64..0.0, 14), shift in 1usize..14) {
            let vocab = model_vocabulary();
            let perm: Vec<&str> = (0..14).map(|i| vocab[(i + shift) % 14]).collect();
            let lp: BTreeMap<String, f64> = vocab.iter().zip(&lps).map(|(v, &l)| (v.to_string(), l)).collect();
            let a = vision_prior_from_logprobs(&lp, &vocab);
            let b = vision_prior_from_logprobs(&lp, &perm);
            for i in 0..14 {
                prop_assert!((b.probs[i] - a.probs[(i + shift) % 14]).abs() < 1e-15);
            }
        }
    }
}
