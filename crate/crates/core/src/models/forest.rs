//! Bagged Gini decision trees over per-channel summary statistics.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, ClampError, Result};
use crate::features::{FeatureTensor, N_CHANNELS};

pub const SUMMARY_DIM: usize = 5 * N_CHANNELS;

/// Mean, standard deviation, min, max and last−first of every channel over
/// the unpadded part of the tensor.
pub fn summary_features(x: &FeatureTensor) -> Vec<f64> {
    let n = x.valid_len.max(1);
    let mut out = Vec::with_capacity(SUMMARY_DIM);
    for c in 0..N_CHANNELS {
        let v: Vec<f64> = x.channel(c)[..n].iter().map(|&v| v as f64).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend([mean, var.sqrt(), min, max, v[n - 1] - v[0]]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Features tried per split; `None` means `sqrt(n_features)`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: None, min_samples_split: 2, max_features: None, bootstrap: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { class: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { class } => return *class,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_classes: usize,
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
}

impl Forest {
    /// Majority vote; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut votes = vec![0usize; self.n_classes];
        for t in &self.trees {
            votes[t.predict(x)] += 1;
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        best
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Vec<usize> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best
}

struct Builder<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [usize],
    n_classes: usize,
    cfg: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn build<R: Rng>(&mut self, idx: &mut [usize], depth: usize, rng: &mut R) -> usize {
        let mut counts = vec![0usize; self.n_classes];
        for &i in idx.iter() {
            counts[self.ys[i]] += 1;
        }
        let node = self.nodes.len();
        self.nodes.push(Node::Leaf { class: majority(&counts) });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || idx.len() < self.cfg.min_samples_split || self.cfg.max_depth.is_some_and(|d| depth >= d) {
            return node;
        }
        let n_features = self.xs[0].len();
        let parent = gini(&counts, idx.len());
        let mut best: Option<(f64, usize, f64)> = None;
        for f in sample(rng, n_features, self.mtry).into_iter() {
            idx.sort_by(|&a, &b| self.xs[a][f].total_cmp(&self.xs[b][f]));
            let mut left = vec![0usize; self.n_classes];
            let mut right = counts.clone();
            for k in 0..idx.len() - 1 {
                let y = self.ys[idx[k]];
                left[y] += 1;
                right[y] -= 1;
                let (a, b) = (self.xs[idx[k]][f], self.xs[idx[k + 1]][f]);
                if a == b {
                    continue;
                }
                let nl = k + 1;
                let nr = idx.len() - nl;
                let impurity = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / idx.len() as f64;
                if impurity < parent - 1e-12 && best.is_none_or(|(bi, _, _)| impurity < bi) {
                    best = Some((impurity, f, a + (b - a) / 2.0));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return node;
        };
        let split = partition_in_place(idx, |&i| self.xs[i][feature] <= threshold);
        let (l, r) = idx.split_at_mut(split);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[node] = Node::Split { feature, threshold, left, right };
        node
    }
}

/// In-place stable-enough partition; returns the number of elements for
/// which `pred` holds (they end up first).
fn partition_in_place<T: Copy>(v: &mut [T], pred: impl Fn(&T) -> bool) -> usize {
    let mut k = 0;
    for i in 0..v.len() {
        if pred(&v[i]) {
            v.swap(i, k);
            k += 1;
        }
    }
    k
}

pub fn train_forest(xs: &[Vec<f64>], ys: &[usize], n_classes: usize, cfg: &ForestConfig) -> Result<Forest> {
    if xs.is_empty() {
        return Err(ClampError::Empty("forest training set".into()));
    }
    if xs.len() != ys.len() {
        return Err(ClampError::Shape { expected: format!("{} labels", xs.len()), got: format!("{}", ys.len()) });
    }
    let n_features = xs[0].len();
    if n_features == 0 || xs.iter().any(|x| x.len() != n_features) {
        return Err(validation("forest inputs must share a non-zero feature count"));
    }
    if ys.iter().any(|&y| y >= n_classes) {
        return Err(validation(format!("label outside [0, {n_classes})")));
    }
    if cfg.n_trees == 0 {
        return Err(validation("n_trees must be >= 1"));
    }
    let mtry = cfg.max_features.unwrap_or_else(|| (n_features as f64).sqrt().round() as usize).clamp(1, n_features);
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(t as u64);
        let mut idx: Vec<usize> = if cfg.bootstrap {
            (0..xs.len()).map(|_| rng.random_range(0..xs.len())).collect()
        } else {
            (0..xs.len()).collect()
        };
        let mut b = Builder { xs, ys, n_classes, cfg, mtry, nodes: Vec::new() };
        b.build(&mut idx, 0, &mut rng);
        trees.push(DecisionTree { nodes: b.nodes });
    }
    Ok(Forest { n_classes, n_features, trees })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stump_recovers_threshold() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let ys: Vec<usize> = (0..20).map(|i| (i >= 12) as usize).collect();
        let cfg = ForestConfig { n_trees: 1, max_depth: Some(1), bootstrap: false, ..ForestConfig::default() };
        let f = train_forest(&xs, &ys, 2, &cfg).unwrap();
        match &f.trees[0].nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 11.5);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(f.predict_many(&xs), ys);
    }

    #[test]
    fn deterministic_and_better_than_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let c = (i % 3) as f64;
                vec![
                    c + rng.random_range(-0.6..0.6),
                    rng.random_range(-1.0..1.0),
                    c * 0.5 + rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let ys: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let cfg = ForestConfig { n_trees: 15, ..ForestConfig::default() };
        let a = train_forest(&xs[..200], &ys[..200], 3, &cfg).unwrap();
        let b = train_forest(&xs[..200], &ys[..200], 3, &cfg).unwrap();
        assert_eq!(a, b);
        let preds = a.predict_many(&xs[200..]);
        let acc = preds.iter().zip(&ys[200..]).filter(|(p, y)| p == y).count() as f64 / 100.0;
        assert!(acc > 0.6, "{acc}");
    }

    #[test]
    fn errors() {
        assert!(train_forest(&[], &[], 2, &ForestConfig::default()).is_err());
        assert!(train_forest(&[vec![1.0]], &[3], 2, &ForestConfig::default()).is_err());
    }

    #[test]
    fn summary_uses_valid_part_only() {
        let mut data = vec![0f32; crate::features::N_CHANNELS * crate::features::SEGMENT_LEN];
        data[..4].copy_from_slice(&[1.0, 2.0, 3.0, 6.0]);
        let t = FeatureTensor::from_data(data, crate::labels::Embodiment::ClampDevice, 4).unwrap();
        let s = summary_features(&t);
        assert_eq!(s.len(), SUMMARY_DIM);
        assert_eq!(&s[..5], &[3.0, (3.5f64).sqrt(), 1.0, 6.0, 5.0]);
    }
}
