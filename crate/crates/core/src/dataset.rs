//! Synthetic benchmark assembly and seeded dataset splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, ClampError, Result};
use crate::features::{featurize, FeatureConfig, FeaturizedTrial};
use crate::ingest::align_streams_with;
use crate::labels::{Embodiment, Material};
use crate::synth::{GraspParams, MaterialArchetype, ObjectJitter, SessionSpec, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub materials: Vec<Material>,
    pub objects_per_material: usize,
    pub trials_per_object: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    /// Per-object variation of the archetype parameters; `None` uses the
    /// presets unchanged.
    pub jitter: Option<ObjectJitter>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            materials: MaterialArchetype::PRESETS.to_vec(),
            objects_per_material: 100,
            trials_per_object: 5,
            seed: 0,
            synth: SynthConfig::default(),
            jitter: Some(ObjectJitter::default()),
        }
    }
}

impl BenchmarkSpec {
    pub fn for_embodiment(embodiment: Embodiment) -> Self {
        Self { synth: SynthConfig::for_embodiment(embodiment), ..Self::default() }
    }

    pub fn n_objects(&self) -> usize {
        self.materials.len() * self.objects_per_material
    }

    /// Session of object `k` (objects cycle through the materials).
    pub fn session(&self, k: usize) -> SessionSpec {
        let material = self.materials[k % self.materials.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        let preset = MaterialArchetype::preset(material);
        let archetype = match &self.jitter {
            Some(j) => preset.jittered_by(&mut rng, j),
            None => preset,
        };
        let grasps = (0..self.trials_per_object).map(|_| GraspParams::sample(&mut rng)).collect();
        let object_seed = rand::Rng::random(&mut rng);
        let mut spec = SessionSpec::new(format!("{}_{k:04}", material.name()), archetype, object_seed);
        spec.grasps = grasps;
        spec.n_trials = self.trials_per_object;
        spec.config = self.synth.clone();
        spec
    }
}

/// Generates, aligns and featurizes every trial in memory. Trials without a
/// detectable contact are skipped with a warning.
pub fn generate_benchmark(spec: &BenchmarkSpec, features: &FeatureConfig) -> Result<Vec<FeaturizedTrial>> {
    if spec.materials.is_empty() || spec.objects_per_material == 0 || spec.trials_per_object == 0 {
        return Err(validation("benchmark needs materials, objects and trials"));
    }
    let mut out = Vec::with_capacity(spec.n_objects() * spec.trials_per_object);
    for k in 0..spec.n_objects() {
        let session = spec.session(k);
        let labels = session.labels();
        for rec in session.generate_trials()? {
            let aligned = align_streams_with(&rec, &spec.synth.thermistor)?;
            match featurize(&aligned, &labels, spec.synth.embodiment, features) {
                Ok(t) => out.push(t),
                Err(ClampError::NoContact(msg)) => log::warn!("skipping trial: {msg}"),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Index of each trial's material among the model classes.
pub fn material_labels(trials: &[FeaturizedTrial]) -> Result<Vec<usize>> {
    trials
        .iter()
        .map(|t| {
            t.labels
                .material
                .class_index()
                .ok_or_else(|| validation(format!("{} is not a model class", t.labels.material)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1 }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        if !(self.train > 0.0 && self.val >= 0.0 && self.train + self.val <= 1.0) {
            return Err(validation("split fractions must satisfy 0 < train, 0 <= val, train + val <= 1"));
        }
        Ok(())
    }

    fn cut(&self, n: usize) -> (usize, usize) {
        let n_train = (self.train * n as f64).round() as usize;
        let n_val = ((self.val * n as f64).round() as usize).min(n - n_train.min(n));
        (n_train.min(n), n_val)
    }
}

fn split_groups<K: Ord + Clone>(keys: &[K], strata: &[usize], fr: SplitFractions, seed: u64) -> Result<Split> {
    fr.validate()?;
    // Group members by key, and keys by stratum, in deterministic order.
    let mut members: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        members.entry(k.clone()).or_default().push(i);
    }
    let mut by_stratum: BTreeMap<usize, Vec<K>> = BTreeMap::new();
    for (k, m) in &members {
        by_stratum.entry(strata[m[0]]).or_default().push(k.clone());
    }
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (stratum, mut ks) in by_stratum {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stratum as u64);
        ks.shuffle(&mut rng);
        let (n_train, n_val) = fr.cut(ks.len());
        for (j, k) in ks.iter().enumerate() {
            let dst = if j < n_train {
                &mut split.train
            } else if j < n_train + n_val {
                &mut split.val
            } else {
                &mut split.test
            };
            dst.extend(&members[k]);
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Sample-wise split, stratified by label and seeded.
pub fn stratified_split(labels: &[usize], fr: SplitFractions, seed: u64) -> Result<Split> {
    let keys: Vec<usize> = (0..labels.len()).collect();
    split_groups(&keys, labels, fr, seed)
}

/// Object-wise split: every trial of an object lands in the same part.
/// Objects are stratified by the label of their first trial.
pub fn group_split(groups: &[String], labels: &[usize], fr: SplitFractions, seed: u64) -> Result<Split> {
    if groups.len() != labels.len() {
        return Err(ClampError::Shape {
            expected: format!("{} group ids", labels.len()),
            got: groups.len().to_string(),
        });
    }
    split_groups(groups, labels, fr, seed)
}

/// A stratified fraction of `pool` (at least one per class present).
pub fn stratified_subsample(pool: &[usize], labels: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let mut out = Vec::new();
    for (class, mut idx) in by_class {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        idx.shuffle(&mut rng);
        let n = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        out.extend_from_slice(&idx[..n]);
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stratified_proportions() {
        let labels: Vec<usize> = (0..600).map(|i| i % 6).collect();
        let s = stratified_split(&labels, SplitFractions::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (480, 60, 60));
        for part in [&s.train, &s.val, &s.test] {
            let mut counts = [0; 6];
            part.iter().for_each(|&i| counts[labels[i]] += 1);
            assert!(counts.iter().all(|&c| c == part.len() / 6));
        }
        assert_eq!(s, stratified_split(&labels, SplitFractions::default(), 1).unwrap());
        assert_ne!(s, stratified_split(&labels, SplitFractions::default(), 2).unwrap());
    }

    #[test]
    fn groups_stay_together() {
        let groups: Vec<String> = (0..100).map(|i| format!("obj{}", i / 5)).collect();
        let labels: Vec<usize> = (0..100).map(|i| (i / 5) % 2).collect();
        let s = group_split(&groups, &labels, SplitFractions::default(), 3).unwrap();
        for part in [&s.train, &s.val, &s.test] {
            for &i in part.iter() {
                let same: Vec<usize> = (0..100).filter(|&j| groups[j] == groups[i]).collect();
                assert!(same.iter().all(|j| part.contains(j)));
            }
        }
    }

    #[test]
    fn subsample_keeps_every_class() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let pool: Vec<usize> = (0..100).collect();
        let sub = stratified_subsample(&pool, &labels, 0.07, 0);
        assert_eq!(sub.len(), 8);
        for c in 0..4 {
            assert!(sub.iter().any(|&i| labels[i] == c));
        }
    }

    #[test]
    fn benchmark_is_deterministic_and_labelled() {
        let spec = BenchmarkSpec { objects_per_material: 1, trials_per_object: 2, ..BenchmarkSpec::default() };
        let a = generate_benchmark(&spec, &FeatureConfig::default()).unwrap();
        let b = generate_benchmark(&spec, &FeatureConfig::default()).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        let labels = material_labels(&a).unwrap();
        assert_eq!(labels[0], Material::Steel.class_index().unwrap());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(labels in proptest::collection::vec(0usize..5, 1..200), seed in 0u64..50) {
            let s = stratified_split(&labels, SplitFractions::default(), seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        }
    }
}
