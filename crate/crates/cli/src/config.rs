//! Pipeline configuration: one TOML document, profile-dependent defaults,
//! command-line overrides and a content hash of the resolved result.

use std::path::{Path, PathBuf};

use clamp_core::dataset::{BenchmarkSpec, SplitFractions};
use clamp_core::features::{FeatureConfig, FilterRules};
use clamp_core::fusion::{FinetuneConfig, FusionTrainConfig, MockVision, UncertaintyThresholds};
use clamp_core::models::{ForestConfig, HapticEncoderConfig, HeadTrainConfig, Profile};
use clamp_core::Embodiment;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_root: Option<PathBuf>,
    pub output_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    /// Keep all trials of an object in the same part.
    pub group_by_object: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self { train: f.train, val: f.val, group_by_object: false }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions { train: self.train, val: self.val }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionSource {
    Mock,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub source: VisionSource,
    pub mock: MockVision,
    /// JSON-lines file of recorded provider exchanges (source = "replay").
    pub replay: Option<PathBuf>,
    /// Directory with system.txt / user.txt / example.txt; built-in prompts
    /// when unset.
    pub prompts: Option<PathBuf>,
    pub max_failure_rate: f64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            source: VisionSource::Mock,
            mock: MockVision::Noisy { accuracy: 0.8 },
            replay: None,
            prompts: None,
            max_failure_rate: 0.1,
        }
    }
}

/// The file format. Model sections are partial tables layered over the
/// profile's defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub embodiment: Option<Embodiment>,
    /// Uncertainty preset name: "eval" or "sorting".
    pub uncertainty: Option<String>,
    pub worst_of_seeds: bool,
    pub paths: Paths,
    pub synth: Option<toml::Table>,
    pub features: FeatureConfig,
    pub filter: FilterRules,
    pub split: SplitConfig,
    pub forest: Option<toml::Table>,
    pub encoder: Option<toml::Table>,
    pub fusion: Option<toml::Table>,
    pub finetune: Option<toml::Table>,
    pub compliance: Option<toml::Table>,
    pub vision: VisionConfig,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub embodiment: Option<Embodiment>,
}

/// Everything a subcommand needs, fully defaulted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub seed: u64,
    pub profile: Profile,
    pub embodiment: Embodiment,
    pub uncertainty_preset: String,
    pub uncertainty: UncertaintyThresholds,
    pub worst_of_seeds: bool,
    pub paths: Paths,
    pub synth: BenchmarkSpec,
    pub features: FeatureConfig,
    pub filter: FilterRules,
    pub split: SplitConfig,
    pub forest: ForestConfig,
    pub encoder: HapticEncoderConfig,
    pub fusion: FusionTrainConfig,
    pub finetune: FinetuneConfig,
    pub compliance: HeadTrainConfig,
    pub vision: VisionConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn layered<T: Serialize + for<'de> Deserialize<'de>>(
    section: &str,
    base: T,
    over: &Option<toml::Table>,
) -> CliResult<T> {
    let Some(table) = over else { return Ok(base) };
    let mut value = serde_json::to_value(&base).map_err(|e| CliError::Usage(e.to_string()))?;
    let over = serde_json::to_value(table).map_err(|e| CliError::Usage(e.to_string()))?;
    merge(&mut value, over);
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("[{section}]: {e}")))
}

impl Resolved {
    pub fn new(cfg: &PipelineConfig, o: &Overrides) -> CliResult<Self> {
        let seed = o
            .seed
            .or(cfg.seed)
            .ok_or_else(|| CliError::Usage("a seed is required (--seed or `seed = …` in the config)".into()))?;
        let profile = o.profile.or(cfg.profile).unwrap_or(Profile::Full);
        let embodiment = o.embodiment.or(cfg.embodiment).unwrap_or(Embodiment::ClampDevice);
        let preset = cfg.uncertainty.clone().unwrap_or_else(|| "eval".into());
        let uncertainty: UncertaintyThresholds = preset.parse()?;

        let mut synth = layered("synth", BenchmarkSpec::for_embodiment(embodiment), &cfg.synth)?;
        synth.seed = seed;
        synth.synth.embodiment = embodiment;
        let mut forest = layered("forest", ForestConfig::default(), &cfg.forest)?;
        forest.seed = seed;
        let mut encoder = layered("encoder", HapticEncoderConfig::for_profile(profile), &cfg.encoder)?;
        encoder.seed = seed;
        encoder.validate()?;
        let fusion_base = match profile {
            Profile::Tiny => FusionTrainConfig::tiny(),
            Profile::Full => FusionTrainConfig::default(),
        };
        let mut fusion = layered("fusion", fusion_base, &cfg.fusion)?;
        fusion.seed = seed;
        fusion.validate()?;
        let finetune_base = match profile {
            Profile::Tiny => FinetuneConfig::tiny(),
            Profile::Full => FinetuneConfig::default(),
        };
        let mut finetune = layered("finetune", finetune_base, &cfg.finetune)?;
        finetune.seed = seed;
        finetune.validate()?;
        let mut compliance = layered("compliance", HeadTrainConfig::default(), &cfg.compliance)?;
        compliance.seed = seed;
        cfg.features.validate()?;
        if !(0.0..=1.0).contains(&cfg.vision.max_failure_rate) {
            return Err(CliError::Usage("vision.max_failure_rate must lie in [0, 1]".into()));
        }
        if cfg.vision.source == VisionSource::Replay && cfg.vision.replay.is_none() {
            return Err(CliError::Usage("vision.source = \"replay\" needs vision.replay = <file>".into()));
        }
        Ok(Self {
            seed,
            profile,
            embodiment,
            uncertainty_preset: preset,
            uncertainty,
            worst_of_seeds: cfg.worst_of_seeds,
            paths: cfg.paths.clone(),
            synth,
            features: cfg.features.clone(),
            filter: cfg.filter.clone(),
            split: cfg.split.clone(),
            forest,
            encoder,
            fusion,
            finetune,
            compliance,
            vision: cfg.vision.clone(),
        })
    }

    /// SHA-256 of the canonical JSON form. Paths are excluded so that the
    /// same settings hash identically wherever the data lives.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("paths");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str, o: Overrides) -> CliResult<Resolved> {
        Resolved::new(&toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?, &o)
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(resolve("", Overrides::default()), Err(CliError::Usage(_))));
        let r = resolve("seed = 3", Overrides::default()).unwrap();
        assert_eq!((r.seed, r.encoder.seed, r.synth.seed), (3, 3, 3));
        let r = resolve("seed = 3", Overrides { seed: Some(9), ..Default::default() }).unwrap();
        assert_eq!(r.seed, 9);
    }

    #[test]
    fn partial_sections_layer_over_profile() {
        let r = resolve(
            "seed = 1\nprofile = \"tiny\"\n[encoder]\nepochs = 2\n[encoder.optimizer]\nlr = 0.01\n",
            Overrides::default(),
        )
        .unwrap();
        assert_eq!(r.encoder.epochs, 2);
        assert_eq!(r.encoder.n_filters, HapticEncoderConfig::tiny().n_filters);
        assert_eq!(r.encoder.optimizer.lr, 0.01);
        assert_eq!(r.encoder.optimizer.beta1, 0.9);
        let full = resolve("seed = 1", Overrides::default()).unwrap();
        assert_eq!(full.encoder.n_filters, 256);
        assert_eq!(full.fusion.epochs, 120);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        assert!(resolve("seed = 1\nuncertainty = \"loose\"", Overrides::default()).is_err());
        assert!(resolve("seed = 1\n[encoder]\nepochs = \"many\"", Overrides::default()).is_err());
        assert!(toml::from_str::<PipelineConfig>("seed = 1\nbogus = 2").is_err());
    }

    #[test]
    fn hash_tracks_settings_not_paths() {
        let a = resolve("seed = 1", Overrides::default()).unwrap();
        let mut b = a.clone();
        b.paths.data_root = Some("/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        let c = resolve("seed = 2", Overrides::default()).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
