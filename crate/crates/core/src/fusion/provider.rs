//! Visual provider protocol: a two-step request plan (identify the object,
//! then classify its material), JSON request/response records, an in-process
//! mock and a file-replay transport.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prior::{model_vocabulary, vision_prior_from_logprobs, VisionPrior};
use crate::error::{ClampError, Result};
use crate::labels::Material;

pub const RETRY_BUDGET: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStep {
    IdentifyObject,
    ClassifyMaterial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualProviderRequest {
    pub step: PromptStep,
    pub image_ref: String,
    pub object_hint: Option<String>,
    pub material_vocabulary: Vec<String>,
    pub system_prompt: String,
    pub user_prompt: String,
    /// In-context examples, sent with the material step only.
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualProviderResponse {
    pub text: String,
    #[serde(default)]
    pub token_logprobs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptFixtures {
    pub system: String,
    pub user: String,
    pub example: String,
}

impl PromptFixtures {
    pub const FILES: [&'static str; 3] = ["system.txt", "user.txt", "example.txt"];

    pub fn builtin() -> Self {
        Self {
            system: include_str!("../../fixtures/prompts/system.txt").to_string(),
            user: include_str!("../../fixtures/prompts/user.txt").to_string(),
            example: include_str!("../../fixtures/prompts/example.txt").to_string(),
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| ClampError::io(p, e))
        };
        Ok(Self { system: read(Self::FILES[0])?, user: read(Self::FILES[1])?, example: read(Self::FILES[2])? })
    }
}

/// Step-2 request waiting for the object predicted in step 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialStepTemplate {
    request: VisualProviderRequest,
    example_materials: Vec<(String, String)>,
    example_format: String,
}

impl MaterialStepTemplate {
    pub fn complete(&self, object: &str) -> VisualProviderRequest {
        let mut req = self.request.clone();
        req.object_hint = Some(object.to_string());
        req.user_prompt = req.user_prompt.replace("{object_hint}", object);
        req.examples = self
            .example_materials
            .iter()
            .enumerate()
            .map(|(i, (obj, mat))| {
                self.example_format
                    .replace("{image_ref}", &format!("example_{i}"))
                    .replace("{object_hint}", obj)
                    .replace("{material}", mat)
            })
            .collect();
        req
    }
}

const EXAMPLE_OBJECTS: [(&str, Material); 3] =
    [("cup", Material::Steel), ("bottle", Material::Glass), ("sponge", Material::Foam)];

pub fn two_step_request_plan(
    image_ref: &str,
    fixtures: &PromptFixtures,
) -> (VisualProviderRequest, MaterialStepTemplate) {
    let vocab: Vec<String> = model_vocabulary().iter().map(|s| s.to_string()).collect();
    let user = fixtures.user.replace("{vocabulary}", &vocab.join(", "));
    let first = VisualProviderRequest {
        step: PromptStep::IdentifyObject,
        image_ref: image_ref.to_string(),
        object_hint: None,
        material_vocabulary: vocab.clone(),
        system_prompt: fixtures.system.clone(),
        user_prompt: user.replace("{object_hint}", "none"),
        examples: Vec::new(),
    };
    let second = VisualProviderRequest { step: PromptStep::ClassifyMaterial, user_prompt: user, ..first.clone() };
    let template = MaterialStepTemplate {
        request: second,
        example_materials: EXAMPLE_OBJECTS.iter().map(|(o, m)| (o.to_string(), m.name().to_string())).collect(),
        example_format: fixtures.example.clone(),
    };
    (first, template)
}

/// Synchronous request/response exchange of JSON records.
pub trait Transport {
    fn exchange(&mut self, request_json: &str) -> Result<String>;
}

/// Sends one request, retrying failed exchanges up to `retries` times.
pub fn send<T: Transport + ?Sized>(
    transport: &mut T,
    req: &VisualProviderRequest,
    retries: usize,
) -> Result<VisualProviderResponse> {
    let body = serde_json::to_string(req)?;
    let mut last = None;
    for attempt in 0..=retries {
        match transport.exchange(&body) {
            Ok(reply) => return Ok(serde_json::from_str(&reply)?),
            Err(e) => {
                log::warn!("provider attempt {} for {} failed: {e}", attempt + 1, req.image_ref);
                last = Some(e);
            }
        }
    }
    Err(ClampError::Provider(format!(
        "{} failed after {} attempts: {}",
        req.image_ref,
        retries + 1,
        last.expect("at least one attempt")
    )))
}

/// Object name from a "1. Object: ..." style answer, else the whole text.
pub fn parse_object(text: &str) -> String {
    let lower = text.to_lowercase();
    match lower.find("object:") {
        Some(i) => {
            let rest = &text[i + "object:".len()..];
            let end = rest.find(|c: char| c == '\n' || c.is_ascii_digit()).unwrap_or(rest.len());
            rest[..end].trim().to_string()
        }
        None => text.trim().to_string(),
    }
}

/// Runs both steps for one image and converts the material step's
/// log-probabilities into a prior.
pub fn query_prior<T: Transport + ?Sized>(
    transport: &mut T,
    image_ref: &str,
    fixtures: &PromptFixtures,
) -> Result<VisionPrior> {
    let (first, template) = two_step_request_plan(image_ref, fixtures);
    let object = parse_object(&send(transport, &first, RETRY_BUDGET)?.text);
    let reply = send(transport, &template.complete(&object), RETRY_BUDGET)?;
    Ok(vision_prior_from_logprobs(&reply.token_logprobs, &model_vocabulary()))
}

/// Priors for many images in input order. Failed images get a uniform prior;
/// if more than `max_failure_rate` of them fail the whole call aborts.
pub fn collect_priors<T: Transport + ?Sized>(
    transport: &mut T,
    image_refs: &[String],
    fixtures: &PromptFixtures,
    max_failure_rate: f64,
) -> Result<Vec<VisionPrior>> {
    let mut out = Vec::with_capacity(image_refs.len());
    let mut failed = Vec::new();
    for r in image_refs {
        match query_prior(transport, r, fixtures) {
            Ok(p) => out.push(p),
            Err(ClampError::Provider(msg)) => {
                failed.push(msg);
                out.push(VisionPrior::uniform(Material::MODEL_CLASSES.len()));
            }
            Err(e) => return Err(e),
        }
    }
    let rate = failed.len() as f64 / image_refs.len().max(1) as f64;
    if rate > max_failure_rate {
        return Err(ClampError::Provider(format!(
            "{}/{} images failed (limit {:.0}%): {}",
            failed.len(),
            image_refs.len(),
            100.0 * max_failure_rate,
            failed.join("; ")
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockAnswer {
    pub object: String,
    pub token_logprobs: BTreeMap<String, f64>,
}

/// How a mock visual model relates to the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockVision {
    /// Only the true material is reported.
    Informative,
    /// Every vocabulary material with equal log-probability.
    Uniform,
    /// Top-1 correct with probability `accuracy`; the reported ranking holds
    /// three materials with log-probabilities -0.4, -1.6, -2.8.
    Noisy { accuracy: f64 },
}

impl MockVision {
    pub fn answer(&self, truth: Material, rng: &mut impl Rng) -> MockAnswer {
        let vocab = model_vocabulary();
        let object = format!("{} object", truth.name().replace('_', " "));
        let token_logprobs = match *self {
            MockVision::Informative => [(truth.name().to_string(), -0.01)].into(),
            MockVision::Uniform => vocab.iter().map(|v| (v.to_string(), (1.0f64 / 14.0).ln())).collect(),
            MockVision::Noisy { accuracy } => {
                let others: Vec<&str> = vocab.iter().copied().filter(|v| *v != truth.name()).collect();
                let picks: Vec<&str> = others.choose_multiple(rng, 3).copied().collect();
                let ranked = if rng.random_bool(accuracy.clamp(0.0, 1.0)) {
                    [truth.name(), picks[0], picks[1]]
                } else if rng.random_bool(0.5) {
                    [picks[0], truth.name(), picks[1]]
                } else {
                    [picks[0], picks[1], picks[2]]
                };
                ranked.iter().zip([-0.4, -1.6, -2.8]).map(|(t, lp)| (t.to_string(), lp)).collect()
            }
        };
        MockAnswer { object, token_logprobs }
    }
}

/// Deterministic in-process provider answering from a table keyed by image
/// reference (the object id).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockTransport {
    pub answers: BTreeMap<String, MockAnswer>,
    /// Number of leading exchanges per image that fail, for retry tests.
    #[serde(default)]
    pub fail_first: BTreeMap<String, usize>,
    #[serde(skip)]
    failures_seen: BTreeMap<String, usize>,
}

impl MockTransport {
    /// One answer per object, each drawn from its own seeded stream.
    pub fn from_truth(objects: &[(String, Material)], vision: MockVision, seed: u64) -> Self {
        let answers = objects
            .iter()
            .enumerate()
            .map(|(i, (id, m))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                (id.clone(), vision.answer(*m, &mut rng))
            })
            .collect();
        Self { answers, ..Self::default() }
    }

    pub fn respond(&self, req: &VisualProviderRequest) -> Result<VisualProviderResponse> {
        let a = self
            .answers
            .get(&req.image_ref)
            .ok_or_else(|| ClampError::Provider(format!("no mock answer for {}", req.image_ref)))?;
        Ok(match req.step {
            PromptStep::IdentifyObject => {
                VisualProviderResponse { text: format!("1. Object: {}", a.object), token_logprobs: BTreeMap::new() }
            }
            PromptStep::ClassifyMaterial => {
                let top = a
                    .token_logprobs
                    .iter()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .map(|(t, _)| t.as_str())
                    .unwrap_or("unknown");
                VisualProviderResponse {
                    text: format!(
                        "1. Object: {} 2. Materials: {top} 3. Heterogenous Surfaces: No",
                        req.object_hint.as_deref().unwrap_or(&a.object)
                    ),
                    token_logprobs: a.token_logprobs.clone(),
                }
            }
        })
    }
}

impl Transport for MockTransport {
    fn exchange(&mut self, request_json: &str) -> Result<String> {
        let req: VisualProviderRequest = serde_json::from_str(request_json)?;
        let budget = self.fail_first.get(&req.image_ref).copied().unwrap_or(0);
        let seen = self.failures_seen.entry(req.image_ref.clone()).or_insert(0);
        if *seen < budget {
            *seen += 1;
            return Err(ClampError::Provider(format!("mock outage for {}", req.image_ref)));
        }
        Ok(serde_json::to_string(&self.respond(&req)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRecord {
    pub request: VisualProviderRequest,
    pub response: VisualProviderResponse,
}

/// Replays responses recorded as JSON lines of [`ProviderRecord`], matched
/// on step, image reference and object hint.
#[derive(Debug, Clone, PartialEq)]
pub struct FileReplayTransport {
    pub path: PathBuf,
    records: Vec<ProviderRecord>,
}

impl FileReplayTransport {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let text = std::fs::read_to_string(&path).map_err(|e| ClampError::io(&path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| ClampError::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { path, records })
    }

    /// Writes `records` in the format [`FileReplayTransport::open`] reads.
    pub fn record(path: impl AsRef<Path>, records: &[ProviderRecord]) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| ClampError::io(path, e))
    }
}

impl Transport for FileReplayTransport {
    fn exchange(&mut self, request_json: &str) -> Result<String> {
        let req: VisualProviderRequest = serde_json::from_str(request_json)?;
        let rec = self
            .records
            .iter()
            .find(|r| {
                r.request.step == req.step
                    && r.request.image_ref == req.image_ref
                    && r.request.object_hint == req.object_hint
            })
            .ok_or_else(|| {
                ClampError::Provider(format!(
                    "{}: no recorded {:?} response for {}",
                    self.path.display(),
                    req.step,
                    req.image_ref
                ))
            })?;
        Ok(serde_json::to_string(&rec.response)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock(m: Material, vision: MockVision) -> MockTransport {
        MockTransport::from_truth(&[("img".to_string(), m)], vision, 0)
    }

    #[test]
    fn plan_has_two_ordered_steps() {
        let (a, t) = two_step_request_plan("img", &PromptFixtures::builtin());
        let b = t.complete("cup");
        assert_eq!((a.step, b.step), (PromptStep::IdentifyObject, PromptStep::ClassifyMaterial));
        assert_eq!(a.object_hint, None);
        assert_eq!(b.object_hint.as_deref(), Some("cup"));
        assert!(b.user_prompt.contains("cup"));
        assert!(a.examples.is_empty() && !b.examples.is_empty());
        assert!(a.user_prompt.contains("hard_plastic"));
        assert_eq!(a.material_vocabulary.len(), 14);
    }

    #[test]
    fn step_two_carries_step_one_object() {
        let mut t = MockTransport::default();
        t.answers.insert(
            "img".into(),
            MockAnswer { object: "cup".into(), token_logprobs: [("steel".to_string(), -0.1)].into() },
        );
        let fx = PromptFixtures::builtin();
        let (first, template) = two_step_request_plan("img", &fx);
        let obj = parse_object(&send(&mut t, &first, 0).unwrap().text);
        assert_eq!(obj, "cup");
        let second = template.complete(&obj);
        assert_eq!(second.object_hint.as_deref(), Some("cup"));
        let prior = query_prior(&mut t, "img", &fx).unwrap();
        assert_eq!(prior.probs[Material::Steel.class_index().unwrap()], 1.0);
    }

    #[test]
    fn non_vocabulary_material_gives_degenerate_prior() {
        let mut t = MockTransport::default();
        t.answers.insert(
            "img".into(),
            MockAnswer { object: "rock".into(), token_logprobs: [("basalt".to_string(), -0.1)].into() },
        );
        let p = query_prior(&mut t, "img", &PromptFixtures::builtin()).unwrap();
        assert!(p.is_degenerate());
    }

    #[test]
    fn retries_within_budget() {
        let mut t = mock(Material::Glass, MockVision::Informative);
        t.fail_first.insert("img".into(), RETRY_BUDGET);
        assert!(query_prior(&mut t, "img", &PromptFixtures::builtin()).is_ok());
        let mut t = mock(Material::Glass, MockVision::Informative);
        t.fail_first.insert("img".into(), RETRY_BUDGET + 1);
        let err = query_prior(&mut t, "img", &PromptFixtures::builtin()).unwrap_err();
        assert!(matches!(err, ClampError::Provider(_)));
    }

    #[test]
    fn failure_rate_aborts() {
        let objs: Vec<(String, Material)> = (0..4).map(|i| (format!("o{i}"), Material::Wood)).collect();
        let mut t = MockTransport::from_truth(&objs, MockVision::Informative, 0);
        t.fail_first.insert("o1".into(), 100);
        let refs: Vec<String> = objs.iter().map(|o| o.0.clone()).collect();
        let fx = PromptFixtures::builtin();
        let priors = collect_priors(&mut t, &refs, &fx, 0.25).unwrap();
        assert!(priors[1].is_degenerate() && !priors[0].is_degenerate());
        t.fail_first.insert("o2".into(), 100);
        t.failures_seen.clear();
        assert!(collect_priors(&mut t, &refs, &fx, 0.25).is_err());
    }

    #[test]
    fn replay_matches_mock() {
        let mut t = mock(Material::Paper, MockVision::Noisy { accuracy: 0.8 });
        let fx = PromptFixtures::builtin();
        let (first, template) = two_step_request_plan("img", &fx);
        let r1 = t.respond(&first).unwrap();
        let second = template.complete(&parse_object(&r1.text));
        let r2 = t.respond(&second).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.jsonl");
        FileReplayTransport::record(
            &path,
            &[ProviderRecord { request: first, response: r1 }, ProviderRecord { request: second, response: r2 }],
        )
        .unwrap();
        let mut replay = FileReplayTransport::open(&path).unwrap();
        assert_eq!(query_prior(&mut replay, "img", &fx).unwrap(), query_prior(&mut t, "img", &fx).unwrap());
        assert!(query_prior(&mut replay, "other", &fx).is_err());
    }

    #[test]
    fn fixtures_load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        assert!(PromptFixtures::load(dir.path()).is_err());
        let fx = PromptFixtures::builtin();
        std::fs::write(dir.path().join("system.txt"), &fx.system).unwrap();
        std::fs::write(dir.path().join("user.txt"), &fx.user).unwrap();
        std::fs::write(dir.path().join("example.txt"), &fx.example).unwrap();
        assert_eq!(PromptFixtures::load(dir.path()).unwrap(), fx);
    }

    #[test]
    fn noisy_mock_accuracy() {
        let objs: Vec<(String, Material)> =
            (0..2000).map(|i| (format!("o{i}"), Material::MODEL_CLASSES[i % 14])).collect();
        let t = MockTransport::from_truth(&objs, MockVision::Noisy { accuracy: 0.7 }, 9);
        let vocab = model_vocabulary();
        let hits = objs
            .iter()
            .filter(|(id, m)| {
                let p = vision_prior_from_logprobs(&t.answers[id].token_logprobs, &vocab);
                crate::models::train::argmax(&p.probs) == m.class_index().unwrap()
            })
            .count();
        let acc = hits as f64 / 2000.0;
        assert!((acc - 0.7).abs() < 0.04, "{acc}");
    }
}
