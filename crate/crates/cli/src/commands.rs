//! Subcommand implementations. Every command that writes files writes them
//! into one output directory together with a run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clamp_core::dataset::{group_split, material_labels, stratified_split, stratified_subsample, Split};
use clamp_core::features::{featurize, filter_dataset, FeatureTensor, FeaturizedTrial};
use clamp_core::fusion::{
    collect_priors, filtered_accuracy, finetune_fusion, fused_probs, fusion_checkpoint, fusion_from_checkpoint,
    pretrain_fusion, uncertainty_filter, Decision, FileReplayTransport, FusionExample, FusionParams, MockTransport,
    PromptFixtures, UncertaintyThresholds, VisionPrior,
};
use clamp_core::ingest::{align_streams_with, load_session};
use clamp_core::models::train::{history_csv, predict_logits, softmax};
use clamp_core::models::{
    encoder_checkpoint, encoder_from_checkpoint, evaluate, fit_compliance_head, summary_features, train_encoder,
    train_forest, worst_of_seeds, Checkpoint, EncoderParams, Example, Metrics, Parameters,
};
use clamp_core::synth::generate_session;
use clamp_core::{ClampError, Embodiment, Material};
use serde::{Deserialize, Serialize};

use crate::config::{Resolved, VisionSource};
use crate::error::{io_err, CliError, CliResult};
use crate::run::{file_digest, Run};
use crate::store::{read_store, write_store};
use crate::{Cli, Command, EvalArgs, GlobalArgs};

const N_CLASSES: usize = Material::MODEL_CLASSES.len();

struct Ctx<'a> {
    g: &'a GlobalArgs,
    cfg: Resolved,
    root: PathBuf,
}

impl Ctx<'_> {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.root.join(default))
    }

    fn start(&self, command: &'static str, out: &Option<PathBuf>, default: &str) -> CliResult<Run> {
        Run::start(command, &self.path(out, default), self.g.overwrite)
    }
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    if let Command::Predict { tensor, checkpoint, fusion, prior, uncertainty } = &cli.command {
        return predict(tensor, checkpoint, fusion.as_deref(), prior.as_deref(), uncertainty);
    }
    let cfg = cli.global.resolve()?;
    let root = cli
        .global
        .data_root
        .clone()
        .or_else(|| cfg.paths.data_root.clone())
        .unwrap_or_else(|| PathBuf::from("clamp_data"));
    let ctx = Ctx { g: &cli.global, cfg, root };
    match &cli.command {
        Command::Synth { objects, trials, out } => synth(&ctx, *objects, *trials, out),
        Command::Ingest { input, out } => ingest(&ctx, input, out),
        Command::Featurize { input, out } => featurize_cmd(&ctx, input, out),
        Command::Filter { features, out } => filter(&ctx, features, out),
        Command::TrainHaptic { features, out } => train_haptic(&ctx, features, out),
        Command::TrainForest { features, out } => train_forest_cmd(&ctx, features, out),
        Command::TrainFusion { features, encoder, out } => train_fusion(&ctx, features, encoder, out),
        Command::Finetune { features, encoder, fusion, fraction, out } => {
            finetune(&ctx, features, encoder, fusion, *fraction, out)
        }
        Command::Eval(args) => eval(&ctx, args),
        Command::ComplianceHead { features, encoder, out } => compliance_head(&ctx, features, encoder, out),
        Command::Predict { .. } => unreachable!("handled above"),
    }
}

fn synth(ctx: &Ctx, objects: Option<usize>, trials: Option<usize>, out: &Option<PathBuf>) -> CliResult<()> {
    let mut spec = ctx.cfg.synth.clone();
    if let Some(t) = trials {
        spec.trials_per_object = t;
    }
    let n = objects.unwrap_or(spec.n_objects());
    if spec.materials.is_empty() || n == 0 || spec.trials_per_object == 0 {
        return Err(CliError::Usage("synth needs at least one material, object and trial".into()));
    }
    let run = ctx.start("synth", out, "raw")?;
    for k in 0..n {
        let session = spec.session(k);
        generate_session(&session, run.path(&session.object_id))?;
    }
    log::info!("generated {n} sessions");
    run.finish(&ctx.cfg)
}

fn session_dirs(input: &Path) -> CliResult<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| io_err(input, e))? {
        let path = entry.map_err(|e| io_err(input, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Core(ClampError::Empty(format!("no session directories in {}", input.display()))));
    }
    Ok(dirs)
}

fn ingest(ctx: &Ctx, input: &Option<PathBuf>, out: &Option<PathBuf>) -> CliResult<()> {
    let input = ctx.path(input, "raw");
    let dirs = session_dirs(&input)?;
    let mut run = ctx.start("ingest", out, "aligned")?;
    run.input("sessions", &input)?;
    let mut gaps = csv::Writer::from_writer(Vec::new());
    gaps.write_record(["object_id", "trial", "thermal", "force", "mic", "imu1", "imu2"]).map_err(csv_err)?;
    for dir in dirs {
        let session = load_session(&dir)?;
        let obj_dir = run.path(&session.object_id);
        fs::create_dir_all(&obj_dir).map_err(|e| io_err(&obj_dir, e))?;
        for rec in &session.trials {
            let aligned = align_streams_with(rec, &ctx.cfg.synth.synth.thermistor)?;
            let g = &aligned.gaps;
            gaps.serialize((&session.object_id, rec.trial_index, g.thermal, g.force, g.mic, g.imu1, g.imu2))
                .map_err(csv_err)?;
            let path = obj_dir.join(format!("trial_{}.json", rec.trial_index));
            let text = serde_json::to_string(&aligned).map_err(ClampError::from)?;
            fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        }
    }
    run.write("gaps.csv", gaps.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?)?;
    run.finish(&ctx.cfg)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(format!("csv: {e}"))
}

fn featurize_cmd(ctx: &Ctx, input: &Option<PathBuf>, out: &Option<PathBuf>) -> CliResult<()> {
    let input = ctx.path(input, "raw");
    let dirs = session_dirs(&input)?;
    let mut run = ctx.start("featurize", out, "features")?;
    run.input("sessions", &input)?;
    let mut trials = Vec::new();
    let mut skipped = csv::Writer::from_writer(Vec::new());
    skipped.write_record(["object_id", "trial", "reason"]).map_err(csv_err)?;
    for dir in dirs {
        let session = load_session(&dir)?;
        let embodiment = match &session.embodiment {
            Some(name) => name.parse::<Embodiment>()?,
            None => ctx.cfg.embodiment,
        };
        for rec in &session.trials {
            let aligned = align_streams_with(rec, &ctx.cfg.synth.synth.thermistor)?;
            match featurize(&aligned, &session.labels, embodiment, &ctx.cfg.features) {
                Ok(t) => trials.push(t),
                Err(ClampError::NoContact(msg)) => {
                    log::warn!("{}/{}: {msg}", session.object_id, rec.trial_index);
                    skipped
                        .serialize((&session.object_id, rec.trial_index, format!("no contact: {msg}")))
                        .map_err(csv_err)?;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    if trials.is_empty() {
        return Err(CliError::Core(ClampError::Empty("no trial produced features".into())));
    }
    write_store(&run.dir, &trials)?;
    run.write("skipped.csv", skipped.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?)?;
    log::info!("featurized {} trials", trials.len());
    run.finish(&ctx.cfg)
}

fn filter(ctx: &Ctx, features: &Option<PathBuf>, out: &Option<PathBuf>) -> CliResult<()> {
    let features = ctx.path(features, "features");
    let trials = read_store(&features)?;
    let mut run = ctx.start("filter", out, "filtered")?;
    run.input("features", &features)?;
    let reports = filter_dataset(&trials, &ctx.cfg.filter);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["object_id", "trial", "retained", "rules_fired"]).map_err(csv_err)?;
    for r in &reports {
        let rules: Vec<&str> = r.rules_fired.iter().map(|x| x.name()).collect();
        w.serialize((&r.object_id, r.trial_index, r.retained, rules.join(";"))).map_err(csv_err)?;
    }
    run.write("exclusion.csv", w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?)?;
    let kept: Vec<FeaturizedTrial> =
        trials.iter().zip(&reports).filter(|(_, r)| r.retained).map(|(t, _)| t.clone()).collect();
    log::info!("retained {}/{} trials", kept.len(), trials.len());
    if kept.is_empty() {
        log::warn!("every trial was excluded; the filtered store is empty");
        write_store(&run.dir, &[])?;
    } else {
        write_store(&run.dir, &kept)?;
    }
    run.finish(&ctx.cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialKey {
    object_id: String,
    trial: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    train: Vec<TrialKey>,
    val: Vec<TrialKey>,
    test: Vec<TrialKey>,
}

fn split_for(trials: &[FeaturizedTrial], labels: &[usize], cfg: &Resolved) -> CliResult<Split> {
    let fr = cfg.split.fractions();
    let split = if cfg.split.group_by_object {
        let ids: Vec<String> = trials.iter().map(|t| t.object_id.clone()).collect();
        group_split(&ids, labels, fr, cfg.seed)?
    } else {
        stratified_split(labels, fr, cfg.seed)?
    };
    Ok(split)
}

fn split_file(trials: &[FeaturizedTrial], split: &Split) -> SplitFile {
    let keys = |idx: &[usize]| {
        idx.iter().map(|&i| TrialKey { object_id: trials[i].object_id.clone(), trial: trials[i].trial_index }).collect()
    };
    SplitFile { train: keys(&split.train), val: keys(&split.val), test: keys(&split.test) }
}

fn examples<'a>(trials: &'a [FeaturizedTrial], labels: &[usize], idx: &[usize]) -> Vec<Example<'a>> {
    idx.iter().map(|&i| Example { x: &trials[i].tensor, label: labels[i] }).collect()
}

fn load_encoder(path: &Path) -> CliResult<EncoderParams> {
    Ok(encoder_from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_fusion(path: &Path) -> CliResult<FusionParams> {
    Ok(fusion_from_checkpoint(&Checkpoint::load(path)?)?)
}

fn haptic_probs(encoder: &EncoderParams, xs: &[&FeatureTensor]) -> CliResult<Vec<Vec<f64>>> {
    Ok(predict_logits(encoder, xs)?.iter().map(|z| softmax(z)).collect())
}

fn argmax(p: &[f64]) -> usize {
    clamp_core::models::train::argmax(p)
}

fn metrics_of(probs: &[Vec<f64>], labels: &[usize]) -> CliResult<Metrics> {
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Ok(evaluate(&preds, labels, N_CLASSES)?)
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

#[derive(Debug, Serialize)]
struct HapticMetrics {
    selected_epoch: usize,
    val_accuracy: f64,
    n_train: usize,
    n_val: usize,
    test: Metrics,
}

fn train_haptic(ctx: &Ctx, features: &Option<PathBuf>, out: &Option<PathBuf>) -> CliResult<()> {
    let features = ctx.path(features, "features");
    let trials = read_store(&features)?;
    let labels = material_labels(&trials)?;
    let split = split_for(&trials, &labels, &ctx.cfg)?;
    let mut run = ctx.start("train-haptic", out, "models/haptic")?;
    run.input("features", &features)?;
    let train = examples(&trials, &labels, &split.train);
    let val = examples(&trials, &labels, &split.val);
    let outcome = if ctx.cfg.worst_of_seeds {
        worst_of_seeds(&train, &val, &ctx.cfg.encoder)?
    } else {
        train_encoder(&train, &val, &ctx.cfg.encoder)?
    };
    let ck = encoder_checkpoint(&outcome.params)?;
    ck.save(run.path("encoder.ckpt"))?;
    // Score what was saved: checkpoints hold f32 values.
    let saved = encoder_from_checkpoint(&ck)?;
    let test_x: Vec<&FeatureTensor> = split.test.iter().map(|&i| &trials[i].tensor).collect();
    let test = metrics_of(&haptic_probs(&saved, &test_x)?, &pick(&labels, &split.test))?;
    log::info!("test accuracy {:.4}", test.accuracy);
    run.write("history.csv", history_csv(&outcome.history))?;
    run.write_json("split.json", &split_file(&trials, &split))?;
    run.write_json(
        "metrics.json",
        &HapticMetrics {
            selected_epoch: outcome.selected_epoch,
            val_accuracy: outcome.final_val_acc(),
            n_train: train.len(),
            n_val: val.len(),
            test,
        },
    )?;
    run.finish(&ctx.cfg)
}

fn train_forest_cmd(ctx: &Ctx, features: &Option<PathBuf>, out: &Option<PathBuf>) -> CliResult<()> {
    let features = ctx.path(features, "features");
    let trials = read_store(&features)?;
    let labels = material_labels(&trials)?;
    let split = split_for(&trials, &labels, &ctx.cfg)?;
    let mut run = ctx.start("train-forest", out, "models/forest")?;
    run.input("features", &features)?;
    let summaries: Vec<Vec<f64>> = trials.iter().map(|t| summary_features(&t.tensor)).collect();
    let forest =
        train_forest(&pick(&summaries, &split.train), &pick(&labels, &split.train), N_CLASSES, &ctx.cfg.forest)?;
    let preds = forest.predict_many(&pick(&summaries, &split.test));
    let test = evaluate(&preds, &pick(&labels, &split.test), N_CLASSES)?;
    log::info!("forest test accuracy {:.4}", test.accuracy);
    run.write_json("forest.json", &forest)?;
    run.write_json("metrics.json", &serde_json::json!({ "test": test }))?;
    run.finish(&ctx.cfg)
}

/// One prior per object id, queried through the configured provider.
fn query_priors(trials: &[FeaturizedTrial], cfg: &Resolved) -> CliResult<BTreeMap<String, VisionPrior>> {
    let objects: BTreeMap<String, Material> = trials.iter().map(|t| (t.object_id.clone(), t.labels.material)).collect();
    let list: Vec<(String, Material)> = objects.into_iter().collect();
    let refs: Vec<String> = list.iter().map(|(id, _)| id.clone()).collect();
    let fixtures = match &cfg.vision.prompts {
        Some(dir) => PromptFixtures::load(dir)?,
        None => PromptFixtures::builtin(),
    };
    let rate = cfg.vision.max_failure_rate;
    let priors = match cfg.vision.source {
        VisionSource::Mock => {
            let mut t = MockTransport::from_truth(&list, cfg.vision.mock, cfg.seed);
            collect_priors(&mut t, &refs, &fixtures, rate)?
        }
        VisionSource::Replay => {
            let path = cfg.vision.replay.as_ref().expect("validated with the config");
            let mut t = FileReplayTransport::open(path)?;
            collect_priors(&mut t, &refs, &fixtures, rate)?
        }
    };
    Ok(refs.into_iter().zip(priors).collect())
}

fn read_priors(path: &Path) -> CliResult<BTreeMap<String, VisionPrior>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Core(ClampError::Schema { file: path.display().to_string(), msg: e.to_string() }))
}

fn priors_of<'a>(
    trials: &[FeaturizedTrial],
    priors: &'a BTreeMap<String, VisionPrior>,
) -> CliResult<Vec<&'a VisionPrior>> {
    trials
        .iter()
        .map(|t| {
            priors
                .get(&t.object_id)
                .ok_or_else(|| CliError::Usage(format!("no visual prior for object {}", t.object_id)))
        })
        .collect()
}

fn fusion_examples<'a>(
    trials: &'a [FeaturizedTrial],
    labels: &[usize],
    priors: &[&'a VisionPrior],
    idx: &[usize],
) -> Vec<FusionExample<'a>> {
    idx.iter().map(|&i| FusionExample { x: &trials[i].tensor, prior: priors[i], label: labels[i] }).collect()
}

#[derive(Debug, Serialize)]
struct FilteredScore {
    p1: f64,
    p2: f64,
    accuracy: f64,
    retention: f64,
}

impl FilteredScore {
    fn new(probs: &[Vec<f64>], labels: &[usize], th: &UncertaintyThresholds) -> Self {
        let (accuracy, retention) = filtered_accuracy(probs, labels, th);
        Self { p1: th.p1, p2: th.p2, accuracy, retention }
    }
}

fn train_fusion(
    ctx: &Ctx,
    features: &Option<PathBuf>,
    encoder: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> CliResult<()> {
    let features = ctx.path(features, "features");
    let encoder_path = ctx.path(encoder, "models/haptic/encoder.ckpt");
    let trials = read_store(&features)?;
    let labels = material_labels(&trials)?;
    let enc = load_encoder(&encoder_path)?;
    let split = split_for(&trials, &labels, &ctx.cfg)?;
    let mut run = ctx.start("train-fusion", out, "models/fusion")?;
    run.input("features", &features)?;
    run.input("encoder", &encoder_path)?;
    let prior_map = query_priors(&trials, &ctx.cfg)?;
    let priors = priors_of(&trials, &prior_map)?;
    let train = fusion_examples(&trials, &labels, &priors, &split.train);
    let val = fusion_examples(&trials, &labels, &priors, &split.val);
    let test = fusion_examples(&trials, &labels, &priors, &split.test);
    let outcome = pretrain_fusion(&enc, &train, &val, &ctx.cfg.fusion)?;
    let ck = fusion_checkpoint(&outcome.params)?;
    ck.save(run.path("fusion.ckpt"))?;
    let saved = fusion_from_checkpoint(&ck)?;
    let test_labels = pick(&labels, &split.test);
    let test_x: Vec<&FeatureTensor> = test.iter().map(|e| e.x).collect();
    let haptic = metrics_of(&haptic_probs(&enc, &test_x)?, &test_labels)?;
    let probs = fused_probs(&enc, &saved, &test)?;
    let fused = metrics_of(&probs, &test_labels)?;
    log::info!("test accuracy: haptic {:.4}, fused {:.4}", haptic.accuracy, fused.accuracy);
    run.write_json("priors.json", &prior_map)?;
    run.write("history.csv", history_csv(&outcome.history))?;
    run.write_json(
        "metrics.json",
        &serde_json::json!({
            "haptic_test_accuracy": haptic.accuracy,
            "test": fused,
            "filtered": FilteredScore::new(&probs, &test_labels, &ctx.cfg.uncertainty),
        }),
    )?;
    run.finish(&ctx.cfg)
}

fn finetune(
    ctx: &Ctx,
    features: &Option<PathBuf>,
    encoder: &Option<PathBuf>,
    fusion: &Option<PathBuf>,
    fraction: Option<f64>,
    out: &Option<PathBuf>,
) -> CliResult<()> {
    let mut cfg = ctx.cfg.finetune.clone();
    if let Some(f) = fraction {
        cfg.fraction = f;
    }
    cfg.validate()?;
    let features = ctx.path(features, "features");
    let encoder_path = ctx.path(encoder, "models/haptic/encoder.ckpt");
    let fusion_path = ctx.path(fusion, "models/fusion/fusion.ckpt");
    let trials = read_store(&features)?;
    let labels = material_labels(&trials)?;
    let enc = load_encoder(&encoder_path)?;
    let fus = load_fusion(&fusion_path)?;
    let split = split_for(&trials, &labels, &ctx.cfg)?;
    let mut run = ctx.start("finetune", out, "models/finetune")?;
    run.input("features", &features)?;
    run.input("encoder", &encoder_path)?;
    run.input("fusion", &fusion_path)?;
    let prior_map = query_priors(&trials, &ctx.cfg)?;
    let priors = priors_of(&trials, &prior_map)?;
    let subset_idx = stratified_subsample(&split.train, &labels, cfg.fraction, cfg.seed);
    let subset = fusion_examples(&trials, &labels, &priors, &subset_idx);
    let val = fusion_examples(&trials, &labels, &priors, &split.val);
    let test = fusion_examples(&trials, &labels, &priors, &split.test);
    let test_labels = pick(&labels, &split.test);
    let before = metrics_of(&fused_probs(&enc, &fus, &test)?, &test_labels)?;
    let outcome = finetune_fusion(&enc, &fus, &subset, &val, &cfg)?;
    let enc_ck = encoder_checkpoint(&outcome.encoder)?;
    let fus_ck = fusion_checkpoint(&outcome.fusion)?;
    enc_ck.save(run.path("encoder.ckpt"))?;
    fus_ck.save(run.path("fusion.ckpt"))?;
    let probs = fused_probs(&encoder_from_checkpoint(&enc_ck)?, &fusion_from_checkpoint(&fus_ck)?, &test)?;
    let after = metrics_of(&probs, &test_labels)?;
    log::info!("fraction {}: zero-shot {:.4} -> finetuned {:.4}", cfg.fraction, before.accuracy, after.accuracy);
    run.write_json("priors.json", &prior_map)?;
    run.write("history.csv", history_csv(&outcome.history))?;
    run.write_json(
        "metrics.json",
        &serde_json::json!({
            "fraction": cfg.fraction,
            "n_finetune": subset.len(),
            "zero_shot_test_accuracy": before.accuracy,
            "test": after,
            "filtered": FilteredScore::new(&probs, &test_labels, &ctx.cfg.uncertainty),
        }),
    )?;
    run.finish(&ctx.cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    object_id: String,
    trial: usize,
    prediction: String,
    #[serde(default)]
    max_prob: Option<f64>,
    #[serde(default)]
    margin: Option<f64>,
    #[serde(default)]
    decision: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    object_id: String,
    trial: usize,
    material: String,
}

#[derive(Debug, Serialize)]
struct EvalMetrics {
    n: usize,
    #[serde(flatten)]
    metrics: Metrics,
    filtered: Option<FilteredScore>,
}

fn eval(ctx: &Ctx, args: &EvalArgs) -> CliResult<()> {
    match (&args.preds, &args.labels) {
        (Some(p), Some(l)) => eval_files(ctx, p, l, &args.out),
        _ => eval_model(ctx, args),
    }
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| {
                CliError::Core(ClampError::Parse { file: path.display().to_string(), line: i + 2, msg: e.to_string() })
            })
        })
        .collect()
}

fn class_of(name: &str) -> CliResult<usize> {
    let m: Material = name.parse()?;
    m.class_index().ok_or_else(|| CliError::Usage(format!("{m} is not one of the predicted classes")))
}

fn eval_files(ctx: &Ctx, preds: &Path, labels: &Path, out: &Option<PathBuf>) -> CliResult<()> {
    let pred_rows: Vec<PredictionRow> = read_csv(preds)?;
    let label_rows: Vec<LabelRow> = read_csv(labels)?;
    let truth: BTreeMap<(String, usize), usize> = label_rows
        .iter()
        .map(|r| Ok(((r.object_id.clone(), r.trial), class_of(&r.material)?)))
        .collect::<CliResult<_>>()?;
    let mut ys = Vec::new();
    let mut ps = Vec::new();
    let mut accepted = (0usize, 0usize);
    let mut any_decision = false;
    for r in &pred_rows {
        let y = *truth
            .get(&(r.object_id.clone(), r.trial))
            .ok_or_else(|| CliError::Usage(format!("no label for {} trial {}", r.object_id, r.trial)))?;
        let p = class_of(&r.prediction)?;
        if let Some(d) = &r.decision {
            any_decision = true;
            if d == "accept" {
                accepted.0 += 1;
                accepted.1 += usize::from(p == y);
            }
        }
        ys.push(y);
        ps.push(p);
    }
    if ys.is_empty() {
        return Err(CliError::Core(ClampError::Empty(format!("{}", preds.display()))));
    }
    let mut run = ctx.start("eval", out, "eval")?;
    run.input("predictions", preds)?;
    run.input("labels", labels)?;
    let metrics = evaluate(&ps, &ys, N_CLASSES)?;
    println!("accuracy {:.3}, nmcc {:.3}", metrics.accuracy, metrics.nmcc);
    let filtered = any_decision.then(|| FilteredScore {
        p1: f64::NAN,
        p2: f64::NAN,
        accuracy: if accepted.0 == 0 { f64::NAN } else { accepted.1 as f64 / accepted.0 as f64 },
        retention: accepted.0 as f64 / ys.len() as f64,
    });
    run.write_json("metrics.json", &EvalMetrics { n: ys.len(), metrics, filtered })?;
    run.finish(&ctx.cfg)
}

fn eval_model(ctx: &Ctx, args: &EvalArgs) -> CliResult<()> {
    let features = ctx.path(&args.features, "features");
    let encoder_path = ctx.path(&args.encoder, "models/haptic/encoder.ckpt");
    let trials = read_store(&features)?;
    let labels = material_labels(&trials)?;
    let enc = load_encoder(&encoder_path)?;
    let idx: Vec<usize> = if args.part == "all" {
        (0..trials.len()).collect()
    } else {
        let split = split_for(&trials, &labels, &ctx.cfg)?;
        match args.part.as_str() {
            "train" => split.train,
            "val" => split.val,
            _ => split.test,
        }
    };
    if idx.is_empty() {
        return Err(CliError::Usage(format!("the {} part of the split is empty", args.part)));
    }
    let mut run = ctx.start("eval", &args.out, "eval")?;
    run.input("features", &features)?;
    run.input("encoder", &encoder_path)?;
    let probs = match &args.fusion {
        Some(dir) => {
            let ck = dir.join("fusion.ckpt");
            let pp = dir.join("priors.json");
            run.input("fusion", &ck)?;
            run.input("priors", &pp)?;
            let fus = load_fusion(&ck)?;
            let prior_map = read_priors(&pp)?;
            let priors = priors_of(&trials, &prior_map)?;
            fused_probs(&enc, &fus, &fusion_examples(&trials, &labels, &priors, &idx))?
        }
        None => {
            let xs: Vec<&FeatureTensor> = idx.iter().map(|&i| &trials[i].tensor).collect();
            haptic_probs(&enc, &xs)?
        }
    };
    let ys = pick(&labels, &idx);
    let th = ctx.cfg.uncertainty;
    let mut pw = csv::Writer::from_writer(Vec::new());
    let mut lw = csv::Writer::from_writer(Vec::new());
    for (&i, p) in idx.iter().zip(&probs) {
        let t = &trials[i];
        let mut sorted = p.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let decision = match uncertainty_filter(p, &th) {
            Decision::Accept(_) => "accept",
            Decision::Uncertain => "uncertain",
        };
        pw.serialize(PredictionRow {
            object_id: t.object_id.clone(),
            trial: t.trial_index,
            prediction: Material::MODEL_CLASSES[argmax(p)].name().to_string(),
            max_prob: Some(sorted[0]),
            margin: Some(sorted[0] - sorted.get(1).copied().unwrap_or(0.0)),
            decision: Some(decision.into()),
        })
        .map_err(csv_err)?;
        lw.serialize(LabelRow {
            object_id: t.object_id.clone(),
            trial: t.trial_index,
            material: t.labels.material.name().to_string(),
        })
        .map_err(csv_err)?;
    }
    run.write("predictions.csv", pw.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?)?;
    run.write("labels.csv", lw.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?)?;
    let metrics = metrics_of(&probs, &ys)?;
    println!("accuracy {:.3}, nmcc {:.3}", metrics.accuracy, metrics.nmcc);
    run.write_json(
        "metrics.json",
        &EvalMetrics { n: ys.len(), metrics, filtered: Some(FilteredScore::new(&probs, &ys, &th)) },
    )?;
    run.finish(&ctx.cfg)
}

fn parse_thresholds(s: &str) -> CliResult<UncertaintyThresholds> {
    if let Some((a, b)) = s.split_once(',') {
        let p = |v: &str| v.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("bad threshold {v:?}: {e}")));
        return Ok(UncertaintyThresholds::new(p(a)?, p(b)?)?);
    }
    Ok(s.parse()?)
}

#[derive(Debug, Deserialize)]
struct PriorFile {
    probs: Vec<f64>,
}

fn predict(
    tensor: &Path,
    checkpoint: &Path,
    fusion: Option<&Path>,
    prior: Option<&Path>,
    uncertainty: &str,
) -> CliResult<()> {
    let th = parse_thresholds(uncertainty)?;
    let x = FeatureTensor::read(tensor)?;
    let enc = load_encoder(checkpoint)?;
    let probs = match (fusion, prior) {
        (Some(f), Some(p)) => {
            let fus = load_fusion(f)?;
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let pf: PriorFile =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            if pf.probs.len() != N_CLASSES || pf.probs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(CliError::Usage(format!(
                    "{}: prior needs {N_CLASSES} finite non-negative probabilities",
                    p.display()
                )));
            }
            let prior = VisionPrior::from_probs(pf.probs);
            let ex = FusionExample { x: &x, prior: &prior, label: 0 };
            fused_probs(&enc, &fus, &[ex])?.remove(0)
        }
        _ => haptic_probs(&enc, &[&x])?.remove(0),
    };
    log::info!("probabilities: {probs:?}");
    match uncertainty_filter(&probs, &th) {
        Decision::Accept(c) => println!("{}", Material::MODEL_CLASSES[c].name()),
        Decision::Uncertain => println!("UNCERTAIN"),
    }
    Ok(())
}

fn compliance_head(
    ctx: &Ctx,
    features: &Option<PathBuf>,
    encoder: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> CliResult<()> {
    let features = ctx.path(features, "features");
    let encoder_path = ctx.path(encoder, "models/haptic/encoder.ckpt");
    let trials = read_store(&features)?;
    let labels = material_labels(&trials)?;
    let compliance: Vec<usize> = trials.iter().map(|t| t.labels.compliance.class_index()).collect();
    let split = split_for(&trials, &labels, &ctx.cfg)?;
    let file_before = file_digest(&encoder_path)?;
    let enc = load_encoder(&encoder_path)?;
    let hash_before = enc.hash_hex();
    let mut run = ctx.start("compliance-head", out, "models/compliance")?;
    run.input("features", &features)?;
    run.input("encoder", &encoder_path)?;
    let xs = |idx: &[usize]| idx.iter().map(|&i| &trials[i].tensor).collect::<Vec<_>>();
    let head = fit_compliance_head(&enc, &xs(&split.train), &pick(&compliance, &split.train), &ctx.cfg.compliance)?;
    let (_, latents) = clamp_core::models::train::logits_and_latents(&enc, &xs(&split.test))?;
    let preds: Vec<usize> = latents.iter().map(|z| head.predict(z)).collect();
    let test = evaluate(&preds, &pick(&compliance, &split.test), 2)?;
    let hash_after = enc.hash_hex();
    let file_after = file_digest(&encoder_path)?;
    if hash_before != hash_after || file_before != file_after {
        return Err(CliError::Runtime("encoder parameters changed while fitting the compliance head".into()));
    }
    log::info!("compliance test accuracy {:.4}", test.accuracy);
    run.write_json("head.json", &head)?;
    run.write_json(
        "metrics.json",
        &serde_json::json!({
            "test": test,
            "encoder_hash_before": hash_before,
            "encoder_hash_after": hash_after,
            "encoder_unchanged": true,
        }),
    )?;
    run.finish(&ctx.cfg)
}
