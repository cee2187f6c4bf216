//! End-to-end commands: pre-train, fine-tune, evaluate, visualize, gen-data.
//!
//! Every command reads one [`RunConfig`], writes into `run.out`, and is
//! deterministic for a fixed seed: batch order and holdout membership come
//! from dedicated ChaCha streams of the run seed.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, DatasetManifest, ScenePair};
use crate::downstream::{self, finetune_step, predict_masks, siamese_forward, FinetuneState, Labeled};
use crate::encoder::{self, attention_rollup};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{confusion_counts, report, ConfusionCounts, F1Report};
use crate::params::ParameterSet;
use crate::plot;
use crate::pretrain::{pretrain_step, StepLog, TwinState};

const STREAM_HOLDOUT: u64 = 7;
const STREAM_PRETRAIN_ORDER: u64 = 1 << 20;
const STREAM_FINETUNE_ORDER: u64 = 1 << 40;

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const FINETUNE_LOG: &str = "finetune_log.jsonl";
pub const FINETUNE_EPOCHS: &str = "finetune_epochs.jsonl";
pub const REPORT: &str = "report.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_line<T: Serialize>(f: &mut File, path: &Path, record: &T) -> Result<()> {
    let line = serde_json::to_string(record).expect("log record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn permutation(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

// ---------------------------------------------------------------------------
// data

/// Scenes of a run with their train/validation assignment.
#[derive(Clone, Debug)]
pub struct Scenes {
    /// Sorted by id.
    pub pairs: Vec<ScenePair<f32>>,
    pub labeled: BTreeSet<String>,
    /// Labeled ids held out for validation and evaluation.
    pub validation: BTreeSet<String>,
}

impl Scenes {
    pub fn train(&self) -> impl Iterator<Item = &ScenePair<f32>> {
        self.pairs.iter().filter(|p| !self.validation.contains(&p.id))
    }

    pub fn validation(&self) -> impl Iterator<Item = &ScenePair<f32>> {
        self.pairs.iter().filter(|p| self.validation.contains(&p.id))
    }
}

/// Synthetic scenes when `data.synthetic` is set, else the xBD directory at `data.root`.
pub fn load_scenes(cfg: &RunConfig) -> Result<Scenes> {
    let (mut pairs, labeled) = match (cfg.data.synthetic, &cfg.data.root) {
        (Some(n), _) => {
            let pairs = data::generate_synthetic_set::<f32>(
                cfg.run.seed,
                n,
                cfg.encoder.input_size,
                cfg.data.buildings_per_scene,
            )?;
            let labeled = pairs.iter().map(|p| p.id.clone()).collect();
            (pairs, labeled)
        }
        (None, Some(root)) => {
            let manifest = data::load_dataset_with(root, cfg.data.load_options())?;
            let pairs = manifest.pairs.iter().map(data::load_pair).collect::<Result<Vec<_>>>()?;
            (pairs, manifest.labeled_ids)
        }
        (None, None) => return Err(Error::Config("no data source: set data.synthetic or data.root".into())),
    };
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    let ids: Vec<&String> = labeled.iter().collect();
    let n_val = (cfg.finetune.validation_fraction * ids.len() as f64).round() as usize;
    let validation = permutation(ids.len(), cfg.run.seed, STREAM_HOLDOUT)
        .into_iter()
        .take(n_val)
        .map(|i| ids[i].clone())
        .collect();
    Ok(Scenes { pairs, labeled, validation })
}

fn check_size(cfg: &RunConfig, p: &ScenePair<f32>) -> Result<()> {
    let s = cfg.encoder.input_size;
    if (p.pre.height(), p.pre.width()) != (s, s) {
        return Err(Error::Data(format!(
            "{}: image is {}x{}, encoder expects {s}x{s}",
            p.id,
            p.pre.height(),
            p.pre.width()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain

/// Configuration stored in checkpoints, without the fields that only steer
/// one invocation, so interrupted and straight runs write identical files.
fn snapshot(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.run.resume = None;
    c.run.max_steps = None;
    c.to_toml_string()
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub checkpoint: PathBuf,
    /// Records produced by this invocation.
    pub logs: Vec<StepLog>,
    pub state: TwinState<f32>,
}

/// Stage-1 training over the pre and post images of the training pairs.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainRun> {
    cfg.validate()?;
    let setup = cfg.pretrain_setup();
    let seed = cfg.run.seed;
    let scenes = load_scenes(cfg)?;
    let images: Vec<&Image<f32>> = scenes.train().flat_map(|p| [&p.pre, &p.post]).collect();
    if images.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let bs = setup.hyper.batch_size;
    let per_epoch = images.len().div_ceil(bs) as u64;
    let total = per_epoch * cfg.run.pretrain_epochs as u64;
    if total == 0 {
        return Err(Error::Config("run.pretrain_epochs must be positive".into()));
    }

    let out = &cfg.run.out;
    create_dir(out)?;
    let log_path = out.join(PRETRAIN_LOG);
    let (mut state, mut log_file) = match &cfg.run.resume {
        Some(path) => {
            let state = Checkpoint::<f32>::load(path)?.to_twin(setup.hyper.learning_rate)?;
            state.validate(&setup)?;
            if state.total_steps != total {
                return Err(Error::Config(format!(
                    "resume checkpoint plans {} steps, this configuration plans {total}",
                    state.total_steps
                )));
            }
            let f = OpenOptions::new().append(true).create(true).open(&log_path);
            (state, f.map_err(|e| Error::io(&log_path, e))?)
        }
        None => {
            let f = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            (TwinState::new(&setup, total, seed)?, f)
        }
    };

    let config_text = snapshot(cfg);
    let stop = cfg.run.max_steps.map_or(total, |m| m.min(total));
    let mut logs = Vec::new();
    while state.step < stop {
        let epoch = state.step / per_epoch;
        let within = (state.step % per_epoch) as usize;
        let order = permutation(images.len(), seed, STREAM_PRETRAIN_ORDER + epoch);
        let batch: Vec<Image<f32>> =
            order.iter().skip(within * bs).take(bs).map(|&i| images[i].clone()).collect();
        let outcome = pretrain_step(&mut state, &batch, &setup, seed)?;
        write_line(&mut log_file, &log_path, &outcome.log)?;
        log::info!(
            "pretrain step {}/{total}: total {:.4} l1 {:.4} l2 {:.4}",
            outcome.log.step + 1,
            outcome.log.total,
            outcome.log.l1,
            outcome.log.l2
        );
        logs.push(outcome.log);
        if cfg.run.checkpoint_every > 0 && state.step % cfg.run.checkpoint_every == 0 {
            let path = out.join(format!("pretrain_step{:06}.ckpt", state.step));
            Checkpoint::from_twin(&state, config_text.clone()).save(&path)?;
        }
    }
    drop(log_file);

    let checkpoint = out.join(PRETRAIN_CHECKPOINT);
    Checkpoint::from_twin(&state, config_text).save(&checkpoint)?;
    let history = read_step_logs(&log_path)?;
    let col = |f: fn(&StepLog) -> f64| history.iter().map(f).collect::<Vec<_>>();
    plot::save_line_chart(&out.join("pretrain_loss.png"), &[&col(|l| l.total), &col(|l| l.l1), &col(|l| l.l2)])?;
    Ok(PretrainRun { checkpoint, logs, state })
}

pub fn read_step_logs(path: &Path) -> Result<Vec<StepLog>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str::<StepLog>(&line).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// finetune

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<F1Report>,
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub checkpoint: PathBuf,
    pub epochs: Vec<EpochRecord>,
    pub state: FinetuneState<f32>,
}

/// Encoder weights a fine-tuning run starts from, or `None` for random init.
fn finetune_init(cfg: &RunConfig) -> Result<Option<ParameterSet<f32>>> {
    if cfg.ablation.random_init {
        return Ok(None);
    }
    let Some(path) = &cfg.run.checkpoint else {
        return Err(Error::Config("finetune needs run.checkpoint (stage-1 weights) or random_init".into()));
    };
    let params = Checkpoint::<f32>::load(path)?.model_params().filter_prefix("encoder.");
    encoder::check_params(&cfg.encoder, &params)?;
    Ok(Some(params))
}

/// Stage-2 training on a `labeled_fraction` subset of the labeled training pairs.
pub fn run_finetune(cfg: &RunConfig) -> Result<FinetuneRun> {
    cfg.validate()?;
    let setup = cfg.finetune_setup();
    let seed = cfg.run.seed;
    let init = finetune_init(cfg)?;
    let scenes = load_scenes(cfg)?;
    let mut manifest = DatasetManifest::default();
    manifest.labeled_ids = scenes.train().filter(|p| scenes.labeled.contains(&p.id)).map(|p| p.id.clone()).collect();
    let keep = data::split_labeled(&manifest, cfg.run.labeled_fraction, seed)?.labeled_ids;
    let train: Vec<&ScenePair<f32>> = scenes.train().filter(|p| keep.contains(&p.id)).collect();
    if train.is_empty() {
        return Err(Error::Data("no labeled training pairs".into()));
    }
    let validation: Vec<&ScenePair<f32>> = scenes.validation().collect();
    for p in train.iter().chain(&validation) {
        check_size(cfg, p)?;
    }
    log::info!("finetune: {} labeled training pairs, {} validation pairs", train.len(), validation.len());

    let out = &cfg.run.out;
    create_dir(out)?;
    let step_path = out.join(FINETUNE_LOG);
    let epoch_path = out.join(FINETUNE_EPOCHS);
    let mut step_file = File::create(&step_path).map_err(|e| Error::io(&step_path, e))?;
    let mut epoch_file = File::create(&epoch_path).map_err(|e| Error::io(&epoch_path, e))?;

    let mut state = FinetuneState::new(&setup, init.as_ref(), seed)?;
    let bs = cfg.finetune.batch_size;
    let mut epochs = Vec::new();
    for epoch in 0..cfg.run.finetune_epochs {
        let order = permutation(train.len(), seed, STREAM_FINETUNE_ORDER + epoch as u64);
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(bs) {
            let batch: Vec<Labeled<'_, f32>> = chunk
                .iter()
                .map(|&i| Labeled { pre: &train[i].pre, post: &train[i].post, target: &train[i].damage })
                .collect();
            let log = finetune_step(&mut state, &batch, &setup)?;
            write_line(&mut step_file, &step_path, &log)?;
            loss_sum += log.loss * chunk.len() as f64;
            n += chunk.len();
        }
        let train_loss = loss_sum / n as f64;
        let validation = if validation.is_empty() {
            None
        } else {
            Some(report(&model_counts(cfg, &state.encoder, &state.head, &validation)?))
        };
        log::info!("finetune epoch {}: loss {train_loss:.4}", epoch + 1);
        let rec = EpochRecord { epoch: epoch + 1, train_loss, validation };
        write_line(&mut epoch_file, &epoch_path, &rec)?;
        epochs.push(rec);
    }

    let checkpoint = out.join(FINETUNE_CHECKPOINT);
    Checkpoint::from_finetune(&state, snapshot(cfg)).save(&checkpoint)?;
    let losses: Vec<f64> = epochs.iter().map(|e| e.train_loss).collect();
    plot::save_line_chart(&out.join("finetune_loss.png"), &[&losses])?;
    let f1 = |f: fn(&F1Report) -> f64| epochs.iter().map(|e| e.validation.as_ref().map_or(f64::NAN, f)).collect::<Vec<_>>();
    plot::save_line_chart(&out.join("finetune_f1.png"), &[&f1(|r| r.localization), &f1(|r| r.damage)])?;
    Ok(FinetuneRun { checkpoint, epochs, state })
}

/// Summed confusion counts of the model over `pairs`.
pub fn model_counts(
    cfg: &RunConfig,
    encoder_params: &ParameterSet<f32>,
    head_params: &ParameterSet<f32>,
    pairs: &[&ScenePair<f32>],
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for p in pairs {
        let pred = siamese_forward(&p.pre, &p.post, encoder_params, head_params, &cfg.encoder, &cfg.head)?;
        let (damage, localization) = predict_masks(&pred);
        debug_assert_eq!(localization, damage.localization());
        counts += confusion_counts(&damage, &p.damage)?;
    }
    Ok(counts)
}

// ---------------------------------------------------------------------------
// evaluate

/// F1 over the validation holdout (all labeled pairs when no holdout is
/// configured). With `run.oracle` the ground truth stands in for predictions.
pub fn run_evaluate(cfg: &RunConfig) -> Result<F1Report> {
    cfg.validate()?;
    let model = if cfg.run.oracle {
        None
    } else {
        let Some(path) = &cfg.run.checkpoint else {
            return Err(Error::Config("evaluate needs run.checkpoint or the oracle bypass".into()));
        };
        let params = Checkpoint::<f32>::load(path)?.model_params();
        let head = params.filter_prefix("head.");
        if head.is_empty() {
            return Err(Error::MissingHead(format!("{} has no head parameters", path.display())));
        }
        downstream::check_head_params(&cfg.head, &cfg.encoder, &head)?;
        Some((params.filter_prefix("encoder."), head))
    };
    let scenes = load_scenes(cfg)?;
    let pairs: Vec<&ScenePair<f32>> = if scenes.validation.is_empty() {
        scenes.pairs.iter().filter(|p| scenes.labeled.contains(&p.id)).collect()
    } else {
        scenes.validation().collect()
    };
    if pairs.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let counts = match &model {
        None => pairs.iter().try_fold(ConfusionCounts::default(), |acc, p| Ok::<_, Error>(acc + confusion_counts(&p.damage, &p.damage)?))?,
        Some((enc, head)) => {
            for p in &pairs {
                check_size(cfg, p)?;
            }
            model_counts(cfg, enc, head, &pairs)?
        }
    };
    let rep = report(&counts);
    create_dir(&cfg.run.out)?;
    let path = cfg.run.out.join(REPORT);
    fs::write(&path, serde_json::to_string_pretty(&rep).expect("report serializes")).map_err(|e| Error::io(&path, e))?;
    Ok(rep)
}

// ---------------------------------------------------------------------------
// visualize

#[derive(Clone, Debug)]
pub struct VisualizeRun {
    pub panel: PathBuf,
    pub heatmap: PathBuf,
    pub tiles: usize,
}

/// Pre, post, ground-truth mask (when labeled) and attention heatmap of one pair.
pub fn run_visualize(cfg: &RunConfig) -> Result<VisualizeRun> {
    cfg.validate()?;
    let Some(path) = &cfg.run.checkpoint else {
        return Err(Error::Config("visualize needs run.checkpoint".into()));
    };
    let ck = Checkpoint::<f32>::load(path)?;
    let params = ck.model_params().filter_prefix("encoder.");
    encoder::check_params(&cfg.encoder, &params)?;
    let scenes = load_scenes(cfg)?;
    let Some(pair) = scenes.pairs.get(cfg.run.visualize_index) else {
        return Err(Error::Data(format!(
            "visualize_index {} out of range for {} pairs",
            cfg.run.visualize_index,
            scenes.pairs.len()
        )));
    };
    check_size(cfg, pair)?;
    let heat = attention_rollup(&pair.post, &cfg.encoder, &params)?;

    let mut tiles = vec![pair.pre.clone(), pair.post.clone()];
    if scenes.labeled.contains(&pair.id) {
        tiles.push(plot::colorize_mask(&pair.damage));
    }
    tiles.push(plot::colorize_heatmap(&heat));
    let out = &cfg.run.out;
    create_dir(out)?;
    let panel = out.join("panel.png");
    let heatmap = out.join("heatmap.png");
    plot::hstack(&tiles).save_png(&panel)?;
    heat.save_png(&heatmap)?;
    Ok(VisualizeRun { panel, heatmap, tiles: tiles.len() })
}

// ---------------------------------------------------------------------------
// gen-data

/// Write `data.synthetic` pairs in the xBD layout under `run.out`.
pub fn run_gen_data(cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let Some(n) = cfg.data.synthetic else {
        return Err(Error::Config("gen-data needs data.synthetic".into()));
    };
    let pairs =
        data::generate_synthetic_set::<f32>(cfg.run.seed, n, cfg.encoder.input_size, cfg.data.buildings_per_scene)?;
    data::export_xbd(&pairs, &cfg.run.out)?;
    Ok(pairs.len())
}
