//! Training runs: config, epoch loop, evaluation, checkpoints and resume.
//!
//! A run directory holds `config.json`, `best.ckpt`, `last.ckpt`, the
//! metric CSVs and SVG panels and `summary.json`. Nothing written there
//! depends on wall-clock time, so identical configs give identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, Manifest, SliceRecord, Split, SyntheticConfig, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::loss::{mutation_loss, LossConfig};
use crate::metrics::{emit_reports, evaluate, MetricSeries, DEFAULT_THRESHOLD};
use crate::model::{Model, ModelConfig};
use crate::nn::zero_grads;
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::Prng;
use crate::tensor::Tensor4;

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Preprocessed dataset with a manifest. Exclusive with `synthetic`.
    pub data_root: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    /// Patient-level split of synthetic data.
    pub train_fraction: f64,
    pub threshold: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            seed: 0,
            epochs: 50,
            batch_size: 6,
            max_iterations: 50_000,
            lr: 1e-4,
            weight_decay: 1e-4,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data_root: None,
            synthetic: None,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            threshold: DEFAULT_THRESHOLD,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// The desk-scale synthetic run: 200 phantoms at 64x64, channels
    /// `[8, 16, 24, 32]`, batch 8, 20 epochs.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            seed,
            epochs: 20,
            batch_size: 8,
            model: ModelConfig::tiny([8, 16, 24, 32]),
            synthetic: Some(SyntheticConfig::default()),
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return fail(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_iterations == 0 {
            return fail("epochs, batch_size and max_iterations must all be >= 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer().validate()?;
        match (&self.data_root, &self.synthetic) {
            (Some(_), Some(_)) => fail("data_root and synthetic are mutually exclusive".into()),
            (None, None) => fail("no data: set data_root or synthetic".into()),
            (Some(root), None) if !root.join(data::manifest::MANIFEST_FILE).is_file() => {
                fail(format!("{} has no {}", root.display(), data::manifest::MANIFEST_FILE))
            }
            _ => Ok(()),
        }
    }
}

/// Train and test slices as configured.
pub fn load_data(cfg: &TrainConfig) -> Result<(Vec<SliceRecord>, Vec<SliceRecord>)> {
    let (train, test) = if let Some(syn) = &cfg.synthetic {
        let slices = data::assign_splits(data::synthetic_slices(syn, cfg.seed)?, cfg.train_fraction, cfg.seed)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (s, split) in slices {
            match split {
                Split::Train => train.push(s),
                Split::Test => test.push(s),
            }
        }
        (train, test)
    } else {
        let root = cfg.data_root.as_ref().expect("validated");
        let m = Manifest::load(root)?;
        (m.load_split(Split::Train)?, m.load_split(Split::Test)?)
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "need non-empty splits, got {} train and {} test slices",
            train.len(),
            test.len()
        )));
    }
    let shape = train[0].image.shape();
    if let Some(s) = train.iter().chain(&test).find(|s| s.image.shape() != shape) {
        return Err(Error::Shape(format!(
            "slice {} of {} has shape {}, expected {shape}",
            s.slice_index,
            s.patient_id,
            s.image.shape()
        )));
    }
    crate::encoder::Encoder::<f32>::check_input(shape)?;
    Ok((train, test))
}

/// Progress persisted in `last.ckpt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub iteration: u64,
    pub rng: Prng,
    pub series: MetricSeries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub iterations: u64,
    pub stopped_by: String,
    pub first_iteration_loss: f64,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
    pub final_mean_dice: f64,
    pub best_mean_dice: f64,
    pub param_count: usize,
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub series: MetricSeries,
    pub summary: TrainSummary,
}

/// Batches of one epoch. A trailing batch of a single slice is dropped when
/// `batch_size > 1`, since batch norm needs more than one value per channel.
fn epoch_batches(n: usize, batch: usize, rng: &mut Prng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch)
        .filter(|c| c.len() > 1 || batch == 1)
        .map(|c| c.to_vec())
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Starts a fresh run in `run_dir`.
pub fn train(cfg: &TrainConfig, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, test_set) = load_data(cfg)?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write_json(&run_dir.join(CONFIG_FILE), cfg)?;
    let mut rng = Prng::new(cfg.seed);
    let model = Model::<f32>::new(&cfg.model, &mut rng)?;
    let opt = AdamWState::new(cfg.optimizer())?;
    let state = RunState {
        config: cfg.clone(),
        epochs_done: 0,
        iteration: 0,
        rng,
        series: MetricSeries::default(),
    };
    run(model, opt, state, &train_set, &test_set, run_dir)
}

/// Continues from `run_dir/last.ckpt`. `epochs` may extend the original
/// budget.
pub fn resume(run_dir: &Path, epochs: Option<usize>) -> Result<TrainOutcome> {
    let ck = checkpoint::load::<f32>(&run_dir.join(LAST_CKPT))?;
    let mut state: RunState = serde_json::from_value(ck.header.meta.clone())
        .map_err(|e| Error::Format(format!("{}: run state: {e}", LAST_CKPT)))?;
    if let Some(e) = epochs {
        state.config.epochs = e;
    }
    state.config.validate()?;
    let opt = ck
        .optimizer
        .ok_or_else(|| Error::Format(format!("{LAST_CKPT} carries no optimizer state")))?;
    let (train_set, test_set) = load_data(&state.config)?;
    run(ck.model, opt, state, &train_set, &test_set, run_dir)
}

fn run(
    mut model: Model<f32>,
    mut opt: AdamWState<f32>,
    mut state: RunState,
    train_set: &[SliceRecord],
    test_set: &[SliceRecord],
    run_dir: &Path,
) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    let deepest = train_set[0].image.shape();
    if cfg.batch_size == 1 && (deepest.h / 32) * (deepest.w / 32) < 2 {
        return Err(Error::Config(
            "batch_size 1 leaves a single value per channel at the deepest stage".into(),
        ));
    }
    let mut stopped_by = "epochs";
    while state.epochs_done < cfg.epochs {
        if state.iteration >= cfg.max_iterations {
            stopped_by = "max_iterations";
            break;
        }
        let epoch = state.epochs_done + 1;
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in epoch_batches(train_set.len(), cfg.batch_size, &mut state.rng) {
            if state.iteration >= cfg.max_iterations {
                break;
            }
            state.iteration += 1;
            let loss = step(&mut model, &mut opt, train_set, &idx, &cfg.loss)
                .map_err(|e| e.in_stage(format!("iteration {}", state.iteration)))?;
            log::debug!("iteration {} loss {loss:.6}", state.iteration);
            state.series.push_iteration(state.iteration, loss);
            sum += loss;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Config("training set yields no batches".into()));
        }
        let mean_loss = sum / count as f64;
        let report = evaluate(&mut model, test_set, cfg.threshold)?;
        let improved = state.series.push_epoch(epoch, mean_loss, report.mean_dice)?;
        state.epochs_done = epoch;
        log::info!(
            "epoch {epoch}/{} iterations {} mean loss {mean_loss:.4} test dice {:.4}",
            cfg.epochs,
            state.iteration,
            report.mean_dice
        );
        let meta = serde_json::to_value(&state)?;
        if improved {
            checkpoint::save(&run_dir.join(BEST_CKPT), &mut model, None, meta.clone())?;
        }
        checkpoint::save(&run_dir.join(LAST_CKPT), &mut model, Some(&opt), meta)?;
        emit_reports(&state.series, run_dir)?;
    }
    if state.iteration >= cfg.max_iterations && state.epochs_done < cfg.epochs {
        stopped_by = "max_iterations";
    }
    let s = &state.series;
    if s.epochs() == 0 {
        return Err(Error::Config("no epochs were run".into()));
    }
    let summary = TrainSummary {
        epochs_run: s.epochs(),
        iterations: state.iteration,
        stopped_by: stopped_by.into(),
        first_iteration_loss: s.per_iteration_loss[0].1,
        first_epoch_loss: s.per_epoch_loss[0].1,
        final_epoch_loss: s.per_epoch_loss.last().unwrap().1,
        final_mean_dice: s.test_mean_dice.last().unwrap().1,
        best_mean_dice: s.best_dice().unwrap(),
        param_count: crate::nn::param_count(&mut model),
    };
    write_json(&run_dir.join(SUMMARY_FILE), &summary)?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        series: state.series,
        summary,
    })
}

/// One optimizer step on the batch `idx`; returns the total loss.
pub fn step(
    model: &mut Model<f32>,
    opt: &mut AdamWState<f32>,
    slices: &[SliceRecord],
    idx: &[usize],
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let (images, masks) = data::make_batch(slices, idx)?;
    let out = model.forward(&images)?;
    let (report, grads) = mutation_loss(&out.p, &masks, loss_cfg)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", report.total)));
    }
    let grads: [Tensor4<f32>; 4] = grads
        .try_into()
        .map_err(|_| Error::Shape("expected four head gradients".into()))?;
    zero_grads(model);
    model.backward(&grads)?;
    opt.step(model)?;
    Ok(report.total)
}
