//! Training and evaluation runs with their on-disk artifacts.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use asanet_core::eval::{evaluate, extract_features, EvalConfig, FeatureSet, RankingResult};
use asanet_core::synth::{gen_dataset, Dataset, Split};
use asanet_core::train::{lr_at, EpochSummary, StepRecord, Trainer};
use log::info;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{Error, IoContext, Result};
use crate::export;

/// Header of `train_log.csv`.
pub const TRAIN_LOG_HEADER: [&str; 8] = ["step", "xent", "wrt", "cent", "bce", "pmi", "lambda_pmi", "total"];

/// The configured dataset: loaded from `data.path` or generated.
pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => dataset::load(p),
        None => Ok(gen_dataset(&cfg.data.gen)?),
    }
}

/// Fit the model geometry and class count to `ds`.
pub fn fit_to_dataset(cfg: &mut RunConfig, ds: &Dataset) {
    cfg.model.frame_height = ds.config.frame_height;
    cfg.model.frame_width = ds.config.frame_width;
    cfg.model.num_identities = ds.num_train_identities();
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Output directory for logs and checkpoints; `None` keeps everything in memory.
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (counted from epoch 0).
    pub stop_after: Option<usize>,
}

#[derive(Serialize)]
struct FailedStep {
    epoch: usize,
    step: u64,
    error: String,
}

struct Logs {
    steps: csv::Writer<File>,
    epochs: csv::Writer<File>,
    steps_path: PathBuf,
    epochs_path: PathBuf,
}

impl Logs {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        let open = |name: &str, header: &[&str]| -> Result<(csv::Writer<File>, PathBuf)> {
            let path = dir.join(name);
            let fresh = !append || !path.exists();
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .at(&path)?;
            let mut w = csv::Writer::from_writer(file);
            if fresh {
                w.write_record(header)?;
            }
            Ok((w, path))
        };
        let (steps, steps_path) = open("train_log.csv", &TRAIN_LOG_HEADER)?;
        let (epochs, epochs_path) = open("epochs.csv", &["epoch", "steps", "lr", "mean_total", "mean_bce", "lambda_pmi"])?;
        Ok(Self {
            steps,
            epochs,
            steps_path,
            epochs_path,
        })
    }

    fn step(&mut self, r: &StepRecord) -> Result<()> {
        let l = &r.losses;
        self.steps.write_record(&[
            r.step.to_string(),
            l.xent.to_string(),
            l.wrt.to_string(),
            l.cent.to_string(),
            l.bce.to_string(),
            l.pmi.to_string(),
            l.lambda_pmi.to_string(),
            l.total.to_string(),
        ])?;
        Ok(())
    }

    fn epoch(&mut self, s: &EpochSummary, lr: f64) -> Result<()> {
        self.epochs.write_record(&[
            s.epoch.to_string(),
            s.steps.to_string(),
            lr.to_string(),
            s.mean_total.to_string(),
            s.mean_bce.to_string(),
            s.lambda_pmi.to_string(),
        ])?;
        self.steps.flush().at(&self.steps_path)?;
        self.epochs.flush().at(&self.epochs_path)?;
        Ok(())
    }
}

/// Train per `cfg` on `ds`. With an output directory this writes
/// `config.json`, `train_log.csv`, `epochs.csv`, periodic checkpoints under
/// `checkpoints/epoch_NNNN` and the final one under `checkpoint`.
pub fn train(cfg: &RunConfig, ds: &Dataset, opts: &TrainOptions) -> Result<(Trainer, Vec<EpochSummary>)> {
    let mut trainer = match &opts.resume {
        Some(p) => {
            let t = checkpoint::load(p)?;
            info!("resuming from {} at epoch {}", p.display(), t.epoch);
            t
        }
        None => Trainer::new(cfg.train_config())?,
    };
    let mut logs = match &opts.out {
        Some(dir) => {
            fs::create_dir_all(dir).at(dir)?;
            cfg.save(&dir.join("config.json"))?;
            Some(Logs::open(dir, opts.resume.is_some())?)
        }
        None => None,
    };
    let total = trainer.config.schedule.total_epochs;
    let last = opts.stop_after.map_or(total, |s| s.min(total));
    let every = cfg.schedule.checkpoint_every;
    let mut summaries = Vec::new();
    while trainer.epoch < last {
        let epoch = trainer.epoch;
        let lr = lr_at(epoch, &trainer.config.schedule, trainer.config.optim.lr);
        let mut log_err = None;
        let outcome = trainer.run_epoch(ds, |r| {
            if let Some(l) = logs.as_mut() {
                if let Err(e) = l.step(r) {
                    log_err.get_or_insert(e);
                }
            }
        });
        if let Some(e) = log_err {
            return Err(e);
        }
        let summary = match outcome {
            Ok(s) => s,
            Err(e) => {
                if let (Some(dir), asanet_core::Error::NonFinite(_)) = (&opts.out, &e) {
                    let record = FailedStep {
                        epoch,
                        step: trainer.optim.step + 1,
                        error: e.to_string(),
                    };
                    let path = dir.join("failure.json");
                    fs::write(&path, serde_json::to_string_pretty(&record)?).at(&path)?;
                }
                return Err(e.into());
            }
        };
        info!(
            "epoch {epoch}: lr {lr:e} loss {:.4} bce {:.4} lambda_pmi {}",
            summary.mean_total, summary.mean_bce, summary.lambda_pmi
        );
        if let Some(l) = logs.as_mut() {
            l.epoch(&summary, lr)?;
        }
        summaries.push(summary);
        if let Some(dir) = &opts.out {
            if every > 0 && trainer.epoch % every == 0 && trainer.epoch < last {
                checkpoint::save(&trainer, &dir.join("checkpoints").join(format!("epoch_{:04}", trainer.epoch)))?;
            }
        }
    }
    if let Some(dir) = &opts.out {
        checkpoint::save(&trainer, &dir.join("checkpoint"))?;
    }
    Ok((trainer, summaries))
}

/// Query and gallery descriptors of `ds` plus their ranking.
pub fn evaluate_split(trainer: &mut Trainer, ds: &Dataset, cfg: &EvalConfig) -> Result<(RankingResult, FeatureSet, FeatureSet)> {
    let q = extract_features(&mut trainer.model, ds, &ds.split(Split::Query), cfg)?;
    let g = extract_features(&mut trainer.model, ds, &ds.split(Split::Gallery), cfg)?;
    let r = evaluate(&q, &g, cfg)?;
    Ok((r, q, g))
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Also write per-frame masks of this many query tracklets.
    pub mask_tracklets: usize,
}

/// Evaluate and write every result file into `out`.
pub fn evaluate_to(trainer: &mut Trainer, ds: &Dataset, cfg: &EvalConfig, out: &Path, opts: &EvalOptions) -> Result<RankingResult> {
    let (r, q, g) = evaluate_split(trainer, ds, cfg)?;
    export::export_results(&r, cfg, &q, &g, out)?;
    export::export_features(&q, &g, out)?;
    if opts.mask_tracklets > 0 {
        let picks: Vec<usize> = ds.split(Split::Query).into_iter().take(opts.mask_tracklets).collect();
        export::export_masks(&mut trainer.model, ds, &picks, out)?;
    }
    info!(
        "{:?}: {} queries ({} dropped), mAP {:.4}, rank-1 {:.4}",
        r.setup,
        r.queries.len(),
        r.dropped,
        r.map,
        r.rank(1)
    );
    Ok(r)
}

/// Geometry check used before evaluating on a dataset the model was not trained on.
pub fn check_geometry(trainer: &Trainer, ds: &Dataset) -> Result<()> {
    let m = &trainer.config.model;
    if (m.frame_height, m.frame_width) != (ds.config.frame_height, ds.config.frame_width) {
        return Err(Error::Core(asanet_core::Error::Config(format!(
            "model expects {}×{} frames, dataset has {}×{}",
            m.frame_height, m.frame_width, ds.config.frame_height, ds.config.frame_width
        ))));
    }
    Ok(())
}
