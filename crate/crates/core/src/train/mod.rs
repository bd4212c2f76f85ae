//! Episodic training and evaluation, checkpoints and reports.

mod census;
mod checkpoint;
mod config;
mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use census::{param_census, Census, GroupCount};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{DataSource, RunConfig};
pub use optim::{Adam, MultiStepLr};

use crate::data::{load_embedding_file, sample_episode, synth_dataset, DatasetManifest, EpisodeSpec, SampleMode, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricRegistry;
use crate::model::Model;
use crate::tensor::ParamRegistry;

const EPISODE_STREAM: u64 = 0x6570_6973_6f64_6573;
const EVAL_STREAM: u64 = 0x6576_616c_7561_7465;

pub fn load_dataset(cfg: &RunConfig) -> Result<DatasetManifest> {
    match &cfg.data {
        DataSource::Synthetic(s) => synth_dataset(s),
        DataSource::File(p) => load_embedding_file(p),
    }
}

/// Builds the model for a config and the grid of `manifest`.
pub fn build_model(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Model> {
    let grid = manifest.grid().ok_or_else(|| Error::Input("dataset has no videos".into()))?;
    let backbone = cfg.backbone_for(grid)?;
    let metric = *MetricRegistry::default().get(&cfg.metric)?;
    Model::new(&backbone, metric, cfg.metric_params.clone(), cfg.loss.clone(), cfg.options)
}

/// Fresh parameters for `model`, drawn from the run seed.
pub fn init_params(cfg: &RunConfig, model: &Model) -> Result<ParamRegistry> {
    model.init_registry(&mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

pub fn episode_spec(cfg: &RunConfig) -> EpisodeSpec {
    EpisodeSpec { way: cfg.way, shot: cfg.shot, queries: cfg.queries, frames: cfg.backbone.frames }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub episode: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_q2s: f64,
    pub loss_s2t: f64,
    pub loss_q2t: f64,
    pub accuracy: f64,
}

/// Runs `cfg.episodes_train` optimiser steps, one episode each, updating
/// `reg` in place.
pub fn train(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    model: &Model,
    reg: &mut ParamRegistry,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    let spec = episode_spec(cfg);
    let texts = model.text_provider(manifest);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EPISODE_STREAM);
    // surface data problems before the first update
    sample_episode(manifest, spec, Split::Train, SampleMode::Train, &mut rng.clone())?;
    let sched = MultiStepLr { base: cfg.lr, milestones: cfg.milestones.clone(), gamma: cfg.gamma };
    let mut adam = Adam::new(reg.len());
    let mut log = Vec::with_capacity(cfg.episodes_train);
    for episode in 0..cfg.episodes_train {
        let ep = sample_episode(manifest, spec, Split::Train, SampleMode::Train, &mut rng)?;
        let out = model.forward(reg, manifest, &texts, &ep, SampleMode::Train, &mut rng, true)?;
        let grads = out.grads.as_ref().expect("backward requested");
        if let Some(bad) = grads.iter().flatten().flatten().find(|g| !g.is_finite()) {
            return Err(Error::contract("train", format!("non-finite gradient {bad} at episode {episode}")));
        }
        let lr = sched.at(episode);
        adam.step(reg, grads, lr)?;
        let row = StepLog {
            episode,
            lr,
            loss: out.losses.total,
            loss_q2s: out.losses.q2s,
            loss_s2t: out.losses.s2t,
            loss_q2t: out.losses.q2t,
            accuracy: out.accuracy(),
        };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// Fused class distribution per query.
    pub fused: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub episodes: usize,
    pub split: String,
    pub census: Census,
    pub config: BTreeMap<String, String>,
    pub records: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One row per episode.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,correct,total,accuracy,labels,predictions\n");
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.episode,
                r.correct,
                r.total,
                r.accuracy,
                join(&r.labels),
                join(&r.predictions)
            ));
        }
        s
    }
}

/// Mean and 95% half-width `1.96 * sd / sqrt(n)` of per-episode values.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Scores `episodes` episodes of `split` in parallel. Episode `i` draws
/// from its own random stream, so results do not depend on scheduling.
pub fn evaluate(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    model: &Model,
    reg: &ParamRegistry,
    split: Split,
    episodes: usize,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    let spec = episode_spec(cfg);
    let texts = model.text_provider(manifest);
    let records = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_STREAM);
            rng.set_stream(i as u64);
            let ep = sample_episode(manifest, spec, split, SampleMode::Eval, &mut rng)?;
            let out = model.forward(reg, manifest, &texts, &ep, SampleMode::Eval, &mut rng, false)?;
            Ok(EpisodeRecord {
                episode: i,
                correct: out.correct,
                total: out.total,
                accuracy: out.accuracy(),
                labels: ep.query_labels.clone(),
                predictions: out.bundle.predictions(),
                fused: out.bundle.fused,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, ci95) = mean_ci95(&accs);
    Ok(EvalReport {
        mean_accuracy,
        ci95,
        episodes,
        split: split.to_string(),
        census: Census::of_registry(reg),
        config: cfg.echo(),
        records,
    })
}

/// Training log as CSV.
pub fn log_csv(log: &[StepLog]) -> String {
    let mut s = String::from("episode,lr,loss,loss_q2s,loss_s2t,loss_q2t,accuracy\n");
    for r in log {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.episode, r.lr, r.loss, r.loss_q2s, r.loss_s2t, r.loss_q2t, r.accuracy
        ));
    }
    s
}

/// Full `train` command: trains, then writes `checkpoint.fsck`,
/// `train_log.csv` and `config.txt` into `out`.
pub fn run_training(cfg: &RunConfig, out: &Path, on_step: impl FnMut(&StepLog)) -> Result<(Model, ParamRegistry)> {
    let manifest = load_dataset(cfg)?;
    let model = build_model(cfg, &manifest)?;
    let mut reg = init_params(cfg, &model)?;
    let log = train(cfg, &manifest, &model, &mut reg, on_step)?;
    fs::create_dir_all(out)?;
    save_checkpoint(&out.join("checkpoint.fsck"), &reg)?;
    fs::write(out.join("train_log.csv"), log_csv(&log))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok((model, reg))
}
