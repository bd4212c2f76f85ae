use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::data::{GridShape, SynthConfig};
use crate::encoder::BackboneConfig;
use crate::error::{Error, Result};
use crate::metrics::{LossConfig, MetricParams};
use crate::model::ModelOptions;

/// Where episodes come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SynthConfig),
    File(PathBuf),
}

/// Everything a run needs, parsed from `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `patch_tokens` and `patch_dim` are overwritten from the data grid.
    pub backbone: BackboneConfig,
    pub metric: String,
    pub metric_params: MetricParams,
    pub loss: LossConfig,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes_train: usize,
    pub episodes_eval: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataSource,
    pub options: ModelOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            metric: "otam".into(),
            metric_params: MetricParams::default(),
            loss: LossConfig::default(),
            way: 5,
            shot: 1,
            queries: 1,
            episodes_train: 2000,
            episodes_eval: 1000,
            lr: 1e-3,
            milestones: vec![1500],
            gamma: 0.1,
            seed: 0,
            output: PathBuf::from("runs/default"),
            data: DataSource::Synthetic(SynthConfig::default()),
            options: ModelOptions::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

impl RunConfig {
    /// Parses config text; `#` starts a comment, blank lines are skipped,
    /// unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut synth = SynthConfig::default();
        let mut file: Option<PathBuf> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            cfg.set(k, v, &mut synth, &mut file)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.data = match file {
            Some(p) => DataSource::File(p),
            None => DataSource::Synthetic(synth),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, k: &str, v: &str, synth: &mut SynthConfig, file: &mut Option<PathBuf>) -> Result<()> {
        let b = &mut self.backbone;
        match k {
            "layers" => b.layers = parse(k, v)?,
            "dim" => b.dim = parse(k, v)?,
            "heads" => b.heads = parse(k, v)?,
            "frames" => b.frames = parse(k, v)?,
            "text_dim" => b.text_dim = parse(k, v)?,
            "tpcm_heads" => b.tpcm_heads = parse(k, v)?,
            "adapter_ratio" => b.adapter_ratio = parse(k, v)?,
            "joint_scale_r" => b.joint_scale_r = parse(k, v)?,
            "joint_skip" => b.joint_skip = parse_bool(k, v)?,
            "train_projection" => b.train_projection = parse_bool(k, v)?,
            "metric" => self.metric = v.to_string(),
            "alpha" => self.loss.alpha = parse(k, v)?,
            "tau" => self.loss.tau = parse(k, v)?,
            "tau_d" => self.loss.tau_d = parse(k, v)?,
            "label_smoothing" => self.loss.label_smoothing = parse(k, v)?,
            "lambda" => self.metric_params.lambda = parse(k, v)?,
            "omega" => self.metric_params.omega = parse_list(k, v)?,
            "trx_temperature" => self.metric_params.trx_temperature = parse(k, v)?,
            "way" => self.way = parse(k, v)?,
            "shot" => self.shot = parse(k, v)?,
            "queries" => self.queries = parse(k, v)?,
            "episodes_train" => self.episodes_train = parse(k, v)?,
            "episodes_eval" => self.episodes_eval = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "milestones" => self.milestones = parse_list(k, v)?,
            "gamma" => self.gamma = parse(k, v)?,
            "seed" => {
                self.seed = parse(k, v)?;
                b.seed = self.seed;
            }
            "output" => self.output = PathBuf::from(v),
            "use_tma" => self.options.use_tma = parse_bool(k, v)?,
            "use_tpcm" => self.options.use_tpcm = parse_bool(k, v)?,
            "text_injection" => self.options.text_injection = parse_bool(k, v)?,
            "data" => {
                *file = if v == "synthetic" { None } else { Some(PathBuf::from(v)) };
            }
            "synth_classes" => synth.classes = parse(k, v)?,
            "synth_videos" => synth.videos_per_class = parse(k, v)?,
            "synth_frames" => synth.frames = parse(k, v)?,
            "synth_rows" => synth.rows = parse(k, v)?,
            "synth_cols" => synth.cols = parse(k, v)?,
            "patch_dim" => synth.patch_dim = parse(k, v)?,
            "synth_signal" => synth.signal = parse(k, v)?,
            "synth_nuisance" => synth.nuisance = parse(k, v)?,
            "synth_nuisance_dim" => synth.nuisance_dim = parse(k, v)?,
            "synth_drift" => synth.drift = parse(k, v)?,
            "synth_noise" => synth.noise = parse(k, v)?,
            "synth_seed" => synth.seed = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("milestones must be strictly increasing, got {:?}", self.milestones));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if self.episodes_train == 0 || self.episodes_eval == 0 {
            return fail("episode counts must be >= 1".into());
        }
        if self.way == 0 || self.shot == 0 || self.queries == 0 {
            return fail("way, shot and queries must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.metric_params.lambda >= 0.0) {
            return fail(format!("lambda must be >= 0, got {}", self.metric_params.lambda));
        }
        self.loss.validate()?;
        self.backbone.validate()
    }

    /// Backbone shaped for a dataset grid.
    pub fn backbone_for(&self, grid: GridShape) -> Result<BackboneConfig> {
        let cfg = BackboneConfig {
            patch_tokens: grid.patches(),
            patch_dim: grid.dim,
            ..self.backbone.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat `key -> value` echo for reports.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let b = &self.backbone;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("layers", b.layers.to_string());
        put("dim", b.dim.to_string());
        put("heads", b.heads.to_string());
        put("frames", b.frames.to_string());
        put("text_dim", b.text_dim.to_string());
        put("tpcm_heads", b.tpcm_heads.to_string());
        put("adapter_ratio", b.adapter_ratio.to_string());
        put("joint_scale_r", b.joint_scale_r.to_string());
        put("joint_skip", b.joint_skip.to_string());
        put("train_projection", b.train_projection.to_string());
        put("metric", self.metric.clone());
        put("alpha", self.loss.alpha.to_string());
        put("tau", self.loss.tau.to_string());
        put("tau_d", self.loss.tau_d.to_string());
        put("label_smoothing", self.loss.label_smoothing.to_string());
        put("lambda", self.metric_params.lambda.to_string());
        put("omega", list(&self.metric_params.omega));
        put("trx_temperature", self.metric_params.trx_temperature.to_string());
        put("way", self.way.to_string());
        put("shot", self.shot.to_string());
        put("queries", self.queries.to_string());
        put("episodes_train", self.episodes_train.to_string());
        put("episodes_eval", self.episodes_eval.to_string());
        put("lr", self.lr.to_string());
        put("milestones", list(&self.milestones));
        put("gamma", self.gamma.to_string());
        put("seed", self.seed.to_string());
        put("output", self.output.display().to_string());
        put("use_tma", self.options.use_tma.to_string());
        put("use_tpcm", self.options.use_tpcm.to_string());
        put("text_injection", self.options.text_injection.to_string());
        match &self.data {
            DataSource::File(p) => put("data", p.display().to_string()),
            DataSource::Synthetic(s) => {
                put("data", "synthetic".into());
                put("synth_classes", s.classes.to_string());
                put("synth_videos", s.videos_per_class.to_string());
                put("synth_frames", s.frames.to_string());
                put("synth_rows", s.rows.to_string());
                put("synth_cols", s.cols.to_string());
                put("patch_dim", s.patch_dim.to_string());
                put("synth_signal", s.signal.to_string());
                put("synth_nuisance", s.nuisance.to_string());
                put("synth_nuisance_dim", s.nuisance_dim.to_string());
                put("synth_drift", s.drift.to_string());
                put("synth_noise", s.noise.to_string());
                put("synth_seed", s.seed.to_string());
            }
        }
        m
    }

    /// Inverse of [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        self.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
