//! One episode end to end: both encoder branches, the prototype module,
//! the selected metric, the text branch and the training objective.

use rand::Rng;

use crate::data::{DatasetManifest, Episode, SampleMode};
use crate::encoder::{BackboneConfig, Blueprint, Encoder, EncoderFlags, TextProvider};
use crate::error::{Error, Result};
use crate::metrics::{
    combine_losses, cosine_logits, kl_loss, smoothed_targets, LossConfig, MetricDescriptor, MetricParams,
    ScoreBundle,
};
use crate::tensor::{Binder, ParamGroup, ParamRegistry, TokenTensor, Var};
use crate::tpcm::{build_prototypes, Tpcm};

/// Module switches used by ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelOptions {
    /// Adapters on; off leaves the frozen backbone.
    pub use_tma: bool,
    pub use_tpcm: bool,
    /// Text token appended in the support branch.
    pub text_injection: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { use_tma: true, use_tpcm: true, text_injection: true }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub tpcm: Tpcm,
    pub blueprint: Blueprint,
    pub metric: MetricDescriptor,
    pub metric_params: MetricParams,
    pub loss: LossConfig,
    pub options: ModelOptions,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub q2s: f64,
    pub s2t: f64,
    pub q2t: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    pub bundle: ScoreBundle,
    pub losses: LossValues,
    /// Per-parameter gradients of the total loss, when requested.
    pub grads: Option<Vec<Option<Vec<f64>>>>,
    pub correct: usize,
    pub total: usize,
}

impl EpisodeOutput {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Groups that receive updates under `options`.
pub fn trained_groups(options: ModelOptions, train_projection: bool) -> Vec<ParamGroup> {
    let mut g = Vec::new();
    if options.use_tma {
        g.push(ParamGroup::Adapter);
        if options.text_injection {
            g.push(ParamGroup::TextProjection);
        }
    }
    if options.use_tpcm {
        g.push(ParamGroup::Tpcm);
    }
    if train_projection {
        g.push(ParamGroup::Projection);
    }
    g
}

fn text_tensor(rows: &[Vec<f64>]) -> Result<TokenTensor> {
    TokenTensor::from_rows(rows)
}

impl Model {
    pub fn new(
        backbone: &BackboneConfig,
        metric: MetricDescriptor,
        metric_params: MetricParams,
        loss: LossConfig,
        options: ModelOptions,
    ) -> Result<Self> {
        loss.validate()?;
        let mut blueprint = Blueprint::new();
        let encoder = Encoder::declare(backbone, &mut blueprint)?;
        let tpcm = Tpcm::declare(backbone.text_dim, backbone.tpcm_heads, &mut blueprint)?;
        Ok(Self { encoder, tpcm, blueprint, metric, metric_params, loss, options })
    }

    pub fn trained_groups(&self) -> Vec<ParamGroup> {
        trained_groups(self.options, self.encoder.cfg.train_projection)
    }

    /// Draws initial values; groups switched off by the options are frozen.
    pub fn init_registry<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamRegistry> {
        let mut reg = self.blueprint.materialize(rng)?;
        let trained = self.trained_groups();
        let ids: Vec<_> = reg.ids().collect();
        for id in ids {
            if !trained.contains(&reg.entry(id).group) {
                reg.set_frozen(id, true);
            }
        }
        Ok(reg)
    }

    pub fn text_provider(&self, manifest: &DatasetManifest) -> TextProvider {
        TextProvider::new(manifest, self.encoder.params.text_map)
    }

    fn flags(&self) -> EncoderFlags {
        EncoderFlags {
            adapt: self.options.use_tma,
            text_injection: self.options.text_injection,
            mask_text: false,
        }
    }

    /// Scores one episode. Train mode draws one text template per support
    /// video and uses the normalised mean of a class's draws as its class
    /// text; eval mode uses the template average throughout.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        reg: &ParamRegistry,
        manifest: &DatasetManifest,
        texts: &TextProvider,
        ep: &Episode,
        mode: SampleMode,
        rng: &mut R,
        backward: bool,
    ) -> Result<EpisodeOutput> {
        let cfg = &self.encoder.cfg;
        if ep.spec.frames != cfg.frames {
            return Err(Error::dim("episode frames", &[ep.spec.frames], &[cfg.frames]));
        }
        let (way, shot, dt) = (ep.way(), ep.shot(), cfg.text_dim);

        let mut video_text = Vec::with_capacity(way * shot);
        let mut class_text = Vec::with_capacity(way);
        for (m, &cid) in ep.classes.iter().enumerate() {
            let mut acc = vec![0.0; dt];
            let mut draws = Vec::with_capacity(shot);
            if mode == SampleMode::Eval {
                let v = texts.embed_class_text(reg, cid, mode, rng)?.vector;
                draws = vec![v; shot];
            } else {
                for _ in 0..shot {
                    draws.push(texts.embed_class_text(reg, cid, mode, rng)?.vector);
                }
            }
            for v in &draws {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            }
            let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Input(format!("class {m} text embedding is zero")));
            }
            acc.iter_mut().for_each(|a| *a /= n);
            class_text.push(acc);
            video_text.extend(draws);
        }

        let mut b = Binder::new(reg);
        let support: Vec<_> = ep.support_flat().map(|(_, v)| v).collect();
        let query: Vec<_> = ep.query.iter().collect();
        let sp = self.encoder.gather(manifest, &support)?;
        let qp = self.encoder.gather(manifest, &query)?;
        let sp = b.graph.constant(sp);
        let qp = b.graph.constant(qp);
        let vt = b.graph.constant(text_tensor(&video_text)?);
        let ct = b.graph.constant(text_tensor(&class_text)?);

        let flags = self.flags();
        let fs = self.encoder.encode_support(&mut b, sp, vt, flags)?;
        let fq = self.encoder.encode_query(&mut b, qp, flags)?;

        let fs_avg = b.graph.mean_axis(fs, 1)?;
        let fq_avg = b.graph.mean_axis(fq, 1)?;
        let s2t = cosine_logits(&mut b.graph, fs_avg, ct, self.loss.tau)?;
        let q2t = cosine_logits(&mut b.graph, fq_avg, ct, self.loss.tau)?;

        let (fs2, fq2) = if self.options.use_tpcm {
            (self.tpcm.enhance_support(&mut b, fs, vt)?, self.tpcm.enhance_query(&mut b, fq)?)
        } else {
            (fs, fq)
        };
        let protos = build_prototypes(&mut b, fs2, shot)?;
        let dist = (self.metric.pairwise)(&mut b.graph, fq2, protos, &self.metric_params)?;
        let q2s = b.graph.scale(dist, -1.0 / self.loss.tau_d);

        let eps = self.loss.label_smoothing;
        let support_labels: Vec<usize> = ep.support_flat().map(|(m, _)| m).collect();
        let l_q2s = kl_loss(&mut b.graph, q2s, &smoothed_targets(&ep.query_labels, way, 0.0)?)?;
        let l_s2t = kl_loss(&mut b.graph, s2t, &smoothed_targets(&support_labels, way, eps)?)?;
        let l_q2t = kl_loss(&mut b.graph, q2t, &smoothed_targets(&ep.query_labels, way, eps)?)?;
        let total = combine_losses(&mut b.graph, l_s2t, l_q2t, l_q2s, self.loss.alpha)?;

        let grads = if backward && b.graph.requires_grad(total) {
            b.graph.backward(total)?;
            Some(b.gradients())
        } else if backward {
            Some(vec![None; reg.len()])
        } else {
            None
        };

        let rows = |v: Var, c: f64| -> Vec<Vec<f64>> {
            let d = b.graph.shape(v)[1];
            b.graph.data(v).chunks(d).map(|r| r.iter().map(|x| x * c).collect()).collect()
        };
        let bundle = ScoreBundle::from_scores(
            rows(dist, 1.0),
            &rows(q2t, self.loss.tau),
            &rows(s2t, self.loss.tau),
            &self.loss,
        )?;
        let correct = bundle
            .predictions()
            .iter()
            .zip(&ep.query_labels)
            .filter(|(p, y)| p == y)
            .count();
        let value = |v: Var| b.graph.data(v)[0];
        Ok(EpisodeOutput {
            losses: LossValues { q2s: value(l_q2s), s2t: value(l_s2t), q2t: value(l_q2t), total: value(total) },
            total: ep.query_labels.len(),
            bundle,
            grads,
            correct,
        })
    }
}
