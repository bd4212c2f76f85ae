//! Frozen vision transformer with temporal, multimodal / spatiotemporal and
//! joint adapters, plus the frozen text provider and its trainable
//! projection into the visual width.
//!
//! One adapted layer, for a batch of videos laid out as `[B*T, tokens, D]`:
//!
//! 1. `x_ta = cls + A_t(MSA(LN1(cls)))`, attention over the `T` frames of
//!    each video.
//! 2. `z' = z + MSA(LN1(z))`, the frozen per-frame attention.
//! 3. `c = [z'; x_ta; text]` (support) or `[z'; x_ta]` (query), then
//!    `c' = c + A_s(MSA(LN1(c)))`.
//! 4. `s = c'[.., :N+1]` and `z_out = s + MLP(LN2(s)) + r * A_j(LN2(s))`.
//!
//! `A_t` and `A_s` carry no internal skip and all up-projections start at
//! zero, so an untrained stack reproduces the frozen backbone exactly. The
//! same attention weights serve steps 1 to 3.

pub mod layers;
pub mod text;

use crate::data::{DatasetManifest, EpisodeVideo};
use crate::error::{Error, Result};
use crate::tensor::{Binder, ParamGroup, ParamId, TokenTensor, Var};

pub use layers::{
    AdapterParams, AttentionParams, Blueprint, InitKind, LinearParams, MlpParams, NormParams,
    ParamSpec,
};
pub use text::{averaged_embedding, template_embedding, TextEmbedding, TextProvider, TEMPLATES};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_tokens: usize,
    pub patch_dim: usize,
    pub frames: usize,
    pub text_dim: usize,
    /// Attention heads of the prototype module, which runs at `text_dim`.
    pub tpcm_heads: usize,
    pub adapter_ratio: f64,
    pub joint_scale_r: f64,
    /// Whether the joint adapter keeps its internal skip connection.
    pub joint_skip: bool,
    /// Whether the output projection to the joint width is trainable.
    pub train_projection: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 32,
            heads: 4,
            patch_tokens: 4,
            patch_dim: 16,
            frames: 4,
            text_dim: 16,
            tpcm_heads: 4,
            adapter_ratio: 0.25,
            joint_scale_r: 0.5,
            joint_skip: false,
            train_projection: false,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// ViT-B/32 at 224px: 49 patches of 32x32x3, 12 layers of width 768.
    pub fn vit_b32() -> Self {
        Self {
            layers: 12,
            dim: 768,
            heads: 12,
            patch_tokens: 49,
            patch_dim: 3 * 32 * 32,
            frames: 8,
            text_dim: 512,
            tpcm_heads: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.dim == 0 || self.text_dim == 0 || self.patch_dim == 0 {
            return fail("layers, dim, text_dim and patch_dim must be >= 1".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.tpcm_heads == 0 || !self.text_dim.is_multiple_of(self.tpcm_heads) {
            return fail(format!("text_dim {} not divisible by tpcm_heads {}", self.text_dim, self.tpcm_heads));
        }
        if self.patch_tokens == 0 {
            return fail("patch_tokens must be >= 1".into());
        }
        if self.frames < 2 {
            return fail(format!("frames must be >= 2, got {}", self.frames));
        }
        if !(self.adapter_ratio > 0.0 && self.adapter_ratio < 1.0) || self.bottleneck() == 0 {
            return fail(format!("adapter_ratio {} gives an empty bottleneck", self.adapter_ratio));
        }
        if !self.joint_scale_r.is_finite() {
            return fail("joint_scale_r must be finite".into());
        }
        Ok(())
    }

    /// Adapter hidden width `floor(ratio * dim)`.
    pub fn bottleneck(&self) -> usize {
        (self.adapter_ratio * self.dim as f64).floor() as usize
    }
}

/// Frozen weights of one transformer block plus its three adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub ln1: NormParams,
    pub attn: AttentionParams,
    pub ln2: NormParams,
    pub mlp: MlpParams,
    pub temporal: AdapterParams,
    pub multimodal: AdapterParams,
    pub joint: AdapterParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub patch: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub ln_pre: NormParams,
    pub blocks: Vec<BlockParams>,
    pub ln_post: NormParams,
    pub proj: ParamId,
    pub fc_text: LinearParams,
    pub text_map: ParamId,
}

/// Which parts of the adapted stack are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderFlags {
    /// Run the adapters at all; off gives the frozen backbone.
    pub adapt: bool,
    /// Append the projected text token in the support branch.
    pub text_injection: bool,
    /// Keep the text token but hide it from every attention query.
    pub mask_text: bool,
}

impl Default for EncoderFlags {
    fn default() -> Self {
        Self { adapt: true, text_injection: true, mask_text: false }
    }
}

/// Intermediate results of one frozen block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub msa: Var,
    pub after_msa: Var,
    pub mlp: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: BackboneConfig,
    pub params: EncoderParams,
}

impl Encoder {
    /// Declares every encoder parameter in `bp`.
    pub fn declare(cfg: &BackboneConfig, bp: &mut Blueprint) -> Result<Self> {
        cfg.validate()?;
        let (d, n, h) = (cfg.dim, cfg.patch_tokens, cfg.bottleneck());
        let fb = ParamGroup::Backbone;
        let scale = (d as f64).powf(-0.5);
        let patch = bp.declare(
            "visual.patch_embed",
            fb,
            &[cfg.patch_dim, d],
            InitKind::Normal((cfg.patch_dim as f64).powf(-0.5)),
            true,
        );
        let cls = bp.declare("visual.class_embedding", fb, &[d], InitKind::Normal(scale), true);
        let pos = bp.declare("visual.positional_embedding", fb, &[n + 1, d], InitKind::Normal(scale), true);
        let ln_pre = bp.norm("visual.ln_pre", fb, d, true);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("visual.blocks.{l}");
            blocks.push(BlockParams {
                ln1: bp.norm(&format!("{p}.ln_1"), fb, d, true),
                attn: bp.attention(&format!("{p}.attn"), fb, d, cfg.heads, true),
                ln2: bp.norm(&format!("{p}.ln_2"), fb, d, true),
                mlp: bp.mlp(&format!("{p}.mlp"), fb, d, 4 * d, true),
                temporal: bp.adapter(&format!("{p}.adapter_temporal"), d, h, false),
                multimodal: bp.adapter(&format!("{p}.adapter_multimodal"), d, h, false),
                joint: bp.adapter(&format!("{p}.adapter_joint"), d, h, cfg.joint_skip),
            });
        }
        let ln_post = bp.norm("visual.ln_post", fb, d, true);
        let proj = bp.declare(
            "visual.proj",
            ParamGroup::Projection,
            &[d, cfg.text_dim],
            InitKind::Normal(scale),
            !cfg.train_projection,
        );
        let fc_text = bp.linear(
            "fc_text",
            ParamGroup::TextProjection,
            cfg.text_dim,
            d,
            (cfg.text_dim as f64).powf(-0.5),
            false,
        );
        let text_map = bp.declare(
            "text.latent_map",
            ParamGroup::TextEncoder,
            &[crate::data::LATENT_DIM, cfg.text_dim],
            InitKind::Normal((crate::data::LATENT_DIM as f64).powf(-0.5)),
            true,
        );
        Ok(Self {
            cfg: cfg.clone(),
            params: EncoderParams { patch, cls, pos, ln_pre, blocks, ln_post, proj, fc_text, text_map },
        })
    }

    /// Parameter ids of the attention shared by the temporal, multimodal and
    /// spatiotemporal paths of layer `l`; all three report the same set.
    pub fn temporal_attention_ids(&self, l: usize) -> Vec<ParamId> {
        attention_ids(&self.params.blocks[l].attn)
    }

    pub fn multimodal_attention_ids(&self, l: usize) -> Vec<ParamId> {
        attention_ids(&self.params.blocks[l].attn)
    }

    pub fn spatiotemporal_attention_ids(&self, l: usize) -> Vec<ParamId> {
        attention_ids(&self.params.blocks[l].attn)
    }

    /// Stacks the selected frames of `videos` into `[B*T, N, patch_dim]`.
    pub fn gather(&self, manifest: &DatasetManifest, videos: &[&EpisodeVideo]) -> Result<TokenTensor> {
        let grid = manifest
            .grid()
            .ok_or_else(|| Error::Input("empty manifest".into()))?;
        if grid.patches() != self.cfg.patch_tokens || grid.dim != self.cfg.patch_dim {
            return Err(Error::dim(
                "gather",
                &[grid.patches(), grid.dim],
                &[self.cfg.patch_tokens, self.cfg.patch_dim],
            ));
        }
        let t = self.cfg.frames;
        let mut data = Vec::with_capacity(videos.len() * t * grid.frame_len());
        for v in videos {
            if v.frames.len() != t {
                return Err(Error::dim("gather", &[v.frames.len()], &[t]));
            }
            let rec = manifest.record(v.record);
            for &f in &v.frames {
                data.extend(rec.frame(f).iter().map(|&x| f64::from(x)));
            }
        }
        TokenTensor::new(vec![videos.len() * t, grid.patches(), grid.dim], data)
    }

    /// `[B*T, N, P] -> [B*T, N+1, D]`: projected patches after a prepended
    /// class token, plus the position encoding shared by all frames.
    pub fn patch_embed(&self, b: &mut Binder, patches: Var) -> Result<Var> {
        let s = b.graph.shape(patches).to_vec();
        if s.len() != 3 || s[1] != self.cfg.patch_tokens || s[2] != self.cfg.patch_dim {
            return Err(Error::dim(
                "patch_embed",
                &s,
                &[s.first().copied().unwrap_or(0), self.cfg.patch_tokens, self.cfg.patch_dim],
            ));
        }
        let (bt, d) = (s[0], self.cfg.dim);
        let w = b.get(self.params.patch);
        let x = b.graph.matmul(patches, w)?;
        let cls = b.get(self.params.cls);
        let cls = b.graph.reshape(cls, &[1, 1, d])?;
        let cls = b.graph.repeat(cls, 0, bt)?;
        let x = b.graph.concat(&[cls, x], 1)?;
        let pos = b.get(self.params.pos);
        let pos = b.graph.reshape(pos, &[1, self.cfg.patch_tokens + 1, d])?;
        let pos = b.graph.repeat(pos, 0, bt)?;
        b.graph.add(x, pos)
    }

    /// Frozen block `l` on `[B*T, N+1, D]` tokens.
    pub fn frozen_block(&self, b: &mut Binder, z: Var, l: usize) -> Result<BlockTrace> {
        let p = self.params.blocks[l];
        let h = layers::norm(b, z, p.ln1)?;
        let msa = layers::self_attention(b, h, p.attn, None)?;
        let after_msa = b.graph.add(z, msa)?;
        let h = layers::norm(b, after_msa, p.ln2)?;
        let mlp = layers::mlp(b, h, p.mlp)?;
        let out = b.graph.add(after_msa, mlp)?;
        Ok(BlockTrace { msa, after_msa, mlp, out })
    }

    /// Temporal adaptation of the class tokens of `z` (`[B*T, L, D]`),
    /// returned as `[B*T, 1, D]`.
    pub fn temporal_adapt(&self, b: &mut Binder, z: Var, l: usize) -> Result<Var> {
        let (t, d) = (self.cfg.frames, self.cfg.dim);
        if t < 2 {
            return Err(Error::contract("temporal_adapt", "needs at least two frames"));
        }
        let bt = b.graph.shape(z)[0];
        if !bt.is_multiple_of(t) {
            return Err(Error::dim("temporal_adapt", &[bt], &[t]));
        }
        let p = self.params.blocks[l];
        let cls = b.graph.slice(z, 1, 0, 1)?;
        let cls = b.graph.reshape(cls, &[bt / t, t, d])?;
        let h = layers::norm(b, cls, p.ln1)?;
        let h = layers::self_attention(b, h, p.attn, None)?;
        let h = layers::adapter(b, h, p.temporal)?;
        let out = b.graph.add(cls, h)?;
        b.graph.reshape(out, &[bt, 1, d])
    }

    /// `[B, D'] -> [B*T, 1, D]`: shared text projection repeated per frame.
    pub fn project_text(&self, b: &mut Binder, text: Var) -> Result<Var> {
        let s = b.graph.shape(text).to_vec();
        if s.len() != 2 || s[1] != self.cfg.text_dim {
            return Err(Error::dim("project_text", &s, &[s.first().copied().unwrap_or(0), self.cfg.text_dim]));
        }
        let (n, t, d) = (s[0], self.cfg.frames, self.cfg.dim);
        let y = layers::linear(b, text, self.params.fc_text)?;
        let y = b.graph.reshape(y, &[n, 1, d])?;
        let y = b.graph.repeat(y, 1, t)?;
        b.graph.reshape(y, &[n * t, 1, d])
    }

    fn adapt_tokens(&self, b: &mut Binder, parts: &[Var], l: usize, hide_last: bool) -> Result<Var> {
        let rows = b.graph.shape(parts[0])[0];
        for &p in parts {
            let s = b.graph.shape(p);
            if s.len() != 3 || s[0] != rows || s[2] != self.cfg.dim {
                return Err(Error::dim("adapt", b.graph.shape(parts[0]), s));
            }
        }
        let c = b.graph.concat(parts, 1)?;
        let len = b.graph.shape(c)[1];
        let p = self.params.blocks[l];
        let mask = if hide_last {
            let m = layers::key_mask(rows * p.attn.heads, len, |k| k + 1 == len);
            Some(b.graph.constant(m))
        } else {
            None
        };
        let h = layers::norm(b, c, p.ln1)?;
        let h = layers::self_attention(b, h, p.attn, mask)?;
        let h = layers::adapter(b, h, p.multimodal)?;
        b.graph.add(c, h)
    }

    /// Support-branch adaptation over `[z; x_ta; text]`, `[B*T, N+3, D]`.
    pub fn multimodal_adapt_support(&self, b: &mut Binder, z: Var, x_ta: Var, text: Var, l: usize, mask_text: bool) -> Result<Var> {
        self.adapt_tokens(b, &[z, x_ta, text], l, mask_text)
    }

    /// Query-branch adaptation over `[z; x_ta]`, `[B*T, N+2, D]`.
    pub fn spatiotemporal_adapt_query(&self, b: &mut Binder, z: Var, x_ta: Var, l: usize) -> Result<Var> {
        self.adapt_tokens(b, &[z, x_ta], l, false)
    }

    /// Keeps the first `N+1` tokens and applies the frozen MLP with the
    /// scaled parallel adapter.
    pub fn joint_adapt(&self, b: &mut Binder, c: Var, l: usize) -> Result<Var> {
        let p = self.params.blocks[l];
        let s = b.graph.slice(c, 1, 0, self.cfg.patch_tokens + 1)?;
        let h = layers::norm(b, s, p.ln2)?;
        let m = layers::mlp(b, h, p.mlp)?;
        let out = b.graph.add(s, m)?;
        if self.cfg.joint_scale_r == 0.0 {
            return Ok(out);
        }
        let a = layers::adapter(b, h, p.joint)?;
        let a = b.graph.scale(a, self.cfg.joint_scale_r);
        b.graph.add(out, a)
    }

    /// One adapted layer; `text` is the projected `[B*T, 1, D]` token for
    /// the support branch.
    pub fn adapted_block(&self, b: &mut Binder, z: Var, l: usize, text: Option<Var>, mask_text: bool) -> Result<Var> {
        let x_ta = self.temporal_adapt(b, z, l)?;
        let p = self.params.blocks[l];
        let h = layers::norm(b, z, p.ln1)?;
        let msa = layers::self_attention(b, h, p.attn, None)?;
        let zs = b.graph.add(z, msa)?;
        let c = match text {
            Some(t) => self.multimodal_adapt_support(b, zs, x_ta, t, l, mask_text)?,
            None => self.spatiotemporal_adapt_query(b, zs, x_ta, l)?,
        };
        self.joint_adapt(b, c, l)
    }

    /// Final class tokens through `ln_post` and the output projection:
    /// `[B*T, L, D] -> [B, T, D']`.
    pub fn pool(&self, b: &mut Binder, z: Var) -> Result<Var> {
        let bt = b.graph.shape(z)[0];
        let (t, d) = (self.cfg.frames, self.cfg.dim);
        let cls = b.graph.slice(z, 1, 0, 1)?;
        let cls = b.graph.reshape(cls, &[bt, d])?;
        let h = layers::norm(b, cls, self.params.ln_post)?;
        let proj = b.get(self.params.proj);
        let y = b.graph.matmul(h, proj)?;
        b.graph.reshape(y, &[bt / t, t, self.cfg.text_dim])
    }

    /// Full stack. `text` (`[B, D']`) selects the support branch.
    pub fn encode(&self, b: &mut Binder, patches: Var, text: Option<Var>, flags: EncoderFlags) -> Result<Var> {
        let x = self.patch_embed(b, patches)?;
        let mut z = layers::norm(b, x, self.params.ln_pre)?;
        let text_tok = match text {
            Some(t) if flags.adapt && flags.text_injection => Some(self.project_text(b, t)?),
            _ => None,
        };
        for l in 0..self.cfg.layers {
            z = if flags.adapt {
                self.adapted_block(b, z, l, text_tok, flags.mask_text)?
            } else {
                self.frozen_block(b, z, l)?.out
            };
        }
        self.pool(b, z)
    }

    pub fn encode_support(&self, b: &mut Binder, patches: Var, text: Var, flags: EncoderFlags) -> Result<Var> {
        self.encode(b, patches, Some(text), flags)
    }

    pub fn encode_query(&self, b: &mut Binder, patches: Var, flags: EncoderFlags) -> Result<Var> {
        self.encode(b, patches, None, flags)
    }

    /// The frozen backbone alone.
    pub fn encode_frozen(&self, b: &mut Binder, patches: Var) -> Result<Var> {
        let flags = EncoderFlags { adapt: false, ..EncoderFlags::default() };
        self.encode(b, patches, None, flags)
    }
}

fn attention_ids(a: &AttentionParams) -> Vec<ParamId> {
    vec![a.in_proj.weight, a.in_proj.bias, a.out_proj.weight, a.out_proj.bias]
}

#[cfg(test)]
mod tests;
