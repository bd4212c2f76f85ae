//! Graph-level building blocks shared by the encoder and the prototype
//! module.

use crate::error::Result;
use crate::tensor::{Binder, ParamGroup, ParamId, ParamRegistry, TokenTensor, Var};
use rand::Rng;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Additive logit used to switch off attention keys.
pub(crate) const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Fused-projection multi-head attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub in_proj: LinearParams,
    pub out_proj: LinearParams,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpParams {
    pub fc: LinearParams,
    pub proj: LinearParams,
}

/// Bottleneck adapter: `up(gelu(down(x)))`, plus `x` when `has_skip`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterParams {
    pub down: LinearParams,
    pub up: LinearParams,
    pub hidden: usize,
    pub has_skip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    Normal(f64),
    Zeros,
    Ones,
}

/// Declared parameter: materialised later, counted without allocation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub init: InitKind,
    pub frozen: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of parameter declarations. Ids are positions, so the
/// registry built by [`Blueprint::materialize`] honours them.
#[derive(Clone, Debug, Default)]
pub struct Blueprint {
    specs: Vec<ParamSpec>,
}

impl Blueprint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn declare(&mut self, name: &str, group: ParamGroup, shape: &[usize], init: InitKind, frozen: bool) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
            init,
            frozen,
        });
        ParamId(self.specs.len() - 1)
    }

    /// Draws initial values in declaration order.
    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamRegistry> {
        let mut reg = ParamRegistry::new();
        for s in &self.specs {
            let t = match s.init {
                InitKind::Normal(std) => TokenTensor::randn(&s.shape, std, rng),
                InitKind::Zeros => TokenTensor::zeros(&s.shape),
                InitKind::Ones => TokenTensor::full(&s.shape, 1.0),
            };
            reg.register(s.name.clone(), s.group, t, s.frozen)?;
        }
        Ok(reg)
    }

    pub fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, std: f64, frozen: bool) -> LinearParams {
        LinearParams {
            weight: self.declare(&format!("{name}.weight"), group, &[fan_in, fan_out], InitKind::Normal(std), frozen),
            bias: self.declare(&format!("{name}.bias"), group, &[fan_out], InitKind::Zeros, frozen),
        }
    }

    pub fn zero_linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, frozen: bool) -> LinearParams {
        LinearParams {
            weight: self.declare(&format!("{name}.weight"), group, &[fan_in, fan_out], InitKind::Zeros, frozen),
            bias: self.declare(&format!("{name}.bias"), group, &[fan_out], InitKind::Zeros, frozen),
        }
    }

    pub fn norm(&mut self, name: &str, group: ParamGroup, dim: usize, frozen: bool) -> NormParams {
        NormParams {
            gamma: self.declare(&format!("{name}.gamma"), group, &[dim], InitKind::Ones, frozen),
            beta: self.declare(&format!("{name}.beta"), group, &[dim], InitKind::Zeros, frozen),
        }
    }

    pub fn attention(&mut self, name: &str, group: ParamGroup, dim: usize, heads: usize, frozen: bool) -> AttentionParams {
        let std = (dim as f64).powf(-0.5);
        AttentionParams {
            in_proj: self.linear(&format!("{name}.in_proj"), group, dim, 3 * dim, std, frozen),
            out_proj: self.linear(&format!("{name}.out_proj"), group, dim, dim, std, frozen),
            heads,
        }
    }

    pub fn mlp(&mut self, name: &str, group: ParamGroup, dim: usize, hidden: usize, frozen: bool) -> MlpParams {
        MlpParams {
            fc: self.linear(&format!("{name}.fc"), group, dim, hidden, (dim as f64).powf(-0.5), frozen),
            proj: self.linear(&format!("{name}.proj"), group, hidden, dim, (hidden as f64).powf(-0.5), frozen),
        }
    }

    /// Down-projection random, up-projection zero.
    pub fn adapter(&mut self, name: &str, dim: usize, hidden: usize, has_skip: bool) -> AdapterParams {
        AdapterParams {
            down: self.linear(&format!("{name}.down"), ParamGroup::Adapter, dim, hidden, (dim as f64).powf(-0.5), false),
            up: self.zero_linear(&format!("{name}.up"), ParamGroup::Adapter, hidden, dim, false),
            hidden,
            has_skip,
        }
    }
}

pub(crate) fn linear(b: &mut Binder, x: Var, p: LinearParams) -> Result<Var> {
    let w = b.get(p.weight);
    let bias = b.get(p.bias);
    let y = b.graph.matmul(x, w)?;
    b.graph.add_row(y, bias)
}

pub(crate) fn norm(b: &mut Binder, x: Var, p: NormParams) -> Result<Var> {
    let g = b.get(p.gamma);
    let beta = b.get(p.beta);
    b.graph.layer_norm(x, g, beta, LN_EPS)
}

pub(crate) fn mlp(b: &mut Binder, x: Var, p: MlpParams) -> Result<Var> {
    let h = linear(b, x, p.fc)?;
    let h = b.graph.gelu(h);
    linear(b, h, p.proj)
}

pub(crate) fn adapter(b: &mut Binder, x: Var, p: AdapterParams) -> Result<Var> {
    let h = linear(b, x, p.down)?;
    let h = b.graph.gelu(h);
    let y = linear(b, h, p.up)?;
    if p.has_skip {
        b.graph.add(x, y)
    } else {
        Ok(y)
    }
}

/// Splits `[G, L, D]` projected features into per-head `[G*H, L, dh]`.
fn heads_first(b: &mut Binder, x: Var, g: usize, l: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = b.graph.reshape(x, &[g, l, heads, dh])?;
    let x = b.graph.permute(x, &[0, 2, 1, 3])?;
    b.graph.reshape(x, &[g * heads, l, dh])
}

/// Attention of `q_in` (`[G, Lq, D]`) over `kv_in` (`[G, Lk, D]`) with the
/// fused projection split as q | k | v. `mask`, when given, is an additive
/// `[G*H, Lq, Lk]` logit offset. Returns the output and the attention
/// weights.
pub(crate) fn attention(
    b: &mut Binder,
    q_in: Var,
    kv_in: Var,
    p: AttentionParams,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let (sq, sk) = (b.graph.shape(q_in).to_vec(), b.graph.shape(kv_in).to_vec());
    let (g, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    let heads = p.heads;
    let dh = d / heads;
    let w = b.get(p.in_proj.weight);
    let bias = b.get(p.in_proj.bias);
    let proj = |b: &mut Binder, x: Var, part: usize| -> Result<Var> {
        let wp = b.graph.slice(w, 1, part * d, d)?;
        let bp = b.graph.slice(bias, 0, part * d, d)?;
        let y = b.graph.matmul(x, wp)?;
        b.graph.add_row(y, bp)
    };
    let q = proj(b, q_in, 0)?;
    let k = proj(b, kv_in, 1)?;
    let v = proj(b, kv_in, 2)?;
    let q = heads_first(b, q, g, lq, heads, dh)?;
    let k = heads_first(b, k, g, lk, heads, dh)?;
    let v = heads_first(b, v, g, lk, heads, dh)?;
    let scores = b.graph.bmm(q, k, true)?;
    let mut scores = b.graph.scale(scores, (dh as f64).powf(-0.5));
    if let Some(m) = mask {
        scores = b.graph.add(scores, m)?;
    }
    let att = b.graph.softmax(scores, 2)?;
    let ctx = b.graph.bmm(att, v, false)?;
    let ctx = b.graph.reshape(ctx, &[g, heads, lq, dh])?;
    let ctx = b.graph.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = b.graph.reshape(ctx, &[g, lq, d])?;
    Ok((linear(b, ctx, p.out_proj)?, att))
}

/// Self-attention shorthand.
pub(crate) fn self_attention(b: &mut Binder, x: Var, p: AttentionParams, mask: Option<Var>) -> Result<Var> {
    Ok(attention(b, x, x, p, mask)?.0)
}

/// `[G*H, L, L]` additive mask that hides key positions where `hide` holds.
pub(crate) fn key_mask(groups: usize, len: usize, hide: impl Fn(usize) -> bool) -> TokenTensor {
    let mut data = Vec::with_capacity(groups * len * len);
    for _ in 0..groups * len {
        data.extend((0..len).map(|k| if hide(k) { MASKED } else { 0.0 }));
    }
    TokenTensor::new(vec![groups, len, len], data).expect("mask shape")
}
