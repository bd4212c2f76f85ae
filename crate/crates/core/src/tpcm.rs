//! Text-guided prototype construction.
//!
//! Support: `q = F_S + Repeat(F_T)`, `kv = [F_S; F_T]`,
//! `F_bar = q + MHA(LN(q), LN(kv))`, `F_tilde = F_bar + MLP(LN(F_bar))`.
//! Queries run the same weights as self-attention over their own frames.

use crate::encoder::layers::{self, AttentionParams, Blueprint, MlpParams, NormParams};
use crate::error::{Error, Result};
use crate::tensor::{Binder, ParamGroup, ParamId, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TpcmParams {
    pub ln1: NormParams,
    pub attn: AttentionParams,
    pub ln2: NormParams,
    pub mlp: MlpParams,
}

#[derive(Clone, Debug)]
pub struct Tpcm {
    pub dim: usize,
    pub params: TpcmParams,
}

/// Enhanced features: `support` is `[M, T, D']` (one prototype per class)
/// and `query` is `[Q, T, D']`.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeSet {
    pub support: Var,
    pub query: Var,
}

impl Tpcm {
    /// Declares the module with `heads` attention heads and a `4 * dim` MLP.
    pub fn declare(dim: usize, heads: usize, bp: &mut Blueprint) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("tpcm dim {dim} not divisible by heads {heads}")));
        }
        let g = ParamGroup::Tpcm;
        Ok(Self {
            dim,
            params: TpcmParams {
                ln1: bp.norm("tpcm.ln_1", g, dim, false),
                attn: bp.attention("tpcm.attn", g, dim, heads, false),
                ln2: bp.norm("tpcm.ln_2", g, dim, false),
                mlp: bp.mlp("tpcm.mlp", g, dim, 4 * dim, false),
            },
        })
    }

    /// Every parameter the module touches, in declaration order. Both
    /// branches report this same list.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let p = &self.params;
        vec![
            p.ln1.gamma,
            p.ln1.beta,
            p.attn.in_proj.weight,
            p.attn.in_proj.bias,
            p.attn.out_proj.weight,
            p.attn.out_proj.bias,
            p.ln2.gamma,
            p.ln2.beta,
            p.mlp.fc.weight,
            p.mlp.fc.bias,
            p.mlp.proj.weight,
            p.mlp.proj.bias,
        ]
    }

    pub fn support_param_ids(&self) -> Vec<ParamId> {
        self.param_ids()
    }

    pub fn query_param_ids(&self) -> Vec<ParamId> {
        self.param_ids()
    }

    fn check(&self, b: &Binder, op: &'static str, x: Var, rank: usize) -> Result<()> {
        let s = b.graph.shape(x);
        if s.len() != rank || s[rank - 1] != self.dim {
            let mut want = s.to_vec();
            if let Some(last) = want.last_mut() {
                *last = self.dim;
            }
            return Err(Error::dim(op, s, &want));
        }
        Ok(())
    }

    fn residual_blocks(&self, b: &mut Binder, q: Var, kv: Var) -> Result<(Var, Var)> {
        let p = self.params;
        let qn = layers::norm(b, q, p.ln1)?;
        let kvn = if q == kv { qn } else { layers::norm(b, kv, p.ln1)? };
        let (a, att) = layers::attention(b, qn, kvn, p.attn, None)?;
        let bar = b.graph.add(q, a)?;
        let h = layers::norm(b, bar, p.ln2)?;
        let f = layers::mlp(b, h, p.mlp)?;
        Ok((b.graph.add(bar, f)?, att))
    }

    /// Cross-attention enhancement of `F_S` (`[B, T, D']`) guided by `F_T`
    /// (`[B, D']`). Also returns the `[B*H, T, T+1]` attention weights.
    pub fn enhance_support_traced(&self, b: &mut Binder, fs: Var, ft: Var) -> Result<(Var, Var)> {
        self.check(b, "enhance_support", fs, 3)?;
        self.check(b, "enhance_support", ft, 2)?;
        let (n, t) = (b.graph.shape(fs)[0], b.graph.shape(fs)[1]);
        if b.graph.shape(ft)[0] != n {
            return Err(Error::dim("enhance_support", b.graph.shape(fs), b.graph.shape(ft)));
        }
        let text = b.graph.reshape(ft, &[n, 1, self.dim])?;
        let rep = b.graph.repeat(text, 1, t)?;
        let q = b.graph.add(fs, rep)?;
        let kv = b.graph.concat(&[fs, text], 1)?;
        self.residual_blocks(b, q, kv)
    }

    pub fn enhance_support(&self, b: &mut Binder, fs: Var, ft: Var) -> Result<Var> {
        Ok(self.enhance_support_traced(b, fs, ft)?.0)
    }

    /// Self-attention enhancement of `F_Q` (`[B, T, D']`).
    pub fn enhance_query_traced(&self, b: &mut Binder, fq: Var) -> Result<(Var, Var)> {
        self.check(b, "enhance_query", fq, 3)?;
        self.residual_blocks(b, fq, fq)
    }

    pub fn enhance_query(&self, b: &mut Binder, fq: Var) -> Result<Var> {
        Ok(self.enhance_query_traced(b, fq)?.0)
    }
}

/// Class prototypes from class-major support features `[M*K, T, D']`:
/// the frame-wise mean over each class's `shot` videos.
pub fn build_prototypes(b: &mut Binder, support: Var, shot: usize) -> Result<Var> {
    if shot == 0 {
        return Err(Error::Input("shot must be >= 1".into()));
    }
    let s = b.graph.shape(support).to_vec();
    if s.len() != 3 || !s[0].is_multiple_of(shot) {
        return Err(Error::dim("build_prototypes", &s, &[shot]));
    }
    if shot == 1 {
        return Ok(support);
    }
    let x = b.graph.reshape(support, &[s[0] / shot, shot, s[1], s[2]])?;
    b.graph.mean_axis(x, 1)
}
