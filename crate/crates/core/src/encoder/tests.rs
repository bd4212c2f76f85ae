use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{synth_dataset, SampleMode, SynthConfig};
use crate::tensor::ParamRegistry;

fn build(cfg: &BackboneConfig) -> (Encoder, ParamRegistry) {
    let mut bp = Blueprint::new();
    let enc = Encoder::declare(cfg, &mut bp).unwrap();
    let reg = bp.materialize(&mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    (enc, reg)
}

fn fill_random(reg: &mut ParamRegistry, ids: &[ParamId], std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &id in ids {
        for x in reg.tensor_mut(id).data_mut() {
            *x = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

fn zero(reg: &mut ParamRegistry, ids: &[ParamId]) {
    for &id in ids {
        reg.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

fn adapter_ids(a: &AdapterParams) -> Vec<ParamId> {
    vec![a.down.weight, a.down.bias, a.up.weight, a.up.bias]
}

fn all_adapter_ids(enc: &Encoder) -> Vec<ParamId> {
    enc.params
        .blocks
        .iter()
        .flat_map(|b| [adapter_ids(&b.temporal), adapter_ids(&b.multimodal), adapter_ids(&b.joint)].concat())
        .collect()
}

fn random_input(shape: &[usize], seed: u64) -> TokenTensor {
    TokenTensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

// ---- independent plain-Vec transformer used as an oracle ----------------

struct Plain<'a> {
    reg: &'a ParamRegistry,
}

impl Plain<'_> {
    fn t(&self, id: ParamId) -> &[f64] {
        self.reg.tensor(id).data()
    }

    fn ln(&self, x: &[f64], p: NormParams) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        let (g, b) = (self.t(p.gamma), self.t(p.beta));
        x.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
    }

    fn lin(&self, x: &[f64], p: LinearParams) -> Vec<f64> {
        let (w, b) = (self.t(p.weight), self.t(p.bias));
        let out = b.len();
        (0..out)
            .map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn mlp(&self, x: &[f64], p: MlpParams) -> Vec<f64> {
        let h: Vec<f64> = self.lin(x, p.fc).into_iter().map(Self::gelu).collect();
        self.lin(&h, p.proj)
    }

    fn adapter(&self, x: &[f64], p: AdapterParams) -> Vec<f64> {
        let h: Vec<f64> = self.lin(x, p.down).into_iter().map(Self::gelu).collect();
        let y = self.lin(&h, p.up);
        if p.has_skip {
            x.iter().zip(&y).map(|(a, b)| a + b).collect()
        } else {
            y
        }
    }

    /// Self-attention over a token list; `hidden` keys are skipped.
    fn attn(&self, xs: &[Vec<f64>], p: AttentionParams, hidden: Option<usize>) -> Vec<Vec<f64>> {
        let d = xs[0].len();
        let dh = d / p.heads;
        let qkv: Vec<Vec<f64>> = xs.iter().map(|x| self.lin(x, p.in_proj)).collect();
        let mut out = vec![vec![0.0; d]; xs.len()];
        for h in 0..p.heads {
            for (i, oi) in out.iter_mut().enumerate() {
                let q = &qkv[i][h * dh..(h + 1) * dh];
                let keys: Vec<usize> = (0..xs.len()).filter(|&j| Some(j) != hidden).collect();
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        let k = &qkv[j][d + h * dh..d + (h + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(&keys) {
                    let v = &qkv[j][2 * d + h * dh..2 * d + (h + 1) * dh];
                    for c in 0..dh {
                        oi[h * dh + c] += w / s * v[c];
                    }
                }
            }
        }
        out.iter().map(|o| self.lin(o, p.out_proj)).collect()
    }

    fn block(&self, xs: &[Vec<f64>], p: BlockParams) -> Vec<Vec<f64>> {
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| self.ln(x, p.ln1)).collect();
        let a = self.attn(&normed, p.attn, None);
        xs.iter()
            .zip(&a)
            .map(|(x, a)| {
                let y: Vec<f64> = x.iter().zip(a).map(|(u, v)| u + v).collect();
                let m = self.mlp(&self.ln(&y, p.ln2), p.mlp);
                y.iter().zip(&m).map(|(u, v)| u + v).collect()
            })
            .collect()
    }
}

fn tokens(t: &TokenTensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    let (a, l, d) = (s[0], s[1], s[2]);
    (0..a)
        .map(|i| (0..l).map(|j| t.data()[(i * l + j) * d..(i * l + j + 1) * d].to_vec()).collect())
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

// ---- patch embedding ----------------------------------------------------

#[test]
fn patch_embed_is_linear_plus_position() {
    let cfg = BackboneConfig::default();
    let (enc, mut reg) = build(&cfg);
    let (n, p, d) = (cfg.patch_tokens, cfg.patch_dim, cfg.dim);
    let input = random_input(&[3, n, p], 1);

    // zero everything -> zero tokens
    let mut zeroed = reg.clone();
    zero(&mut zeroed, &[enc.params.patch, enc.params.cls, enc.params.pos]);
    let mut b = Binder::new(&zeroed);
    let x = b.graph.constant(TokenTensor::zeros(&[3, n, p]));
    let out = enc.patch_embed(&mut b, x).unwrap();
    assert!(b.graph.data(out).iter().all(|&v| v == 0.0));

    // loop oracle: token 0 = cls + pos0, token j = E^T x_j + pos_j
    fill_random(&mut reg, &[enc.params.pos], 0.5, 9);
    let mut b = Binder::new(&reg);
    let x = b.graph.constant(input.clone());
    let out = enc.patch_embed(&mut b, x).unwrap();
    let got = tokens(b.graph.value(out));
    let (w, cls, pos) = (
        reg.tensor(enc.params.patch).data(),
        reg.tensor(enc.params.cls).data(),
        reg.tensor(enc.params.pos).data(),
    );
    for (f, frame) in got.iter().enumerate() {
        for k in 0..d {
            assert!((frame[0][k] - (cls[k] + pos[k])).abs() < 1e-12);
        }
        for j in 0..n {
            for k in 0..d {
                let mut e = pos[(j + 1) * d + k];
                for i in 0..p {
                    e += input.data()[(f * n + j) * p + i] * w[i * d + k];
                }
                assert!((frame[j + 1][k] - e).abs() < 1e-12);
            }
        }
    }

    // additive position: output minus the zero-position output equals e_pos
    let mut nopos = reg.clone();
    zero(&mut nopos, &[enc.params.pos]);
    let mut b2 = Binder::new(&nopos);
    let x2 = b2.graph.constant(input);
    let out2 = enc.patch_embed(&mut b2, x2).unwrap();
    let diff: Vec<f64> = b.graph.data(out).iter().zip(b2.graph.data(out2)).map(|(a, c)| a - c).collect();
    for f in 0..3 {
        close(&diff[f * (n + 1) * d..(f + 1) * (n + 1) * d], pos, 1e-12);
    }
}

#[test]
fn patch_embed_rejects_wrong_grid() {
    let cfg = BackboneConfig::default();
    let (enc, reg) = build(&cfg);
    let mut b = Binder::new(&reg);
    let x = b.graph.constant(TokenTensor::zeros(&[2, cfg.patch_tokens + 1, cfg.patch_dim]));
    assert!(matches!(enc.patch_embed(&mut b, x), Err(Error::Dimension { .. })));
}

// ---- frozen block -------------------------------------------------------

#[test]
fn frozen_block_zero_weights_is_identity() {
    let cfg = BackboneConfig::default();
    let (enc, mut reg) = build(&cfg);
    let blk = enc.params.blocks[0];
    zero(&mut reg, &[blk.attn.out_proj.weight, blk.attn.out_proj.bias, blk.mlp.proj.weight, blk.mlp.proj.bias]);
    let mut b = Binder::new(&reg);
    let z = b.graph.constant(random_input(&[2, 5, cfg.dim], 2));
    let tr = enc.frozen_block(&mut b, z, 0).unwrap();
    assert_eq!(b.graph.data(tr.out), b.graph.data(z));
}

#[test]
fn single_head_two_token_attention_by_hand() {
    // D = 2, one head, identity projections: weights = softmax(x x^T / sqrt 2).
    let cfg = BackboneConfig { dim: 2, heads: 1, patch_tokens: 1, adapter_ratio: 0.5, ..BackboneConfig::default() };
    let (enc, mut reg) = build(&cfg);
    let a = enc.params.blocks[0].attn;
    let eye3 = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    reg.tensor_mut(a.in_proj.weight).data_mut().copy_from_slice(&eye3);
    reg.tensor_mut(a.out_proj.weight).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let x = TokenTensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let mut b = Binder::new(&reg);
    let xv = b.graph.constant(x);
    let (out, att) = layers::attention(&mut b, xv, xv, a, None).unwrap();
    let s = 2f64.sqrt();
    // token 0 logits [1/s, 0]; token 1 logits [0, 4/s]
    let w0 = 1.0 / (1.0 + (-1.0 / s).exp());
    let w1 = 1.0 / (1.0 + (-4.0 / s).exp());
    close(b.graph.data(att), &[w0, 1.0 - w0, 1.0 - w1, w1], 1e-12);
    let expect = [w0, 2.0 * (1.0 - w0), 1.0 - w1, 2.0 * w1];
    close(b.graph.data(out), &expect, 1e-9);
}

#[test]
fn frozen_block_matches_plain_transformer() {
    let cfg = BackboneConfig::default();
    let (enc, mut reg) = build(&cfg);
    let blk = enc.params.blocks[1];
    fill_random(&mut reg, &[blk.ln1.beta, blk.ln2.beta, blk.attn.in_proj.bias, blk.mlp.fc.bias], 0.1, 4);
    let input = random_input(&[3, cfg.patch_tokens + 1, cfg.dim], 3);
    let mut b = Binder::new(&reg);
    let z = b.graph.constant(input.clone());
    let out = enc.frozen_block(&mut b, z, 1).unwrap().out;
    let oracle = Plain { reg: &reg };
    for (frame, got) in tokens(&input).iter().zip(tokens(b.graph.value(out))) {
        let want = oracle.block(frame, blk);
        for (w, g) in want.iter().zip(&got) {
            close(g, w, 1e-12);
        }
    }
}

// ---- temporal adaptation ------------------------------------------------

#[test]
fn temporal_adapt_identity_and_oracle() {
    let cfg = BackboneConfig::default();
    let (enc, mut reg) = build(&cfg);
    let (t, d, len) = (cfg.frames, cfg.dim, cfg.patch_tokens + 1);
    let input = random_input(&[2 * t, len, d], 5);
    {
        let mut b = Binder::new(&reg);
        let z = b.graph.constant(input.clone());
        let out = enc.temporal_adapt(&mut b, z, 0).unwrap();
        let cls: Vec<f64> = tokens(&input).iter().flat_map(|f| f[0].clone()).collect();
        assert_eq!(b.graph.data(out), &cls[..]);
    }
    let blk = enc.params.blocks[0];
    fill_random(&mut reg, &adapter_ids(&blk.temporal), 0.3, 6);
    let mut b = Binder::new(&reg);
    let z = b.graph.constant(input.clone());
    let out = enc.temporal_adapt(&mut b, z, 0).unwrap();
    let got = b.graph.data(out).to_vec();
    let oracle = Plain { reg: &reg };
    let frames = tokens(&input);
    for v in 0..2 {
        let cls: Vec<Vec<f64>> = (0..t).map(|i| frames[v * t + i][0].clone()).collect();
        let normed: Vec<Vec<f64>> = cls.iter().map(|x| oracle.ln(x, blk.ln1)).collect();
        let att = oracle.attn(&normed, blk.attn, None);
        for i in 0..t {
            let a = oracle.adapter(&att[i], blk.temporal);
            let want: Vec<f64> = cls[i].iter().zip(&a).map(|(x, y)| x + y).collect();
            close(&got[(v * t + i) * d..(v * t + i + 1) * d], &want, 1e-12);
        }
    }
}

#[test]
fn temporal_attention_uniform_for_identical_frames() {
    let cfg = BackboneConfig { frames: 2, ..BackboneConfig::default() };
    let (enc, reg) = build(&cfg);
    let frame = random_input(&[1, 1, cfg.dim], 7);
    let mut data = frame.data().to_vec();
    data.extend_from_slice(frame.data());
    let mut b = Binder::new(&reg);
    let x = b.graph.constant(TokenTensor::new(vec![1, 2, cfg.dim], data).unwrap());
    let blk = enc.params.blocks[0];
    let h = layers::norm(&mut b, x, blk.ln1).unwrap();
    let (_, att) = layers::attention(&mut b, h, h, blk.attn, None).unwrap();
    assert!(b.graph.data(att).iter().all(|&w| (w - 0.5).abs() < 1e-15));
}

#[test]
fn single_frame_config_is_rejected() {
    let cfg = BackboneConfig { frames: 1, ..BackboneConfig::default() };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

// ---- text projection ----------------------------------------------------

#[test]
fn project_text_repeats_a_single_product() {
    let cfg = BackboneConfig::default();
    let (enc, mut reg) = build(&cfg);
    fill_random(&mut reg, &[enc.params.fc_text.bias], 0.2, 8);
    let text = random_input(&[2, cfg.text_dim], 9);
    let mut b = Binder::new(&reg);
    let tv = b.graph.constant(text.clone());
    let out = enc.project_text(&mut b, tv).unwrap();
    assert_eq!(b.graph.shape(out), &[2 * cfg.frames, 1, cfg.dim]);
    let oracle = Plain { reg: &reg };
    let d = cfg.dim;
    for v in 0..2 {
        let want = oracle.lin(text.row(v), enc.params.fc_text);
        for f in 0..cfg.frames {
            let at = (v * cfg.frames + f) * d;
            close(&b.graph.data(out)[at..at + d], &want, 1e-12);
        }
    }
    zero(&mut reg, &[enc.params.fc_text.bias]);
    let mut b = Binder::new(&reg);
    let tv = b.graph.constant(TokenTensor::zeros(&[1, cfg.text_dim]));
    let out = enc.project_text(&mut b, tv).unwrap();
    assert!(b.graph.data(out).iter().all(|&x| x == 0.0));
}

// ---- multimodal / spatiotemporal adaptation -----------------------------

fn branch_inputs(b: &mut Binder, cfg: &BackboneConfig, rows: usize) -> (Var, Var, Var) {
    let z = b.graph.constant(random_input(&[rows, cfg.patch_tokens + 1, cfg.dim], 10));
    let x = b.graph.constant(random_input(&[rows, 1, cfg.dim], 11));
    let t = b.graph.constant(random_input(&[rows, 1, cfg.dim], 12));
    (z, x, t)
}

#[test]
fn adaptation_token_counts_and_identity() {
    let cfg = BackboneConfig::default();
    let (enc, reg) = build(&cfg);
    let n = cfg.patch_tokens;
    let mut b = Binder::new(&reg);
    let (z, x, t) = branch_inputs(&mut b, &cfg, 4);
    let s = enc.multimodal_adapt_support(&mut b, z, x, t, 0, false).unwrap();
    assert_eq!(b.graph.shape(s)[1], n + 3);
    let c = b.graph.concat(&[z, x, t], 1).unwrap();
    assert_eq!(b.graph.data(s), b.graph.data(c));
    let q = enc.spatiotemporal_adapt_query(&mut b, z, x, 0).unwrap();
    assert_eq!(b.graph.shape(q)[1], n + 2);
    let c = b.graph.concat(&[z, x], 1).unwrap();
    assert_eq!(b.graph.data(q), b.graph.data(c));
    let j = enc.joint_adapt(&mut b, s, 0).unwrap();
    assert_eq!(b.graph.shape(j)[1], n + 1);
    let j = enc.joint_adapt(&mut b, q, 0).unwrap();
    assert_eq!(b.graph.shape(j)[1], n + 1);
}

#[test]
fn adaptation_rejects_token_axis_mismatch() {
    let cfg = BackboneConfig::default();
    let (enc, reg) = build(&cfg);
    let mut b = Binder::new(&reg);
    let (z, _, t) = branch_inputs(&mut b, &cfg, 4);
    let x = b.graph.constant(TokenTensor::zeros(&[3, 1, cfg.dim]));
    assert!(matches!(
        enc.multimodal_adapt_support(&mut b, z, x, t, 0, false),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn identical_tokens_receive_equal_attention() {
    let cfg = BackboneConfig::default();
    let (enc, reg) = build(&cfg);
    let tok = random_input(&[1, 1, cfg.dim], 13);
    let other = random_input(&[1, 1, cfg.dim], 14);
    let data = [other.data(), tok.data(), tok.data()].concat();
    let mut b = Binder::new(&reg);
    let x = b.graph.constant(TokenTensor::new(vec![1, 3, cfg.dim], data).unwrap());
    let blk = enc.params.blocks[0];
    let h = layers::norm(&mut b, x, blk.ln1).unwrap();
    let (_, att) = layers::attention(&mut b, h, h, blk.attn, None).unwrap();
    for row in b.graph.data(att).chunks(3) {
        assert!((row[1] - row[2]).abs() < 1e-15);
    }
}

#[test]
fn masked_text_support_branch_equals_query_branch() {
    let cfg = BackboneConfig::default();
    let (enc, mut reg) = build(&cfg);
    let ids = all_adapter_ids(&enc);
    fill_random(&mut reg, &ids, 0.2, 15);
    let mut b = Binder::new(&reg);
    let patches = b.graph.constant(random_input(&[2 * cfg.frames, cfg.patch_tokens, cfg.patch_dim], 16));
    let text = b.graph.constant(TokenTensor::zeros(&[2, cfg.text_dim]));
    let masked = EncoderFlags { mask_text: true, ..EncoderFlags::default() };
    let s = enc.encode_support(&mut b, patches, text, masked).unwrap();
    let q = enc.encode_query(&mut b, patches, EncoderFlags::default()).unwrap();
    close(b.graph.data(s), b.graph.data(q), 1e-12);

    // the same layer through both branches agrees on the first N+2 tokens
    let (z, x, t) = branch_inputs(&mut b, &cfg, cfg.frames);
    let s = enc.multimodal_adapt_support(&mut b, z, x, t, 0, true).unwrap();
    let q = enc.spatiotemporal_adapt_query(&mut b, z, x, 0).unwrap();
    let s = b.graph.slice(s, 1, 0, cfg.patch_tokens + 2).unwrap();
    close(b.graph.data(s), b.graph.data(q), 1e-12);
}

#[test]
fn attention_is_one_shared_parameter_set() {
    let cfg = BackboneConfig::default();
    let (enc, _) = build(&cfg);
    for l in 0..cfg.layers {
        assert_eq!(enc.temporal_attention_ids(l), enc.multimodal_attention_ids(l));
        assert_eq!(enc.multimodal_attention_ids(l), enc.spatiotemporal_attention_ids(l));
    }
}

#[test]
fn shared_attention_mutation_moves_every_path() {
    let cfg = BackboneConfig::default();
    let (enc, mut reg) = build(&cfg);
    let ids = all_adapter_ids(&enc);
    fill_random(&mut reg, &ids, 0.2, 17);
    let input = random_input(&[cfg.frames, cfg.patch_tokens + 1, cfg.dim], 18);
    let run = |reg: &ParamRegistry| {
        let mut b = Binder::new(reg);
        let z = b.graph.constant(input.clone());
        let (x, t) = (
            b.graph.constant(random_input(&[cfg.frames, 1, cfg.dim], 19)),
            b.graph.constant(random_input(&[cfg.frames, 1, cfg.dim], 20)),
        );
        let ta = enc.temporal_adapt(&mut b, z, 0).unwrap();
        let m = enc.multimodal_adapt_support(&mut b, z, x, t, 0, false).unwrap();
        let q = enc.spatiotemporal_adapt_query(&mut b, z, x, 0).unwrap();
        [ta, m, q].map(|v| b.graph.data(v).to_vec())
    };
    let before = run(&reg);
    reg.tensor_mut(enc.temporal_attention_ids(0)[0]).data_mut()[0] += 0.5;
    let after = run(&reg);
    for (a, c) in before.iter().zip(&after) {
        assert_ne!(a, c);
    }
}

// ---- joint adaptation ---------------------------------------------------

#[test]
fn joint_adapt_endpoints() {
    let cfg = BackboneConfig::default();
    let (enc, mut reg) = build(&cfg);
    let blk = enc.params.blocks[0];
    let input = random_input(&[3, cfg.patch_tokens + 3, cfg.dim], 21);
    let frozen_path = |reg: &ParamRegistry, enc: &Encoder| {
        let mut b = Binder::new(reg);
        let c = b.graph.constant(input.clone());
        let s = b.graph.slice(c, 1, 0, cfg.patch_tokens + 1).unwrap();
        let h = layers::norm(&mut b, s, blk.ln2).unwrap();
        let m = layers::mlp(&mut b, h, blk.mlp).unwrap();
        let out = b.graph.add(s, m).unwrap();
        let j = enc.joint_adapt(&mut b, c, 0).unwrap();
        (b.graph.data(out).to_vec(), b.graph.data(j).to_vec())
    };
    // zero adapter: the frozen MLP sub-result
    let (want, got) = frozen_path(&reg, &enc);
    assert_eq!(want, got);
    // r = 0 with a non-trivial adapter: still the frozen path
    fill_random(&mut reg, &adapter_ids(&blk.joint), 0.3, 22);
    let (want, got) = frozen_path(&reg, &enc);
    assert_ne!(want, got);
    let enc0 = Encoder { cfg: BackboneConfig { joint_scale_r: 0.0, ..cfg.clone() }, params: enc.params.clone() };
    let (want, got) = frozen_path(&reg, &enc0);
    assert_eq!(want, got);
}

// ---- full stack ---------------------------------------------------------

#[test]
fn untrained_stack_reproduces_frozen_backbone() {
    let cfg = BackboneConfig::default();
    let (enc, reg) = build(&cfg);
    let mut b = Binder::new(&reg);
    let patches = b.graph.constant(random_input(&[3 * cfg.frames, cfg.patch_tokens, cfg.patch_dim], 23));
    let text = b.graph.constant(random_input(&[3, cfg.text_dim], 24));
    let f = enc.encode_frozen(&mut b, patches).unwrap();
    let s = enc.encode_support(&mut b, patches, text, EncoderFlags::default()).unwrap();
    let q = enc.encode_query(&mut b, patches, EncoderFlags::default()).unwrap();
    assert_eq!(b.graph.shape(f), &[3, 4, 16]);
    close(b.graph.data(s), b.graph.data(f), 1e-9);
    close(b.graph.data(q), b.graph.data(f), 1e-9);
}

#[test]
fn trained_adapters_make_support_features_text_dependent() {
    let cfg = BackboneConfig::default();
    let (enc, mut reg) = build(&cfg);
    let ids = all_adapter_ids(&enc);
    fill_random(&mut reg, &ids, 0.2, 25);
    let mut b = Binder::new(&reg);
    let patches = b.graph.constant(random_input(&[cfg.frames, cfg.patch_tokens, cfg.patch_dim], 26));
    let t1 = b.graph.constant(random_input(&[1, cfg.text_dim], 27));
    let t2 = b.graph.constant(random_input(&[1, cfg.text_dim], 28));
    let s1 = enc.encode_support(&mut b, patches, t1, EncoderFlags::default()).unwrap();
    let s2 = enc.encode_support(&mut b, patches, t2, EncoderFlags::default()).unwrap();
    let gap: f64 = b.graph.data(s1).iter().zip(b.graph.data(s2)).map(|(x, y)| (x - y) * (x - y)).sum();
    assert!(gap > 0.0);
}

#[test]
fn gather_checks_grid_against_config() {
    let m = synth_dataset(&SynthConfig { classes: 3, videos_per_class: 1, ..SynthConfig::default() }).unwrap();
    let cfg = BackboneConfig { patch_tokens: 9, ..BackboneConfig::default() };
    let (enc, _) = build(&cfg);
    let v = EpisodeVideo { record: 0, frames: vec![0, 2, 4, 6] };
    assert!(matches!(enc.gather(&m, &[&v]), Err(Error::Dimension { .. })));
    let (enc, _) = build(&BackboneConfig::default());
    let t = enc.gather(&m, &[&v, &v]).unwrap();
    assert_eq!(t.shape(), &[8, 4, 16]);
    assert_eq!(t.data()[0], f64::from(m.record(0).frame(0)[0]));
}

// ---- text provider ------------------------------------------------------

fn provider() -> (TextProvider, ParamRegistry) {
    let m = synth_dataset(&SynthConfig { classes: 6, videos_per_class: 1, ..SynthConfig::default() }).unwrap();
    let (enc, reg) = build(&BackboneConfig::default());
    (TextProvider::new(&m, enc.params.text_map), reg)
}

#[test]
fn eval_text_is_mean_of_templates() {
    let (tp, reg) = provider();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = tp.embed_class_text(&reg, 2, SampleMode::Eval, &mut rng).unwrap();
    assert_eq!(e.template, None);
    let seed = crate::data::fnv1a(b"synth0-class0002");
    let mut mean = [0.0; 16];
    for j in 0..TEMPLATES {
        let v = template_embedding(&reg, tp.latent_map(), seed, j);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        mean.iter_mut().zip(&v).for_each(|(m, x)| *m += x / TEMPLATES as f64);
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mean: Vec<f64> = mean.iter().map(|x| x / norm).collect();
    close(&e.vector, &mean, 1e-12);
    assert!(tp.embed_class_text(&reg, 99, SampleMode::Eval, &mut rng).is_err());
}

#[test]
fn template_choice_is_reproducible_and_uniform() {
    let (tp, reg) = provider();
    let draw = |seed: u64, n: usize| -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| tp.embed_class_text(&reg, 1, SampleMode::Train, &mut rng).unwrap().template.unwrap())
            .collect()
    };
    assert_eq!(draw(3, 50), draw(3, 50));
    let picks = draw(4, 18_000);
    let mut counts = [0usize; TEMPLATES];
    picks.iter().for_each(|&j| counts[j] += 1);
    let p = 1.0 / TEMPLATES as f64;
    let sd = (18_000.0 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - 1000.0).abs() < 3.0 * sd, "{c}");
    }
}
