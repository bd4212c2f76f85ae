//! Temporal matching metrics, the text branch and the training objective.
//!
//! Every metric maps query features `[Q, Tq, D]` and prototypes
//! `[M, Ts, D]` to a distance matrix `[Q, M]` on the graph, so the same code
//! path serves training and evaluation.

mod otam;
mod scores;

pub use otam::{otam_brute_force, otam_dp, otam_paths};
pub use scores::{
    combine_losses, cosine_logits, fuse_predictions, kl_loss, smoothed_targets, softmax, LossConfig, ScoreBundle,
};

use crate::error::{Error, Result};
use crate::tensor::{Graph, TokenTensor, Var};

const NORM_EPS: f64 = 1e-12;

/// Knobs shared by the built-in metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricParams {
    /// Soft-min temperature for alignment; 0 gives the hard minimum.
    pub lambda: f64,
    /// Tuple cardinalities for the tuple-matching metric.
    pub omega: Vec<usize>,
    /// Softmax temperature over support tuples.
    pub trx_temperature: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            omega: vec![2],
            trx_temperature: 0.1,
        }
    }
}

pub type PairwiseFn = fn(&mut Graph, Var, Var, &MetricParams) -> Result<Var>;

#[derive(Clone, Copy)]
pub struct MetricDescriptor {
    pub name: &'static str,
    pub differentiable: bool,
    pub pairwise: PairwiseFn,
}

impl std::fmt::Debug for MetricDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricDescriptor")
            .field("name", &self.name)
            .field("differentiable", &self.differentiable)
            .finish()
    }
}

impl MetricDescriptor {
    /// Distance between two plain `[T, D]` sequences.
    pub fn distance(&self, q: &TokenTensor, s: &TokenTensor, params: &MetricParams) -> Result<f64> {
        let mut g = Graph::new();
        let add_batch = |t: &TokenTensor| -> Result<TokenTensor> {
            if t.rank() != 2 {
                return Err(Error::dim("distance", t.shape(), &[0, 0]));
            }
            t.reshaped(&[1, t.shape()[0], t.shape()[1]])
        };
        let qv = g.constant(add_batch(q)?);
        let sv = g.constant(add_batch(s)?);
        let d = (self.pairwise)(&mut g, qv, sv, params)?;
        Ok(g.data(d)[0])
    }
}

/// Name-keyed metric table.
#[derive(Clone, Debug)]
pub struct MetricRegistry {
    entries: Vec<MetricDescriptor>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        for d in [
            MetricDescriptor { name: "otam", differentiable: true, pairwise: otam_pairwise },
            MetricDescriptor { name: "bimhm", differentiable: true, pairwise: bimhm_pairwise },
            MetricDescriptor { name: "trx", differentiable: true, pairwise: trx_pairwise },
        ] {
            r.register(d).expect("built-in names are unique");
        }
        r
    }
}

impl MetricRegistry {
    pub fn register(&mut self, d: MetricDescriptor) -> Result<()> {
        if self.entries.iter().any(|e| e.name == d.name) {
            return Err(Error::Config(format!("metric {:?} registered twice", d.name)));
        }
        self.entries.push(d);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&MetricDescriptor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("unknown metric {name:?}; known: {:?}", self.names())))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MetricDescriptor> {
        self.entries.iter()
    }
}

fn check_pair(g: &Graph, op: &'static str, q: Var, s: Var) -> Result<(usize, usize, usize, usize, usize)> {
    let (sq, ss) = (g.shape(q), g.shape(s));
    if sq.len() != 3 || ss.len() != 3 || sq[2] != ss[2] {
        return Err(Error::dim(op, sq, ss));
    }
    if sq[1] == 0 || ss[1] == 0 {
        return Err(Error::Input(format!("{op}: empty sequence")));
    }
    Ok((sq[0], ss[0], sq[1], ss[1], sq[2]))
}

/// `1 - cos` between every query frame and every prototype frame, laid out
/// `[Q, M, Tq, Ts]`.
pub fn cost_volume(g: &mut Graph, q: Var, s: Var) -> Result<Var> {
    let (nq, nm, tq, ts, d) = check_pair(g, "cost_volume", q, s)?;
    let qn = g.l2_normalize(q, NORM_EPS)?;
    let sn = g.l2_normalize(s, NORM_EPS)?;
    let qf = g.reshape(qn, &[nq * tq, d])?;
    let sf = g.reshape(sn, &[nm * ts, d])?;
    let st = g.permute(sf, &[1, 0])?;
    let sim = g.matmul(qf, st)?;
    let sim = g.reshape(sim, &[nq, tq, nm, ts])?;
    let sim = g.permute(sim, &[0, 2, 1, 3])?;
    let neg = g.neg(sim);
    Ok(g.add_scalar(neg, 1.0))
}

fn otam_pairwise(g: &mut Graph, q: Var, s: Var, p: &MetricParams) -> Result<Var> {
    let (nq, nm, tq, ts, _) = check_pair(g, "otam", q, s)?;
    let cost = cost_volume(g, q, s)?;
    let block = tq * ts;
    let mut values = Vec::with_capacity(nq * nm);
    let mut jac = Vec::with_capacity(nq * nm * block);
    for c in g.data(cost).chunks(block) {
        let (v, grad) = otam_dp(c, tq, ts, p.lambda)?;
        values.push(v);
        jac.extend(grad);
    }
    g.block_fn(cost, &[nq, nm], values, jac)
}

fn bimhm_pairwise(g: &mut Graph, q: Var, s: Var, _: &MetricParams) -> Result<Var> {
    check_pair(g, "bimhm", q, s)?;
    let cost = cost_volume(g, q, s)?;
    let fwd = g.min_axis(cost, 3)?;
    let fwd = g.mean_axis(fwd, 2)?;
    let bwd = g.min_axis(cost, 2)?;
    let bwd = g.mean_axis(bwd, 2)?;
    let both = g.add(fwd, bwd)?;
    Ok(g.scale(both, 0.5))
}

/// Increasing index tuples of size `k` drawn from `0..t`.
pub fn frame_tuples(t: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, t: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..t {
            cur.push(i);
            rec(i + 1, t, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k > 0 {
        rec(0, t, k, &mut Vec::new(), &mut out);
    }
    out
}

/// `[N, T, D]` to `[N, P, k*D]` by concatenating the frames of each tuple.
fn tuple_features(g: &mut Graph, x: Var, k: usize) -> Result<(Var, usize)> {
    let sx = g.shape(x).to_vec();
    let (n, t, d) = (sx[0], sx[1], sx[2]);
    let tuples = frame_tuples(t, k);
    let p = tuples.len();
    let mut sel = TokenTensor::zeros(&[t, p * k]);
    for (c, tup) in tuples.iter().enumerate() {
        for (slot, &f) in tup.iter().enumerate() {
            sel.data_mut()[f * p * k + c * k + slot] = 1.0;
        }
    }
    let sel = g.constant(sel);
    let xt = g.permute(x, &[0, 2, 1])?;
    let picked = g.matmul(xt, sel)?;
    let picked = g.permute(picked, &[0, 2, 1])?;
    Ok((g.reshape(picked, &[n, p, k * d])?, p))
}

fn trx_pairwise(g: &mut Graph, q: Var, s: Var, p: &MetricParams) -> Result<Var> {
    let (nq, nm, tq, ts, d) = check_pair(g, "trx", q, s)?;
    if p.omega.is_empty() || p.omega.iter().any(|&k| k == 0 || k > tq.min(ts)) {
        return Err(Error::Input(format!(
            "tuple sizes {:?} need 1 <= k <= {} frames",
            p.omega,
            tq.min(ts)
        )));
    }
    if !(p.trx_temperature > 0.0) {
        return Err(Error::Config(format!("trx temperature must be > 0, got {}", p.trx_temperature)));
    }
    let qn = g.l2_normalize(q, NORM_EPS)?;
    let sn = g.l2_normalize(s, NORM_EPS)?;
    let mut total: Option<Var> = None;
    for &k in &p.omega {
        let kd = k * d;
        let (qt, pq) = tuple_features(g, qn, k)?;
        let (st, ps) = tuple_features(g, sn, k)?;
        let qf = g.reshape(qt, &[nq * pq, kd])?;
        let sf = g.reshape(st, &[nm * ps, kd])?;
        let sft = g.permute(sf, &[1, 0])?;
        let logits = g.matmul(qf, sft)?;
        let logits = g.reshape(logits, &[nq, pq, nm, ps])?;
        let logits = g.permute(logits, &[0, 2, 1, 3])?;
        let logits = g.scale(logits, 1.0 / (k as f64 * p.trx_temperature));
        let att = g.softmax(logits, 3)?;
        let att = g.reshape(att, &[nq * nm, pq, ps])?;
        let vals = g.reshape(st, &[1, nm, ps, kd])?;
        let vals = g.repeat(vals, 0, nq)?;
        let vals = g.reshape(vals, &[nq * nm, ps, kd])?;
        let recon = g.bmm(att, vals, false)?;
        let recon = g.l2_normalize(recon, NORM_EPS)?;
        let qr = g.reshape(qt, &[nq, 1, pq, kd])?;
        let qr = g.repeat(qr, 1, nm)?;
        let qr = g.reshape(qr, &[nq * nm, pq, kd])?;
        let qr = g.l2_normalize(qr, NORM_EPS)?;
        let cos = g.mul(qr, recon)?;
        let cos = g.sum_axis(cos, 2)?;
        let cos = g.mean_axis(cos, 1)?;
        let dist = g.neg(cos);
        let dist = g.add_scalar(dist, 1.0);
        total = Some(match total {
            Some(t) => g.add(t, dist)?,
            None => dist,
        });
    }
    let mean = g.scale(total.expect("omega non-empty"), 1.0 / p.omega.len() as f64);
    g.reshape(mean, &[nq, nm])
}
