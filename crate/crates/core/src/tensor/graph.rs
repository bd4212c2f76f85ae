//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; node indices are a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Nodes that do not depend on a gradient-requiring leaf are recorded as
//! constants and skipped during the sweep, which keeps frozen weights free.

use super::kernels::{self, axis_split};
use super::token::{numel, TokenTensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        b_batched: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    MinAxis { x: Var, axis: usize, argmin: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    ScalarFn { x: Var, jac: Vec<f64> },
    BlockFn { x: Var, jac: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: TokenTensor,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, mut t: TokenTensor) -> Var {
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: TokenTensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: TokenTensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &TokenTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        let op = if rg { op } else { Op::Leaf };
        let value = TokenTensor::from_parts(shape, data).with_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ---- products -------------------------------------------------------

    /// Matrix product of `a` (rank >= 2, leading dims flattened into rows)
    /// with a rank-2 `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let op = Op::MatMul {
            a,
            b,
            batch: 1,
            m,
            k,
            n,
            trans_b: false,
            b_batched: false,
        };
        Ok(self.push(shape, out, op, &[a, b]))
    }

    /// Batched product: `a` is `[B,m,k]`; `b` is `[B,k,n]`, or `[B,n,k]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                let ab = &ad[i * m * k..(i + 1) * m * k];
                let bb = &bd[i * k * n..(i + 1) * k * n];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    kernels::gemm_nt(ab, bb, ob, m, k, n);
                } else {
                    kernels::gemm_nn(ab, bb, ob, m, k, n);
                }
            }
        }
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
            b_batched: true,
        };
        Ok(self.push(vec![batch, m, n], out, op, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a rank-1 `bias` to every row along the last axis of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::dim("add_row", &sx, &sb));
        }
        let c = sb[0];
        let bd = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % c])
            .collect();
        Ok(self.push(sx, out, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v + c).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.exp()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Exp(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.ln()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Ln(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    // ---- normalisers ----------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::contract(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.data(x), &shape, axis, false);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.data(x), &shape, axis, true);
        Ok(self.push(shape, out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Layer normalisation over the last axis followed by `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::contract("layer_norm", "scalar input"))?;
        if c == 0 {
            return Err(Error::contract("layer_norm", "empty last axis"));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::dim("layer_norm", &sx, self.shape(p)));
            }
        }
        let rows = numel(&sx) / c;
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(sx, out, op, &[x, gamma, beta]))
    }

    /// Scales each row (last axis) to unit L2 norm; rows with norm below
    /// `eps` are divided by `eps` instead.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::contract("l2_normalize", "scalar input"))?;
        let xd = self.data(x);
        let rows = xd.len() / c.max(1);
        let mut norms = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms[r] = n;
            for j in 0..c {
                out[r * c + j] = row[j] / n;
            }
        }
        Ok(self.push(sx, out, Op::L2Normalize { x, norms }, &[x]))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = axes.len() == sx.len()
            && axes.iter().all(|&a| a < sx.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::dim("permute", &sx, axes));
        }
        let mut out = vec![0.0; numel(&sx)];
        kernels::permute_into(self.data(x), &sx, axes, &mut out, false);
        let shape = axes.iter().map(|&a| sx[a]).collect();
        Ok(self.push(shape, out, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let sx = self.shape(x).to_vec();
        if start + len > sx[axis] {
            return Err(Error::contract(
                "slice",
                format!("range {start}..{} exceeds extent {} of {sx:?}", start + len, sx[axis]),
            ));
        }
        let (outer, full, inner) = axis_split(&sx, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, &[x]))
    }

    /// `n` copies of `x` stacked along `axis`.
    pub fn repeat(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let xs = vec![x; n];
        self.concat(&xs, axis)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let sx = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&sx, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let mut shape = sx;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(shape, out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Minimum over `axis` (the axis is removed); ties resolve to the
    /// lowest index and receive the whole gradient.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("min_axis", x, axis)?;
        let sx = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&sx, axis);
        if len == 0 {
            return Err(Error::contract("min_axis", "empty axis"));
        }
        let xd = self.data(x);
        let mut out = vec![f64::INFINITY; outer * inner];
        let mut argmin = vec![0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = xd[(o * len + a) * inner + i];
                    if v < out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmin[o * inner + i] = a;
                    }
                }
            }
        }
        let mut shape = sx;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(shape, out, Op::MinAxis { x, axis, argmin }, &[x]))
    }

    /// Records a scalar-valued function of `x` whose value and Jacobian were
    /// computed outside the graph (dynamic programmes and the like).
    pub fn scalar_fn(&mut self, x: Var, value: f64, jac: Vec<f64>) -> Result<Var> {
        if jac.len() != self.value(x).numel() {
            return Err(Error::dim("scalar_fn", self.shape(x), &[jac.len()]));
        }
        Ok(self.push(vec![1], vec![value], Op::ScalarFn { x, jac }, &[x]))
    }

    /// Blockwise counterpart of [`Graph::scalar_fn`]: `x` is split into
    /// `values.len()` equal contiguous blocks and output `k` depends only on
    /// block `k`. `jac` holds the per-block gradients laid out like `x`.
    pub fn block_fn(&mut self, x: Var, shape: &[usize], values: Vec<f64>, jac: Vec<f64>) -> Result<Var> {
        let n = self.value(x).numel();
        if jac.len() != n || values.is_empty() || !n.is_multiple_of(values.len()) || numel(shape) != values.len() {
            return Err(Error::dim("block_fn", self.shape(x), shape));
        }
        Ok(self.push(shape.to_vec(), values, Op::BlockFn { x, jac }, &[x]))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a one-element `loss`; gradients accumulate
    /// additively over fan-out and are stored on every node that requires
    /// them. Previously stored gradients are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i]
                .value
                .set_grad(g)
                .expect("gradient shape tracks value shape");
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].value.requires_grad() {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                b_batched,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let bstride = if b_batched { k * n } else { 0 };
                acc(a, &mut |ga| {
                    for t in 0..batch {
                        let gc = &g[t * m * n..(t + 1) * m * n];
                        let bb = &bd[t * bstride..t * bstride + k * n];
                        let gab = &mut ga[t * m * k..(t + 1) * m * k];
                        if trans_b {
                            kernels::gemm_nn(gc, bb, gab, m, n, k);
                        } else {
                            kernels::gemm_nt(gc, bb, gab, m, n, k);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for t in 0..batch {
                        let gc = &g[t * m * n..(t + 1) * m * n];
                        let ab = &ad[t * m * k..(t + 1) * m * k];
                        let gbb = &mut gb[t * bstride..t * bstride + k * n];
                        if trans_b {
                            kernels::gemm_tn(gc, ab, gbb, n, m, k);
                        } else {
                            kernels::gemm_tn(ab, gc, gbb, k, m, n);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                });
                acc(b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                });
            }
            &Op::AddRow { x, bias } => {
                acc(x, &mut |gx| add_into(gx, g));
                acc(bias, &mut |gbias| {
                    let c = gbias.len();
                    for (j, v) in g.iter().enumerate() {
                        gbias[j % c] += v;
                    }
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * c);
            }),
            &Op::AddScalar(x) => acc(x, &mut |gx| add_into(gx, g)),
            &Op::Exp(x) => acc(x, &mut |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * out[j];
                }
            }),
            &Op::Ln(x) => {
                let xd = self.data(x);
                acc(x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] / xd[j];
                    }
                })
            }
            &Op::Gelu(x) => {
                let xd = self.data(x);
                acc(x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * kernels::gelu_grad(xd[j]);
                    }
                })
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * out[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += out[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                })
            }
            &Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let gsum: f64 = (0..len).map(|a| g[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += g[at(a)] - out[at(a)].exp() * gsum;
                            }
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = *node.value.shape().last().unwrap();
                let rows = g.len() / c;
                let gd = self.data(*gamma);
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..c {
                            let d = g[r * c + j] * gd[j];
                            dxhat[j] = d;
                            s1 += d;
                            s2 += d * xhat[r * c + j];
                        }
                        let inv = inv_std[r];
                        for j in 0..c {
                            gx[r * c + j] += inv / c as f64
                                * (c as f64 * dxhat[j] - s1 - xhat[r * c + j] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (j, v) in g.iter().enumerate() {
                        gg[j % c] += v * xhat[j];
                    }
                });
                acc(*beta, &mut |gb| {
                    for (j, v) in g.iter().enumerate() {
                        gb[j % c] += v;
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let c = *node.value.shape().last().unwrap();
                acc(*x, &mut |gx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let (y, gr) = (&out[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let clipped = self.data(*x)[r * c..(r + 1) * c]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt()
                            < n;
                        for j in 0..c {
                            gx[r * c + j] += if clipped {
                                gr[j] / n
                            } else {
                                (gr[j] - y[j] * dot) / n
                            };
                        }
                    }
                })
            }
            &Op::Reshape(x) => acc(x, &mut |gx| add_into(gx, g)),
            Op::Permute { x, axes } => {
                let sx = self.shape(*x).to_vec();
                acc(*x, &mut |gx| kernels::permute_into(g, &sx, axes, gx, true));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut gv[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(x), axis);
                let len = node.value.shape()[axis];
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                })
            }
            &Op::SumAll(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            &Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                gx[(o * len + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::MinAxis { x, axis, argmin } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let a = argmin[o * inner + i];
                            gx[(o * len + a) * inner + i] += g[o * inner + i];
                        }
                    }
                })
            }
            Op::ScalarFn { x, jac } => acc(*x, &mut |gx| {
                gx.iter_mut().zip(jac).for_each(|(o, j)| *o += g[0] * j);
            }),
            Op::BlockFn { x, jac } => acc(*x, &mut |gx| {
                let k = jac.len() / g.len();
                for (b, gb) in g.iter().enumerate() {
                    for i in b * k..(b + 1) * k {
                        gx[i] += gb * jac[i];
                    }
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn softmax_along(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|a| (x[at(a)] - max).exp()).sum();
            for a in 0..len {
                out[at(a)] = if log {
                    x[at(a)] - max - sum.ln()
                } else {
                    (x[at(a)] - max).exp() / sum
                };
            }
        }
    }
    out
}
