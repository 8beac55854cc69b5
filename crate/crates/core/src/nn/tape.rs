//! Reverse-mode differentiation over a tape of coarse tensor operations.
//!
//! Every operation appends a node holding its output value and whatever
//! it needs for the backward pass. [`Tape::backward`] walks the nodes in
//! reverse, so gradients accumulate in a fixed order and repeated runs
//! are bitwise identical regardless of the thread count.

use std::sync::Arc;

use libm::erf;
use rayon::prelude::*;

use super::params::{ParamId, ParamStore};
use super::tensor::{compensated_sum, Tensor};
use crate::error::{Error, Result};
use crate::windowing::PaddedWindows;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param,
    MatMul {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        offset: Option<Var>,
        group: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<u32>>,
    },
    ScatterSum {
        x: Var,
        targets: Arc<Vec<u32>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<PaddedWindows>,
        probs: Vec<f64>,
    },
    WeightedL1 {
        pred: Var,
        target: Var,
        row_weights: Arc<Vec<f64>>,
    },
    Mean {
        parts: Vec<Var>,
    },
    DotConst {
        x: Var,
        weights: Arc<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of every parameter that took part in the computation.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant or an input we may want the gradient of.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Loads a parameter once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id).tensor.clone();
        let v = self.push(t, Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x[.., K] @ w[K, M]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return shape_err(format!("matmul of {:?} by {:?}", xv.shape(), wv.shape()));
        }
        let (rows, k, m) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = vec![0.0; rows * m];
        matmul_kernel(xv.data(), wv.data(), &mut out, rows, k, m);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { x, w }))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return shape_err(format!("bias of {} for {:?}", bv.len(), xv.shape()));
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddBias { x, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("add of {:?} and {:?}", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Scale { x, factor })
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Gelu { x })
    }

    /// Normalizes each contiguous group of `group` columns to zero mean and
    /// unit variance, then applies the optional per-column gain and offset
    /// (both of length `group`, shared across groups).
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, offset: Option<Var>, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if group < 2 || !c.is_multiple_of(group) {
            return shape_err(format!("layer norm group {group} over {c} columns"));
        }
        for p in [gain, offset].into_iter().flatten() {
            if self.value(p).len() != group {
                return shape_err(format!(
                    "layer norm affine of {} for group {group}",
                    self.value(p).len()
                ));
            }
        }
        let g = gain.map(|v| self.value(v).data().to_vec());
        let o = offset.map(|v| self.value(v).data().to_vec());
        let xv = self.value(x);
        let n_groups = xv.len() / group;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n_groups];
        let mut out = vec![0.0; xv.len()];
        for (gi, chunk) in xv.data().chunks(group).enumerate() {
            let mean = chunk.iter().sum::<f64>() / group as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[gi] = is;
            for (c, &v) in chunk.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[gi * group + c] = h;
                let mut y = h;
                if let Some(g) = &g {
                    y *= g[c];
                }
                if let Some(o) = &o {
                    y += o[c];
                }
                out[gi * group + c] = y;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                offset,
                group,
                xhat,
                inv_std,
            },
        ))
    }

    /// Concatenates along the last axis; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return shape_err(format!("concat of {} rows with {} rows", rows, v.rows()));
            }
            cols += v.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }))
    }

    /// `out[e] = x[index[e]]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<u32>>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i as usize >= rows {
                return Err(Error::IndexOutOfRange {
                    index: i as usize,
                    bound: rows,
                    context: "gather_rows",
                });
            }
            out.extend_from_slice(xv.row(i as usize));
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        Ok(self.push(t, Op::Gather { x, index }))
    }

    /// `out[t] = sum of x[e] over rows e with targets[e] == t`; untouched targets are zero.
    pub fn scatter_sum(&mut self, x: Var, targets: Arc<Vec<u32>>, target_count: usize) -> Result<Var> {
        let xv = self.value(x);
        if targets.len() != xv.rows() {
            return shape_err(format!("scatter of {} rows with {} targets", xv.rows(), targets.len()));
        }
        let c = xv.cols();
        let mut out = vec![0.0; target_count * c];
        for (e, &t) in targets.iter().enumerate() {
            if t as usize >= target_count {
                return Err(Error::IndexOutOfRange {
                    index: t as usize,
                    bound: target_count,
                    context: "scatter_sum",
                });
            }
            let dst = &mut out[t as usize * c..(t as usize + 1) * c];
            for (d, s) in dst.iter_mut().zip(xv.row(e)) {
                *d += s;
            }
        }
        let t = Tensor::matrix(target_count, c, out)?;
        Ok(self.push(t, Op::ScatterSum { x, targets }))
    }

    /// Multi-head softmax attention restricted to windows. `q`, `k`, `v` are
    /// `[N, heads * d]`; scores are scaled by `1 / sqrt(d)` and masked slots
    /// neither attend nor receive attention. Nodes with no valid slot get zeros.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<PaddedWindows>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dm) = (qv.rows(), qv.cols());
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return shape_err("attention q/k/v shapes differ".into());
        }
        if heads == 0 || dm % heads != 0 {
            return shape_err(format!("{dm} columns do not split into {heads} heads"));
        }
        if layout.num_nodes != n {
            return shape_err(format!(
                "window layout covers {} nodes, input has {n}",
                layout.num_nodes
            ));
        }
        let d = dm / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let width = layout.width;
        let nw = layout.num_windows();
        let mut probs = vec![0.0; nw * heads * width * width];
        let mut out = vec![0.0; n * dm];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![0.0; width];
        for w in 0..nw {
            let (members, mask) = layout.window(w);
            let valid: Vec<usize> = (0..width).filter(|&s| mask[s]).collect();
            if valid.is_empty() {
                return Err(Error::EmptyWindow(w));
            }
            for h in 0..heads {
                let off = h * d;
                for &i in &valid {
                    let qi = &qd[members[i] as usize * dm + off..][..d];
                    let mut max = f64::NEG_INFINITY;
                    for &j in &valid {
                        let kj = &kd[members[j] as usize * dm + off..][..d];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for &j in &valid {
                        scores[j] = (scores[j] - max).exp();
                        z += scores[j];
                    }
                    let base = ((w * heads + h) * width + i) * width;
                    let oi = members[i] as usize * dm + off;
                    for &j in &valid {
                        let p = scores[j] / z;
                        probs[base + j] = p;
                        let vj = &vd[members[j] as usize * dm + off..][..d];
                        for c in 0..d {
                            out[oi + c] += p * vj[c];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
        ))
    }

    /// Attention weights recorded by a `window_attention` node, laid out
    /// `[window][head][query slot][key slot]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `mean over rows r and columns c of w[r] * |pred - target|`, a scalar.
    pub fn weighted_l1(&mut self, pred: Var, target: Var, row_weights: Arc<Vec<f64>>) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return shape_err(format!("loss between {:?} and {:?}", pv.shape(), tv.shape()));
        }
        if row_weights.len() != pv.rows() {
            return shape_err(format!("{} row weights for {} rows", row_weights.len(), pv.rows()));
        }
        let c = pv.cols();
        let total = compensated_sum(row_weights.iter().enumerate().map(|(r, w)| {
            let row: f64 = pv.row(r).iter().zip(tv.row(r)).map(|(a, b)| (a - b).abs()).sum();
            w * row
        }));
        let value = total / (pv.rows() * c) as f64;
        Ok(self.push(
            Tensor::scalar(value),
            Op::WeightedL1 {
                pred,
                target,
                row_weights,
            },
        ))
    }

    /// Average of scalar nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("mean of no values".into());
        }
        let mut s = 0.0;
        for &p in parts {
            let v = self.value(p);
            if v.len() != 1 {
                return shape_err(format!("mean expects scalars, got {:?}", v.shape()));
            }
            s += v.item();
        }
        Ok(self.push(
            Tensor::scalar(s / parts.len() as f64),
            Op::Mean { parts: parts.to_vec() },
        ))
    }

    /// `sum of x[i] * weights[i]`, a scalar. Handy as a generic test loss.
    pub fn dot_const(&mut self, x: Var, weights: Arc<Vec<f64>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return shape_err(format!("{} weights for {} values", weights.len(), xv.len()));
        }
        let s = dot(xv.data(), &weights);
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, weights }))
    }

    /// Propagates `d output / d node` for every node; `output` must be a scalar.
    pub fn backward(&self, output: Var) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMul { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, k, m) = (xv.rows(), xv.cols(), wv.cols());
                    let mut dx = vec![0.0; rows * k];
                    matmul_nt_kernel(&g, wv.data(), &mut dx, rows, m, k);
                    accumulate(&mut grads, *x, &dx);
                    let mut dw = vec![0.0; k * m];
                    matmul_tn_kernel(xv.data(), &g, &mut dw, rows, k, m);
                    accumulate(&mut grads, *w, &dw);
                }
                Op::AddBias { x, b } => {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, &db);
                    accumulate(&mut grads, *x, &g);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Scale { x, factor } => {
                    let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let dx: Vec<f64> = xv.data().iter().zip(&g).map(|(&v, &gg)| gg * gelu_grad(v)).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    offset,
                    group,
                    xhat,
                    inv_std,
                } => {
                    let group = *group;
                    let gv = gain.map(|v| self.value(v).data().to_vec());
                    let mut dgain = vec![0.0; group];
                    let mut doffset = vec![0.0; group];
                    let mut dx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; group];
                    for (gi, gy) in g.chunks(group).enumerate() {
                        let xh = &xhat[gi * group..(gi + 1) * group];
                        for c in 0..group {
                            dgain[c] += gy[c] * xh[c];
                            doffset[c] += gy[c];
                            dxhat[c] = match &gv {
                                Some(gg) => gy[c] * gg[c],
                                None => gy[c],
                            };
                        }
                        let m1 = dxhat.iter().sum::<f64>() / group as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / group as f64;
                        let is = inv_std[gi];
                        for c in 0..group {
                            dx[gi * group + c] = is * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                    if let Some(gn) = gain {
                        accumulate(&mut grads, *gn, &dgain);
                    }
                    if let Some(o) = offset {
                        accumulate(&mut grads, *o, &doffset);
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Concat { parts } => {
                    let total = node.value.cols();
                    let mut start = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut dp = Vec::with_capacity(self.value(p).len());
                        for row in g.chunks(total) {
                            dp.extend_from_slice(&row[start..start + pc]);
                        }
                        accumulate(&mut grads, p, &dp);
                        start += pc;
                    }
                }
                Op::Gather { x, index } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for (e, &i) in index.iter().enumerate() {
                        let dst = &mut dx[i as usize * c..(i as usize + 1) * c];
                        for (d, s) in dst.iter_mut().zip(&g[e * c..(e + 1) * c]) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::ScatterSum { x, targets } => {
                    let c = node.value.cols();
                    let mut dx = Vec::with_capacity(targets.len() * c);
                    for &t in targets.iter() {
                        dx.extend_from_slice(&g[t as usize * c..(t as usize + 1) * c]);
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    layout,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, layout, probs, &g);
                    accumulate(&mut grads, *q, &dq);
                    accumulate(&mut grads, *k, &dk);
                    accumulate(&mut grads, *v, &dv);
                }
                Op::WeightedL1 {
                    pred,
                    target,
                    row_weights,
                } => {
                    let (pv, tv) = (self.value(*pred), self.value(*target));
                    let c = pv.cols();
                    let norm = g[0] / pv.len() as f64;
                    let mut dp = vec![0.0; pv.len()];
                    for (r, w) in row_weights.iter().enumerate() {
                        for j in 0..c {
                            let diff = pv.data()[r * c + j] - tv.data()[r * c + j];
                            dp[r * c + j] = w * norm * sign(diff);
                        }
                    }
                    let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *pred, &dp);
                    accumulate(&mut grads, *target, &dt);
                }
                Op::Mean { parts } => {
                    let share = g[0] / parts.len() as f64;
                    for &p in parts {
                        accumulate(&mut grads, p, &[share]);
                    }
                }
                Op::DotConst { x, weights } => {
                    let dx: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                    accumulate(&mut grads, *x, &dx);
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v.0)))
            .collect();
        Grads { grads, params }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &PaddedWindows,
        probs: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let dm = self.value(q).cols();
        let d = dm / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let width = layout.width;
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; width];
        for w in 0..layout.num_windows() {
            let (members, mask) = layout.window(w);
            let valid: Vec<usize> = (0..width).filter(|&s| mask[s]).collect();
            for h in 0..heads {
                let off = h * d;
                for &i in &valid {
                    let base = ((w * heads + h) * width + i) * width;
                    let oi = members[i] as usize * dm + off;
                    let go = &g[oi..oi + d];
                    let mut weighted = 0.0;
                    for &j in &valid {
                        let vj = members[j] as usize * dm + off;
                        let p = probs[base + j];
                        dp[j] = dot(go, &vd[vj..vj + d]);
                        weighted += p * dp[j];
                        for c in 0..d {
                            dv[vj + c] += p * go[c];
                        }
                    }
                    let qi = members[i] as usize * dm + off;
                    for &j in &valid {
                        let ds = probs[base + j] * (dp[j] - weighted) * scale;
                        let kj = members[j] as usize * dm + off;
                        for c in 0..d {
                            dq[qi + c] += ds * kd[kj + c];
                            dk[kj + c] += ds * qd[qi + c];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `out[rows, m] = x[rows, k] @ w[k, m]`.
fn matmul_kernel(x: &[f64], w: &[f64], out: &mut [f64], rows: usize, k: usize, m: usize) {
    let row = |(r, o): (usize, &mut [f64])| {
        let xr = &x[r * k..(r + 1) * k];
        for (kk, &a) in xr.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = &w[kk * m..(kk + 1) * m];
            for (oo, &b) in o.iter_mut().zip(wr) {
                *oo += a * b;
            }
        }
    };
    if rows * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
}

/// `out[rows, k] = g[rows, m] @ w[k, m]^T`.
fn matmul_nt_kernel(g: &[f64], w: &[f64], out: &mut [f64], rows: usize, m: usize, k: usize) {
    let row = |(r, o): (usize, &mut [f64])| {
        let gr = &g[r * m..(r + 1) * m];
        for (kk, oo) in o.iter_mut().enumerate() {
            *oo = dot(gr, &w[kk * m..(kk + 1) * m]);
        }
    };
    if rows * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        out.chunks_mut(k).enumerate().for_each(row);
    }
}

/// `out[k, m] = x[rows, k]^T @ g[rows, m]`, summing rows in order.
fn matmul_tn_kernel(x: &[f64], g: &[f64], out: &mut [f64], rows: usize, k: usize, m: usize) {
    let row = |(kk, o): (usize, &mut [f64])| {
        for r in 0..rows {
            let a = x[r * k + kk];
            if a == 0.0 {
                continue;
            }
            let gr = &g[r * m..(r + 1) * m];
            for (oo, &b) in o.iter_mut().zip(gr) {
                *oo += a * b;
            }
        }
    };
    if rows * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        tape.input(Tensor::matrix(rows, cols, data).unwrap())
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!(gelu(-10.0).abs() < 1e-6);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        // Phi(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841344746068543).abs() < 1e-14);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = input(&mut tape, 2, 4, vec![3.0; 8]);
        let y = tape.layer_norm(x, None, None, 4).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = input(&mut tape, 1, 6, vec![1.0, -4.0, 2.5, 9.0, 0.0, 3.0]);
        let y = tape.layer_norm(x, None, None, 6).unwrap();
        let v = tape.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 6.0;
        let var: f64 = v.iter().map(|a| a * a).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
        assert!(tape.layer_norm(x, None, None, 1).is_err());
        assert!(tape.layer_norm(x, None, None, 4).is_err());
    }

    #[test]
    fn scatter_sum_cases() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = input(&mut tape, 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let perm = tape.scatter_sum(x, Arc::new(vec![2, 0, 1]), 3).unwrap();
        assert_eq!(tape.value(perm).data(), &[3.0, 4.0, 5.0, 6.0, 1.0, 2.0]);
        let col = tape.scatter_sum(x, Arc::new(vec![0, 0, 0]), 2).unwrap();
        assert_eq!(tape.value(col).data(), &[9.0, 12.0, 0.0, 0.0]);
        assert!(matches!(
            tape.scatter_sum(x, Arc::new(vec![0, 5, 0]), 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn shape_errors_are_reported() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = input(&mut tape, 2, 3, vec![0.0; 6]);
        let b = input(&mut tape, 2, 2, vec![0.0; 4]);
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.add(a, b).is_err());
        assert!(tape.add_bias(a, b).is_err());
    }

    #[test]
    fn matmul_gradient_by_hand() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = input(&mut tape, 1, 2, vec![1.0, 2.0]);
        let w = input(&mut tape, 2, 1, vec![3.0, 4.0]);
        let y = tape.matmul(x, w).unwrap();
        assert_eq!(tape.value(y).item(), 11.0);
        let loss = tape.dot_const(y, Arc::new(vec![1.0])).unwrap();
        let g = tape.backward(loss);
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert_eq!(g.get(w).unwrap(), &[1.0, 2.0]);
    }
}
