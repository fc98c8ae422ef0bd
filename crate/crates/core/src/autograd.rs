//! A small reverse-mode tape over [`Tensor`]s.
//!
//! The op set is exactly what the toy backbone needs. Everything runs
//! single-threaded in a fixed order so gradients are bitwise reproducible.

use std::collections::{BTreeMap, HashMap};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddChannel(NodeId, NodeId),
    Silu(NodeId),
    Gather(NodeId, Vec<usize>),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    },
    Upsample2x(NodeId),
    ChwToTokens(NodeId),
    TokensToChw(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    SquaredError {
        prediction: NodeId,
        target: Tensor,
        weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Tensor>;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A named leaf. Registering the same name twice returns the first node,
    /// so a parameter used in several places accumulates one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[1];
        assert_eq!(bv.shape()[0], k, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a_ip * b;
                }
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = bv.len();
        assert_eq!(xv.shape()[xv.shape().len() - 1], n, "bias width");
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % n])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::AddRowBias(x, bias))
    }

    /// `linear(x) = x @ w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_row_bias(h, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Add(a, b))
    }

    /// `[c, h, w] + [c]` broadcast over spatial positions.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (xv, vv) = (self.value(x), self.value(v));
        let c = xv.shape()[0];
        assert_eq!(vv.len(), c, "channel vector width");
        let hw = xv.len() / c;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, val)| val + vv.data()[i / hw])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::AddChannel(x, v))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    /// Rows of a `[rows, d]` table.
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> NodeId {
        let tv = self.value(table);
        let d = tv.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(tv.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), d], data);
        self.push(out, Op::Gather(table, rows.to_vec()))
    }

    /// Square-kernel convolution with `kernel / 2` zero padding.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize) -> NodeId {
        let (xv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), stride);
        assert_eq!(bv.len(), geo.co, "conv bias width");
        let mut out = vec![0.0; geo.co * geo.ho * geo.wo];
        let (x, w) = (xv.data(), wv.data());
        for o in 0..geo.co {
            let plane = &mut out[o * geo.ho * geo.wo..(o + 1) * geo.ho * geo.wo];
            plane.fill(bv.data()[o]);
            for c in 0..geo.ci {
                for ky in 0..geo.k {
                    for kx in 0..geo.k {
                        let wt = w[((o * geo.ci + c) * geo.k + ky) * geo.k + kx];
                        geo.for_each_tap(ky, kx, |oi, ii| {
                            plane[oi] += wt * x[c * geo.h * geo.w + ii];
                        });
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![geo.co, geo.ho, geo.wo], out);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
        )
    }

    /// Nearest-neighbour 2x spatial upsampling of `[c, h, w]`.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xv.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_parts(vec![c, 2 * h, 2 * w], out);
        self.push(out, Op::Upsample2x(x))
    }

    /// `[c, h, w]` to `[h*w, c]`.
    pub fn chw_to_tokens(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, hw) = (xv.shape()[0], xv.len() / xv.shape()[0]);
        let out = Tensor::from_parts(vec![hw, c], transpose(xv.data(), c, hw));
        self.push(out, Op::ChwToTokens(x))
    }

    pub fn tokens_to_chw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let xv = self.value(x);
        let c = xv.shape()[1];
        assert_eq!(xv.shape()[0], h * w, "token count");
        let out = Tensor::from_parts(vec![c, h, w], transpose(xv.data(), h * w, c));
        self.push(out, Op::TokensToChw(x))
    }

    /// Scaled dot-product multi-head attention. `q` is `[lq, d]`, `k`/`v` are `[lk, d]`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = (qv.shape()[0], qv.shape()[1]);
        let lk = kv.shape()[0];
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        for hh in 0..heads {
            let off = hh * dh;
            for i in 0..lq {
                let p = &mut probs[(hh * lq + i) * lk..(hh * lq + i + 1) * lk];
                let qi = &qv.data()[i * d + off..i * d + off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &kv.data()[j * d + off..j * d + off + dh];
                    *pj = dot(qi, kj) * scale;
                }
                softmax_in_place(p);
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, pj) in p.iter().enumerate() {
                    let vj = &vv.data()[j * d + off..j * d + off + dh];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += pj * vc;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![lq, d], out);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Scalar `weight * ||prediction - target||^2`.
    pub fn squared_error(&mut self, prediction: NodeId, target: &Tensor, weight: f64) -> NodeId {
        let pv = self.value(prediction);
        assert_eq!(pv.shape(), target.shape(), "loss shapes");
        let loss = weight * crate::schedule::sum_squared_diff(pv.data(), target.data());
        self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::SquaredError {
                prediction,
                target: target.clone(),
                weight,
            },
        )
    }

    /// Backpropagates `sum(scale_i * node_i)` over scalar seed nodes and
    /// returns the gradient of every named parameter the seeds depend on.
    /// Seeds with a zero scale are skipped entirely.
    pub fn backward(&self, seeds: &[(NodeId, f64)]) -> ParamGrads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for &(id, scale) in seeds {
            if scale == 0.0 {
                continue;
            }
            assert_eq!(self.value(id).len(), 1, "seed nodes must be scalars");
            accumulate(&mut grads, id, &[scale]);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.params
            .iter()
            .filter_map(|(name, id)| {
                grads[id.0].take().map(|g| {
                    let shape = self.value(*id).shape().to_vec();
                    (name.clone(), Tensor::from_parts(shape, g))
                })
            })
            .collect()
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv.data()[p * n..(p + 1) * n];
                        da[i * k + p] = dot(gi, brow);
                        let a_ip = av.data()[i * k + p];
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                            *d += a_ip * gv;
                        }
                    }
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::AddRowBias(x, bias) => {
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for (i, gv) in g.iter().enumerate() {
                    db[i % n] += gv;
                }
                accumulate(grads, *x, g);
                accumulate(grads, *bias, &db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddChannel(x, v) => {
                let c = self.value(*v).len();
                let hw = g.len() / c;
                let dv: Vec<f64> = g.chunks(hw).map(|ch| ch.iter().sum()).collect();
                accumulate(grads, *x, g);
                accumulate(grads, *v, &dv);
            }
            Op::Silu(x) => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::Gather(table, rows) => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (dst, src) in dt[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *dst += src;
                    }
                }
                accumulate(grads, *table, &dt);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (xv, wv) = (self.value(*input), self.value(*weight));
                let geo = ConvGeometry::new(xv.shape(), wv.shape(), *stride);
                let (x, w) = (xv.data(), wv.data());
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                let plane = geo.ho * geo.wo;
                let db: Vec<f64> = g.chunks(plane).map(|c| c.iter().sum()).collect();
                for o in 0..geo.co {
                    let go = &g[o * plane..(o + 1) * plane];
                    for c in 0..geo.ci {
                        let xc = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
                        let dxc = &mut dx[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
                        for ky in 0..geo.k {
                            for kx in 0..geo.k {
                                let widx = ((o * geo.ci + c) * geo.k + ky) * geo.k + kx;
                                let wt = w[widx];
                                let mut acc = 0.0;
                                geo.for_each_tap(ky, kx, |oi, ii| {
                                    acc += go[oi] * xc[ii];
                                    dxc[ii] += wt * go[oi];
                                });
                                dw[widx] += acc;
                            }
                        }
                    }
                }
                accumulate(grads, *input, &dx);
                accumulate(grads, *weight, &dw);
                accumulate(grads, *bias, &db);
            }
            Op::Upsample2x(x) => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut dx = vec![0.0; xv.len()];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::ChwToTokens(x) => {
                let xv = self.value(*x);
                let (c, hw) = (xv.shape()[0], xv.len() / xv.shape()[0]);
                accumulate(grads, *x, &transpose(g, hw, c));
            }
            Op::TokensToChw(x) => {
                let xv = self.value(*x);
                let (hw, c) = (xv.shape()[0], xv.shape()[1]);
                accumulate(grads, *x, &transpose(g, c, hw));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (lq, d) = (qv.shape()[0], qv.shape()[1]);
                let lk = kv.shape()[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; lk];
                for hh in 0..*heads {
                    let off = hh * dh;
                    for i in 0..lq {
                        let p = &probs[(hh * lq + i) * lk..(hh * lq + i + 1) * lk];
                        let gi = &g[i * d + off..i * d + off + dh];
                        for j in 0..lk {
                            let vj = &vv.data()[j * d + off..j * d + off + dh];
                            dp[j] = dot(gi, vj);
                            for (dst, gv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                                *dst += p[j] * gv;
                            }
                        }
                        let inner = dot(p, &dp);
                        let qi = &qv.data()[i * d + off..i * d + off + dh];
                        for j in 0..lk {
                            let ds = p[j] * (dp[j] - inner) * scale;
                            let kj = &kv.data()[j * d + off..j * d + off + dh];
                            for (dst, kc) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                                *dst += ds * kc;
                            }
                            for (dst, qc) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                                *dst += ds * qc;
                            }
                        }
                    }
                }
                accumulate(grads, *q, &dq);
                accumulate(grads, *k, &dk);
                accumulate(grads, *v, &dv);
            }
            Op::SquaredError {
                prediction,
                target,
                weight,
            } => {
                let pv = self.value(*prediction);
                let dp: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| 2.0 * weight * (p - t) * g[0])
                    .collect();
                accumulate(grads, *prediction, &dp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], stride: usize) -> Self {
        let (ci, h, w) = (input[0], input[1], input[2]);
        let (co, k) = (weight[0], weight[2]);
        assert_eq!(weight[1], ci, "conv input channels");
        assert_eq!(weight[3], k, "conv kernels must be square");
        let pad = k / 2;
        Self {
            ci,
            h,
            w,
            co,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    /// Calls `f(output_index, input_index)` for every in-bounds tap `(ky, kx)`.
    #[inline]
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        for oy in 0..self.ho {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            for ox in 0..self.wo {
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                f(oy * self.wo + ox, iy as usize * self.w + ix as usize);
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Transpose of a row-major `[rows, cols]` buffer.
fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Builds a scalar loss from named inputs, then compares analytic and
    /// central-difference gradients for every input element.
    fn check(inputs: &[(&str, Tensor)], build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
        let eval = |vals: &[(&str, Tensor)]| {
            let mut g = Graph::new();
            let ids: Vec<_> = vals.iter().map(|(n, t)| g.param(n, t)).collect();
            let out = build(&mut g, &ids);
            (g, out)
        };
        let (g, out) = eval(inputs);
        let grads = g.backward(&[(out, 1.0)]);
        let h = 1e-6;
        for (pi, (name, t)) in inputs.iter().enumerate() {
            let analytic = &grads[*name];
            for e in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[pi].1.data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[pi].1.data_mut()[e] -= h;
                let (gp, op) = eval(&plus);
                let (gm, om) = eval(&minus);
                let fd = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(err < 1e-5, "{name}[{e}]: analytic {a} vs fd {fd}");
            }
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_and_silu_gradients() {
        let target = randn(&[3, 2], 9);
        check(
            &[("x", randn(&[3, 4], 1)), ("w", randn(&[4, 2], 2)), ("b", randn(&[2], 3))],
            |g, ids| {
                let h = g.linear(ids[0], ids[1], ids[2]);
                let s = g.silu(h);
                g.squared_error(s, &target, 0.7)
            },
        );
    }

    #[test]
    fn conv_gradients_with_stride() {
        for stride in [1, 2] {
            let probe = ConvGeometry::new(&[2, 5, 6], &[3, 2, 3, 3], stride);
            let target = randn(&[3, probe.ho, probe.wo], 4);
            check(
                &[
                    ("x", randn(&[2, 5, 6], 5)),
                    ("w", randn(&[3, 2, 3, 3], 6)),
                    ("b", randn(&[3], 7)),
                ],
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], stride);
                    g.squared_error(y, &target, 1.0)
                },
            );
        }
    }

    #[test]
    fn attention_gradients() {
        let target = randn(&[3, 4], 10);
        check(
            &[("q", randn(&[3, 4], 11)), ("k", randn(&[5, 4], 12)), ("v", randn(&[5, 4], 13))],
            |g, ids| {
                let y = g.attention(ids[0], ids[1], ids[2], 2);
                g.squared_error(y, &target, 1.0)
            },
        );
    }

    #[test]
    fn layout_ops_gradients() {
        let target = randn(&[2, 4, 6], 20);
        check(
            &[("x", randn(&[2, 2, 3], 21)), ("c", randn(&[2], 22)), ("t", randn(&[4, 2], 23))],
            |g, ids| {
                let x = g.add_channel(ids[0], ids[1]);
                let tok = g.chw_to_tokens(x);
                let rows = g.gather(ids[2], &[0, 3, 3, 1, 2, 0]);
                let mixed = g.add(tok, rows);
                let back = g.tokens_to_chw(mixed, 2, 3);
                let up = g.upsample2x(back);
                g.squared_error(up, &target, 1.0)
            },
        );
    }

    #[test]
    fn repeated_param_accumulates() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let a = g.param("x", &x);
        let b = g.param("x", &x);
        assert_eq!(a, b);
        let s = g.add(a, b);
        let loss = g.squared_error(s, &Tensor::zeros(&[1, 1]), 1.0);
        // d/dx (2x)^2 = 8x
        assert_eq!(g.backward(&[(loss, 1.0)])["x"].data(), &[24.0]);
    }

    #[test]
    fn zero_scaled_seed_contributes_nothing() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::full(&[2], 1.0));
        let y = g.param("y", &Tensor::full(&[2], 2.0));
        let lx = g.squared_error(x, &Tensor::zeros(&[2]), 1.0);
        let ly = g.squared_error(y, &Tensor::zeros(&[2]), 1.0);
        let grads = g.backward(&[(lx, 1.0), (ly, 0.0)]);
        assert!(grads.contains_key("x"));
        assert!(!grads.contains_key("y"));
    }
}
