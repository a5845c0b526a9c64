use std::collections::HashMap;

use super::mat::{gemm, Mat};
use crate::nn::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks an empty slot in gather/max index tables.
pub const NONE: u32 = u32::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Sin(Var),
    Abs(Var),
    Powf(Var, f64),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gather { src: Var, index: Vec<u32> },
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumCols(Var),
    SumAll(Var),
    MaxCols { src: Var, arg: Vec<u32> },
    GroupMax { src: Var, arg: Vec<u32> },
    DepthwiseConv { x: Var, w: Var, height: usize, width: usize, k: usize },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Tape for reverse-mode differentiation.
///
/// A graph lives for one forward/backward pass. Parameters are pulled in
/// from a [`ParamStore`] with [`Graph::param`]; each parameter is registered
/// once per graph so weights shared between branches accumulate one gradient.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Mat>>,
}

/// How the second operand of a binary op is broadcast against the first.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(a: &Mat, b: &Mat) -> Bcast {
    if a.shape() == b.shape() {
        Bcast::Same
    } else if b.rows == 1 && b.cols == 1 {
        Bcast::Scalar
    } else if b.rows == 1 && b.cols == a.cols {
        Bcast::Row
    } else if b.cols == 1 && b.rows == a.rows {
        Bcast::Col
    } else {
        panic!("broadcast: incompatible shapes {:?} and {:?}", a.shape(), b.shape());
    }
}

#[inline]
fn bcast_at(b: &Mat, kind: Bcast, r: usize, c: usize) -> f64 {
    match kind {
        Bcast::Same => b.get(r, c),
        Bcast::Row => b.data[c],
        Bcast::Col => b.data[r],
        Bcast::Scalar => b.data[0],
    }
}

fn reduce_to(g: &Mat, kind: Bcast, rows: usize, cols: usize) -> Mat {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Mat::scalar(g.sum()),
        Bcast::Row => {
            let mut out = Mat::zeros(1, cols);
            for r in 0..g.rows {
                for (o, v) in out.data.iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            out
        }
        Bcast::Col => Mat::from_fn(rows, 1, |r, _| g.row(r).iter().sum()),
    }
}

fn binary(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let kind = bcast_kind(a, b);
    let mut out = Mat::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.data[r * a.cols + c] = f(a.get(r, c), bcast_at(b, kind, r, c));
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols } else { av.rows };
        let n = if tb { bv.rows } else { bv.cols };
        let mut out = Mat::zeros(m, n);
        gemm(1.0, av, ta, bv, tb, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = binary(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = binary(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = binary(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sin);
        let rg = self.rg(a);
        self.push(out, Op::Sin(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(out, Op::Powf(a, p), rg)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(x.rows);
        let n = x.cols as f64;
        for r in 0..x.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rs;
            }
            rstd.push(rs);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { x: a, rstd }, rg)
    }

    /// `out.data[i] = src.data[index[i]]`, or zero where `index[i] == NONE`.
    pub fn gather(&mut self, src: Var, rows: usize, cols: usize, index: Vec<u32>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather: index table size");
        let s = self.value(src);
        let data = index
            .iter()
            .map(|&i| if i == NONE { 0.0 } else { s.data[i as usize] })
            .collect();
        let rg = self.rg(src);
        self.push(Mat::from_vec(rows, cols, data), Op::Gather { src, index }, rg)
    }

    /// Select whole rows by index.
    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let cols = self.value(src).cols;
        let mut index = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            index.extend((0..cols).map(|c| (r * cols + c) as u32));
        }
        self.gather(src, rows.len(), cols, index)
    }

    pub fn transpose(&mut self, src: Var) -> Var {
        let (r, c) = self.shape(src);
        let mut index = Vec::with_capacity(r * c);
        for j in 0..c {
            index.extend((0..r).map(|i| (i * c + j) as u32));
        }
        self.gather(src, c, r, index)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let s = self.value(src);
        assert!(start + len <= s.cols, "slice_cols: out of range");
        let out = Mat::from_fn(s.rows, len, |r, c| s.get(r, start + c));
        let rg = self.rg(src);
        self.push(out, Op::SliceCols { src, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows: column mismatch");
            data.extend_from_slice(&v.data);
        }
        let rows = data.len() / cols.max(1);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row sums, `N x C -> N x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Mat::from_fn(x.rows, 1, |r, _| x.row(r).iter().sum());
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row maxima, `N x C -> N x 1`.
    pub fn max_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, 1);
        let mut arg = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let (mut best, mut bi) = (f64::NEG_INFINITY, 0usize);
            for (c, &v) in x.row(r).iter().enumerate() {
                if v > best {
                    best = v;
                    bi = c;
                }
            }
            out.data[r] = best;
            arg.push((r * x.cols + bi) as u32);
        }
        let rg = self.rg(a);
        self.push(out, Op::MaxCols { src: a, arg }, rg)
    }

    /// Masked max over consecutive groups of `group` rows.
    ///
    /// Row `r` takes part iff `mask[r]`. Groups with no live row produce zeros.
    pub fn group_max(&mut self, a: Var, group: usize, mask: &[bool]) -> Var {
        let x = self.value(a);
        assert!(group > 0 && x.rows % group == 0, "group_max: rows not a multiple of group");
        assert_eq!(mask.len(), x.rows, "group_max: mask length");
        let groups = x.rows / group;
        let mut out = Mat::zeros(groups, x.cols);
        let mut arg = vec![NONE; groups * x.cols];
        for g in 0..groups {
            for c in 0..x.cols {
                let mut best = f64::NEG_INFINITY;
                for r in g * group..(g + 1) * group {
                    if mask[r] && x.get(r, c) > best {
                        best = x.get(r, c);
                        arg[g * x.cols + c] = (r * x.cols + c) as u32;
                    }
                }
                if best.is_finite() {
                    out.set(g, c, best);
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::GroupMax { src: a, arg }, rg)
    }

    /// Per-channel `k x k` convolution, stride 1, zero padding `k/2`.
    ///
    /// `x` is an `(height*width) x C` map, `w` is `(k*k) x C`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, height: usize, width: usize, k: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rows, height * width, "depthwise_conv: spatial size");
        assert_eq!(wv.shape(), (k * k, xv.cols), "depthwise_conv: weight shape");
        let c = xv.cols;
        let pad = (k / 2) as isize;
        let mut out = Mat::zeros(xv.rows, c);
        for i in 0..height {
            for j in 0..width {
                let o = (i * width + j) * c;
                for ki in 0..k {
                    let si = i as isize + ki as isize - pad;
                    if si < 0 || si >= height as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let sj = j as isize + kj as isize - pad;
                        if sj < 0 || sj >= width as isize {
                            continue;
                        }
                        let s = (si as usize * width + sj as usize) * c;
                        let wr = (ki * k + kj) * c;
                        for ch in 0..c {
                            out.data[o + ch] += xv.data[s + ch] * wv.data[wr + ch];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(
            out,
            Op::DepthwiseConv {
                x,
                w,
                height,
                width,
                k,
            },
            rg,
        )
    }

    fn acc(&mut self, v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.shape(out), (1, 1), "backward: output must be scalar");
        self.backward_with(out, Mat::scalar(1.0));
    }

    /// Reverse pass seeded with an arbitrary output cotangent.
    pub fn backward_with(&mut self, out: Var, seed: Mat) {
        assert_eq!(self.shape(out), seed.shape(), "backward: seed shape");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.local_grads(i, &g);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
            for (v, m) in contributions {
                self.acc(v, m);
            }
        }
    }

    fn local_grads(&self, i: usize, g: &Mat) -> Vec<(Var, Mat)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                let mut out = vec![];
                if self.rg(a) {
                    let mut da = Mat::zeros(av.rows, av.cols);
                    if ta {
                        gemm(1.0, bv, tb, g, true, 0.0, &mut da);
                    } else {
                        gemm(1.0, g, false, bv, !tb, 0.0, &mut da);
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    if tb {
                        gemm(1.0, g, true, av, ta, 0.0, &mut db);
                    } else {
                        gemm(1.0, av, !ta, g, false, 0.0, &mut db);
                    }
                    out.push((b, db));
                }
                out
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let (av, bv) = (val(a), val(b));
                let kind = bcast_kind(av, bv);
                let mut db = reduce_to(g, kind, bv.rows, bv.cols);
                if matches!(node.op, Op::Sub(..)) {
                    db = db.map(|x| -x);
                }
                vec![(a, g.clone()), (b, db)]
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let kind = bcast_kind(av, bv);
                let mut out = vec![];
                if self.rg(a) {
                    out.push((a, binary(g, bv, |x, y| x * y)));
                }
                if self.rg(b) {
                    let ga = binary(g, av, |x, y| x * y);
                    out.push((b, reduce_to(&ga, kind, bv.rows, bv.cols)));
                }
                out
            }
            &Op::Scale(a, s) => vec![(a, g.map(|x| x * s))],
            &Op::AddScalar(a) => vec![(a, g.clone())],
            &Op::Relu(a) => {
                let x = val(a);
                vec![(a, zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 }))]
            }
            &Op::Gelu(a) => vec![(a, zip_map(g, val(a), |g, x| g * gelu_grad(x)))],
            &Op::Exp(a) => vec![(a, zip_map(g, &node.value, |g, y| g * y))],
            &Op::Sin(a) => vec![(a, zip_map(g, val(a), |g, x| g * x.cos()))],
            &Op::Abs(a) => vec![(a, zip_map(g, val(a), |g, x| g * x.signum() * (x != 0.0) as u8 as f64))],
            &Op::Powf(a, p) => vec![(a, zip_map(g, val(a), |g, x| g * p * x.powf(p - 1.0)))],
            &Op::Softplus(a) => vec![(a, zip_map(g, val(a), |g, x| g * sigmoid(x)))],
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                vec![(a, dx)]
            }
            Op::LayerNorm { x, rstd } => {
                let xhat = &node.value;
                let n = xhat.cols as f64;
                let mut dx = Mat::zeros(xhat.rows, xhat.cols);
                for r in 0..xhat.rows {
                    let gm = g.row(r).iter().sum::<f64>() / n;
                    let gx = g.row(r).iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..xhat.cols {
                        dx.set(r, c, rstd[r] * (g.get(r, c) - gm - xhat.get(r, c) * gx));
                    }
                }
                vec![(*x, dx)]
            }
            Op::Gather { src, index } => {
                let s = val(*src);
                let mut ds = Mat::zeros(s.rows, s.cols);
                for (k, &i) in index.iter().enumerate() {
                    if i != NONE {
                        ds.data[i as usize] += g.data[k];
                    }
                }
                vec![(*src, ds)]
            }
            &Op::SliceCols { src, start } => {
                let s = val(src);
                let mut ds = Mat::zeros(s.rows, s.cols);
                for r in 0..s.rows {
                    ds.data[r * s.cols + start..r * s.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                vec![(src, ds)]
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                let mut out = vec![];
                for &p in parts {
                    let cols = val(p).cols;
                    let part = Mat::from_fn(g.rows, cols, |r, c| g.get(r, off + c));
                    off += cols;
                    out.push((p, part));
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let mut out = vec![];
                for &p in parts {
                    let n = val(p).len();
                    let (rows, cols) = val(p).shape();
                    out.push((p, Mat::from_vec(rows, cols, g.data[off..off + n].to_vec())));
                    off += n;
                }
                out
            }
            &Op::SumCols(a) => {
                let x = val(a);
                vec![(a, Mat::from_fn(x.rows, x.cols, |r, _| g.data[r]))]
            }
            &Op::SumAll(a) => {
                let x = val(a);
                vec![(a, Mat::filled(x.rows, x.cols, g.data[0]))]
            }
            Op::MaxCols { src, arg } | Op::GroupMax { src, arg } => {
                let s = val(*src);
                let mut ds = Mat::zeros(s.rows, s.cols);
                for (k, &i) in arg.iter().enumerate() {
                    if i != NONE {
                        ds.data[i as usize] += g.data[k];
                    }
                }
                vec![(*src, ds)]
            }
            &Op::DepthwiseConv {
                x,
                w,
                height,
                width,
                k,
            } => {
                let (xv, wv) = (val(x), val(w));
                let c = xv.cols;
                let pad = (k / 2) as isize;
                let mut dx = Mat::zeros(xv.rows, c);
                let mut dw = Mat::zeros(wv.rows, c);
                for i in 0..height {
                    for j in 0..width {
                        let o = (i * width + j) * c;
                        for ki in 0..k {
                            let si = i as isize + ki as isize - pad;
                            if si < 0 || si >= height as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let sj = j as isize + kj as isize - pad;
                                if sj < 0 || sj >= width as isize {
                                    continue;
                                }
                                let s = (si as usize * width + sj as usize) * c;
                                let wr = (ki * k + kj) * c;
                                for ch in 0..c {
                                    dx.data[s + ch] += g.data[o + ch] * wv.data[wr + ch];
                                    dw.data[wr + ch] += g.data[o + ch] * xv.data[s + ch];
                                }
                            }
                        }
                    }
                }
                vec![(x, dx), (w, dw)]
            }
        }
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter that took part in the pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(self.value(v).rows, self.value(v).cols));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn zip_map(g: &Mat, x: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat {
        rows: g.rows,
        cols: g.cols,
        data: g.data.iter().zip(&x.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}
