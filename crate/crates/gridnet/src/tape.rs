//! Reverse-mode differentiation over a linear tape of dense f64 tensors.
//!
//! Every op appends a node holding its value and enough of its inputs to
//! run the adjoint. `backward` walks the tape once from the end.

use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match data");
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [C, H, W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    BroadcastCols(Var),
    Crop(Var),
    Conv2d(Var, Var, Var, Conv),
    ConvT2d(Var, Var, Var, usize),
    ScatterMax(Var, Vec<u32>),
    Bce(Var, Rc<Vec<f64>>, f64),
    Dice(Var, Rc<Vec<f64>>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Clamp bound on probabilities inside the losses.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing term of the soft dice score.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn conv2d_out(size: usize, k: usize, c: Conv) -> usize {
    (size + 2 * c.pad - k) / c.stride + 1
}

/// Four-lane dot product; lets the compiler vectorize the reduction.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Output positions `lo..hi` whose tap at kernel offset `kk` lands inside
/// an input of length `len`.
fn valid_outputs(kk: usize, c: Conv, len: usize, out_len: usize) -> (usize, usize) {
    let lo = c.pad.saturating_sub(kk).div_ceil(c.stride);
    let hi = if len + c.pad > kk { ((len + c.pad - kk - 1) / c.stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// `a [m, k] x b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims");
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in row.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b))
    }

    /// Adds `b [m]` to every column of `x [m, ...]`, i.e. per leading index.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let m = xv.shape[0];
        assert_eq!(self.value(b).len(), m, "bias length");
        let inner = xv.len() / m;
        let bv = &self.value(b).data;
        let mut out = xv.data.clone();
        for i in 0..m {
            for o in &mut out[i * inner..(i + 1) * inner] {
                *o += bv[i];
            }
        }
        let shape = xv.shape.clone();
        self.push(Tensor::new(shape, out), Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shapes");
        let out = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, out), Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "mul shapes");
        let out = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, out), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape.clone(), xv.data.iter().map(|v| v * s).collect());
        self.push(t, Op::Scale(x, s))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape.clone(), xv.data.iter().map(|&v| f(v)).collect());
        self.push(t, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Stacks along the leading dimension; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tail = self.value(parts[0]).shape[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape[1..], tail[..], "concat trailing dims");
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec()))
    }

    /// Rows `start..start + count` of the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let xv = self.value(x);
        let inner = xv.len() / xv.shape[0];
        let data = xv.data[start * inner..(start + count) * inner].to_vec();
        let mut shape = xv.shape.clone();
        shape[0] = count;
        self.push(Tensor::new(shape, data), Op::SliceRows(x, start))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(shape.to_vec(), xv.data.clone());
        self.push(t, Op::Reshape(x))
    }

    /// `[m, 1]` (or `[m]`) to `[m, n]`.
    pub fn broadcast_cols(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let m = xv.len();
        let mut data = Vec::with_capacity(m * n);
        for &v in &xv.data {
            data.extend(std::iter::repeat(v).take(n));
        }
        self.push(Tensor::new(vec![m, n], data), Op::BroadcastCols(x))
    }

    /// Keeps the top-left `h x w` window of a `[C, H, W]` map.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (c, hh, ww) = self.value(x).dims3();
        if (h, w) == (hh, ww) {
            return x;
        }
        assert!(h <= hh && w <= ww, "crop larger than input");
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * hh + y) * ww;
                data.extend_from_slice(&xv[base..base + w]);
            }
        }
        self.push(Tensor::new(vec![c, h, w], data), Op::Crop(x))
    }

    /// `x [Ci, H, W]`, `w [Co, Ci, k, k]`, `b [Co]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, conv: Conv) -> Var {
        let (ci, h, wd) = self.value(x).dims3();
        let ws = &self.value(w).shape;
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ci, "conv input channels");
        let (ho, wo) = (conv2d_out(h, k, conv), conv2d_out(wd, k, conv));
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = bv[o]);
            for c in 0..ci {
                for ky in 0..k {
                    let (y0, y1) = valid_outputs(ky, conv, h, ho);
                    for kx in 0..k {
                        let wt = wv[((o * ci + c) * k + ky) * k + kx];
                        let (x0, x1) = valid_outputs(kx, conv, wd, wo);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * conv.stride + ky - conv.pad;
                            let row = &xv[(c * h + iy) * wd..(c * h + iy + 1) * wd];
                            let ix0 = x0 * conv.stride + kx - conv.pad;
                            let orow = &mut plane[oy * wo + x0..oy * wo + x1];
                            if conv.stride == 1 {
                                for (ov, xin) in orow.iter_mut().zip(&row[ix0..]) {
                                    *ov += wt * xin;
                                }
                            } else {
                                for (ov, xin) in orow.iter_mut().zip(row[ix0..].iter().step_by(conv.stride)) {
                                    *ov += wt * xin;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(vec![co, ho, wo], out), Op::Conv2d(x, w, b, conv))
    }

    /// Transposed convolution with kernel size equal to the stride:
    /// `x [Ci, H, W]`, `w [Ci, Co, s, s]`, output `[Co, sH, sW]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (ci, h, wd) = self.value(x).dims3();
        let ws = &self.value(w).shape;
        let co = ws[1];
        assert_eq!((ws[0], ws[2], ws[3]), (ci, stride, stride), "transposed conv kernel");
        let (ho, wo) = (h * stride, wd * stride);
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            out[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v = bv[o]);
        }
        for c in 0..ci {
            for o in 0..co {
                for ky in 0..stride {
                    for kx in 0..stride {
                        let wt = wv[((c * co + o) * stride + ky) * stride + kx];
                        for iy in 0..h {
                            let oy = iy * stride + ky;
                            for ix in 0..wd {
                                out[(o * ho + oy) * wo + ix * stride + kx] += wt * xv[(c * h + iy) * wd + ix];
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(vec![co, ho, wo], out), Op::ConvT2d(x, w, b, stride))
    }

    /// Per-cell max over the columns of `x [C, N]` grouped by `cell[n]`;
    /// cells without columns are zero. Output `[C, cells]`.
    pub fn scatter_max(&mut self, x: Var, cell: &[usize], cells: usize) -> Var {
        let (c, n) = self.value(x).dims2();
        assert_eq!(cell.len(), n, "one cell per column");
        let xv = &self.value(x).data;
        let mut out = vec![0.0; c * cells];
        let mut arg = vec![u32::MAX; c * cells];
        for ch in 0..c {
            for (j, &q) in cell.iter().enumerate() {
                let v = xv[ch * n + j];
                let slot = ch * cells + q;
                if arg[slot] == u32::MAX || v > out[slot] {
                    out[slot] = v;
                    arg[slot] = j as u32;
                }
            }
        }
        self.push(Tensor::new(vec![c, cells], out), Op::ScatterMax(x, arg))
    }

    /// Mean over cells of `-w y ln p - (1 - y) ln(1 - p)`; `p` must already
    /// be clamped away from 0 and 1.
    pub fn weighted_bce(&mut self, p: Var, target: Rc<Vec<f64>>, w: f64) -> Var {
        let pv = &self.value(p).data;
        assert_eq!(pv.len(), target.len(), "bce target size");
        let v = bce_value(pv, &target, w);
        self.push(Tensor::scalar(v), Op::Bce(p, target, w))
    }

    /// `1 - (2 sum(p y) + s) / (sum p + sum y + s)`.
    pub fn dice(&mut self, p: Var, target: Rc<Vec<f64>>) -> Var {
        let pv = &self.value(p).data;
        assert_eq!(pv.len(), target.len(), "dice target size");
        let v = dice_value(pv, &target);
        self.push(Tensor::scalar(v), Op::Dice(p, target))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            self.adjoint(node, &gy, &mut g);
            g[i] = Some(gy);
        }
        Grads(g)
    }

    fn adjoint(&self, node: &Node, gy: &[f64], g: &mut [Option<Vec<f64>>]) {
        macro_rules! grad {
            ($v:expr) => {{
                let len = self.value($v).len();
                g[$v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).shape[1];
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                {
                    let ga = grad!(*a);
                    for i in 0..m {
                        let grow = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                let gb = grad!(*b);
                for i in 0..m {
                    let grow = &gy[i * n..(i + 1) * n];
                    for p in 0..k {
                        let s = av[i * k + p];
                        if s == 0.0 {
                            continue;
                        }
                        for (o, &gg) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += s * gg;
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                let m = self.value(*b).len();
                let inner = gy.len() / m;
                grad!(*x).iter_mut().zip(gy).for_each(|(o, v)| *o += v);
                let gb = grad!(*b);
                for i in 0..m {
                    gb[i] += gy[i * inner..(i + 1) * inner].iter().sum::<f64>();
                }
            }
            Op::Add(a, b) => {
                grad!(*a).iter_mut().zip(gy).for_each(|(o, v)| *o += v);
                grad!(*b).iter_mut().zip(gy).for_each(|(o, v)| *o += v);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                grad!(*a).iter_mut().zip(gy.iter().zip(bv)).for_each(|(o, (g, y))| *o += g * y);
                grad!(*b).iter_mut().zip(gy.iter().zip(av)).for_each(|(o, (g, x))| *o += g * x);
            }
            Op::Scale(x, s) => {
                grad!(*x).iter_mut().zip(gy).for_each(|(o, v)| *o += v * s);
            }
            Op::Sigmoid(x) => {
                let yv = &node.value.data;
                grad!(*x).iter_mut().zip(gy.iter().zip(yv)).for_each(|(o, (g, y))| *o += g * y * (1.0 - y));
            }
            Op::Tanh(x) => {
                let yv = &node.value.data;
                grad!(*x).iter_mut().zip(gy.iter().zip(yv)).for_each(|(o, (g, y))| *o += g * (1.0 - y * y));
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                grad!(*x).iter_mut().zip(gy.iter().zip(xv)).for_each(|(o, (g, v))| {
                    if *v > 0.0 {
                        *o += g
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = &self.value(*x).data;
                grad!(*x).iter_mut().zip(gy.iter().zip(xv)).for_each(|(o, (g, v))| {
                    if v > lo && v < hi {
                        *o += g
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    grad!(*p).iter_mut().zip(&gy[off..off + len]).for_each(|(o, v)| *o += v);
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let xs = &self.value(*x).shape;
                let inner = self.value(*x).len() / xs[0];
                let off = start * inner;
                grad!(*x)[off..off + gy.len()].iter_mut().zip(gy).for_each(|(o, v)| *o += v);
            }
            Op::Reshape(x) => {
                grad!(*x).iter_mut().zip(gy).for_each(|(o, v)| *o += v);
            }
            Op::BroadcastCols(x) => {
                let n = node.value.shape[1];
                let gx = grad!(*x);
                for (i, o) in gx.iter_mut().enumerate() {
                    *o += gy[i * n..(i + 1) * n].iter().sum::<f64>();
                }
            }
            Op::Crop(x) => {
                let (c, hh, ww) = self.value(*x).dims3();
                let (h, w) = (node.value.shape[1], node.value.shape[2]);
                let gx = grad!(*x);
                for ch in 0..c {
                    for y in 0..h {
                        let src = &gy[(ch * h + y) * w..(ch * h + y + 1) * w];
                        let base = (ch * hh + y) * ww;
                        gx[base..base + w].iter_mut().zip(src).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Conv2d(x, w, b, conv) => self.conv2d_adjoint(node, gy, *x, *w, *b, *conv, g),
            Op::ConvT2d(x, w, b, stride) => {
                let (ci, h, wd) = self.value(*x).dims3();
                let co = self.value(*w).shape[1];
                let s = *stride;
                let (ho, wo) = (h * s, wd * s);
                let (xv, wv) = (&self.value(*x).data, &self.value(*w).data);
                {
                    let gb = grad!(*b);
                    for o in 0..co {
                        gb[o] += gy[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
                    }
                }
                {
                    let gx = grad!(*x);
                    for c in 0..ci {
                        for o in 0..co {
                            for ky in 0..s {
                                for kx in 0..s {
                                    let wt = wv[((c * co + o) * s + ky) * s + kx];
                                    for iy in 0..h {
                                        let oy = iy * s + ky;
                                        for ix in 0..wd {
                                            gx[(c * h + iy) * wd + ix] += wt * gy[(o * ho + oy) * wo + ix * s + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let gw = grad!(*w);
                for c in 0..ci {
                    for o in 0..co {
                        for ky in 0..s {
                            for kx in 0..s {
                                let mut acc = 0.0;
                                for iy in 0..h {
                                    let oy = iy * s + ky;
                                    for ix in 0..wd {
                                        acc += xv[(c * h + iy) * wd + ix] * gy[(o * ho + oy) * wo + ix * s + kx];
                                    }
                                }
                                gw[((c * co + o) * s + ky) * s + kx] += acc;
                            }
                        }
                    }
                }
            }
            Op::ScatterMax(x, arg) => {
                let n = self.value(*x).shape[1];
                let cells = node.value.shape[1];
                let gx = grad!(*x);
                for (slot, &j) in arg.iter().enumerate() {
                    if j != u32::MAX {
                        let ch = slot / cells;
                        gx[ch * n + j as usize] += gy[slot];
                    }
                }
            }
            Op::Bce(p, target, w) => {
                let pv = &self.value(*p).data;
                let n = pv.len() as f64;
                let gp = grad!(*p);
                for i in 0..pv.len() {
                    let (q, y) = (pv[i], target[i]);
                    gp[i] += gy[0] * (-w * y / q + (1.0 - y) / (1.0 - q)) / n;
                }
            }
            Op::Dice(p, target) => {
                let pv = &self.value(*p).data;
                let inter: f64 = pv.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
                let den = pv.iter().sum::<f64>() + target.iter().sum::<f64>() + DICE_SMOOTH;
                let num = 2.0 * inter + DICE_SMOOTH;
                let gp = grad!(*p);
                for i in 0..pv.len() {
                    // d(1 - num/den)/dp_i
                    gp[i] += gy[0] * -((2.0 * target[i]) * den - num) / (den * den);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_adjoint(&self, node: &Node, gy: &[f64], x: Var, w: Var, b: Var, conv: Conv, g: &mut [Option<Vec<f64>>]) {
        let (ci, h, wd) = self.value(x).dims3();
        let ws = &self.value(w).shape;
        let (co, k) = (ws[0], ws[2]);
        let (ho, wo) = (node.value.shape[1], node.value.shape[2]);
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);

        let gb = g[b.0].get_or_insert_with(|| vec![0.0; co]);
        for o in 0..co {
            gb[o] += gy[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
        }
        let mut gw = g[w.0].take().unwrap_or_else(|| vec![0.0; wv.len()]);
        let mut gx = g[x.0].take().unwrap_or_else(|| vec![0.0; xv.len()]);
        let st = conv.stride;
        for o in 0..co {
            let gplane = &gy[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..ci {
                for ky in 0..k {
                    let (y0, y1) = valid_outputs(ky, conv, h, ho);
                    for kx in 0..k {
                        let widx = ((o * ci + c) * k + ky) * k + kx;
                        let wt = wv[widx];
                        let (x0, x1) = valid_outputs(kx, conv, wd, wo);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 * st + kx - conv.pad;
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * st + ky - conv.pad;
                            let base = (c * h + iy) * wd;
                            let grow = &gplane[oy * wo + x0..oy * wo + x1];
                            if st == 1 {
                                let xs = &xv[base + ix0..base + ix0 + grow.len()];
                                acc += dot(grow, xs);
                                for (&gg, gxi) in grow.iter().zip(&mut gx[base + ix0..base + ix0 + grow.len()]) {
                                    *gxi += wt * gg;
                                }
                            } else {
                                for (&gg, &xin) in grow.iter().zip(xv[base + ix0..base + wd].iter().step_by(st)) {
                                    acc += xin * gg;
                                }
                                for (&gg, gxi) in grow.iter().zip(gx[base + ix0..base + wd].iter_mut().step_by(st)) {
                                    *gxi += wt * gg;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        g[w.0] = Some(gw);
        g[x.0] = Some(gx);
    }
}

pub fn bce_value(p: &[f64], y: &[f64], w: f64) -> f64 {
    let s: f64 = p.iter().zip(y).map(|(&q, &t)| -w * t * q.ln() - (1.0 - t) * (1.0 - q).ln()).sum();
    s / p.len() as f64
}

pub fn dice_value(p: &[f64], y: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let den = p.iter().sum::<f64>() + y.iter().sum::<f64>() + DICE_SMOOTH;
    1.0 - (2.0 * inter + DICE_SMOOTH) / den
}

/// Per-node gradients from [`Tape::backward`].
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    /// Gradient of `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(out * probe))/d(inputs) against central differences.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |inputs: &[Tensor], probe: Option<&Tensor>| -> (f64, Option<Tensor>, Tape, Vec<Var>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&mut tape, &vars);
            let ov = tape.value(out).clone();
            let probe = probe.cloned().unwrap_or_else(|| ov.clone());
            let pv = tape.leaf(probe.clone());
            let prod = tape.mul(out, pv);
            let n = ov.len();
            let ones = tape.leaf(Tensor::new(vec![1, n], vec![1.0; n]));
            let col = tape.reshape(prod, &[n, 1]);
            let s = tape.matmul(ones, col);
            let s = tape.reshape(s, &[1]);
            let val = tape.value(s).data[0];
            (val, Some(probe), tape, vec![s].into_iter().chain(vars).collect())
        };
        let (_, probe, _, _) = eval(&inputs, None);
        let probe = probe.map(|p| Tensor::new(p.shape.clone(), p.data.iter().map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let (_, _, tape, vars) = eval(&inputs, probe.as_ref());
        let grads = tape.backward(vars[0]);
        let h = 1e-6;
        for (ii, inp) in inputs.iter().enumerate() {
            let ga = grads.get(vars[ii + 1]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inp.len()]);
            for j in 0..inp.len() {
                let mut a = inputs.clone();
                a[ii].data[j] += h;
                let mut b = inputs.clone();
                b[ii].data[j] -= h;
                let num = (eval(&a, probe.as_ref()).0 - eval(&b, probe.as_ref()).0) / (2.0 * h);
                let ana = ga[j];
                assert!((num - ana).abs() <= 1e-6 * num.abs().max(ana.abs()) + 1e-8, "input {ii}[{j}]: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn matmul_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[3])], |t, v| {
            let m = t.matmul(v[0], v[1]);
            t.add_bias(m, v[2])
        });
    }

    #[test]
    fn pointwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![rand_tensor(&mut rng, &[2, 6]), rand_tensor(&mut rng, &[2, 6])], |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.tanh(v[1]);
            let c = t.mul(a, b);
            let d = t.relu(v[1]);
            let e = t.add(c, d);
            let e = t.scale(e, 1.7);
            t.clamp(e, -0.4, 0.9)
        });
    }

    #[test]
    fn shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[4, 1])], |t, v| {
            let b = t.broadcast_cols(v[1], 3);
            let c = t.concat(&[v[0], b]);
            let s = t.slice_rows(c, 1, 4);
            let r = t.reshape(s, &[1, 3, 4]);
            t.crop(r, 2, 3)
        });
    }

    #[test]
    fn conv_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for conv in [Conv { stride: 1, pad: 1 }, Conv { stride: 2, pad: 1 }, Conv { stride: 2, pad: 0 }] {
            check(
                vec![rand_tensor(&mut rng, &[2, 5, 6]), rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])],
                move |t, v| t.conv2d(v[0], v[1], v[2], conv),
            );
        }
        check(
            vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 3, 2, 2]), rand_tensor(&mut rng, &[3])],
            |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2),
        );
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 5, 5]);
        let w = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(Tensor::new(vec![1], vec![0.25])));
        let y = t.conv2d(xv, wv, bv, Conv { stride: 2, pad: 1 });
        assert_eq!(t.value(y).shape, vec![1, 3, 3]);
        let mut want = 0.25;
        // output (1, 2) covers input rows 1..=3, cols 3..=5 (col 5 is padding)
        for c in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = (1 + ky, 3 + kx);
                    if ix < 5 {
                        want += w.data[(c * 3 + ky) * 3 + kx] * x.data[(c * 5 + iy) * 5 + ix];
                    }
                }
            }
        }
        assert!((t.value(y).data[5] - want).abs() < 1e-12);
    }

    #[test]
    fn scatter_max_routes_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(vec![rand_tensor(&mut rng, &[3, 7])], |t, v| t.scatter_max(v[0], &[0, 2, 2, 0, 3, 2, 0], 5));
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 3], vec![0.2, 0.7, -0.1]));
        let y = t.scatter_max(x, &[1, 1, 3], 4);
        assert_eq!(t.value(y).data, vec![0.0, 0.7, 0.0, -0.1]);
    }

    #[test]
    fn losses_differentiate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y: Rc<Vec<f64>> = Rc::new((0..8).map(|i| (i % 3 == 0) as u8 as f64).collect());
        let y2 = y.clone();
        check(vec![rand_tensor(&mut rng, &[8])], move |t, v| {
            let p = t.sigmoid(v[0]);
            let a = t.weighted_bce(p, y.clone(), 3.0);
            let b = t.dice(p, y2.clone());
            let a = t.scale(a, 0.7);
            let b = t.scale(b, 0.3);
            t.add(a, b)
        });
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(2.0));
        let b = t.leaf(Tensor::scalar(3.0));
        let c = t.mul(a, a);
        let g = t.backward(c);
        assert_eq!(g.get(a), Some(&[4.0][..]));
        assert!(g.get(b).is_none());
    }
}
