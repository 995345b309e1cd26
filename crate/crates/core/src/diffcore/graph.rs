use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::{bilinear_backward, conv2d_backward, pool2_backward};
use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; `backward` receives the input values, the output value
/// and the upstream gradient, and returns one optional gradient per input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows { src: Var, index: Vec<usize> },
    SegmentReduce { src: Var, segment: Vec<usize>, scale: Vec<f64> },
    SelectRows { mask: Vec<bool>, a: Var, b: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    AvgPool2(Var),
    Bilinear { map: Var, coord: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Define-by-run computation record.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the leaf did not require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.dims[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.dims[var.0]))
    }
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

    /// Drops every node recorded after `len`. Handles to dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: impl CustomOp + 'static) -> Var {
        let needs = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op: Box::new(op),
            },
            needs,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            bail!(Contract, "backward needs a scalar loss, got dims {:?}", root.value.dims());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.dims(), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let (lower, _) = grads.split_at_mut(i);
            self.backward_node(node, &g, lower);
        }
        let dims = self.nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        Ok(Gradients { grads, dims })
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |s| add_into(s, gd));
                self.acc(grads, *b, |s| add_into(s, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |s| add_into(s, gd));
                self.acc(grads, *b, |s| {
                    for (x, y) in s.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |s| {
                    for ((x, y), z) in s.iter_mut().zip(gd).zip(bv) {
                        *x += y * z;
                    }
                });
                self.acc(grads, *b, |s| {
                    for ((x, y), z) in s.iter_mut().zip(gd).zip(av) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |s| {
                for (x, y) in s.iter_mut().zip(gd) {
                    *x += c * y;
                }
            }),
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |s| add_into(s, gd));
                let m = self.val(*b).len();
                self.acc(grads, *b, |s| {
                    for row in gd.chunks_exact(m) {
                        add_into(s, row);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (n, inp) = (xv.rows(), xv.cols());
                let out = wv.cols();
                let (xd, wd) = (xv.data(), wv.data());
                self.acc(grads, *x, |s| {
                    for i in 0..n {
                        let grow = &gd[i * out..(i + 1) * out];
                        let srow = &mut s[i * inp..(i + 1) * inp];
                        for (k, sk) in srow.iter_mut().enumerate() {
                            let wrow = &wd[k * out..(k + 1) * out];
                            *sk += dot(grow, wrow);
                        }
                    }
                });
                self.acc(grads, *w, |s| {
                    for i in 0..n {
                        let grow = &gd[i * out..(i + 1) * out];
                        for k in 0..inp {
                            let xk = xd[i * inp + k];
                            if xk != 0.0 {
                                axpy(&mut s[k * out..(k + 1) * out], xk, grow);
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |s| {
                        for row in gd.chunks_exact(out) {
                            add_into(s, row);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let av = self.val(*a).data();
                self.acc(grads, *a, |s| {
                    for ((x, y), z) in s.iter_mut().zip(gd).zip(av) {
                        if *z > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                self.acc(grads, *a, |s| {
                    for ((x, gy), y) in s.iter_mut().zip(gd).zip(yv) {
                        *x += gy * y * (1.0 - y);
                    }
                });
            }
            Op::Sin(a) => {
                let av = self.val(*a).data();
                self.acc(grads, *a, |s| {
                    for ((x, gy), z) in s.iter_mut().zip(gd).zip(av) {
                        *x += gy * crate::math::cos(*z);
                    }
                });
            }
            Op::Cos(a) => {
                let av = self.val(*a).data();
                self.acc(grads, *a, |s| {
                    for ((x, gy), z) in s.iter_mut().zip(gd).zip(av) {
                        *x -= gy * crate::math::sin(*z);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.acc(grads, *a, |s| s.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                let g0 = gd[0] / n;
                self.acc(grads, *a, |s| s.iter_mut().for_each(|x| *x += g0));
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.value.dims()[..*axis].iter().product();
                let total_inner = node.value.len() / outer.max(1);
                let mut offset = 0;
                for p in parts {
                    let inner = self.val(*p).len() / outer.max(1);
                    self.acc(grads, *p, |s| {
                        for o in 0..outer {
                            let src = &gd[o * total_inner + offset..o * total_inner + offset + inner];
                            add_into(&mut s[o * inner..(o + 1) * inner], src);
                        }
                    });
                    offset += inner;
                }
            }
            Op::Reshape(a) => self.acc(grads, *a, |s| add_into(s, gd)),
            Op::Softmax(a) => {
                let c = node.value.cols();
                let yv = node.value.data();
                self.acc(grads, *a, |s| {
                    for ((srow, grow), yrow) in s.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(yv.chunks_exact(c)) {
                        let inner = dot(grow, yrow);
                        for ((x, gy), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x += y * (gy - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let yv = node.value.data();
                self.acc(grads, *a, |s| {
                    for ((srow, grow), yrow) in s.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(yv.chunks_exact(c)) {
                        let total: f64 = grow.iter().sum();
                        for ((x, gy), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x += gy - crate::math::exp(*y) * total;
                        }
                    }
                });
            }
            Op::GatherRows { src, index } => {
                let c = node.value.cols();
                self.acc(grads, *src, |s| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SegmentReduce { src, segment, scale } => {
                let c = node.value.cols();
                self.acc(grads, *src, |s| {
                    for (r, &seg) in segment.iter().enumerate() {
                        axpy(&mut s[r * c..(r + 1) * c], scale[seg], &gd[seg * c..(seg + 1) * c]);
                    }
                });
            }
            Op::SelectRows { mask, a, b } => {
                let c = node.value.cols();
                self.acc(grads, *a, |s| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(&mut s[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                        }
                    }
                });
                self.acc(grads, *b, |s| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut s[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.val(*x);
                let gv = self.val(*gain).data();
                let c = xv.cols();
                let n = xv.len() / c;
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..n {
                    let row = &xv.data()[r * c..(r + 1) * c];
                    let grow = &gd[r * c..(r + 1) * c];
                    let (mean, inv) = row_moments(row, *eps);
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * inv;
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dot(&dxhat, &xhat) / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.acc(grads, *x, |s| add_into(s, &dx));
                self.acc(grads, *gain, |s| add_into(s, &dgain));
                self.acc(grads, *bias, |s| add_into(s, &dbias));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let (dx, dw, db) = conv2d_backward(xv, wv, g, *stride, *pad, need_x, need_w);
                if let Some(dx) = dx {
                    self.acc(grads, *x, |s| add_into(s, dx.data()));
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, |s| add_into(s, dw.data()));
                }
                self.acc(grads, *b, |s| add_into(s, db.data()));
            }
            Op::AvgPool2(x) => {
                let dx = pool2_backward(self.val(*x).dims(), g);
                self.acc(grads, *x, |s| add_into(s, dx.data()));
            }
            Op::Bilinear { map, coord } => {
                let mv = self.val(*map);
                let cv = self.val(*coord).data();
                let (h, w, c) = (mv.dims()[0], mv.dims()[1], mv.dims()[2]);
                let mut dmap = vec![0.0; mv.len()];
                let (dy, dx, _) = bilinear_backward(mv.data(), h, w, c, 0, c, cv[0], cv[1], gd, 1.0, &mut dmap);
                self.acc(grads, *map, |s| add_into(s, &dmap));
                self.acc(grads, *coord, |s| {
                    s[0] += dy;
                    s[1] += dx;
                });
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.val(*v)).collect();
                let out = op.backward(&vals, &node.value, g);
                for (v, gi) in inputs.iter().zip(out) {
                    if let Some(gi) = gi {
                        self.acc(grads, *v, |s| add_into(s, gi.data()));
                    }
                }
            }
        }
    }

    #[inline]
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.dims()));
        f(t.data_mut());
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn add_into(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / crate::math::sqrt(var + eps))
}
