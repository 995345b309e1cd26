use alloc::vec;
use alloc::vec::Vec;

use super::graph::{axpy, dot, row_moments, Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{bail, Error, Result};
use crate::math;

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(op, self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.dims(), data).expect("dims preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.dims(), av.data().iter().map(|x| f(*x)).collect()).expect("dims preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| c * x);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, c), g)
    }

    /// `x[n, m] + b[m]`, broadcasting the row vector over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let m = self.value(x).cols();
        if self.value(b).len() != m {
            return Err(shape_err("add_row", self.dims(x), self.dims(b)));
        }
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_exact_mut(m) {
            for (r, bb) in row.iter_mut().zip(&bv) {
                *r += bb;
            }
        }
        let g = self.any_grad(&[x, b]);
        Ok(self.push(v, Op::AddRow(x, b), g))
    }

    /// `x[n, in] · w[in, out] (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() != 2 || xv.cols() != wv.dims()[0] {
            return Err(shape_err("linear", xv.dims(), wv.dims()));
        }
        let (n, inp, out) = (xv.rows(), xv.cols(), wv.cols());
        let mut y = vec![0.0; n * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out {
                return Err(shape_err("linear bias", wv.dims(), bv.dims()));
            }
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for i in 0..n {
            let yrow = &mut y[i * out..(i + 1) * out];
            for k in 0..inp {
                let xk = xd[i * inp + k];
                if xk != 0.0 {
                    axpy(yrow, xk, &wd[k * out..(k + 1) * out]);
                }
            }
        }
        let mut ins = vec![x, w];
        ins.extend(b);
        let g = self.any_grad(&ins);
        Ok(self.push(Tensor::new(&[n, out], y)?, Op::Linear { x, w, b }, g))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.linear(x, w, None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        let g = self.any_grad(&[a]);
        self.push(v, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| 1.0 / (1.0 + math::exp(-x)));
        let g = self.any_grad(&[a]);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.map(a, math::sin);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Sin(a), g)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.map(a, math::cos);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Cos(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), g)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Contract, "concat of zero tensors");
        };
        let base = self.dims(first).to_vec();
        if axis >= base.len() {
            bail!(Contract, "concat axis {} out of range for rank {}", axis, base.len());
        }
        let mut out_dims = base.clone();
        out_dims[axis] = 0;
        for p in parts {
            let d = self.dims(*p);
            let ok = d.len() == base.len() && d.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(shape_err("concat", &base, d));
            }
            out_dims[axis] += d[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(out_dims.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let inner = t.len() / outer;
                data.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
            }
        }
        let g = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(&out_dims, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            g,
        ))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(dims)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(v, Op::Reshape(a), g))
    }

    /// Row-wise softmax over the trailing axis, stabilised by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            bail!(Numeric, "softmax input");
        }
        let mut v = t.clone();
        let c = v.cols();
        for row in v.data_mut().chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(v, Op::Softmax(a), g))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            bail!(Numeric, "log_softmax input");
        }
        let mut v = t.clone();
        let c = v.cols();
        for row in v.data_mut().chunks_exact_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + math::ln(row.iter().map(|x| math::exp(x - m)).sum::<f64>());
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(v, Op::LogSoftmax(a), g))
    }

    /// Output row `r` is `src[index[r]]`.
    pub fn gather_rows(&mut self, src: Var, index: Vec<usize>) -> Result<Var> {
        let t = self.value(src);
        let (n, c) = (t.len() / t.cols(), t.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= n {
                bail!(Contract, "gather index {} out of range for {} rows", i, n);
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let v = Tensor::new(&[index.len(), c], data)?;
        let g = self.any_grad(&[src]);
        Ok(self.push(v, Op::GatherRows { src, index }, g))
    }

    /// Sums source rows into `segments` output rows (`segment[r]` is the
    /// destination of row `r`); with `mean` each output is divided by its
    /// member count. Empty segments are zero.
    pub fn segment_reduce(&mut self, src: Var, segment: Vec<usize>, segments: usize, mean: bool) -> Result<Var> {
        let t = self.value(src);
        let c = t.cols();
        if segment.len() * c != t.len() {
            return Err(shape_err("segment_reduce", t.dims(), &[segment.len(), c]));
        }
        let mut counts = vec![0usize; segments];
        for &s in &segment {
            if s >= segments {
                bail!(Contract, "segment {} out of range for {} segments", s, segments);
            }
            counts[s] += 1;
        }
        let scale: Vec<f64> = counts
            .iter()
            .map(|&n| if mean && n > 0 { 1.0 / n as f64 } else { 1.0 })
            .collect();
        let mut data = vec![0.0; segments * c];
        for (r, &s) in segment.iter().enumerate() {
            axpy(&mut data[s * c..(s + 1) * c], scale[s], &t.data()[r * c..(r + 1) * c]);
        }
        let v = Tensor::new(&[segments, c], data)?;
        let g = self.any_grad(&[src]);
        Ok(self.push(v, Op::SegmentReduce { src, segment, scale }, g))
    }

    /// Row `r` of the output is `a[r]` where `mask[r]`, else `b[r]`.
    pub fn select_rows(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        if mask.len() * c != av.len() {
            return Err(shape_err("select_rows", av.dims(), &[mask.len()]));
        }
        let mut v = bv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                v.data_mut()[r * c..(r + 1) * c].copy_from_slice(&av.data()[r * c..(r + 1) * c]);
            }
        }
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::SelectRows { mask, a, b }, g))
    }

    /// Per-row normalisation over the trailing axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let eps = 1e-5;
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", xv.dims(), self.dims(gain)));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut v = xv.clone();
        for row in v.data_mut().chunks_exact_mut(c) {
            let (mean, inv) = row_moments(row, eps);
            for (j, r) in row.iter_mut().enumerate() {
                *r = (*r - mean) * inv * gv[j] + bv[j];
            }
        }
        let g = self.any_grad(&[x, gain, bias]);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }, g))
    }

    /// 2-D convolution over an `[H, W, C_in]` map with `[k, k, C_in, C_out]`
    /// weights and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 3 || wv.rank() != 4 || xv.dims()[2] != wv.dims()[2] || self.value(b).len() != wv.dims()[3] {
            return Err(shape_err("conv2d", xv.dims(), wv.dims()));
        }
        if stride == 0 {
            bail!(Config, "conv2d stride must be positive");
        }
        let v = conv2d_forward(xv, wv, self.value(b).data(), stride, pad)?;
        let g = self.any_grad(&[x, w, b]);
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }, g))
    }

    /// 2x average pooling of an `[H, W, C]` map to `[ceil(H/2), ceil(W/2), C]`;
    /// edge windows average only the pixels that exist.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(shape_err("avg_pool2", xv.dims(), &[0, 0, 0]));
        }
        let v = pool2_forward(xv);
        let g = self.any_grad(&[x]);
        Ok(self.push(v, Op::AvgPool2(x), g))
    }

    /// Bilinear read of an `[H, W, C]` map at continuous `(row, col)` given
    /// by the 2-vector `coord`; neighbours outside the map read as zero.
    pub fn bilinear_sample(&mut self, map: Var, coord: Var) -> Result<Var> {
        let mv = self.value(map);
        if mv.rank() != 3 || self.value(coord).len() != 2 {
            return Err(shape_err("bilinear_sample", mv.dims(), self.dims(coord)));
        }
        let (h, w, c) = (mv.dims()[0], mv.dims()[1], mv.dims()[2]);
        let p = self.value(coord).data();
        let mut out = vec![0.0; c];
        bilinear_sample_into(mv.data(), h, w, c, 0, c, p[0], p[1], 1.0, &mut out);
        let g = self.any_grad(&[map, coord]);
        Ok(self.push(Tensor::new(&[c], out)?, Op::Bilinear { map, coord }, g))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = math::exp(*x - m);
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

#[inline]
fn corners(y: f64, x: f64) -> (isize, isize, f64, f64) {
    let y0 = math::floor(y);
    let x0 = math::floor(x);
    (y0 as isize, x0 as isize, y - y0, x - x0)
}

/// Accumulates `weight *` the bilinear sample of channels
/// `[ch0, ch0 + out.len())` of an `[h, w, c]` map at `(y, x)` into `out`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn bilinear_sample_into(map: &[f64], h: usize, w: usize, c: usize, ch0: usize, len: usize, y: f64, x: f64, weight: f64, out: &mut [f64]) {
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return;
    }
    let (y0, x0, fy, fx) = corners(y, x);
    let taps = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ];
    for (yy, xx, wt) in taps {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || wt == 0.0 {
            continue;
        }
        let base = (yy as usize * w + xx as usize) * c + ch0;
        axpy(&mut out[..len], weight * wt, &map[base..base + len]);
    }
}

/// Reverse of [`bilinear_sample_into`] for one sample.
///
/// Adds `weight * tap * grad` into `dmap` and returns
/// `(d/dy, d/dx, <grad, sample>)`, where the coordinate derivatives include
/// `weight` and the last entry is the unweighted inner product.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn bilinear_backward(
    map: &[f64],
    h: usize,
    w: usize,
    c: usize,
    ch0: usize,
    len: usize,
    y: f64,
    x: f64,
    grad: &[f64],
    weight: f64,
    dmap: &mut [f64],
) -> (f64, f64, f64) {
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return (0.0, 0.0, 0.0);
    }
    let (y0, x0, fy, fx) = corners(y, x);
    let read = |yy: isize, xx: isize| -> Option<usize> {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            None
        } else {
            Some((yy as usize * w + xx as usize) * c + ch0)
        }
    };
    // gradient-weighted corner values
    let gv = |base: Option<usize>| base.map_or(0.0, |b| dot(&map[b..b + len], &grad[..len]));
    let (b00, b01, b10, b11) = (read(y0, x0), read(y0, x0 + 1), read(y0 + 1, x0), read(y0 + 1, x0 + 1));
    let (v00, v01, v10, v11) = (gv(b00), gv(b01), gv(b10), gv(b11));
    let dy = weight * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
    let dx = weight * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
    let inner = v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx;
    for (b, wt) in [
        (b00, (1.0 - fy) * (1.0 - fx)),
        (b01, (1.0 - fy) * fx),
        (b10, fy * (1.0 - fx)),
        (b11, fy * fx),
    ] {
        if let Some(b) = b {
            axpy(&mut dmap[b..b + len], weight * wt, &grad[..len]);
        }
    }
    (dy, dx, inner)
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if n + 2 * pad < k {
        bail!(Config, "conv2d input extent {} smaller than kernel {}", n, k);
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Result<Tensor> {
    let (h, wd, ci) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (kh, kw, co) = (w.dims()[0], w.dims()[1], w.dims()[3]);
    let (oh, ow) = (conv_out(h, kh, stride, pad)?, conv_out(wd, kw, stride, pad)?);
    let mut out = vec![0.0; oh * ow * co];
    let (xd, wdata) = (x.data(), w.data());
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            orow.copy_from_slice(b);
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let pix = &xd[(iy as usize * wd + ix as usize) * ci..][..ci];
                    let wbase = (ky * kw + kx) * ci * co;
                    for (c, &v) in pix.iter().enumerate() {
                        if v != 0.0 {
                            axpy(orow, v, &wdata[wbase + c * co..wbase + (c + 1) * co]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[oh, ow, co], out)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (h, wd, ci) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (kh, kw, co) = (w.dims()[0], w.dims()[1], w.dims()[3]);
    let (oh, ow) = (g.dims()[0], g.dims()[1]);
    let mut dx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = if need_w { vec![0.0; w.len()] } else { Vec::new() };
    let mut db = vec![0.0; co];
    let (xd, wdata, gd) = (x.data(), w.data(), g.data());
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &gd[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            for (d, v) in db.iter_mut().zip(grow) {
                *d += v;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let pbase = (iy as usize * wd + ix as usize) * ci;
                    let wbase = (ky * kw + kx) * ci * co;
                    for c in 0..ci {
                        let wrow = &wdata[wbase + c * co..wbase + (c + 1) * co];
                        if need_x {
                            dx[pbase + c] += dot(grow, wrow);
                        }
                        if need_w {
                            let v = xd[pbase + c];
                            if v != 0.0 {
                                axpy(&mut dw[wbase + c * co..wbase + (c + 1) * co], v, grow);
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = need_x.then(|| Tensor::new(x.dims(), dx).expect("dims"));
    let dw = need_w.then(|| Tensor::new(w.dims(), dw).expect("dims"));
    (dx, dw, Tensor::new(&[co], db).expect("dims"))
}

pub(crate) fn pool_extent(n: usize) -> usize {
    n.div_ceil(2)
}

fn pool2_forward(x: &Tensor) -> Tensor {
    let (h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (oh, ow) = (pool_extent(h), pool_extent(w));
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            let xs = 2 * ox..(2 * ox + 2).min(w);
            let count = (ys.len() * xs.len()) as f64;
            let orow = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for iy in ys {
                for ix in xs.clone() {
                    axpy(orow, 1.0 / count, &x.data()[(iy * w + ix) * c..(iy * w + ix + 1) * c]);
                }
            }
        }
    }
    Tensor::new(&[oh, ow, c], out).expect("dims")
}

pub(crate) fn pool2_backward(dims: &[usize], g: &Tensor) -> Tensor {
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    let (oh, ow) = (g.dims()[0], g.dims()[1]);
    let mut dx = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            let xs = 2 * ox..(2 * ox + 2).min(w);
            let count = (ys.len() * xs.len()) as f64;
            let grow = &g.data()[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for iy in ys {
                for ix in xs.clone() {
                    axpy(&mut dx[(iy * w + ix) * c..(iy * w + ix + 1) * c], 1.0 / count, grow);
                }
            }
        }
    }
    Tensor::new(dims, dx).expect("dims")
}
