//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and, when any
//! input requires a gradient, whatever it needs for the backward pass. A tape
//! lives for one forward/backward pass and is then dropped.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trans {
    N,
    T,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    AddChannel(Var, Var),
    MatMul(Var, Trans, Var, Trans),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    Concat1(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Silu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Reshape(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    Select(Var, usize),
    Stack(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per registered parameter slot, zero-filled for parameters the
    /// loss never reached. `shapes` gives the shape of each slot.
    pub fn param_grads(&self, shapes: &[&[usize]]) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for &(slot, var) in &self.params {
            if let Some(g) = self.get(var) {
                out[slot].add_assign(g);
            }
        }
        out
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides of a stored `rows x cols` matrix, optionally transposed.
fn view(rows: usize, cols: usize, t: Trans) -> (usize, usize, (isize, isize)) {
    match t {
        Trans::N => (rows, cols, (cols as isize, 1)),
        Trans::T => (cols, rows, (1, cols as isize)),
    }
}

fn flip(t: Trans) -> Trans {
    match t {
        Trans::N => Trans::T,
        Trans::T => Trans::N,
    }
}

/// `out (+)= op(a) * op(b)`, both stored row-major with the given dims.
#[allow(clippy::too_many_arguments)]
fn mm<T: Scalar>(
    out: &mut [T],
    a: &[T],
    a_dims: (usize, usize),
    ta: Trans,
    b: &[T],
    b_dims: (usize, usize),
    tb: Trans,
    accumulate: bool,
) {
    let (m, k, sa) = view(a_dims.0, a_dims.1, ta);
    let (k2, n, sb) = view(b_dims.0, b_dims.1, tb);
    debug_assert_eq!(k, k2);
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, sa, b, sb, beta, out, (n as isize, 1));
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - p as isize;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &g) in src.iter().enumerate() {
                        let sx = x as isize + kx as isize - p as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn softmax_slices<T: Scalar>(
    x: &[T],
    mask: Option<&[T]>,
    shape: &[usize],
    axis: usize,
    op: &'static str,
) -> Result<Vec<T>> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    let keep = |i: usize| mask.is_none_or(|m| m[i] != T::zero());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            let mut any = false;
            for j in 0..len {
                if keep(idx(j)) {
                    any = true;
                    max = max.max(x[idx(j)]);
                }
            }
            if !any {
                continue;
            }
            if !max.is_finite() {
                return Err(Error::invalid(op, "slice has no finite logit"));
            }
            let mut sum = T::zero();
            for j in 0..len {
                if keep(idx(j)) {
                    let e = (x[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    sum += e;
                }
            }
            for j in 0..len {
                y[idx(j)] /= sum;
            }
        }
    }
    Ok(y)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            params: Vec::new(),
        }
    }

    /// Tape that records values only; nothing on it can be differentiated.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a trainable tensor under an external slot index, so that
    /// [`Gradients::param_grads`] can map gradients back.
    pub fn param(&mut self, slot: usize, value: Tensor<T>) -> Var {
        let v = self.leaf(value, true);
        if self.grad_enabled {
            self.params.push((slot, v));
        }
        v
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, parents: &[Var], op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, out, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, &[x], Op::Scale(x, s))
    }

    /// `x[..., j] + b[j]` for `b` of shape `[n]` matching the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let n = bs[0];
        let vb = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&vb) {
                *o += bb;
            }
        }
        self.push("add_bias", out, &[x, b], Op::AddBias(x, b))
    }

    /// `x[n, c, ...] + v[n, c]`, broadcast over trailing spatial axes.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if xs.len() < 2 || vs != &xs[..2] {
            return Err(Error::shape("add_channel", xs, vs));
        }
        let spatial: usize = xs[2..].iter().product();
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for (plane, &add) in out.data_mut().chunks_mut(spatial.max(1)).zip(&vv) {
            for o in plane {
                *o += add;
            }
        }
        self.push("add_channel", out, &[x, v], Op::AddChannel(x, v))
    }

    fn matmul_impl(&mut self, a: Var, ta: Trans, b: Var, tb: Trans) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, _) = view(sa[0], sa[1], ta);
        let (k2, n, _) = view(sb[0], sb[1], tb);
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (da, db) = ((sa[0], sa[1]), (sb[0], sb[1]));
        let mut out = vec![T::zero(); m * n];
        mm(
            &mut out,
            self.value(a).data(),
            da,
            ta,
            self.value(b).data(),
            db,
            tb,
            false,
        );
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Op::MatMul(a, ta, b, tb),
        )
    }

    /// `a * b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, Trans::N, b, Trans::N)
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, Trans::T, b, Trans::N)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, Trans::N, b, Trans::T)
    }

    /// `x W^T + b` for `x: [rows, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        self.add_bias(y, b)
    }

    /// Stride-1 convolution with zero "same" padding and an odd square kernel.
    ///
    /// `x: [n, cin, h, w]`, `w: [cout, cin, k, k]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d bias", &ws, self.shape(b)));
            }
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let hw = h * wd;
        let ck = cin * k * k;
        let mut out = vec![T::zero(); n * cout * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ck * hw] };
        for s in 0..n {
            let xs_ = &xv[s * cin * hw..(s + 1) * cin * hw];
            let rhs: &[T] = if k == 1 {
                xs_
            } else {
                im2col(xs_, cin, h, wd, k, &mut cols);
                &cols
            };
            let dst = &mut out[s * cout * hw..(s + 1) * cout * hw];
            mm(dst, wv, (cout, ck), Trans::N, rhs, (ck, hw), Trans::N, false);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (plane, &bb) in out.chunks_mut(hw).zip(bv.iter().cycle()) {
                for o in plane {
                    *o += bb;
                }
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        self.push(
            "conv2d",
            Tensor::from_parts(vec![n, cout, h, wd], out),
            &parents,
            Op::Conv2d { x, w, b, k },
        )
    }

    /// Nearest-neighbour 2x upsampling of the two trailing axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::invalid("upsample2x", format!("needs >= 2 axes, got {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = self.value(x).len() / (h * w).max(1);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        self.push("upsample2x", Tensor::from_parts(shape, out), &[x], Op::Upsample2x(x))
    }

    /// 2x2 average pooling of the two trailing axes; both must be even.
    pub fn avgpool2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        if r < 2 || !xs[r - 2].is_multiple_of(2) || !xs[r - 1].is_multiple_of(2) {
            return Err(Error::invalid(
                "avgpool2x",
                format!("needs even trailing axes, got {xs:?}"),
            ));
        }
        let (h, w) = (xs[r - 2], xs[r - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = self.value(x).len() / (h * w);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    d[y * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter;
                }
            }
        }
        let mut shape = xs;
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        self.push("avgpool2x", Tensor::from_parts(shape, out), &[x], Op::AvgPool2x(x))
    }

    /// Concatenation along axis 1 (channels).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", &sa, &sb));
        }
        let rest: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * rest, sb[1] * rest);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for s in 0..sa[0] {
            out.extend_from_slice(&va[s * ca..(s + 1) * ca]);
            out.extend_from_slice(&vb[s * cb..(s + 1) * cb]);
        }
        let mut shape = sa;
        shape[1] += sb[1];
        self.push(
            "concat_channels",
            Tensor::from_parts(shape, out),
            &[a, b],
            Op::Concat1(a, b),
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let y = softmax_slices(self.value(x).data(), None, &shape, axis, "softmax")?;
        self.push("softmax", Tensor::from_parts(shape, y), &[x], Op::Softmax { x, axis })
    }

    /// Softmax restricted to entries where `mask != 0`; masked entries come
    /// out as exact zeros and a fully masked slice is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor<T>, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "masked_softmax",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        if mask.shape() != shape.as_slice() {
            return Err(Error::shape("masked_softmax", &shape, mask.shape()));
        }
        let y = softmax_slices(self.value(x).data(), Some(mask.data()), &shape, axis, "masked_softmax")?;
        self.push(
            "masked_softmax",
            Tensor::from_parts(shape, y),
            &[x],
            Op::Softmax { x, axis },
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push("silu", out, &[x], Op::Silu(x))
    }

    /// Group normalization over `[n, c, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(Error::invalid(
                "group_norm",
                format!("shape {xs:?} incompatible with {groups} groups"),
            ));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm affine", &xs, self.shape(gamma)));
        }
        let n = xs[0];
        let spatial: usize = xs[2..].iter().product();
        let cg = c / groups;
        let m = cg * spatial;
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let inv_m = T::one() / T::of(m as f64);
        for s in 0..n {
            for g in 0..groups {
                let off = (s * c + g * cg) * spatial;
                let seg = &xv[off..off + m];
                let mean = seg.iter().copied().sum::<T>() * inv_m;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
                let rstd = T::one() / (var + eps).sqrt();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let base = off + ci * spatial;
                    for i in 0..spatial {
                        out[base + i] = (xv[base + i] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        self.push(
            "group_norm",
            Tensor::from_parts(xs, out),
            &[x, gamma, beta],
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push("mean", Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.is_empty() {
            return Err(Error::invalid("mse", "empty tensor"));
        }
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::of(va.len() as f64);
        self.push("mse", Tensor::scalar(s), &[a, b], Op::Mse(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, &[x], Op::Reshape(x))
    }

    /// Rows of `table: [v, c]` picked by `ids`, giving `[ids.len(), c]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::invalid("embed", format!("table must be 2-D, got {ts:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::invalid(
                "embed",
                format!("id {bad} out of range for {} rows", ts[0]),
            ));
        }
        let c = ts[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        self.push(
            "embed",
            Tensor::from_parts(vec![ids.len(), c], out),
            &[table],
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean over axis 0 of a 2-D tensor, keeping it as a `[1, c]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] == 0 {
            return Err(Error::invalid(
                "mean_rows",
                format!("needs non-empty 2-D input, got {xs:?}"),
            ));
        }
        let (r, c) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let inv = T::one() / T::of(r as f64);
        let out = (0..c).map(|j| (0..r).map(|i| xv[i * c + j]).sum::<T>() * inv).collect();
        self.push("mean_rows", Tensor::from_parts(vec![1, c], out), &[x], Op::MeanRows(x))
    }

    /// Slice `index` of the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let out = self.value(x).select(index)?;
        self.push("select", out, &[x], Op::Select(x, index))
    }

    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = items.iter().map(|&v| self.value(v).clone()).collect();
        let out = Tensor::stack(&values)?;
        self.push("stack", out, items, Op::Stack(items.to_vec()))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![T::one()]));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data().to_vec();
                let vb = self.value(*b).data().to_vec();
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(&vb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(&va) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    let n = d.len();
                    for row in gd.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::AddChannel(x, v) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                }
                let spatial: usize = self.shape(*x)[2..].iter().product();
                if let Some(d) = self.slot(grads, *v) {
                    for (d, plane) in d.iter_mut().zip(gd.chunks(spatial.max(1))) {
                        *d += plane.iter().copied().sum::<T>();
                    }
                }
            }
            Op::MatMul(a, ta, b, tb) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = ((sa[0], sa[1]), (sb[0], sb[1]));
                let (m, _, _) = view(da.0, da.1, *ta);
                let (_, n, _) = view(db.0, db.1, *tb);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.slot(grads, *a) {
                    match ta {
                        // dA = dC op(B)^T
                        Trans::N => mm(d, gd, (m, n), Trans::N, bv, db, flip(*tb), true),
                        // dA = op(B) dC^T
                        Trans::T => mm(d, bv, db, *tb, gd, (m, n), Trans::T, true),
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    match tb {
                        // dB = op(A)^T dC
                        Trans::N => mm(d, av, da, flip(*ta), gd, (m, n), Trans::N, true),
                        // dB = dC^T op(A)
                        Trans::T => mm(d, gd, (m, n), Trans::T, av, da, *ta, true),
                    }
                }
            }
            Op::Conv2d { x, w, b, k } => {
                let k = *k;
                let xs = self.shape(*x);
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.shape(*w)[0];
                let hw = h * wd;
                let ck = cin * k * k;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(b) = b {
                    if let Some(d) = self.slot(grads, *b) {
                        for (plane, dd) in gd.chunks(hw).zip((0..cout).cycle()) {
                            d[dd] += plane.iter().copied().sum::<T>();
                        }
                    }
                }
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let mut cols = vec![T::zero(); if k == 1 { 0 } else { ck * hw }];
                let mut dcols = vec![T::zero(); if need_x && k != 1 { ck * hw } else { 0 }];
                for s in 0..n {
                    let gs = &gd[s * cout * hw..(s + 1) * cout * hw];
                    let xs_ = &xv[s * cin * hw..(s + 1) * cin * hw];
                    if need_w {
                        let rhs: &[T] = if k == 1 {
                            xs_
                        } else {
                            im2col(xs_, cin, h, wd, k, &mut cols);
                            &cols
                        };
                        let dw = self.slot(grads, *w).expect("checked requires_grad");
                        mm(dw, gs, (cout, hw), Trans::N, rhs, (ck, hw), Trans::T, true);
                    }
                    if need_x {
                        let dx_all = self.slot(grads, *x).expect("checked requires_grad");
                        let dx = &mut dx_all[s * cin * hw..(s + 1) * cin * hw];
                        if k == 1 {
                            mm(dx, wv, (cout, ck), Trans::T, gs, (cout, hw), Trans::N, true);
                        } else {
                            mm(&mut dcols, wv, (cout, ck), Trans::T, gs, (cout, hw), Trans::N, false);
                            col2im(&dcols, cin, h, wd, k, dx);
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                if let Some(d) = self.slot(grads, *x) {
                    let planes = d.len() / (h * w).max(1);
                    for p in 0..planes {
                        let gp = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dp = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dp[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::AvgPool2x(x) => {
                let xs = self.shape(*x);
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                if let Some(d) = self.slot(grads, *x) {
                    let planes = d.len() / (h * w);
                    for p in 0..planes {
                        let gp = &gd[p * oh * ow..(p + 1) * oh * ow];
                        let dp = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            for xx in 0..w {
                                dp[y * w + xx] += gp[(y / 2) * ow + xx / 2] * quarter;
                            }
                        }
                    }
                }
            }
            Op::Concat1(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let rest: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * rest, sb[1] * rest);
                let n = sa[0];
                if let Some(d) = self.slot(grads, *a) {
                    for s in 0..n {
                        let src = &gd[s * (ca + cb)..s * (ca + cb) + ca];
                        d[s * ca..(s + 1) * ca].iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for s in 0..n {
                        let src = &gd[s * (ca + cb) + ca..(s + 1) * (ca + cb)];
                        d[s * cb..(s + 1) * cb].iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(d) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + ii;
                            let dot: T = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                d[idx(j)] += y[idx(j)] * (gd[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(gd).zip(xv) {
                        let s = sigmoid(v);
                        *d += g * s * (T::one() + v * (T::one() - s));
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let cg = c / groups;
                let m = cg * spatial;
                let inv_m = T::one() / T::of(m as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let need_x = self.nodes[x.0].requires_grad;
                let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
                for s in 0..n {
                    for g in 0..*groups {
                        let (mu, rs) = (mean[s * groups + g], rstd[s * groups + g]);
                        let off = (s * c + g * cg) * spatial;
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            let base = off + ci * spatial;
                            for j in 0..spatial {
                                let xhat = (xv[base + j] - mu) * rs;
                                let dy = gd[base + j];
                                dgamma[ch] += dy * xhat;
                                dbeta[ch] += dy;
                                let dxhat = dy * gv[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        if need_x {
                            let (a, b) = (sum_dxhat * inv_m, sum_dxhat_xhat * inv_m);
                            for ci in 0..cg {
                                let ch = g * cg + ci;
                                let base = off + ci * spatial;
                                for j in 0..spatial {
                                    let xhat = (xv[base + j] - mu) * rs;
                                    let dxhat = gd[base + j] * gv[ch];
                                    dx[base + j] = rs * (dxhat - a - xhat * b);
                                }
                            }
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(&dx).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *gamma) {
                    d.iter_mut().zip(&dgamma).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *beta) {
                    d.iter_mut().zip(&dbeta).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let g0 = gd[0] / T::of(n as f64);
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len();
                let k = gd[0] * T::of(2.0 / n as f64);
                let diff: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| (x - y) * k)
                    .collect();
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(&diff).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(&diff).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Embed { table, ids } => {
                let c = self.shape(*table)[1];
                if let Some(d) = self.slot(grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        d[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&gd[row * c..(row + 1) * c])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::MeanRows(x) => {
                let xs = self.shape(*x);
                let (r, c) = (xs[0], xs[1]);
                let inv = T::one() / T::of(r as f64);
                if let Some(d) = self.slot(grads, *x) {
                    for row in d.chunks_mut(c) {
                        row.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * inv);
                    }
                }
            }
            Op::Select(x, index) => {
                let size = gd.len();
                if let Some(d) = self.slot(grads, *x) {
                    d[index * size..(index + 1) * size]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(d, &g)| *d += g);
                }
            }
            Op::Stack(items) => {
                let size = gd.len() / items.len().max(1);
                for (k, &v) in items.iter().enumerate() {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut()
                            .zip(&gd[k * size..(k + 1) * size])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
        }
        Ok(())
    }
}
