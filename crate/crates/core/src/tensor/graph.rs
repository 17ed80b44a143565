use super::kernels as k;
use super::{Element, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var },
    Upsample { x: Var, factor: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: k::BnSaved<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, inv_std: Vec<T>, mean: Vec<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Softplus { x: Var },
    SoftmaxChannels { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Mean { x: Var },
    GridSample { x: Var, grid: Var },
    AffineGrid { theta: Var },
    BceWithLogits { x: Var, target: Tensor<T> },
    SmoothL1 { x: Var, target: Tensor<T> },
    ConstrainTheta { raw: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the root w.r.t. `v`; `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the tape is a topological order by construction.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push(value, op, parents))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = k::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_checked("conv2d", out, Op::Conv2d { x, w, b }, &parents)
    }

    /// 2x2/s2 max pooling; `ceil` admits odd extents.
    pub fn maxpool2d(&mut self, x: Var, ceil: bool) -> Result<Var> {
        let (out, argmax) = k::maxpool2d_forward(self.value(x), ceil)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// 3x3/s2/p1 average pooling, divisor 9.
    pub fn avgpool2d(&mut self, x: Var) -> Result<Var> {
        let out = k::avgpool2d_forward(self.value(x))?;
        Ok(self.push(out, Op::AvgPool { x }, &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("upsample_nearest", format!("{s:?}")));
        }
        let (h, w) = (s[2] * factor, s[3] * factor);
        self.upsample_nearest_to(x, factor, h, w)
    }

    /// Nearest upsampling by `factor`, cropped to `out_h x out_w`.
    pub fn upsample_nearest_to(&mut self, x: Var, factor: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let out = k::upsample_nearest_forward(self.value(x), factor, out_h, out_w)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    /// Training-mode batchnorm. Also returns the batch mean and biased variance.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (out, saved) = k::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), T::from_f64(eps))?;
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let v = self.push_checked("batchnorm2d", out, Op::BatchNorm { x, gamma, beta, saved }, &[x, gamma, beta])?;
        Ok((v, mean, var))
    }

    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (out, inv_std) =
            k::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), mean, var, T::from_f64(eps))?;
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            inv_std,
            mean: mean.to_vec(),
        };
        self.push_checked("batchnorm2d", out, op, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh { x }, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus { x }, &[x])
    }

    /// Softmax across axis 1 for every other index.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = softmax_axis1(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxChannels { x }, &[x]))
    }

    /// `x: [B, F]`, `w: [O, F]`, `b: [O]` → `[B, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (bn, f, o) = match (xs, ws, bs) {
            ([bn, f], [o, f2], [o2]) if f == f2 && o == o2 => (*bn, *f, *o),
            _ => return Err(Error::shape("linear", format!("x {xs:?} w {ws:?} b {bs:?}"))),
        };
        let mut out = vec![T::zero(); bn * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(bn, f, o, self.value(x).data(), false, self.value(w).data(), true, T::one(), &mut out);
        let out = Tensor::from_vec(vec![bn, o], out)?;
        self.push_checked("linear", out, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("narrow", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::from_f64(t.len() as f64));
        self.push(out, Op::Mean { x }, &[x])
    }

    /// Bilinear sampling of `x: [B,C,H,W]` at `grid: [B,h,w,2]`.
    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        let out = k::grid_sample_forward(self.value(x), self.value(grid))?;
        Ok(self.push(out, Op::GridSample { x, grid }, &[x, grid]))
    }

    /// `theta: [B,2,3]` → grid `[B,out_h,out_w,2]`.
    pub fn affine_grid(&mut self, theta: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = k::affine_grid_forward(self.value(theta), out_h, out_w)?;
        Ok(self.push(out, Op::AffineGrid { theta }, &[theta]))
    }

    /// Mean binary cross entropy of `sigmoid(x)` against `target`, in the
    /// stable `max(x,0) - x t + ln(1 + e^-|x|)` form.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("bce_with_logits", self.shape(x), target.shape())?;
        let xs = self.value(x).data();
        let total: T = xs
            .iter()
            .zip(target.data())
            .map(|(&v, &t)| v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / T::from_f64(xs.len() as f64));
        let op = Op::BceWithLogits {
            x,
            target: target.clone(),
        };
        self.push_checked("bce_with_logits", out, op, &[x])
    }

    /// Mean smooth-L1 (Huber with unit threshold) of `x - target`.
    pub fn smooth_l1(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("smooth_l1", self.shape(x), target.shape())?;
        let xs = self.value(x).data();
        let half = T::from_f64(0.5);
        let total: T = xs
            .iter()
            .zip(target.data())
            .map(|(&v, &t)| {
                let d = (v - t).abs();
                if d < T::one() {
                    half * d * d
                } else {
                    d - half
                }
            })
            .sum();
        let out = Tensor::scalar(total / T::from_f64(xs.len() as f64));
        let op = Op::SmoothL1 {
            x,
            target: target.clone(),
        };
        self.push_checked("smooth_l1", out, op, &[x])
    }

    /// `raw: [.., 4]` holding `(s_x, t_x, s_y, t_y)` → `[.., 2, 3]` rows
    /// `[[softplus(s_x), 0, tanh(t_x)], [0, softplus(s_y), tanh(t_y)]]`.
    /// The off-diagonal entries are structural zeros with zero gradient.
    pub fn constrain_theta(&mut self, raw: Var) -> Result<Var> {
        let s = self.shape(raw).to_vec();
        if s.last() != Some(&4) {
            return Err(Error::shape("constrain_theta", format!("{s:?}")));
        }
        let src = self.value(raw).data();
        let mut out = Vec::with_capacity(src.len() / 4 * 6);
        for r in src.chunks(4) {
            out.extend_from_slice(&[softplus(r[0]), T::zero(), r[1].tanh(), T::zero(), softplus(r[2]), r[3].tanh()]);
        }
        let mut shape = s;
        shape.pop();
        shape.extend_from_slice(&[2, 3]);
        let out = Tensor::from_vec(shape, out)?;
        self.push_checked("constrain_theta", out, Op::ConstrainTheta { raw }, &[raw])
    }

    /// Reverse-mode accumulation from a scalar `root`. Nodes that do not
    /// influence the root get no gradient (`None`).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rs = self.shape(root);
        if rs.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rs.to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
            debug_assert!(v.0 < i, "graph edge must point backwards");
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let need = [ng(*x), ng(*w), b.is_some_and(ng)];
                let r = k::conv2d_backward(self.value(*x), self.value(*w), g, need)?;
                if let Some(t) = r.input {
                    acc(*x, t)?;
                }
                if let Some(t) = r.weight {
                    acc(*w, t)?;
                }
                if let (Some(b), Some(t)) = (b, r.bias) {
                    acc(*b, t)?;
                }
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, k::maxpool2d_backward(self.shape(*x), argmax, g))?;
            }
            Op::AvgPool { x } => acc(*x, k::avgpool2d_backward(self.shape(*x), g))?,
            Op::Upsample { x, factor } => {
                acc(*x, k::upsample_nearest_backward(self.shape(*x), *factor, g))?;
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = k::batchnorm_backward(saved, self.value(*gamma), g);
                if ng(*x) {
                    acc(*x, dx)?;
                }
                if ng(*gamma) {
                    acc(*gamma, dg)?;
                }
                if ng(*beta) {
                    acc(*beta, db)?;
                }
            }
            Op::BatchNormEval { x, gamma, beta, inv_std, mean } => {
                let s = g.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let xs = self.value(*x).data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dgam = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (j, (&gv, &xv)) in g.data().iter().zip(xs).enumerate() {
                    let ci = (j / hw) % c;
                    dx[j] = gv * gam[ci] * inv_std[ci];
                    dgam[ci] = dgam[ci] + gv * (xv - mean[ci]) * inv_std[ci];
                    dbeta[ci] = dbeta[ci] + gv;
                }
                if ng(*x) {
                    acc(*x, Tensor::from_vec(s.to_vec(), dx)?)?;
                }
                if ng(*gamma) {
                    acc(*gamma, Tensor::from_vec(vec![c], dgam)?)?;
                }
                if ng(*beta) {
                    acc(*beta, Tensor::from_vec(vec![c], dbeta)?)?;
                }
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let d = g.data().iter().zip(xs).map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() });
                acc(*x, Tensor::from_vec(g.shape().to_vec(), d.collect())?)?;
            }
            Op::Sigmoid { x } => {
                let ys = node.value.data();
                let d = g.data().iter().zip(ys).map(|(&gv, &y)| gv * y * (T::one() - y));
                acc(*x, Tensor::from_vec(g.shape().to_vec(), d.collect())?)?;
            }
            Op::Tanh { x } => {
                let ys = node.value.data();
                let d = g.data().iter().zip(ys).map(|(&gv, &y)| gv * (T::one() - y * y));
                acc(*x, Tensor::from_vec(g.shape().to_vec(), d.collect())?)?;
            }
            Op::Softplus { x } => {
                let xs = self.value(*x).data();
                let d = g.data().iter().zip(xs).map(|(&gv, &v)| gv * sigmoid(v));
                acc(*x, Tensor::from_vec(g.shape().to_vec(), d.collect())?)?;
            }
            Op::SoftmaxChannels { x } => {
                let y = &node.value;
                let s = y.shape();
                let (outer, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let (ys, gs) = (y.data(), g.data());
                let mut dx = vec![T::zero(); ys.len()];
                for o in 0..outer {
                    for p in 0..inner {
                        let idx = |ci: usize| (o * c + ci) * inner + p;
                        let dot: T = (0..c).map(|ci| ys[idx(ci)] * gs[idx(ci)]).sum();
                        for ci in 0..c {
                            dx[idx(ci)] = ys[idx(ci)] * (gs[idx(ci)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::from_vec(s.to_vec(), dx)?)?;
            }
            Op::Linear { x, w, b } => {
                let (bn, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if ng(*x) {
                    let mut dx = vec![T::zero(); bn * f];
                    T::gemm(bn, o, f, g.data(), false, self.value(*w).data(), false, T::zero(), &mut dx);
                    acc(*x, Tensor::from_vec(vec![bn, f], dx)?)?;
                }
                if ng(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(o, bn, f, g.data(), true, self.value(*x).data(), false, T::zero(), &mut dw);
                    acc(*w, Tensor::from_vec(vec![o, f], dw)?)?;
                }
                if ng(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, Tensor::from_vec(vec![o], db)?)?;
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, inner) = outer_inner(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if ng(v) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + n * inner]);
                        }
                        acc(v, Tensor::from_vec(self.shape(v).to_vec(), d)?)?;
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, inner) = outer_inner(s, *axis);
                let len = g.shape()[*axis];
                let mut d = Tensor::zeros(s.to_vec());
                let dd = d.data_mut();
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    dd[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d)?;
            }
            Op::Reshape { x } => acc(*x, g.clone().reshape(self.shape(*x).to_vec())?)?,
            Op::Add { a, b } => {
                if ng(*a) {
                    acc(*a, g.clone())?;
                }
                if ng(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Mul { a, b } => {
                if ng(*a) {
                    let d = g.data().iter().zip(self.value(*b).data()).map(|(&p, &q)| p * q);
                    acc(*a, Tensor::from_vec(g.shape().to_vec(), d.collect())?)?;
                }
                if ng(*b) {
                    let d = g.data().iter().zip(self.value(*a).data()).map(|(&p, &q)| p * q);
                    acc(*b, Tensor::from_vec(g.shape().to_vec(), d.collect())?)?;
                }
            }
            Op::Scale { x, c } => acc(*x, g.map(|v| v * *c))?,
            Op::Sum { x } => acc(*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0]))?,
            Op::Mean { x } => {
                let n = T::from_f64(self.value(*x).len() as f64);
                acc(*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0] / n))?;
            }
            Op::GridSample { x, grid } => {
                let (dx, dg) = k::grid_sample_backward(self.value(*x), self.value(*grid), g, ng(*x), ng(*grid))?;
                if let Some(t) = dx {
                    acc(*x, t)?;
                }
                if let Some(t) = dg {
                    acc(*grid, t)?;
                }
            }
            Op::AffineGrid { theta } => acc(*theta, k::affine_grid_backward(g))?,
            Op::BceWithLogits { x, target } => {
                let xs = self.value(*x).data();
                let k = g.data()[0] / T::from_f64(xs.len() as f64);
                let d = xs.iter().zip(target.data()).map(|(&v, &t)| (sigmoid(v) - t) * k);
                acc(*x, Tensor::from_vec(self.shape(*x).to_vec(), d.collect())?)?;
            }
            Op::SmoothL1 { x, target } => {
                let xs = self.value(*x).data();
                let k = g.data()[0] / T::from_f64(xs.len() as f64);
                let d = xs.iter().zip(target.data()).map(|(&v, &t)| {
                    let d = v - t;
                    let slope = if d.abs() < T::one() { d } else { d.signum() };
                    slope * k
                });
                acc(*x, Tensor::from_vec(self.shape(*x).to_vec(), d.collect())?)?;
            }
            Op::ConstrainTheta { raw } => {
                let r = self.value(*raw).data();
                let ys = node.value.data();
                let mut d = vec![T::zero(); r.len()];
                for (j, (rr, gg)) in r.chunks(4).zip(g.data().chunks(6)).enumerate() {
                    let y = &ys[j * 6..j * 6 + 6];
                    d[j * 4] = gg[0] * sigmoid(rr[0]);
                    d[j * 4 + 1] = gg[2] * (T::one() - y[2] * y[2]);
                    d[j * 4 + 2] = gg[4] * sigmoid(rr[2]);
                    d[j * 4 + 3] = gg[5] * (T::one() - y[5] * y[5]);
                }
                acc(*raw, Tensor::from_vec(self.shape(*raw).to_vec(), d)?)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Element>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn softmax_axis1<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("softmax_channels", format!("{s:?}")));
    }
    let (outer, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for o in 0..outer {
        for p in 0..inner {
            let idx = |ci: usize| (o * c + ci) * inner + p;
            let m = (0..c).map(|ci| xs[idx(ci)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ci in 0..c {
                let e = (xs[idx(ci)] - m).exp();
                out[idx(ci)] = e;
                z = z + e;
            }
            for ci in 0..c {
                out[idx(ci)] = out[idx(ci)] / z;
            }
        }
    }
    Tensor::from_vec(s.to_vec(), out)
}
