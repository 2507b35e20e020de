//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape of operation records. Every op method
//! evaluates its forward value immediately and returns a [`Var`] handle;
//! [`Graph::backward`] then walks the tape once in reverse and returns the
//! gradient of a scalar loss with respect to every differentiable leaf.
//!
//! Nodes only record what their backward pass needs. Inputs that do not
//! depend on a differentiable leaf are skipped entirely, so an attack that
//! differentiates with respect to the image never pays for weight gradients.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PadMode, PlaneMap, PoolGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    SqrtEps(Var),
    Relu(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool { x: Var, geom: PoolGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Linear { x: Var, weight: Var, bias: Option<Var> },
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Margin { logits: Var, routes: Vec<Option<(usize, usize)>> },
    Resample { x: Var, map: Arc<PlaneMap> },
    WeightedSum { inputs: Vec<Var>, weights: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss, keyed by differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    /// Gradient for `v`, or an error if `v` is not a differentiable leaf.
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.grads
            .get(&v)
            .ok_or_else(|| Error::invalid(format!("node {} is not a differentiable leaf", v.0)))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `(outer, axis extent, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    /// A differentiable input; [`Graph::backward`] reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(name, tb)?;
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// `|x|`, with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    /// `sqrt(x + eps)`; `eps > 0` keeps the derivative finite at zero.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid("sqrt_eps needs eps > 0"));
        }
        let t = self.value(a);
        if t.data().iter().any(|&x| x + eps < 0.0) {
            return Err(Error::invalid("sqrt_eps of a negative value"));
        }
        let v = t.map(|x| (x + eps).sqrt());
        let ng = self.needs(a);
        Ok(self.push(v, Op::SqrtEps(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x: a, axis }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Flattens `[B, ...]` to `[B, F]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let b = shape[0];
        let f = shape[1..].iter().product::<usize>().max(1);
        self.reshape(a, vec![b, f])
    }

    /// 2-D cross-correlation of `[B, C, H, W]` with `[K, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("conv2d")?;
        let (k, wc, kh, kw) = self.value(weight).dims4("conv2d weight")?;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [k] {
                return Err(Error::shape(
                    "conv2d bias",
                    format!("expected [{k}], got {:?}", self.shape(bv)),
                ));
            }
        }
        let geom = ConvGeom {
            b,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
            mode,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|bv| self.value(bv).data()),
            &geom,
        );
        let ng = self.needs(input) || self.needs(weight) || bias.is_some_and(|bv| self.needs(bv));
        Ok(self.push(
            Tensor::from_parts(vec![b, k, geom.ho, geom.wo], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    fn pool_geom(&self, x: Var, k: usize, op: &'static str) -> Result<PoolGeom> {
        let (b, c, h, w) = self.value(x).dims4(op)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                op,
                format!("pool size {k} must divide spatial dims {h}x{w}"),
            ));
        }
        Ok(PoolGeom { planes: b * c, h, w, k })
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let geom = self.pool_geom(x, k, "avgpool2d")?;
        let out = kernels::avgpool_forward(self.value(x).data(), &geom);
        let s = self.shape(x);
        let shape = vec![s[0], s[1], s[2] / k, s[3] / k];
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AvgPool { x, geom }, ng))
    }

    /// Non-overlapping `k x k` max pooling.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let geom = self.pool_geom(x, k, "maxpool2d")?;
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), &geom);
        let s = self.shape(x);
        let shape = vec![s[0], s[1], s[2] / k, s[3] / k];
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool { x, argmax }, ng))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("global_avgpool")?;
        let inv = 1.0 / (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() * inv)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![b, c], out), Op::GlobalAvgPool(x), ng))
    }

    /// `x W^T + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(weight));
        let (&[bsz, fin], &[fout, win]) = (xs, ws) else {
            return Err(Error::shape(
                "linear",
                format!("expected x [B, in] and W [out, in], got {xs:?} and {ws:?}"),
            ));
        };
        if fin != win {
            return Err(Error::shape("linear", format!("x has {fin} features, W expects {win}")));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [fout] {
                return Err(Error::shape("linear bias", format!("expected [{fout}], got {:?}", self.shape(bv))));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(weight).data());
        let bd = bias.map(|bv| self.value(bv).data());
        let mut out = vec![0.0; bsz * fout];
        for i in 0..bsz {
            let row = &xd[i * fin..(i + 1) * fin];
            for o in 0..fout {
                let wrow = &wd[o * fin..(o + 1) * fin];
                let mut s = bd.map_or(0.0, |b| b[o]);
                for (a, w) in row.iter().zip(wrow) {
                    s += a * w;
                }
                out[i * fout + o] = s;
            }
        }
        let ng = self.needs(x) || self.needs(weight) || bias.is_some_and(|bv| self.needs(bv));
        Ok(self.push(Tensor::from_parts(vec![bsz, fout], out), Op::Linear { x, weight, bias }, ng))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (d[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, ng))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let &[b, c] = t.shape() else {
            return Err(Error::shape("cross_entropy", format!("expected [B, C], got {:?}", t.shape())));
        };
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", format!("{} labels for batch {b}", labels.len())));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            let row = &t.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[y];
        }
        let v = Tensor::scalar(loss / b as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over the batch of `max(z_y - max_{c != y} z_c, -kappa)`.
    pub fn margin_loss(&mut self, logits: Var, labels: &[usize], kappa: f64) -> Result<Var> {
        let t = self.value(logits);
        let &[b, c] = t.shape() else {
            return Err(Error::shape("margin_loss", format!("expected [B, C], got {:?}", t.shape())));
        };
        if c < 2 {
            return Err(Error::shape("margin_loss", "needs at least two classes"));
        }
        if labels.len() != b {
            return Err(Error::shape("margin_loss", format!("{} labels for batch {b}", labels.len())));
        }
        let mut routes = Vec::with_capacity(b);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            let row = &t.data()[i * c..(i + 1) * c];
            let other = (0..c)
                .filter(|&j| j != y)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(bj) if row[bj] >= row[j] => Some(bj),
                    _ => Some(j),
                })
                .expect("c >= 2");
            let m = row[y] - row[other];
            if m > -kappa {
                total += m;
                routes.push(Some((i * c + y, i * c + other)));
            } else {
                total += -kappa;
                routes.push(None);
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(total / b as f64), Op::Margin { logits, routes }, ng))
    }

    /// Applies a plane map to every `[H, W]` plane of a `[B, C, H, W]` tensor.
    pub fn resample(&mut self, x: Var, map: Arc<PlaneMap>) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("resample")?;
        if (h, w) != map.input_dims() {
            return Err(Error::shape(
                "resample",
                format!("map expects {:?} planes, got {h}x{w}", map.input_dims()),
            ));
        }
        let out = map.forward(self.value(x).data(), b * c);
        let (oh, ow) = map.output_dims();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![b, c, oh, ow], out), Op::Resample { x, map }, ng))
    }

    /// `sum_i weights[i] * inputs[i]`, accumulated in list order.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("weighted_sum of nothing"))?;
        if inputs.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} weights",
                inputs.len(),
                weights.len()
            )));
        }
        let shape = self.shape(first).to_vec();
        let mut acc = vec![0.0; self.value(first).numel()];
        for (&v, &wt) in inputs.iter().zip(weights) {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", format!("{:?} vs {shape:?}", t.shape())));
            }
            for (a, x) in acc.iter_mut().zip(t.data()) {
                *a += wt * x;
            }
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_parts(shape, acc),
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Every differentiable leaf
    /// gets an entry, zero-filled if the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let shape = node.value.shape().to_vec();
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(format!("leaf {id}")));
                }
                out.grads.insert(Var(id), Tensor::from_parts(shape, g));
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot!(v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = slot!(*b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(d) = slot!(*a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * vb[i];
                    }
                }
                if let Some(d) = slot!(*b) {
                    for i in 0..g.len() {
                        d[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = slot!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::Abs(a) => {
                let va = nodes[a.0].value.data();
                if let Some(d) = slot!(*a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * sign(va[i]);
                    }
                }
            }
            Op::SqrtEps(a) => {
                let y = node.value.data();
                if let Some(d) = slot!(*a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * 0.5 / y[i];
                    }
                }
            }
            Op::Relu(a) => {
                let va = nodes[a.0].value.data();
                if let Some(d) = slot!(*a) {
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = slot!(*a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                if let Some(d) = slot!(*x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut d[(o * n + j) * inner..(o * n + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = slot!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let xin = nodes[input.0].value.data();
                let wt = nodes[weight.0].value.data();
                let mut dx = nodes[input.0].needs_grad.then(|| vec![0.0; xin.len()]);
                let mut dw = nodes[weight.0].needs_grad.then(|| vec![0.0; wt.len()]);
                let mut db = bias.filter(|b| nodes[b.0].needs_grad).map(|_| vec![0.0; geom.k]);
                kernels::conv2d_backward(xin, wt, g, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (v, part) in [(Some(*input), dx), (Some(*weight), dw), (*bias, db)] {
                    if let (Some(v), Some(part)) = (v, part) {
                        if let Some(d) = slot!(v) {
                            d.iter_mut().zip(&part).for_each(|(d, p)| *d += p);
                        }
                    }
                }
            }
            Op::AvgPool { x, geom } => {
                if let Some(d) = slot!(*x) {
                    kernels::avgpool_backward(g, geom, d);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(d) = slot!(*x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += g[o];
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f64;
                if let Some(d) = slot!(*x) {
                    for (p, &gv) in g.iter().enumerate() {
                        d[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d += gv * inv);
                    }
                }
            }
            Op::Linear { x, weight, bias } => {
                let xs = nodes[x.0].value.shape();
                let (bsz, fin) = (xs[0], xs[1]);
                let fout = nodes[weight.0].value.shape()[0];
                let xd = nodes[x.0].value.data();
                let wd = nodes[weight.0].value.data();
                if let Some(d) = slot!(*x) {
                    for i in 0..bsz {
                        for o in 0..fout {
                            let gv = g[i * fout + o];
                            let wrow = &wd[o * fin..(o + 1) * fin];
                            for (dd, w) in d[i * fin..(i + 1) * fin].iter_mut().zip(wrow) {
                                *dd += gv * w;
                            }
                        }
                    }
                }
                if let Some(d) = slot!(*weight) {
                    for i in 0..bsz {
                        let row = &xd[i * fin..(i + 1) * fin];
                        for o in 0..fout {
                            let gv = g[i * fout + o];
                            for (dd, a) in d[o * fin..(o + 1) * fin].iter_mut().zip(row) {
                                *dd += gv * a;
                            }
                        }
                    }
                }
                if let Some(bv) = bias {
                    if let Some(d) = slot!(*bv) {
                        for i in 0..bsz {
                            for o in 0..fout {
                                d[o] += g[i * fout + o];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                if let Some(d) = slot!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = nodes[logits.0].value.shape()[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(d) = slot!(*logits) {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Margin { logits, routes } => {
                let scale = g[0] / routes.len() as f64;
                if let Some(d) = slot!(*logits) {
                    for &(y, other) in routes.iter().flatten() {
                        d[y] += scale;
                        d[other] -= scale;
                    }
                }
            }
            Op::Resample { x, map } => {
                let s = nodes[x.0].value.shape();
                let planes = s[0] * s[1];
                if let Some(d) = slot!(*x) {
                    map.backward(g, planes, d);
                }
            }
            Op::WeightedSum { inputs, weights } => {
                for (&v, &wt) in inputs.iter().zip(weights) {
                    if let Some(d) = slot!(v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += wt * g);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut start = 0;
                for &v in inputs {
                    let n = nodes[v.0].value.shape()[*axis];
                    if let Some(d) = slot!(v) {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + n) * inner];
                            d[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    start += n;
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
