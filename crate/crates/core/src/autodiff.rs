//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes; every op records its inputs
//! and the node index order is a topological order. `backward` accumulates
//! into leaf gradients (call [`Graph::zero_grad`] to reset); intermediate
//! gradients live only for the duration of one `backward` call.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Scalar, Tensor, Trans};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        y: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Abs(Var),
    Neg(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    AddConst(Var),
    Reshape(Var),
    RepeatRows(Var, usize),
    SumLastAxis(Var),
    SumSpatial(Var),
    RelaxSlope(Var, Var),
    RelaxIntercept(Var, Var),
    MarginFromBox {
        lower: Var,
        upper: Var,
        labels: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf; zeros if `backward` never reached it.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Matmul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatmulNt(a, b), rg))
    }

    /// Adds `b[F]` along axis 1 of `x[N, F, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(Error::shape("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let f = xs[1];
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        tensor::add_channel_bias(out.data_mut(), self.value(b).data(), f, inner);
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let v = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Adjoint of `conv2d` in its input, mapping `[N, F, oh, ow]` to
    /// `[N, C, input_hw]`.
    pub fn conv_transpose2d(
        &mut self,
        y: Var,
        w: Var,
        geom: ConvGeom,
        input_hw: (usize, usize),
    ) -> Result<Var> {
        let v = tensor::conv2d_input_grad(self.value(y), self.value(w), input_hw, geom)?;
        let rg = self.rg(&[y, w]);
        Ok(self.push(v, Op::ConvTranspose2d { y, w, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).relu();
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.abs());
        let rg = self.rg(&[x]);
        self.push(v, Op::Abs(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| -a);
        let rg = self.rg(&[x]);
        self.push(v, Op::Neg(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| if x >= y { x } else { y })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Max(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let v = self.value(x).zip_map(&c, |a, b| a * b)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MulConst(x, c), rg))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let v = self.value(x).zip_map(c, |a, b| a + b)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::AddConst(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// `[B, ...]` to `[B·times, ...]`, each leading row repeated `times`
    /// times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let v = repeat_rows(self.value(x), times);
        let rg = self.rg(&[x]);
        self.push(v, Op::RepeatRows(x, times), rg)
    }

    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let Some((&k, lead)) = xv.shape().split_last() else {
            return Err(Error::shape("sum_last_axis", "rank-0 input"));
        };
        let out: Vec<T> = if k == 0 {
            vec![T::zero(); lead.iter().product()]
        } else {
            xv.data().chunks(k).map(|c| c.iter().copied().sum()).collect()
        };
        let v = Tensor::new(lead.to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SumLastAxis(x), rg))
    }

    /// `[N, C, H, W]` to `[N, C]`.
    pub fn sum_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("sum_spatial", format!("{s:?}")));
        }
        let p = s[2] * s[3];
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(p.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let v = Tensor::new(vec![s[0], s[1]], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SumSpatial(x), rg))
    }

    /// Slope of the upper linear relaxation of ReLU on `[l, u]`.
    pub fn relax_slope(&mut self, l: Var, u: Var) -> Result<Var> {
        let v = self
            .value(l)
            .zip_map(self.value(u), |l, u| relax::upper(l, u).0)?;
        let rg = self.rg(&[l, u]);
        Ok(self.push(v, Op::RelaxSlope(l, u), rg))
    }

    /// Intercept of the upper linear relaxation of ReLU on `[l, u]`.
    pub fn relax_intercept(&mut self, l: Var, u: Var) -> Result<Var> {
        let v = self
            .value(l)
            .zip_map(self.value(u), |l, u| relax::upper(l, u).1)?;
        let rg = self.rg(&[l, u]);
        Ok(self.push(v, Op::RelaxIntercept(l, u), rg))
    }

    /// Interval margin `m[b, i] = lower[b, y_b] - upper[b, i]` (`0` at `i = y_b`)
    /// for output boxes `[B, n]`.
    pub fn margin_from_box(&mut self, lower: Var, upper: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(lower).to_vec();
        same_shape("margin_from_box", &s, self.shape(upper))?;
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&y| y >= s[1]) {
            return Err(Error::shape(
                "margin_from_box",
                format!("box {s:?} with {} labels", labels.len()),
            ));
        }
        let n = s[1];
        let (lv, uv) = (self.value(lower).data(), self.value(upper).data());
        let mut out = vec![T::zero(); s[0] * n];
        for (b, &y) in labels.iter().enumerate() {
            for i in 0..n {
                if i != y {
                    out[b * n + i] = lv[b * n + y] - uv[b * n + i];
                }
            }
        }
        let v = Tensor::new(s, out)?;
        let rg = self.rg(&[lower, upper]);
        Ok(self.push(
            v,
            Op::MarginFromBox {
                lower,
                upper,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[B, n]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 || labels.iter().any(|&y| y >= s[1])
        {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let n = s[1];
        let z = self.value(logits).data();
        let mut total = T::zero();
        for (b, &y) in labels.iter().enumerate() {
            let row = &z[b * n..(b + 1) * n];
            total = total + log_sum_exp(row) - row[y];
        }
        let v = Tensor::scalar(total / T::from_usize(s[0]).unwrap());
        let rg = self.rg(&[logits]);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.len().max(1)).unwrap();
        let v = Tensor::scalar(xv.data().iter().copied().sum::<T>() / n);
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Populates `∂loss/∂leaf` for every trainable leaf reachable from `loss`,
    /// adding to any gradient already stored.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    tensor::gemm(m, n, k, g.data(), Trans::No, bv.data(), Trans::Yes, &mut da, false);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    tensor::gemm(k, m, n, av.data(), Trans::Yes, g.data(), Trans::No, &mut db, false);
                    out.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::MatmulNt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    tensor::gemm(m, n, k, g.data(), Trans::No, bv.data(), Trans::No, &mut da, false);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n * k];
                    tensor::gemm(n, m, k, g.data(), Trans::Yes, av.data(), Trans::No, &mut db, false);
                    out.push((*b, Tensor::new(vec![n, k], db)?));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, channel_sum(g)));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                if self.wants(*x) {
                    let hw = (xv.shape()[2], xv.shape()[3]);
                    out.push((*x, tensor::conv2d_input_grad(g, wv, hw, *geom)?));
                }
                if self.wants(*w) {
                    out.push((*w, tensor::conv2d_weight_grad(xv, g, wv.shape(), *geom)?));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        out.push((*b, channel_sum(g)));
                    }
                }
            }
            Op::ConvTranspose2d { y, w, geom } => {
                let wv = val(*w);
                if self.wants(*y) {
                    out.push((*y, tensor::conv2d(g, wv, None, *geom)?));
                }
                if self.wants(*w) {
                    // z = conv_t(y, w) is bilinear; its w-gradient is the
                    // conv weight gradient with the roles of input and output swapped.
                    out.push((*w, tensor::conv2d_weight_grad(g, val(*y), wv.shape(), *geom)?));
                }
            }
            Op::Relu(x) => {
                out.push((*x, val(*x).zip_map(g, |a, d| if a > T::zero() { d } else { T::zero() })?));
            }
            Op::Abs(x) => {
                out.push((
                    *x,
                    val(*x).zip_map(g, |a, d| {
                        if a > T::zero() {
                            d
                        } else if a < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })?,
                ));
            }
            Op::Neg(x) => out.push((*x, g.map(|d| -d))),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|d| -d)));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.zip_map(val(*b), |d, y| d * y)?));
                }
                if self.wants(*b) {
                    out.push((*b, g.zip_map(val(*a), |d, x| d * x)?));
                }
            }
            Op::Max(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let take_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x >= y).collect();
                let mut ga = g.clone();
                let mut gb = g.clone();
                for (k, &ta) in take_a.iter().enumerate() {
                    if ta {
                        gb.data_mut()[k] = T::zero();
                    } else {
                        ga.data_mut()[k] = T::zero();
                    }
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Scale(x, s) => out.push((*x, g.map(|d| d * *s))),
            Op::MulConst(x, c) => out.push((*x, g.zip_map(c, |d, c| d * c)?)),
            Op::AddConst(x) => out.push((*x, g.clone())),
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape())?)),
            Op::RepeatRows(x, times) => {
                let xv = val(*x);
                let inner: usize = xv.shape()[1..].iter().product();
                let mut dx = Tensor::zeros(xv.shape());
                for (r, chunk) in g.data().chunks(inner.max(1)).enumerate() {
                    let dst = &mut dx.data_mut()[(r / times) * inner..(r / times + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(chunk) {
                        *d = *d + s;
                    }
                }
                out.push((*x, dx));
            }
            Op::SumLastAxis(x) => {
                let xv = val(*x);
                let k = *xv.shape().last().unwrap();
                let mut dx = Tensor::zeros(xv.shape());
                if k > 0 {
                    for (chunk, &d) in dx.data_mut().chunks_mut(k).zip(g.data()) {
                        chunk.iter_mut().for_each(|v| *v = d);
                    }
                }
                out.push((*x, dx));
            }
            Op::SumSpatial(x) => {
                let xv = val(*x);
                let p = xv.shape()[2] * xv.shape()[3];
                let mut dx = Tensor::zeros(xv.shape());
                if p > 0 {
                    for (chunk, &d) in dx.data_mut().chunks_mut(p).zip(g.data()) {
                        chunk.iter_mut().for_each(|v| *v = d);
                    }
                }
                out.push((*x, dx));
            }
            Op::RelaxSlope(l, u) | Op::RelaxIntercept(l, u) => {
                let slope = matches!(node.op, Op::RelaxSlope(..));
                let (lv, uv) = (val(*l), val(*u));
                let mut dl = Tensor::zeros(lv.shape());
                let mut du = Tensor::zeros(uv.shape());
                for k in 0..g.len() {
                    let (gl, gu) = if slope {
                        relax::upper_slope_grad(lv.data()[k], uv.data()[k])
                    } else {
                        relax::upper_intercept_grad(lv.data()[k], uv.data()[k])
                    };
                    dl.data_mut()[k] = g.data()[k] * gl;
                    du.data_mut()[k] = g.data()[k] * gu;
                }
                out.push((*l, dl));
                out.push((*u, du));
            }
            Op::MarginFromBox {
                lower,
                upper,
                labels,
            } => {
                let n = val(*lower).shape()[1];
                let mut dl = Tensor::zeros(val(*lower).shape());
                let mut du = Tensor::zeros(val(*upper).shape());
                for (b, &y) in labels.iter().enumerate() {
                    for i in 0..n {
                        if i != y {
                            let d = g.data()[b * n + i];
                            dl.data_mut()[b * n + y] = dl.data()[b * n + y] + d;
                            du.data_mut()[b * n + i] = du.data()[b * n + i] - d;
                        }
                    }
                }
                out.push((*lower, dl));
                out.push((*upper, du));
            }
            Op::CrossEntropy { logits, labels } => {
                let zv = val(*logits);
                let n = zv.shape()[1];
                let scale = g.item() / T::from_usize(labels.len()).unwrap();
                let mut dz = Tensor::zeros(zv.shape());
                for (b, &y) in labels.iter().enumerate() {
                    let row = &zv.data()[b * n..(b + 1) * n];
                    let lse = log_sum_exp(row);
                    let drow = &mut dz.data_mut()[b * n..(b + 1) * n];
                    for (j, d) in drow.iter_mut().enumerate() {
                        let p = (row[j] - lse).exp();
                        *d = scale * (if j == y { p - T::one() } else { p });
                    }
                }
                out.push((*logits, dz));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::Mean(x) => {
                let xv = val(*x);
                let n = T::from_usize(xv.len().max(1)).unwrap();
                out.push((*x, Tensor::full(xv.shape(), g.item() / n)));
            }
        }
        Ok(out)
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m.is_infinite() {
        return m;
    }
    m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln()
}

fn channel_sum<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let f = s[1];
    let inner: usize = s[2..].iter().product();
    let mut db = Tensor::zeros(&[f]);
    for (k, chunk) in g.data().chunks(inner.max(1)).enumerate() {
        let acc: T = chunk.iter().copied().sum();
        db.data_mut()[k % f] = db.data()[k % f] + acc;
    }
    db
}

pub(crate) fn repeat_rows<T: Scalar>(x: &Tensor<T>, times: usize) -> Tensor<T> {
    let s = x.shape();
    let inner: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(x.len() * times);
    for row in x.data().chunks(inner.max(1)) {
        for _ in 0..times {
            data.extend_from_slice(row);
        }
    }
    let mut shape = s.to_vec();
    shape[0] *= times;
    Tensor::new(shape, data).expect("repeat_rows shape")
}

/// Linear relaxation of `relu` over a pre-activation interval `[l, u]`.
pub mod relax {
    use crate::tensor::Scalar;

    /// `(slope, intercept)` of the upper line: identity when `l ≥ 0`, zero
    /// when `u ≤ 0`, otherwise the chord `u/(u-l) · (z - l)`.
    pub fn upper<T: Scalar>(l: T, u: T) -> (T, T) {
        if l >= T::zero() {
            (T::one(), T::zero())
        } else if u <= T::zero() {
            (T::zero(), T::zero())
        } else {
            let s = u / (u - l);
            (s, -l * s)
        }
    }

    /// `(∂slope/∂l, ∂slope/∂u)`.
    pub fn upper_slope_grad<T: Scalar>(l: T, u: T) -> (T, T) {
        if l >= T::zero() || u <= T::zero() {
            return (T::zero(), T::zero());
        }
        let d2 = (u - l) * (u - l);
        (u / d2, -l / d2)
    }

    /// `(∂intercept/∂l, ∂intercept/∂u)` for intercept `-l·u/(u-l)`.
    pub fn upper_intercept_grad<T: Scalar>(l: T, u: T) -> (T, T) {
        if l >= T::zero() || u <= T::zero() {
            return (T::zero(), T::zero());
        }
        let d2 = (u - l) * (u - l);
        (-(u * u) / d2, (l * l) / d2)
    }

    /// How the lower line `α·z` is chosen for unstable neurons.
    #[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
    pub enum LowerSlope {
        /// `α = 1` iff `u ≥ |l|`, else `0`.
        #[default]
        Adaptive,
        /// Always `α = 0`.
        Zero,
    }

    pub fn lower_slope<T: Scalar>(l: T, u: T, policy: LowerSlope) -> T {
        if l >= T::zero() {
            T::one()
        } else if u <= T::zero() {
            T::zero()
        } else {
            match policy {
                LowerSlope::Adaptive if u >= -l => T::one(),
                _ => T::zero(),
            }
        }
    }
}
