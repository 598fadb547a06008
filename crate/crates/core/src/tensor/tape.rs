use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, b: Var },
    GlobalAvgPool(Var),
    ChannelScale { x: Var, g: Var },
    Reshape(Var),
    Sum(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every leaf that requires one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the leaf did not require a gradient or never reached the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but non-participating leaves report zeros.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); tape.value(v).len()],
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Frozen leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a·b`, or `a·bᵀ` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            kernels::gemm_nt(m, k, n, av, bv, &mut out);
        } else {
            kernels::gemm_nn(m, k, n, av, bv, &mut out);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ`; with `b` a `d_out × d_in` weight this is a batched `W·x`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// 2-D convolution over an `N×C×H×W` input with a `C_out×C_in×kh×kw` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[sw[0]]));
            }
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad)
            .ok_or_else(|| Error::shape("conv2d", &sx, &sw))?;
        let (n, c_out) = (sx[0], sw[0]);
        let (k, p) = (geom.patch_len(), geom.positions());
        let img_len = sx[1] * sx[2] * sx[3];
        let mut out = vec![T::zero(); n * c_out * p];
        let mut col = vec![T::zero(); k * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for s in 0..n {
                kernels::im2col(&geom, &xv[s * img_len..(s + 1) * img_len], &mut col);
                let o = &mut out[s * c_out * p..(s + 1) * c_out * p];
                if let Some(bv) = bv {
                    for (co, row) in o.chunks_mut(p).enumerate() {
                        row.fill(bv[co]);
                    }
                }
                kernels::gemm_nn(c_out, k, p, wv, &col, o);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let value = Tensor::new(&[n, c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| f(e)).collect(),
        }
    }

    /// Smallest `|input|` over every ReLU recorded so far. Finite differences
    /// are only meaningful when this exceeds the perturbation's effect.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|v| v.abs().to_f64().unwrap_or(f64::NAN)))
            .reduce(f64::min)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.map(x, |e| if e > T::zero() { e } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.map(x, sigmoid);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let y = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let y = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.map(x, |e| e * s);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale(x, s), rg)
    }

    /// Adds a per-channel bias `b[C]` along axis 1 of `x[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 || self.shape(b) != [sx[1]] {
            return Err(Error::shape("add_bias", sx, self.shape(b)));
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut y = self.value(x).clone();
        let bv = self.value(b).data();
        for (i, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
            let bias = bv[i % c];
            for e in chunk {
                *e = *e + bias;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(y, Op::AddBias { x, b }, rg))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("global_avg_pool", &sx, &[0, 0, 0, 0]));
        }
        let hw = sx[2] * sx[3];
        let inv = T::one() / T::cst(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        let y = Tensor::new(&sx[..2], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::GlobalAvgPool(x), rg))
    }

    /// Multiplies every `(n, c)` plane of `x[N,C,H,W]` by `g[n, c]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || self.shape(g) != &sx[..2] {
            return Err(Error::shape("channel_scale", sx, self.shape(g)));
        }
        let hw = sx[2] * sx[3];
        let mut y = self.value(x).clone();
        let gv = self.value(g).data();
        for (plane, &gain) in y.data_mut().chunks_mut(hw).zip(gv) {
            for e in plane {
                *e = *e * gain;
            }
        }
        let rg = self.rg(&[x, g]);
        Ok(self.push(y, Op::ChannelScale { x, g }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    /// `N×...` → `N×(rest)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let n = sx.first().copied().unwrap_or(1);
        let rest = sx.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != labels.len() || labels.iter().any(|&l| l >= sl[1]) {
            return Err(Error::shape("softmax_cross_entropy", sl, &[labels.len()]));
        }
        let k = sl[1];
        let probs = softmax(self.value(logits).data(), k);
        let mut loss = T::zero();
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            loss = loss + (log_sum_exp(row) - row[label]);
        }
        loss = loss / T::cst(labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if *trans_b {
                    self.accumulate(grads, *a, |g| kernels::gemm_nn(m, n, k, dy, bv, g));
                    self.accumulate(grads, *b, |g| kernels::gemm_tn(n, m, k, dy, av, g));
                } else {
                    self.accumulate(grads, *a, |g| kernels::gemm_nt(m, n, k, dy, bv, g));
                    self.accumulate(grads, *b, |g| kernels::gemm_tn(k, m, n, av, dy, g));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let sx = self.shape(*x);
                let n = sx[0];
                let c_out = self.shape(*w)[0];
                let (k, p) = (geom.patch_len(), geom.positions());
                let img_len = sx[1] * sx[2] * sx[3];
                if let Some(b) = b {
                    self.accumulate(grads, *b, |g| {
                        for s in 0..n {
                            for (co, gco) in g.iter_mut().enumerate() {
                                let row = &dy[(s * c_out + co) * p..(s * c_out + co + 1) * p];
                                *gco = row.iter().fold(*gco, |acc, &v| acc + v);
                            }
                        }
                    });
                }
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let mut col = vec![T::zero(); k * p];
                if need_w {
                    self.accumulate(grads, *w, |g| {
                        for s in 0..n {
                            kernels::im2col(geom, &xv[s * img_len..(s + 1) * img_len], &mut col);
                            kernels::gemm_nt(c_out, p, k, &dy[s * c_out * p..(s + 1) * c_out * p], &col, g);
                        }
                    });
                }
                if need_x {
                    self.accumulate(grads, *x, |g| {
                        for s in 0..n {
                            col.fill(T::zero());
                            kernels::gemm_tn(k, c_out, p, wv, &dy[s * c_out * p..(s + 1) * c_out * p], &mut col);
                            kernels::col2im(geom, &col, &mut g[s * img_len..(s + 1) * img_len]);
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |g| {
                    for ((gi, &d), &y) in g.iter_mut().zip(dy).zip(yv) {
                        if y > T::zero() {
                            *gi = *gi + d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |g| {
                    for ((gi, &d), &y) in g.iter_mut().zip(dy).zip(yv) {
                        *gi = *gi + d * y * (T::one() - y);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |g| kernels::axpy(T::one(), dy, g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *gi = *gi + d * o;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *gi = *gi + d * o;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |g| kernels::axpy(*s, dy, g));
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, |g| kernels::axpy(T::one(), dy, g));
                let sx = self.shape(*x);
                let c = sx[1];
                let inner: usize = sx[2..].iter().product();
                self.accumulate(grads, *b, |g| {
                    for (i, chunk) in dy.chunks(inner).enumerate() {
                        g[i % c] = chunk.iter().fold(g[i % c], |acc, &v| acc + v);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let sx = self.shape(*x);
                let hw = sx[2] * sx[3];
                let inv = T::one() / T::cst(hw as f64);
                self.accumulate(grads, *x, |g| {
                    for (plane, &d) in g.chunks_mut(hw).zip(dy) {
                        let v = d * inv;
                        for e in plane {
                            *e = *e + v;
                        }
                    }
                });
            }
            Op::ChannelScale { x, g: gate } => {
                let sx = self.shape(*x);
                let hw = sx[2] * sx[3];
                let (xv, gv) = (self.value(*x).data(), self.value(*gate).data());
                self.accumulate(grads, *x, |g| {
                    for ((plane, dplane), &gain) in g.chunks_mut(hw).zip(dy.chunks(hw)).zip(gv) {
                        kernels::axpy(gain, dplane, plane);
                    }
                });
                self.accumulate(grads, *gate, |g| {
                    for ((gi, dplane), xplane) in g.iter_mut().zip(dy.chunks(hw)).zip(xv.chunks(hw)) {
                        *gi = *gi + kernels::dot(dplane, xplane);
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |g| kernels::axpy(T::one(), dy, g));
            }
            Op::Sum(x) => {
                let d = dy[0];
                self.accumulate(grads, *x, |g| {
                    for e in g {
                        *e = *e + d;
                    }
                });
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = dy[0] / T::cst(labels.len() as f64);
                self.accumulate(grads, *logits, |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            g[r * k + j] = g[r * k + j] + (probs[r * k + j] - onehot) * scale;
                        }
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s = row.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp());
    m + s.ln()
}

/// Row-wise softmax of a flat `N×k` matrix.
pub fn softmax<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s = exps.iter().fold(T::zero(), |acc, &v| acc + v);
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}
