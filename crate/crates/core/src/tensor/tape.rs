//! The recording tape, its operator set, and the reverse sweep.

use super::conv::{self, ConvGeometry};
use super::params::{ParamId, ParamStore};
use super::{argmax, softmax, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
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
    ScalarMul { scalar: Var, x: Var },
    Relu(Var),
    Sum(Var),
    MeanTrailing(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    BroadcastBatch(Var),
    Index { x: Var, index: usize },
    MatMulNT(Var, Var),
    AddChannelBias { x: Var, bias: Var },
    Conv { input: Var, kernel: Var, geom: ConvGeometry, per_sample: bool },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    StraightThrough { scores: Var, soft: Vec<f64>, temperature: f64 },
    Mix { weights: Var, bank: Var },
    PairwiseSqDist(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Frozen routing decision used to replay a straight-through selection.
///
/// The forward value becomes `one_hot(indices) + softmax(l) - soft`, which
/// equals the hard one-hot at the anchor point while remaining a smooth
/// function of the scores for finite-difference checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionAnchor {
    pub indices: Vec<usize>,
    pub soft: Vec<f64>,
}

/// Gradients produced by one reverse sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing reached it.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn add_into(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf not tied to any parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a parameter as a leaf. Its gradient is folded back into the
    /// store by [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.requires_grad);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        out.sub_scaled(self.value(b), 1.0);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = Tensor::from_fn(self.shape(x), |i| self.value(x).data()[i] * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// `scalar * x` for a single-element `scalar`.
    pub fn scalar_mul(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if !self.value(scalar).is_scalar() {
            return Err(mismatch("scalar_mul", self.shape(scalar), &[1]));
        }
        let s = self.value(scalar).item();
        let out = Tensor::from_fn(self.shape(x), |i| s * self.value(x).data()[i]);
        let rg = self.any_grad(&[scalar, x]);
        Ok(self.push(out, Op::ScalarMul { scalar, x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = Tensor::from_fn(self.shape(x), |i| self.value(x).data()[i].max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over every dimension after the first two: `[B, C, ...] -> [B, C]`.
    pub fn mean_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(TensorError::Invalid {
                op: "mean_pool_spatial",
                detail: format!("need at least one trailing dimension, got {shape:?}"),
            });
        }
        let inner: usize = shape[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let out = Tensor::new(vec![shape[0], shape[1]], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MeanTrailing(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Repeat `x` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            data.extend_from_slice(src);
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::BroadcastBatch(x), rg))
    }

    /// Single flat element of `x` as a scalar.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self.value(x).data().get(index).ok_or(TensorError::Invalid {
            op: "index",
            detail: format!("index {index} out of range"),
        })?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Index { x, index }, rg))
    }

    /// `a [n, k] x b [m, k]^T -> [n, m]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[0]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..m {
                let br = &bv[j * k..(j + 1) * k];
                data[i * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    /// Add `bias [C]` along axis 1 of `x [B, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(mismatch("add_channel_bias", &sx, &sb));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let bv = self.value(bias).data();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let b = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddChannelBias { x, bias }, rg))
    }

    /// `input [B, F_in] -> [B, F_out]` with `weight [F_out, F_in]`, `bias [F_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 2 || sw.len() != 2 || si[1] != sw[1] {
            return Err(mismatch("linear", si, sw));
        }
        let y = self.matmul_nt(input, weight)?;
        self.add_channel_bias(y, bias)
    }

    fn conv_impl(&mut self, input: Var, kernel: Var, geom: ConvGeometry, per_sample: bool, out_shape: Vec<usize>) -> Result<Var> {
        let data = conv::forward(self.value(input).data(), self.value(kernel).data(), &geom, per_sample);
        let out = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                kernel,
                geom,
                per_sample,
            },
            rg,
        ))
    }

    /// Cross-correlation of `input [B, C, H, W]` with `kernel [O, C, KH, KW]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 {
            return Err(mismatch("conv2d", &si, &sk));
        }
        let geom = ConvGeometry::new([si[0], si[1], si[2], si[3]], [sk[0], sk[1], sk[2], sk[3]], stride, padding)?;
        self.conv_impl(input, kernel, geom, false, vec![si[0], sk[0], geom.out_h, geom.out_w])
    }

    /// Like [`Tape::conv2d`] but with one kernel per sample: `kernels [B, O, C, KH, KW]`.
    pub fn conv2d_per_sample(&mut self, input: Var, kernels: Var, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernels).to_vec());
        if si.len() != 4 || sk.len() != 5 || sk[0] != si[0] {
            return Err(mismatch("conv2d_per_sample", &si, &sk));
        }
        let geom = ConvGeometry::new([si[0], si[1], si[2], si[3]], [sk[1], sk[2], sk[3], sk[4]], stride, padding)?;
        self.conv_impl(input, kernels, geom, true, vec![si[0], sk[1], geom.out_h, geom.out_w])
    }

    /// Cross-correlation of `input [B, C, L]` with `kernel [O, C, K]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 3 {
            return Err(mismatch("conv1d", &si, &sk));
        }
        let geom = ConvGeometry::new([si[0], si[1], 1, si[2]], [sk[0], sk[1], 1, sk[2]], (1, stride), (0, padding))?;
        self.conv_impl(input, kernel, geom, false, vec![si[0], sk[0], geom.out_w])
    }

    /// Like [`Tape::conv1d`] but with one kernel per sample: `kernels [B, O, C, K]`.
    pub fn conv1d_per_sample(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernels).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[0] != si[0] {
            return Err(mismatch("conv1d_per_sample", &si, &sk));
        }
        let geom = ConvGeometry::new([si[0], si[1], 1, si[2]], [sk[1], sk[2], 1, sk[3]], (1, stride), (0, padding))?;
        self.conv_impl(input, kernels, geom, true, vec![si[0], sk[1], geom.out_w])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("cross_entropy", &s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {c} classes"),
            });
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut total = 0.0;
        for (row, &label) in lv.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Straight-through relaxed argmax over rows of `scores [B, M]`.
    ///
    /// The forward value is `one_hot(argmax(scores + noise))`; the backward
    /// pass uses the Jacobian of `softmax((scores + noise) / temperature)`.
    /// `noise` is either empty or holds `B * M` values. With an `anchor`, the
    /// selection indices are frozen and the forward value carries the
    /// first-order softmax term (see [`SelectionAnchor`]).
    pub fn straight_through(
        &mut self,
        scores: Var,
        noise: &[f64],
        temperature: f64,
        anchor: Option<&SelectionAnchor>,
    ) -> Result<(Var, Vec<usize>)> {
        let s = self.shape(scores).to_vec();
        if s.len() != 2 {
            return Err(mismatch("straight_through", &s, &[]));
        }
        let (b, m) = (s[0], s[1]);
        if !noise.is_empty() && noise.len() != b * m {
            return Err(mismatch("straight_through noise", &s, &[noise.len()]));
        }
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(TensorError::Invalid {
                op: "straight_through",
                detail: format!("temperature must be positive, got {temperature}"),
            });
        }
        let sv = self.value(scores).data();
        if sv.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Invalid {
                op: "straight_through",
                detail: "non-finite matching scores".into(),
            });
        }
        let mut soft = Vec::with_capacity(b * m);
        let mut indices = Vec::with_capacity(b);
        let mut out = vec![0.0; b * m];
        for r in 0..b {
            let logits: Vec<f64> = (0..m)
                .map(|i| sv[r * m + i] + noise.get(r * m + i).copied().unwrap_or(0.0))
                .collect();
            let p = softmax(&logits, temperature);
            let idx = match anchor {
                Some(a) => a.indices[r],
                None => argmax(&logits),
            };
            out[r * m + idx] = 1.0;
            if let Some(a) = anchor {
                for i in 0..m {
                    out[r * m + i] += p[i] - a.soft[r * m + i];
                }
            }
            indices.push(idx);
            soft.extend(p);
        }
        let rg = self.any_grad(&[scores]);
        let v = self.push(
            Tensor::new(s, out)?,
            Op::StraightThrough {
                scores,
                soft,
                temperature,
            },
            rg,
        );
        Ok((v, indices))
    }

    /// `weights [B, M] x bank [M, D] -> [B, D]`. Zero weights are skipped in
    /// both passes, so a one-hot row reproduces the selected bank row exactly
    /// and unselected rows receive exactly zero gradient.
    pub fn mix(&mut self, weights: Var, bank: Var) -> Result<Var> {
        let (sw, sb) = (self.shape(weights).to_vec(), self.shape(bank).to_vec());
        if sw.len() != 2 || sb.len() != 2 || sw[1] != sb[0] {
            return Err(mismatch("mix", &sw, &sb));
        }
        let (b, m, d) = (sw[0], sw[1], sb[1]);
        let (wv, bv) = (self.value(weights).data(), self.value(bank).data());
        let mut data = vec![0.0; b * d];
        for r in 0..b {
            let row = &mut data[r * d..(r + 1) * d];
            for i in 0..m {
                let w = wv[r * m + i];
                if w == 0.0 {
                    continue;
                }
                if w == 1.0 {
                    for (o, &x) in row.iter_mut().zip(&bv[i * d..(i + 1) * d]) {
                        *o += x;
                    }
                } else {
                    for (o, &x) in row.iter_mut().zip(&bv[i * d..(i + 1) * d]) {
                        *o += w * x;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, d], data)?;
        let rg = self.any_grad(&[weights, bank]);
        Ok(self.push(out, Op::Mix { weights, bank }, rg))
    }

    /// `sum_i sum_{j != i} ||x_i - x_j||^2` over rows of `x [M, D]`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch("pairwise_sq_dist", &s, &[]));
        }
        let (m, d) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    total += (0..d).map(|k| (xv[i * d + k] - xv[j * d + k]).powi(2)).sum::<f64>();
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::PairwiseSqDist(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// [`Tape::backward`], then add every parameter leaf's gradient into
    /// `store`. Gradients accumulate until [`ParamStore::zero_grad`].
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        self.accumulate(&grads, store);
        Ok(grads)
    }

    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.accumulate(id, g);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.wants(v) {
                        add_into(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let neg = Tensor::from_fn(g.shape(), |k| -gd[k]);
                    add_into(grads, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    add_into(grads, *a, Tensor::from_fn(g.shape(), |k| gd[k] * bv[k]));
                }
                if self.wants(*b) {
                    add_into(grads, *b, Tensor::from_fn(g.shape(), |k| gd[k] * av[k]));
                }
            }
            Op::Scale(x, f) => {
                add_into(grads, *x, Tensor::from_fn(g.shape(), |k| gd[k] * f));
            }
            Op::ScalarMul { scalar, x } => {
                let xv = self.value(*x);
                if self.wants(*scalar) {
                    add_into(grads, *scalar, Tensor::scalar(g.dot(xv)));
                }
                if self.wants(*x) {
                    let s = self.value(*scalar).item();
                    add_into(grads, *x, Tensor::from_fn(g.shape(), |k| s * gd[k]));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                add_into(
                    grads,
                    *x,
                    Tensor::from_fn(g.shape(), |k| if xv[k] > 0.0 { gd[k] } else { 0.0 }),
                );
            }
            Op::Sum(x) => {
                add_into(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
            Op::MeanTrailing(x) => {
                let shape = self.shape(*x);
                let inner: usize = shape[2..].iter().product();
                let scale = 1.0 / inner as f64;
                add_into(grads, *x, Tensor::from_fn(shape, |k| gd[k / inner] * scale));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                add_into(grads, *x, Tensor::new(shape, gd.to_vec()).expect("reshape grad"));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = g.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.shape(v).to_vec();
                    let chunk = shape[*axis] * inner;
                    if self.wants(v) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            data.extend_from_slice(&gd[start..start + chunk]);
                        }
                        add_into(grads, v, Tensor::new(shape, data).expect("concat grad"));
                    }
                    offset += chunk;
                }
            }
            Op::BroadcastBatch(x) => {
                let shape = self.shape(*x).to_vec();
                let n: usize = shape.iter().product();
                let mut acc = Tensor::zeros(&shape);
                for chunk in gd.chunks(n) {
                    for (a, &c) in acc.data_mut().iter_mut().zip(chunk) {
                        *a += c;
                    }
                }
                add_into(grads, *x, acc);
            }
            Op::Index { x, index } => {
                let mut t = Tensor::zeros(self.shape(*x));
                t.data_mut()[*index] = gd[0];
                add_into(grads, *x, t);
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[0]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut ga = vec![0.0; n * k];
                    for r in 0..n {
                        for j in 0..m {
                            let gv = gd[r * m + j];
                            for t in 0..k {
                                ga[r * k + t] += gv * bv[j * k + t];
                            }
                        }
                    }
                    add_into(grads, *a, Tensor::new(sa.to_vec(), ga).expect("matmul grad"));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; m * k];
                    for r in 0..n {
                        for j in 0..m {
                            let gv = gd[r * m + j];
                            for t in 0..k {
                                gb[j * k + t] += gv * av[r * k + t];
                            }
                        }
                    }
                    add_into(grads, *b, Tensor::new(sb.to_vec(), gb).expect("matmul grad"));
                }
            }
            Op::AddChannelBias { x, bias } => {
                if self.wants(*x) {
                    add_into(grads, *x, g.clone());
                }
                if self.wants(*bias) {
                    let shape = self.shape(*x);
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut gb = Tensor::zeros(&[c]);
                    for (r, chunk) in gd.chunks(inner).enumerate() {
                        gb.data_mut()[r % c] += chunk.iter().sum::<f64>();
                    }
                    add_into(grads, *bias, gb);
                }
            }
            Op::Conv {
                input,
                kernel,
                geom,
                per_sample,
            } => {
                if self.wants(*input) {
                    let gi = conv::backward_input(gd, self.value(*kernel).data(), geom, *per_sample);
                    add_into(grads, *input, Tensor::new(self.shape(*input).to_vec(), gi).expect("conv grad"));
                }
                if self.wants(*kernel) {
                    let gk = conv::backward_kernel(gd, self.value(*input).data(), geom, *per_sample);
                    add_into(grads, *kernel, Tensor::new(self.shape(*kernel).to_vec(), gk).expect("conv grad"));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let b = labels.len() as f64;
                let mut gl = Tensor::new(self.shape(*logits).to_vec(), probs.clone()).expect("ce grad");
                for (r, &l) in labels.iter().enumerate() {
                    gl.data_mut()[r * c + l] -= 1.0;
                }
                let scale = gd[0] / b;
                gl.data_mut().iter_mut().for_each(|v| *v *= scale);
                add_into(grads, *logits, gl);
            }
            Op::StraightThrough {
                scores,
                soft,
                temperature,
            } => {
                let m = self.shape(*scores)[1];
                let mut gs = vec![0.0; soft.len()];
                for (r, (p, gr)) in soft.chunks(m).zip(gd.chunks(m)).enumerate() {
                    let inner: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        gs[r * m + j] = p[j] * (gr[j] - inner) / temperature;
                    }
                }
                add_into(grads, *scores, Tensor::new(self.shape(*scores).to_vec(), gs).expect("st grad"));
            }
            Op::Mix { weights, bank } => {
                let (sw, sb) = (self.shape(*weights), self.shape(*bank));
                let (b, m, d) = (sw[0], sw[1], sb[1]);
                let (wv, bv) = (self.value(*weights).data(), self.value(*bank).data());
                if self.wants(*weights) {
                    let mut gw = vec![0.0; b * m];
                    for r in 0..b {
                        let gr = &gd[r * d..(r + 1) * d];
                        for i in 0..m {
                            gw[r * m + i] = gr.iter().zip(&bv[i * d..(i + 1) * d]).map(|(x, y)| x * y).sum();
                        }
                    }
                    add_into(grads, *weights, Tensor::new(sw.to_vec(), gw).expect("mix grad"));
                }
                if self.wants(*bank) {
                    let mut gb = vec![0.0; m * d];
                    for r in 0..b {
                        let gr = &gd[r * d..(r + 1) * d];
                        for i in 0..m {
                            let w = wv[r * m + i];
                            if w == 0.0 {
                                continue;
                            }
                            for (o, &x) in gb[i * d..(i + 1) * d].iter_mut().zip(gr) {
                                *o += w * x;
                            }
                        }
                    }
                    add_into(grads, *bank, Tensor::new(sb.to_vec(), gb).expect("mix grad"));
                }
            }
            Op::PairwiseSqDist(x) => {
                let s = self.shape(*x);
                let (m, d) = (s[0], s[1]);
                let xv = self.value(*x).data();
                let mut gx = vec![0.0; m * d];
                for i in 0..m {
                    for j in 0..m {
                        if i != j {
                            for k in 0..d {
                                gx[i * d + k] += 4.0 * (xv[i * d + k] - xv[j * d + k]);
                            }
                        }
                    }
                }
                let scale = gd[0];
                gx.iter_mut().for_each(|v| *v *= scale);
                add_into(grads, *x, Tensor::new(s.to_vec(), gx).expect("pairwise grad"));
            }
        }
    }
}
