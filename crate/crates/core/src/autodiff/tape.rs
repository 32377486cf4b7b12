//! Dynamic computation tape with reverse-mode gradient propagation.
//!
//! Every operation appends a node holding its forward value and the
//! information its local gradient rule needs. The tape is rebuilt for each
//! forward pass; [`Tape::backward`] walks it in reverse and returns the
//! accumulated adjoints of every leaf. Parameters enter the tape through
//! [`Tape::param`], which binds at most one node per [`ParamId`], so a weight
//! read by several sub-networks collects the sum of all its uses.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{col2im, gemm, im2col, ConvGeometry, Layout};
use super::params::{ParamId, ParamStore};
use super::tensor::{log_softmax, softmax, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        out_channels: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow {
        a: Var,
        offset: usize,
    },
    MaxPool2d {
        a: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        a: Var,
        channels: usize,
        height: usize,
        width: usize,
        factor: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        weight: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded sequence of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Leaf adjoints produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    leaves: BTreeMap<Var, Vec<f64>>,
}

impl Gradients {
    /// Gradient for a parameter, if it was reachable from the loss.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Gradient with respect to a leaf created by [`Tape::variable`] or [`Tape::param`].
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    /// Element-wise sum with another gradient set.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .values()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, len: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (av, bv) = (a.values(), b.values());
    let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    (0..len).map(|i| f(pick(av, i), pick(bv, i))).collect()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut value = store.get(id).clone();
        value.clear_grad();
        let v = self.push(value, Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    /// Binds a parameter as a constant: it participates in the forward pass only.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut value = store.get(id).clone();
        value.clear_grad();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).values(),
            Layout::Normal,
            self.value(b).values(),
            Layout::Normal,
            0.0,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Cross-correlation of a `C×H×W` input with an `O×C×k×k` kernel plus per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: si.to_vec(),
            rhs: sk.to_vec(),
        };
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != sk[3] {
            return Err(mismatch());
        }
        if sb != [sk[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: sb.to_vec(),
                rhs: vec![sk[0]],
            });
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be at least 1"));
        }
        let geom = ConvGeometry {
            channels: si[0],
            height: si[1],
            width: si[2],
            kernel: sk[2],
            stride,
            padding,
        };
        if geom.kernel > geom.height + 2 * padding || geom.kernel > geom.width + 2 * padding {
            return Err(TensorError::invalid(
                "conv2d",
                format!(
                    "kernel {k}x{k} larger than padded input {h}x{w}",
                    k = geom.kernel,
                    h = geom.height + 2 * padding,
                    w = geom.width + 2 * padding
                ),
            ));
        }
        let out_channels = sk[0];
        let positions = geom.out_positions();
        let cols = im2col(self.value(input).values(), &geom);
        let mut out = vec![0.0; out_channels * positions];
        for (o, b) in self.value(bias).values().iter().enumerate() {
            out[o * positions..(o + 1) * positions]
                .iter_mut()
                .for_each(|v| *v = *b);
        }
        gemm(
            out_channels,
            geom.patch_len(),
            positions,
            self.value(kernel).values(),
            Layout::Normal,
            &cols,
            Layout::Normal,
            1.0,
            &mut out,
        );
        let rg = self.any_grad(&[input, kernel, bias]);
        let shape = vec![out_channels, geom.out_height(), geom.out_width()];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_channels,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<Var> {
        let shape = same_or_scalar(op, self.value(a), self.value(b))?;
        let len = shape.iter().product();
        let out = broadcast_binary(self.value(a), self.value(b), len, f);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = t.values().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("scale keeps shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let t = self.value(a);
        let out = t.values().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("unary keeps shape");
        let rg = self.any_grad(&[a]);
        self.push(value, rec, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenation along the leading axis; trailing dimensions must agree.
    ///
    /// One-dimensional inputs of any lengths concatenate into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).values());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// `len` entries of the leading axis starting at `start`.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(TensorError::invalid(
                "narrow",
                format!(
                    "range {start}..{} outside leading axis {}",
                    start + len,
                    s[0]
                ),
            ));
        }
        let stride: usize = s[1..].iter().product();
        let values = self.value(a).values()[start * stride..(start + len) * stride].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(shape, values)?,
            Op::Narrow {
                a,
                offset: start * stride,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2 over a `C×H×W` map; odd trailing rows/columns are dropped.
    pub fn maxpool2d(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(TensorError::invalid(
                "maxpool2d",
                format!("need a C×H×W map with H,W >= 2, got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(a).values();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (ch * h + 2 * oy) * w + 2 * ox;
                    let mut best = base;
                    for idx in [base, base + 1, base + w, base + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![c, oh, ow], out)?,
            Op::MaxPool2d { a, argmax },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of a `C×H×W` map by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(TensorError::invalid(
                "upsample_nearest",
                format!("need a C×H×W map, got {s:?}"),
            ));
        }
        if factor == 0 {
            return Err(TensorError::invalid(
                "upsample_nearest",
                "factor must be at least 1",
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if factor == 1 {
            return self.reshape(a, &s);
        }
        let (oh, ow) = (h * factor, w * factor);
        let x = self.value(a).values();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = x[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![c, oh, ow], out)?,
            Op::Upsample {
                a,
                channels: c,
                height: h,
                width: w,
                factor,
            },
            rg,
        ))
    }

    /// `−weight · Σ_{n ∈ targets} log softmax(logits)[n]` over the flattened logits.
    ///
    /// Duplicate target indices count once.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weight: f64,
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(TensorError::EmptyTargets);
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(TensorError::invalid(
                "softmax_cross_entropy",
                format!("weight must be finite and non-negative, got {weight}"),
            ));
        }
        let z = self.value(logits).values();
        let classes = z.len();
        let mut targets = targets.to_vec();
        targets.sort_unstable();
        targets.dedup();
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::TargetOutOfRange {
                index: bad,
                classes,
            });
        }
        let logp = log_softmax(z);
        let loss = -weight * targets.iter().map(|&t| logp[t]).sum::<f64>();
        let probs = softmax(z);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                weight,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`; the tape is left untouched.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut grads = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    grads.leaves.insert(Var(i), g);
                }
                Op::Param(id) => {
                    grads.params.insert(*id, g.clone());
                    grads.leaves.insert(Var(i), g);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.needs(*a) {
                        let bv = self.value(*b).values();
                        let da = slot(&mut adj, *a, m * k);
                        gemm(m, n, k, &g, Layout::Normal, bv, Layout::Transposed, 1.0, da);
                    }
                    if self.needs(*b) {
                        let av = self.value(*a).values();
                        let db = slot(&mut adj, *b, k * n);
                        gemm(k, m, n, av, Layout::Transposed, &g, Layout::Normal, 1.0, db);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                    out_channels,
                } => {
                    let o = *out_channels;
                    let positions = geom.out_positions();
                    let patch = geom.patch_len();
                    if self.needs(*bias) {
                        let db = slot(&mut adj, *bias, o);
                        for (ch, d) in db.iter_mut().enumerate() {
                            *d += g[ch * positions..(ch + 1) * positions].iter().sum::<f64>();
                        }
                    }
                    if self.needs(*kernel) {
                        let cols = im2col(self.value(*input).values(), geom);
                        let dk = slot(&mut adj, *kernel, o * patch);
                        gemm(
                            o,
                            positions,
                            patch,
                            &g,
                            Layout::Normal,
                            &cols,
                            Layout::Transposed,
                            1.0,
                            dk,
                        );
                    }
                    if self.needs(*input) {
                        let mut dcols = vec![0.0; patch * positions];
                        gemm(
                            patch,
                            o,
                            positions,
                            self.value(*kernel).values(),
                            Layout::Transposed,
                            &g,
                            Layout::Normal,
                            0.0,
                            &mut dcols,
                        );
                        let len = self.value(*input).numel();
                        col2im(&dcols, geom, slot(&mut adj, *input, len));
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    self.reduce_into(&mut adj, *a, &g, |_, d| d);
                    self.reduce_into(&mut adj, *b, &g, |_, d| sign * d);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                    let pick = |v: &[f64], j: usize| if v.len() == 1 { v[0] } else { v[j] };
                    self.reduce_into(&mut adj, *a, &g, |j, d| d * pick(bv, j));
                    self.reduce_into(&mut adj, *b, &g, |j, d| d * pick(av, j));
                }
                Op::Scale(a, f) => {
                    if self.needs(*a) {
                        let da = slot(&mut adj, *a, g.len());
                        da.iter_mut().zip(&g).for_each(|(x, d)| *x += f * d);
                    }
                }
                Op::Relu(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a).values();
                        let da = slot(&mut adj, *a, g.len());
                        for ((acc, d), xv) in da.iter_mut().zip(&g).zip(x) {
                            if *xv > 0.0 {
                                *acc += d;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) | Op::Tanh(a) => {
                    if self.needs(*a) {
                        let y = node.value.values();
                        let tanh = matches!(node.op, Op::Tanh(_));
                        let da = slot(&mut adj, *a, g.len());
                        for ((acc, d), yv) in da.iter_mut().zip(&g).zip(y) {
                            let local = if tanh { 1.0 - yv * yv } else { yv * (1.0 - yv) };
                            *acc += d * local;
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.needs(*a) {
                        let len = self.value(*a).numel();
                        slot(&mut adj, *a, len).iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::Reshape(a) => {
                    if self.needs(*a) {
                        let da = slot(&mut adj, *a, g.len());
                        da.iter_mut().zip(&g).for_each(|(x, d)| *x += d);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).numel();
                        if self.needs(*p) {
                            let dp = slot(&mut adj, *p, len);
                            dp.iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(x, d)| *x += d);
                        }
                        offset += len;
                    }
                }
                Op::Narrow { a, offset } => {
                    if self.needs(*a) {
                        let len = self.value(*a).numel();
                        let da = slot(&mut adj, *a, len);
                        da[*offset..offset + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(x, d)| *x += d);
                    }
                }
                Op::MaxPool2d { a, argmax } => {
                    if self.needs(*a) {
                        let len = self.value(*a).numel();
                        let da = slot(&mut adj, *a, len);
                        for (&src, d) in argmax.iter().zip(&g) {
                            da[src] += d;
                        }
                    }
                }
                Op::Upsample {
                    a,
                    channels,
                    height,
                    width,
                    factor,
                } => {
                    if self.needs(*a) {
                        let (h, w, f) = (*height, *width, *factor);
                        let (oh, ow) = (h * f, w * f);
                        let da = slot(&mut adj, *a, channels * h * w);
                        for ch in 0..*channels {
                            for y in 0..oh {
                                for x in 0..ow {
                                    da[(ch * h + y / f) * w + x / f] += g[(ch * oh + y) * ow + x];
                                }
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    targets,
                    weight,
                } => {
                    if self.needs(*logits) {
                        let count = targets.len() as f64;
                        let scale = g[0] * weight;
                        let dz = slot(&mut adj, *logits, probs.len());
                        for (x, p) in dz.iter_mut().zip(probs) {
                            *x += scale * count * p;
                        }
                        for &t in targets {
                            dz[t] -= scale;
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Backward pass whose parameter gradients are added to `store`'s grad slots.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)?;
        Ok(grads)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds `local(j, g[j])` into the adjoint of `v`, summing over broadcast positions.
    fn reduce_into(
        &self,
        adj: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        local: impl Fn(usize, f64) -> f64,
    ) {
        if !self.needs(v) {
            return;
        }
        let len = self.value(v).numel();
        let dv = slot(adj, v, len);
        if len == g.len() {
            for (j, (x, d)) in dv.iter_mut().zip(g).enumerate() {
                *x += local(j, *d);
            }
        } else {
            dv[0] += g.iter().enumerate().map(|(j, d)| local(j, *d)).sum::<f64>();
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}
