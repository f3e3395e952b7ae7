//! Operation recording and reverse-mode replay.
//!
//! Every op appends one node holding its forward value. Nodes are only ever
//! appended, so the node list is already in topological order and backward is
//! a single reverse sweep.

use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{split_axis, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    /// Output element `o` reads input element `map[o]`; shared by permute and broadcast.
    IndexMap { a: Var, map: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum { a: Var, axis: usize },
    Mean { a: Var, axis: usize },
    Max { a: Var, argmax: Vec<usize> },
    SumAll(Var),
    Gather { a: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<Option<Var>>,
    bindings: Vec<(ParamId, Var)>,
    track_params: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: Vec::new(),
            bindings: Vec::new(),
            track_params: true,
            consumed: false,
        }
    }

    /// A tape whose parameters do not require gradients; used for evaluation.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter onto this tape. Binding the same parameter twice
    /// returns the same node, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() < store.len() {
            self.bound.resize(store.len(), None);
        }
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), self.track_params);
        self.bound[id.index()] = Some(v);
        self.bindings.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape")
        })
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.bindings {
            if let Some(g) = &self.grads[v.0] {
                for (dst, src) in store.entry_mut(id).grad.data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    // ----- linear algebra -------------------------------------------------

    /// `[m,k] x [k,n]`, or batched `[B,m,k] x [B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n, vec![*b1, *m, *n]),
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                gemm(
                    (m, k, n),
                    &ad[bi * m * k..],
                    (k as isize, 1),
                    &bd[bi * k * n..],
                    (n as isize, 1),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Matmul { a, b, batch, m, k, n },
        ))
    }

    // ----- elementwise binary ------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ----- elementwise unary -------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, rg, op)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// `s - a`
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `a^p` for nonnegative `a`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ----- normalization -----------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax { a, axis }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that length.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "layernorm",
            reason: "scalar input".into(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layernorm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / d.max(1);
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
        ))
    }

    // ----- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(AutodiffError::InvalidArgument {
                op: "permute",
                reason: format!("axes {axes:?} are not a permutation for shape {shape:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let src_strides = strides(&shape);
        let mapped: Vec<usize> = axes.iter().map(|&ax| src_strides[ax]).collect();
        let map = index_map(&out_shape, &mapped);
        Ok(self.gather_map(a, out_shape, map))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                reason: format!("needs rank >= 2, got shape {:?}", self.shape(a)),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Numpy-style broadcast to `shape` (trailing alignment, size-1 or missing dims expand).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let err = || AutodiffError::ShapeMismatch {
            op: "broadcast",
            lhs: src.clone(),
            rhs: shape.to_vec(),
        };
        if src.len() > shape.len() {
            return Err(err());
        }
        let lead = shape.len() - src.len();
        let src_strides = strides(&src);
        let mut mapped = vec![0; shape.len()];
        for (i, &d) in shape.iter().enumerate() {
            if i < lead {
                continue;
            }
            let sd = src[i - lead];
            if sd == d {
                mapped[i] = src_strides[i - lead];
            } else if sd != 1 {
                return Err(err());
            }
        }
        let map = index_map(shape, &mapped);
        Ok(self.gather_map(a, shape.to_vec(), map))
    }

    fn gather_map(&mut self, a: Var, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let src = self.data(a);
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, data).expect("index map matches output shape"),
            rg,
            Op::IndexMap { a, map },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| AutodiffError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            })?)
            .to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("slice", &shape, axis)?;
        if start > end || end > shape[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} out of bounds for axis {axis} of {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::Slice { a, axis, start }))
    }

    /// Flat-index gather: output `[indices.len()]` with `out[i] = a.flat[indices[i]]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                reason: format!("index {bad} out of bounds for {n} elements"),
            });
        }
        let src = self.data(a);
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec(data),
            rg,
            Op::Gather {
                a,
                indices: indices.to_vec(),
            },
        ))
    }

    // ----- reductions ----------------------------------------------------------

    fn reduce(&mut self, name: &'static str, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape(a).to_vec();
        check_axis(name, &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out_shape, out))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce("sum", a, axis)?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Sum { a, axis }))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.shape(a).get(axis).copied().unwrap_or(1) as f64;
        let (shape, mut out) = self.reduce("mean", a, axis)?;
        out.iter_mut().for_each(|v| *v /= len);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mean { a, axis }))
    }

    /// Max over `axis`, removing it; ties resolve to the first maximum.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("max", &shape, axis)?;
        if shape[axis] == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "max",
                reason: "empty axis".into(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    let idx = (o * len + j) * inner + i;
                    if src[idx] > out[o * inner + i] || j == 0 {
                        out[o * inner + i] = src[idx];
                        argmax[o * inner + i] = idx;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::Max { a, argmax }))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    // ----- backward ----------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients for parameters are read with
    /// [`Tape::accumulate_param_grads`]; a tape can be replayed only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64], &[f64])| {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(buf, n.value.data());
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul { a, b, batch, m, k, n } => {
                let bd = nodes[b.0].value.data();
                let ad = nodes[a.0].value.data();
                acc(a, &mut |ga, _| {
                    for bi in 0..batch {
                        // dA = dC · Bᵀ
                        gemm(
                            (m, n, k),
                            &g[bi * m * n..],
                            (n as isize, 1),
                            &bd[bi * k * n..],
                            (1, n as isize),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                });
                acc(b, &mut |gb, _| {
                    for bi in 0..batch {
                        // dB = Aᵀ · dC
                        gemm(
                            (k, m, n),
                            &ad[bi * m * k..],
                            (1, k as isize),
                            &g[bi * m * n..],
                            (n as isize, 1),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            (n as isize, 1),
                        );
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga, _| add_into(ga, g));
                acc(b, &mut |gb, _| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga, _| add_into(ga, g));
                acc(b, &mut |gb, _| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(a, &mut |ga, _| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                });
                acc(b, &mut |gb, _| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                });
            }
            &Op::Div(a, b) => {
                let bd = nodes[b.0].value.data();
                acc(a, &mut |ga, _| {
                    for j in 0..g.len() {
                        ga[j] += g[j] / bd[j];
                    }
                });
                acc(b, &mut |gb, _| {
                    for j in 0..g.len() {
                        gb[j] -= g[j] * out[j] / bd[j];
                    }
                });
            }
            &Op::AddScalar(a) => acc(a, &mut |ga, _| add_into(ga, g)),
            &Op::MulScalar(a, s) => acc(a, &mut |ga, _| {
                ga.iter_mut().zip(g).for_each(|(d, v)| *d += s * v)
            }),
            &Op::Exp(a) => acc(a, &mut |ga, _| {
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j];
                }
            }),
            &Op::Log(a) => acc(a, &mut |ga, x| {
                for j in 0..g.len() {
                    ga[j] += g[j] / x[j];
                }
            }),
            &Op::Sigmoid(a) => acc(a, &mut |ga, _| {
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            &Op::Relu(a) => acc(a, &mut |ga, x| {
                for j in 0..g.len() {
                    if x[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }),
            &Op::Gelu(a) => acc(a, &mut |ga, x| {
                for j in 0..g.len() {
                    let v = x[j];
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    ga[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }),
            &Op::Abs(a) => acc(a, &mut |ga, x| {
                for j in 0..g.len() {
                    ga[j] += g[j] * if x[j] > 0.0 { 1.0 } else if x[j] < 0.0 { -1.0 } else { 0.0 };
                }
            }),
            &Op::Powf(a, p) => acc(a, &mut |ga, x| {
                for j in 0..g.len() {
                    if x[j] != 0.0 || p >= 1.0 {
                        ga[j] += g[j] * p * x[j].powf(p - 1.0);
                    }
                }
            }),
            &Op::Clamp(a, lo, hi) => acc(a, &mut |ga, x| {
                for j in 0..g.len() {
                    if x[j] >= lo && x[j] <= hi {
                        ga[j] += g[j];
                    }
                }
            }),
            &Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), axis);
                acc(a, &mut |ga, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| g[base + j * inner] * out[base + j * inner]).sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                ga[idx] += out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.numel();
                let gd = nodes[gamma.0].value.data();
                let rows = rstd.len();
                acc(*beta, &mut |gb, _| {
                    for r in 0..rows {
                        add_into(gb, &g[r * d..(r + 1) * d]);
                    }
                });
                acc(*gamma, &mut |gg, _| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*x, &mut |gx, _| {
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            &Op::Reshape(a) => acc(a, &mut |ga, _| add_into(ga, g)),
            Op::IndexMap { a, map } => acc(*a, &mut |ga, _| {
                for (o, &src) in map.iter().enumerate() {
                    ga[src] += g[o];
                }
            }),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |gp, _| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gp[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let (outer, len, inner) = split_axis(nodes[a.0].value.shape(), axis);
                let width = node.value.shape()[axis];
                acc(a, &mut |ga, _| {
                    for o in 0..outer {
                        let dst = &mut ga[(o * len + start) * inner..(o * len + start + width) * inner];
                        add_into(dst, &g[o * width * inner..(o + 1) * width * inner]);
                    }
                });
            }
            &Op::Sum { a, axis } | &Op::Mean { a, axis } => {
                let (outer, len, inner) = split_axis(nodes[a.0].value.shape(), axis);
                let scale = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
                acc(a, &mut |ga, _| {
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s * scale;
                            }
                        }
                    }
                });
            }
            Op::Max { a, argmax } => acc(*a, &mut |ga, _| {
                for (o, &src) in argmax.iter().enumerate() {
                    ga[src] += g[o];
                }
            }),
            &Op::SumAll(a) => acc(a, &mut |ga, _| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Gather { a, indices } => acc(*a, &mut |ga, _| {
                for (o, &src) in indices.iter().enumerate() {
                    ga[src] += g[o];
                }
            }),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(AutodiffError::InvalidArgument {
            op,
            reason: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// For each output multi-index of `shape`, the source offset `Σ idx[i]·src_strides[i]`.
fn index_map(shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    if n == 0 {
        return map;
    }
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `C += A·B` for an `m×k` by `k×n` product with explicit (row, col) strides.
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs buffer too small");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs buffer too small");
    assert!(c.len() >= span(m, n, rsc, csc), "gemm: output buffer too small");
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}
