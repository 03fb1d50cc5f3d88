//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] lives for one forward/backward pass. Operations append nodes
//! in topological order; [`Graph::backward`] walks them once in reverse.
//! Trainable [`Tensor`]s enter through [`Graph::param`] and their gradients
//! are read back with [`Graph::grad_of`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnGeom, ConvGeom, Exec, Strides};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
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
    Div(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu { x: Var, tanh: Vec<f64> },
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Softmax(Var),
    LogSoftmax { x: Var, mask: Option<Vec<bool>> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gap(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    ExpandLeading(Var),
    TileSpatial(Var),
    RowDot(Var, Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, k: Var, bias: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Attention { qkv: Var, geom: AttnGeom, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Computation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<u64, Var>,
    exec: Exec,
    kinks: u64,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (numel(shape) / cols.max(1), cols)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            exec,
            ..Graph::default()
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("graph node has valid shape")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Brings a tensor into the graph. Repeated calls with the same tensor
    /// return the same leaf, so its gradient accumulates over every use.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad());
        self.params.insert(t.id(), v);
        v
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "constant of shape {shape:?} with {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// A leaf that receives gradient, independent of any stored tensor.
    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a tensor previously registered via [`Graph::param`].
    pub fn grad_of(&self, t: &Tensor) -> Option<&[f64]> {
        self.params.get(&t.id()).and_then(|&v| self.grad(v))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!(
                "{what}: {sb:?} is not a trailing suffix of {sa:?}"
            )));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix(a, b, "add_broadcast")?;
        let bv = self.value(b);
        let data = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % bv.len()])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddSuffix(a, b), rg))
    }

    /// `a ⊙ b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix(a, b, "mul_broadcast")?;
        let bv = self.value(b);
        let data = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % bv.len()])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::MulSuffix(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if self.rg(x) {
            self.kinks = self.value(x).iter().fold(self.kinks, |h, &v| {
                (h ^ u64::from(v > 0.0)).wrapping_mul(0x100_0000_01b3)
            });
        }
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Hash of the sign pattern of every differentiable ReLU input so far.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let (mut out, mut tanh) = (vec![0.0; n], vec![0.0; n]);
        kernels::gelu(self.exec, self.value(x), &mut out, &mut tanh);
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu { x, tanh }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a, "matmul lhs")?;
        let (br, bc) = self.matrix_dims(b, "matmul rhs")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree for {:?}{} and {:?}{}",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a),
            Strides::row_major(ac, ta),
            self.value(b),
            Strides::row_major(bc, tb),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb, m, k, n }, rg))
    }

    /// Batched `op(a[i]) · op(b[i])` over 3-d tensors `[batch, rows, cols]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, ar, ac, br, bc) = match (&sa[..], &sb[..]) {
            ([ba, ar, ac], [bb, br, bc]) if ba == bb => (*ba, *ar, *ac, *br, *bc),
            _ => {
                return Err(Error::Shape(format!(
                    "bmm: expected matching 3-d batches, got {sa:?} and {sb:?}"
                )))
            }
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "bmm: inner dimensions disagree for {sa:?} and {sb:?}"
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        kernels::batched_gemm(
            self.exec,
            batch,
            m,
            k,
            n,
            self.value(a),
            Strides::row_major(ac, ta),
            self.value(b),
            Strides::row_major(bc, tb),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul { a, b, ta, tb, batch, m, k, n },
            rg,
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = row_split(self.shape(x));
        let mut out = vec![0.0; self.value(x).len()];
        kernels::softmax_rows(self.exec, self.value(x), cols, &mut out);
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (_, cols) = row_split(self.shape(x));
        let mut out = vec![0.0; self.value(x).len()];
        kernels::log_softmax_rows(self.exec, self.value(x), None, cols, &mut out);
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax { x, mask: None }, rg)
    }

    /// Log-softmax over the last axis restricted to `mask`-true entries;
    /// excluded entries come out as exactly 0 with zero gradient.
    pub fn masked_log_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "masked_log_softmax: mask of length {} for shape {:?}",
                mask.len(),
                self.shape(x)
            )));
        }
        let (_, cols) = row_split(self.shape(x));
        let mut out = vec![0.0; mask.len()];
        kernels::log_softmax_rows(self.exec, self.value(x), Some(&mask), cols, &mut out);
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LogSoftmax { x, mask: Some(mask) }, rg))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = row_split(self.shape(x));
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::Shape(format!(
                "layer_norm: scale {:?} / shift {:?} do not match width {cols}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let n = rows * cols;
        let (mut out, mut xhat, mut rstd) = (vec![0.0; n], vec![0.0; n], vec![0.0; rows]);
        kernels::layer_norm_rows(
            self.exec,
            self.value(x),
            self.value(gamma),
            self.value(beta),
            eps,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Affine map over the last axis: `x [.., in] · w [in, out] (+ b [out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, inp) = row_split(self.shape(x));
        let (wi, out) = self.matrix_dims(w, "linear weight")?;
        if wi != inp || self.shape(x).is_empty() {
            return Err(Error::Shape(format!(
                "linear: input {:?} does not match weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} does not match width {out}",
                    self.shape(b)
                )));
            }
        }
        let mut y = vec![0.0; rows * out];
        kernels::gemm(
            rows,
            inp,
            out,
            self.value(x),
            Strides::row_major(inp, false),
            self.value(w),
            Strides::row_major(out, false),
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            for r in y.chunks_mut(out) {
                r.iter_mut().zip(bv).for_each(|(y, b)| *y += b);
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, y, Op::Linear { x, w, b, rows, inp, out }, rg))
    }

    /// Multi-head self-attention. `qkv` is `[b, T, 3d]` with queries, keys
    /// and values packed along the last axis; the result is the merged-head
    /// context `[b, T, d]`. The attention weights are kept on the node, see
    /// [`Graph::attention_weights`].
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let &[batch, tokens, packed] = self.shape(qkv) else {
            return Err(Error::Shape(format!("attention: expected [b, T, 3d], got {:?}", self.shape(qkv))));
        };
        if heads == 0 || packed % 3 != 0 || (packed / 3) % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: width {packed} cannot be split into q/k/v over {heads} heads"
            )));
        }
        let geom = AttnGeom {
            batch,
            tokens,
            dim: packed / 3,
            heads,
        };
        let mut ctx = vec![0.0; batch * tokens * geom.dim];
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        kernels::attention_forward(self.exec, geom, self.value(qkv), &mut ctx, &mut probs);
        let rg = self.rg(qkv);
        Ok(self.push(vec![batch, tokens, geom.dim], ctx, Op::Attention { qkv, geom, probs }, rg))
    }

    /// Attention weights `[b·heads, T, T]` of a node built by [`Graph::attention`].
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], [usize; 3])> {
        match &self.nodes[v.0].op {
            Op::Attention { geom, probs, .. } => {
                Some((probs, [geom.batch * geom.heads, geom.tokens, geom.tokens]))
            }
            _ => None,
        }
    }

    /// Global average pooling `[b, c, h, w] → [b, c]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let &[b, c, h, w] = self.shape(x) else {
            return Err(Error::Shape(format!("gap: expected 4-d input, got {:?}", self.shape(x))));
        };
        let hw = h * w;
        let data = self
            .value(x)
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![b, c], data, Op::Gap(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &n)| d != axis && n != base[d])
            {
                return Err(Error::Shape(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(shape, data, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute: {perm:?} is not a permutation of {shape:?}")));
        }
        let mut out = vec![0.0; self.value(x).len()];
        kernels::permute(self.exec, self.value(x), &shape, perm, &mut out);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow: range {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out_shape, data, Op::Narrow { x, axis, start }, rg))
    }

    /// Repeats `x` along a new leading axis of size `n`.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::Shape("expand_leading: zero repeats".into()));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(n * src.len());
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::ExpandLeading(x), rg))
    }

    /// Broadcasts `[b, c]` over a spatial grid to `[b, c, h, w]`.
    pub fn tile_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let &[b, c] = self.shape(x) else {
            return Err(Error::Shape(format!("tile_spatial: expected [b, c], got {:?}", self.shape(x))));
        };
        if h == 0 || w == 0 {
            return Err(Error::Shape("tile_spatial: empty grid".into()));
        }
        let data = self
            .value(x)
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(h * w))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![b, c, h, w], data, Op::TileSpatial(x), rg))
    }

    /// Dot product of matching rows: `[r, c] × [r, c] → [r]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (rows, cols) = self.matrix_dims(a, "row_dot")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = (0..rows)
            .map(|r| {
                av[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&bv[r * cols..(r + 1) * cols])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![rows], data, Op::RowDot(a, b), rg))
    }

    /// Scales each row of a matrix to unit L2 norm (norm floored at `eps`).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "normalize_rows")?;
        let xv = self.value(x);
        let norms: Vec<f64> = (0..rows)
            .map(|r| {
                xv[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(eps)
            })
            .collect();
        let data = xv
            .iter()
            .enumerate()
            .map(|(i, v)| v / norms[i / cols])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![rows, cols], data, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// 2-d cross-correlation over NCHW input with OIHW kernel and optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (&[batch, in_ch, height, width], &[out_ch, kc, kh, kw]) = (self.shape(x), self.shape(k)) else {
            return Err(Error::Shape(format!(
                "conv2d: expected 4-d input and kernel, got {:?} and {:?}",
                self.shape(x),
                self.shape(k)
            )));
        };
        if kc != in_ch {
            return Err(Error::Shape(format!(
                "conv2d: kernel {:?} expects {kc} channels, input {:?} has {in_ch}",
                self.shape(k),
                self.shape(x)
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be ≥ 1".into()));
        }
        if kh > height + 2 * pad || kw > width + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
                height + 2 * pad,
                width + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(Error::Shape(format!("conv2d: bias {:?} for {out_ch} channels", self.shape(b))));
            }
        }
        let geom = ConvGeom { batch, in_ch, height, width, out_ch, kh, kw, stride, pad };
        let mut out = vec![0.0; batch * out_ch * geom.out_h() * geom.out_w()];
        kernels::conv2d_forward(
            self.exec,
            &geom,
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(k) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![batch, out_ch, geom.out_h(), geom.out_w()],
            out,
            Op::Conv2d { x, k, bias, geom },
            rg,
        ))
    }

    /// Runs reverse-mode differentiation from a scalar node.
    ///
    /// Gradients of leaves stay available through [`Graph::grad`]; interior
    /// gradients are released as soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = numel(&self.nodes[v.0].shape);
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    /// Adds a whole gradient buffer into `v`, taking ownership when it is the first contribution.
    fn give(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    /// Adds `g[i] * f(i)` into the gradient of `v`.
    fn acc_with(&mut self, v: Var, g: &[f64], f: impl Fn(usize) -> f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => {
                for (i, (b, gi)) in buf.iter_mut().zip(g).enumerate() {
                    *b += gi * f(i);
                }
            }
            slot => *slot = Some(g.iter().enumerate().map(|(i, gi)| gi * f(i)).collect()),
        }
    }

    /// Temporarily moves two operand buffers out of the graph; handles `a == b`.
    fn take_pair(&mut self, a: Var, b: Var) -> (Vec<f64>, Vec<f64>) {
        let av = std::mem::take(&mut self.nodes[a.0].data);
        let bv = if a == b {
            av.clone()
        } else {
            std::mem::take(&mut self.nodes[b.0].data)
        };
        (av, bv)
    }

    fn restore_pair(&mut self, a: Var, b: Var, av: Vec<f64>, bv: Vec<f64>) {
        self.nodes[a.0].data = av;
        if a != b {
            self.nodes[b.0].data = bv;
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let exec = self.exec;
        // Moving the op out avoids holding a borrow of `self.nodes` while
        // writing into `self.grads`; it is restored at the end.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(*a, g, |_| 1.0);
                self.acc_with(*b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_with(*a, g, |_| 1.0);
                self.acc_with(*b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let bv = std::mem::take(&mut self.nodes[b.0].data);
                self.acc_with(*a, g, |j| bv[j]);
                self.nodes[b.0].data = bv;
                let av = std::mem::take(&mut self.nodes[a.0].data);
                self.acc_with(*b, g, |j| av[j]);
                self.nodes[a.0].data = av;
            }
            Op::Div(a, b) => {
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.acc_with(*a, g, |j| 1.0 / bv[j]);
                self.acc_with(*b, g, |j| -av[j] / (bv[j] * bv[j]));
            }
            Op::AddSuffix(a, b) => {
                self.acc_with(*a, g, |_| 1.0);
                if let Some(buf) = self.buf(*b) {
                    let n = buf.len();
                    for (j, gj) in g.iter().enumerate() {
                        buf[j % n] += gj;
                    }
                }
            }
            Op::MulSuffix(a, b) => {
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                let n = bv.len();
                self.acc_with(*a, g, |j| bv[j % n]);
                if let Some(buf) = self.buf(*b) {
                    for (j, gj) in g.iter().enumerate() {
                        buf[j % n] += gj * av[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc_with(*x, g, |_| s);
            }
            Op::AddScalar(x) => self.acc_with(*x, g, |_| 1.0),
            Op::Relu(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].data);
                self.acc_with(*x, g, |j| if xv[j] > 0.0 { 1.0 } else { 0.0 });
                self.nodes[x.0].data = xv;
            }
            Op::Gelu { x, tanh } => {
                let xv = std::mem::take(&mut self.nodes[x.0].data);
                self.acc_with(*x, g, |j| kernels::gelu_grad(xv[j], tanh[j]));
                self.nodes[x.0].data = xv;
            }
            Op::Exp(x) => {
                let y = std::mem::take(&mut self.nodes[i].data);
                self.acc_with(*x, g, |j| y[j]);
                self.nodes[i].data = y;
            }
            Op::Log(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].data);
                self.acc_with(*x, g, |j| 1.0 / xv[j]);
                self.nodes[x.0].data = xv;
            }
            Op::Sqrt(x) => {
                let y = std::mem::take(&mut self.nodes[i].data);
                self.acc_with(*x, g, |j| 0.5 / y[j]);
                self.nodes[i].data = y;
            }
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (av, bv) = self.take_pair(a, b);
                let sa = Strides::row_major(if ta { m } else { k }, ta);
                let sb = Strides::row_major(if tb { k } else { n }, tb);
                let sg = Strides::row_major(n, false);
                if let Some(ga) = self.buf(a) {
                    if ta {
                        // stored [k, m] = op(b)[k, n] · gᵀ[n, m]
                        kernels::gemm(k, n, m, &bv, sb, g, sg.t(), ga, true);
                    } else {
                        kernels::gemm(m, n, k, g, sg, &bv, sb.t(), ga, true);
                    }
                }
                if let Some(gb) = self.buf(b) {
                    if tb {
                        // stored [n, k] = gᵀ[n, m] · op(a)[m, k]
                        kernels::gemm(n, m, k, g, sg.t(), &av, sa, gb, true);
                    } else {
                        kernels::gemm(k, m, n, &av, sa.t(), g, sg, gb, true);
                    }
                }
                self.restore_pair(a, b, av, bv);
            }
            &Op::BatchMatMul { a, b, ta, tb, batch, m, k, n } => {
                let (av, bv) = self.take_pair(a, b);
                let sa = Strides::row_major(if ta { m } else { k }, ta);
                let sb = Strides::row_major(if tb { k } else { n }, tb);
                let sg = Strides::row_major(n, false);
                // Per-batch operand slices all have m*k / k*n / m*n elements, so
                // batched_gemm's contiguous batch offsets apply to every combination.
                if let Some(ga) = self.buf(a) {
                    if ta {
                        kernels::batched_gemm(exec, batch, k, n, m, &bv, sb, g, sg.t(), ga, true);
                    } else {
                        kernels::batched_gemm(exec, batch, m, n, k, g, sg, &bv, sb.t(), ga, true);
                    }
                }
                if let Some(gb) = self.buf(b) {
                    if tb {
                        kernels::batched_gemm(exec, batch, n, m, k, g, sg.t(), &av, sa, gb, true);
                    } else {
                        kernels::batched_gemm(exec, batch, k, m, n, &av, sa.t(), g, sg, gb, true);
                    }
                }
                self.restore_pair(a, b, av, bv);
            }
            &Op::Linear { x, w, b, rows, inp, out } => {
                let sg = Strides::row_major(out, false);
                if self.rg(x) {
                    let wv = std::mem::take(&mut self.nodes[w.0].data);
                    let gx = self.buf(x).expect("checked");
                    kernels::gemm(rows, out, inp, g, sg, &wv, Strides::row_major(out, true), gx, true);
                    self.nodes[w.0].data = wv;
                }
                if self.rg(w) {
                    let xv = std::mem::take(&mut self.nodes[x.0].data);
                    let gw = self.buf(w).expect("checked");
                    kernels::gemm(inp, rows, out, &xv, Strides::row_major(inp, true), g, sg, gw, true);
                    self.nodes[x.0].data = xv;
                }
                if let Some(gb) = b.and_then(|b| self.buf(b)) {
                    for r in g.chunks(out) {
                        gb.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Attention { qkv, geom, probs } => {
                if self.rg(*qkv) {
                    let mut gq = vec![0.0; numel(&self.nodes[qkv.0].shape)];
                    kernels::attention_backward(exec, *geom, self.value(*qkv), probs, g, &mut gq);
                    self.give(*qkv, gq);
                }
            }
            Op::Softmax(x) => {
                let y = std::mem::take(&mut self.nodes[i].data);
                let (_, cols) = row_split(&self.nodes[i].shape);
                if let Some(gx) = self.buf(*x) {
                    kernels::softmax_rows_backward(exec, &y, g, cols, gx);
                }
                self.nodes[i].data = y;
            }
            Op::LogSoftmax { x, mask } => {
                let y = std::mem::take(&mut self.nodes[i].data);
                let (_, cols) = row_split(&self.nodes[i].shape);
                if let Some(gx) = self.buf(*x) {
                    kernels::log_softmax_rows_backward(exec, &y, g, mask.as_deref(), cols, gx);
                }
                self.nodes[i].data = y;
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = std::mem::take(&mut self.nodes[gamma.0].data);
                let cols = gv.len();
                if let Some(gx) = self.buf(*x) {
                    kernels::layer_norm_backward_input(exec, xhat, rstd, &gv, g, gx);
                }
                if let Some(gg) = self.buf(*gamma) {
                    for (j, (gj, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[j % cols] += gj * xh;
                    }
                }
                if let Some(gb) = self.buf(*beta) {
                    for (j, gj) in g.iter().enumerate() {
                        gb[j % cols] += gj;
                    }
                }
                self.nodes[gamma.0].data = gv;
            }
            Op::Gap(x) => {
                let s = &self.nodes[x.0].shape;
                let hw = s[2] * s[3];
                self.acc_with(*x, &expand_each(g, hw), |_| 1.0 / hw as f64);
            }
            Op::Concat { inputs, axis } => {
                let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| self.nodes[v.0].shape.clone()).collect();
                let outer: usize = shapes[0][..*axis].iter().product();
                let inner: usize = shapes[0][axis + 1..].iter().product();
                let total: usize = shapes.iter().map(|s| s[*axis]).sum::<usize>() * inner;
                let mut offset = 0;
                for (v, s) in inputs.iter().zip(&shapes) {
                    let len = s[*axis] * inner;
                    if let Some(buf) = self.buf(*v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            buf[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(b, s)| *b += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => self.acc_with(*x, g, |_| 1.0),
            Op::Permute { x, perm } => {
                let out_shape = self.nodes[i].shape.clone();
                if let Some(buf) = self.buf(*x) {
                    let mut back = vec![0.0; g.len()];
                    kernels::permute(exec, g, &out_shape, &kernels::inverse_perm(perm), &mut back);
                    buf.iter_mut().zip(&back).for_each(|(b, s)| *b += s);
                }
            }
            &Op::Narrow { x, axis, start } => {
                let shape = self.nodes[x.0].shape.clone();
                let len = self.nodes[i].shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                if let Some(buf) = self.buf(x) {
                    for o in 0..outer {
                        let dst = (o * shape[axis] + start) * inner;
                        let src = o * len * inner;
                        buf[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                            .for_each(|(b, s)| *b += s);
                    }
                }
            }
            Op::ExpandLeading(x) => {
                if let Some(buf) = self.buf(*x) {
                    let n = buf.len();
                    for chunk in g.chunks(n) {
                        buf.iter_mut().zip(chunk).for_each(|(b, s)| *b += s);
                    }
                }
            }
            Op::TileSpatial(x) => {
                let s = &self.nodes[i].shape;
                let hw = s[2] * s[3];
                if let Some(buf) = self.buf(*x) {
                    for (b, plane) in buf.iter_mut().zip(g.chunks(hw)) {
                        *b += plane.iter().sum::<f64>();
                    }
                }
            }
            Op::RowDot(a, b) => {
                let cols = self.nodes[a.0].shape[1];
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.acc_with(*a, &expand_each(g, cols), |j| bv[j]);
                self.acc_with(*b, &expand_each(g, cols), |j| av[j]);
            }
            Op::NormalizeRows { x, norms } => {
                let y = std::mem::take(&mut self.nodes[i].data);
                let cols = self.nodes[i].shape[1];
                if let Some(buf) = self.buf(*x) {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            buf[r * cols + c] += (gr[c] - yr[c] * dot) / n;
                        }
                    }
                }
                self.nodes[i].data = y;
            }
            Op::Sum(x) => {
                let g0 = g[0];
                if let Some(buf) = self.buf(*x) {
                    buf.iter_mut().for_each(|b| *b += g0);
                }
            }
            Op::Mean(x) => {
                let g0 = g[0] / self.nodes[x.0].data.len() as f64;
                if let Some(buf) = self.buf(*x) {
                    buf.iter_mut().for_each(|b| *b += g0);
                }
            }
            &Op::Conv2d { x, k, bias, geom } => {
                let xv = std::mem::take(&mut self.nodes[x.0].data);
                let kv = std::mem::take(&mut self.nodes[k.0].data);
                if let Some(gx) = self.buf(x) {
                    kernels::conv2d_backward_input(exec, &geom, &kv, g, gx);
                }
                if let Some(gk) = self.buf(k) {
                    kernels::conv2d_backward_kernel(exec, &geom, &xv, g, gk);
                }
                if let Some(b) = bias {
                    let spatial = geom.out_h() * geom.out_w();
                    if let Some(gb) = self.buf(b) {
                        for (j, plane) in g.chunks(spatial).enumerate() {
                            gb[j % geom.out_ch] += plane.iter().sum::<f64>();
                        }
                    }
                }
                self.nodes[x.0].data = xv;
                self.nodes[k.0].data = kv;
            }
        }
        self.nodes[i].op = op;
    }
}

/// Repeats each entry of `g` `n` times.
fn expand_each(g: &[f64], n: usize) -> Vec<f64> {
    g.iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect()
}
