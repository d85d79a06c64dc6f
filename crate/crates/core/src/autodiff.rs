//! Tape-based reverse-mode differentiation over a closed set of primitives.
//!
//! A [`Tape`] records every primitive application in execution order, which is
//! also a topological order. [`Tape::backward`] walks the tape in reverse and
//! accumulates adjoints into the leaves that require gradients.
//!
//! The tape can run in shape-only mode: no arithmetic is performed, but every
//! primitive still records its output shape and multiply-add cost. The cost
//! model traces full-size networks this way.

use crate::cost::Pillar;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Narrow,
    Concat,
    Expand,
    Add,
    AddBias,
    Mul,
    Scale,
    Relu,
    Gelu,
    HSwish,
    Softmax,
    LayerNorm,
    BatchNorm,
    Conv2d,
    AvgPool,
    DyRelu,
    Sum,
    Mean,
    CrossEntropy,
}

impl OpKind {
    /// Elementwise activations, normalizations and reductions. Everything
    /// except convolutions and matrix products.
    pub fn is_elementwise(self) -> bool {
        !matches!(self, OpKind::MatMul | OpKind::Conv2d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Transpose {
        x: Var,
        batch: usize,
        m: usize,
        n: usize,
    },
    Reshape {
        x: Var,
    },
    Narrow {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        count: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
    Expand {
        x: Var,
        times: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    HSwish {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    },
    DyRelu {
        x: Var,
        coef: Var,
        n: usize,
        c: usize,
        plane: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// One costed primitive application, attributed to the scope active when it
/// was recorded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostEvent {
    pub path: String,
    pub pillar: Pillar,
    pub kind: OpKind,
    pub madds: u64,
}

/// Batch-norm statistics computed by a train-mode application.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the convention for running estimates.
    pub var: Vec<T>,
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    shape_only: bool,
    track_costs: bool,
    scope: String,
    pillar: Pillar,
    events: Vec<CostEvent>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            shape_only: false,
            track_costs: false,
            scope: String::new(),
            pillar: Pillar::Mobile,
            events: Vec::new(),
        }
    }

    /// A tape that propagates shapes and costs but computes nothing.
    pub fn shape_only() -> Self {
        Tape {
            shape_only: true,
            track_costs: true,
            ..Self::new()
        }
    }

    pub fn with_cost_tracking(mut self) -> Self {
        self.track_costs = true;
        self
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn cost_events(&self) -> &[CostEvent] {
        &self.events
    }

    pub fn total_madds(&self) -> u64 {
        self.events.iter().map(|e| e.madds).sum()
    }

    /// Makes `path` the attribution scope for recorded costs; returns the
    /// previous scope for [`Tape::leave`].
    pub fn enter(&mut self, path: &str, pillar: Pillar) -> (String, Pillar) {
        let prev_scope = std::mem::replace(&mut self.scope, path.to_string());
        let prev_pillar = std::mem::replace(&mut self.pillar, pillar);
        (prev_scope, prev_pillar)
    }

    pub fn leave(&mut self, prev: (String, Pillar)) {
        self.scope = prev.0;
        self.pillar = prev.1;
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor<T>> {
        if self.shape_only {
            return Err(Error::ShapeOnly);
        }
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        kind: OpKind,
        madds: u64,
    ) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self
                .inputs(&op)
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        if self.track_costs && madds > 0 {
            self.events.push(CostEvent {
                path: self.scope.clone(),
                pillar: self.pillar,
                kind,
                madds,
            });
        }
        debug_assert!(self.shape_only || value.len() == numel(&shape));
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Bmm { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Transpose { x, .. }
            | Op::Reshape { x }
            | Op::Narrow { x, .. }
            | Op::Expand { x, .. }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::HSwish { x }
            | Op::Softmax { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::DyRelu { x, coef, .. } => vec![*x, *coef],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    // ---- leaves ---------------------------------------------------------

    /// Records a tensor; it receives a gradient if `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        let value = if self.shape_only {
            Vec::new()
        } else {
            t.into_data()
        };
        let v = self.push(shape, value, Op::Leaf, OpKind::Leaf, 0);
        self.nodes[v.0].requires_grad = rg;
        v
    }

    /// Records a copy of `t` (parameters stay owned by their store).
    pub fn leaf_ref(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let value = if self.shape_only {
            Vec::new()
        } else {
            t.data().to_vec()
        };
        let v = self.push(t.shape().to_vec(), value, Op::Leaf, OpKind::Leaf, 0);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        let value = if self.shape_only {
            Vec::new()
        } else {
            t.into_data()
        };
        self.push(shape, value, Op::Leaf, OpKind::Leaf, 0)
    }

    /// Shape-only placeholder input.
    pub fn placeholder(&mut self, shape: &[usize]) -> Var {
        let value = if self.shape_only {
            Vec::new()
        } else {
            vec![T::zero(); numel(shape)]
        };
        self.push(shape.to_vec(), value, Op::Leaf, OpKind::Leaf, 0)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let o = self.bmm(a3, b3, false)?;
        self.reshape(o, &[sa[0], sb[1]])
    }

    /// Batched product `[B,m,k] · [B,k,n]`, or `[B,m,k] · [B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let value = if self.shape_only {
            Vec::new()
        } else {
            kernels::bmm_forward(self.value(a), self.value(b), batch, m, k, n, trans_b)
        };
        let madds = (batch * m * k * n) as u64;
        let op = Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push(vec![batch, m, n], value, op, OpKind::MatMul, madds))
    }

    /// `x[..., in] · wᵀ + bias` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let inn = *sx.last().expect("rank >= 1");
        if sw.len() != 2 || sw[1] != inn {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let rows = numel(&sx) / inn;
        let x3 = self.reshape(x, &[1, rows, inn])?;
        let w3 = self.reshape(w, &[1, sw[0], sw[1]])?;
        let y = self.bmm(x3, w3, true)?;
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = sw[0];
        let y = self.reshape(y, &out_shape)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Axis {
                axis: 1,
                rank: s.len(),
            });
        }
        let r = s.len();
        let (m, n) = (s[r - 2], s[r - 1]);
        let batch = numel(&s[..r - 2]);
        let value = if self.shape_only {
            Vec::new()
        } else {
            kernels::transpose(self.value(x), batch, m, n)
        };
        let mut shape = s.clone();
        shape.swap(r - 2, r - 1);
        Ok(self.push(
            shape,
            value,
            Op::Transpose { x, batch, m, n },
            OpKind::Transpose,
            0,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if numel(s) != numel(shape) {
            return Err(Error::shape("reshape", s, shape));
        }
        let value = if self.shape_only {
            Vec::new()
        } else {
            self.value(x).to_vec()
        };
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x }, OpKind::Reshape, 0))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Axis {
                axis,
                rank: s.len(),
            });
        }
        if count == 0 || start + count > s[axis] {
            return Err(Error::invalid(
                "narrow",
                format!(
                    "range {start}..{} outside axis of {}",
                    start + count,
                    s[axis]
                ),
            ));
        }
        let (outer, len, inner) = kernels::split_axis(&s, axis);
        let value = if self.shape_only {
            Vec::new()
        } else {
            let src = self.value(x);
            let mut out = Vec::with_capacity(outer * count * inner);
            for o in 0..outer {
                out.extend_from_slice(&src[(o * len + start) * inner..][..count * inner]);
            }
            out
        };
        let mut shape = s;
        shape[axis] = count;
        let op = Op::Narrow {
            x,
            outer,
            len,
            inner,
            start,
            count,
        };
        Ok(self.push(shape, value, op, OpKind::Narrow, 0))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Axis {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        let mut parts = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &first, s));
            }
            parts.push((x, s[axis]));
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let value = if self.shape_only {
            Vec::new()
        } else {
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &(x, len) in &parts {
                    out.extend_from_slice(&self.value(x)[o * len * inner..][..len * inner]);
                }
            }
            out
        };
        let mut shape = first;
        shape[axis] = total;
        let op = Op::Concat {
            parts,
            outer,
            inner,
            total,
        };
        Ok(self.push(shape, value, op, OpKind::Concat, 0))
    }

    /// Repeats `x` along a new leading axis of extent `times`.
    pub fn expand(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let value = if self.shape_only {
            Vec::new()
        } else {
            self.value(x).repeat(times)
        };
        let mut shape = vec![times];
        shape.extend(s);
        Ok(self.push(shape, value, Op::Expand { x, times }, OpKind::Expand, 0))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Vec<T> {
        if self.shape_only {
            Vec::new()
        } else {
            self.value(x).iter().map(|&v| f(v)).collect()
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        if self.shape_only {
            Vec::new()
        } else {
            self.value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| f(x, y))
                .collect()
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let madds = numel(&shape) as u64;
        Ok(self.push(shape, value, Op::Add { a, b }, OpKind::Add, madds))
    }

    /// Adds a vector along the last axis. The bias seeds the accumulator of
    /// the preceding product, so it carries no multiply-add cost.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", &sx, &sb));
        }
        let value = if self.shape_only {
            Vec::new()
        } else {
            let bv = self.value(b);
            let n = bv.len();
            self.value(x)
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bv[i % n])
                .collect()
        };
        Ok(self.push(sx, value, Op::AddBias { x, b }, OpKind::AddBias, 0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let madds = numel(&shape) as u64;
        Ok(self.push(shape, value, Op::Mul { a, b }, OpKind::Mul, madds))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let value = self.map(x, |v| v * s);
        let shape = self.shape(x).to_vec();
        let madds = numel(&shape) as u64;
        Ok(self.push(shape, value, Op::Scale { x, s }, OpKind::Scale, madds))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.max(T::zero()));
        let shape = self.shape(x).to_vec();
        let madds = numel(&shape) as u64;
        Ok(self.push(shape, value, Op::Relu { x }, OpKind::Relu, madds))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, kernels::gelu);
        let shape = self.shape(x).to_vec();
        let madds = numel(&shape) as u64;
        Ok(self.push(shape, value, Op::Gelu { x }, OpKind::Gelu, madds))
    }

    pub fn hswish(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, kernels::hswish);
        let shape = self.shape(x).to_vec();
        let madds = numel(&shape) as u64;
        Ok(self.push(shape, value, Op::HSwish { x }, OpKind::HSwish, madds))
    }

    /// Max-subtracted softmax along `axis`. Costed at three operations per
    /// logit (exponent, sum, normalize).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Axis {
                axis,
                rank: s.len(),
            });
        }
        let (outer, len, inner) = kernels::split_axis(&s, axis);
        let value = if self.shape_only {
            Vec::new()
        } else {
            kernels::softmax_forward(self.value(x), outer, len, inner)
        };
        let madds = 3 * numel(&s) as u64;
        let op = Op::Softmax {
            x,
            outer,
            len,
            inner,
        };
        Ok(self.push(s, value, op, OpKind::Softmax, madds))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("rank >= 1");
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &s, self.shape(p)));
            }
        }
        let rows = numel(&s) / d;
        let (value, xhat, rstd) = if self.shape_only {
            (Vec::new(), Vec::new(), Vec::new())
        } else {
            let xv = self.value(x);
            let (xh, rstd) =
                kernels::normalize_rows((0..rows).map(|r| xv[r * d..][..d].to_vec()), T::c(eps));
            let xhat: Vec<T> = xh.into_iter().flatten().collect();
            let (g, b) = (self.value(gamma), self.value(beta));
            let value = xhat
                .iter()
                .enumerate()
                .map(|(i, &h)| g[i % d] * h + b[i % d])
                .collect();
            (value, xhat, rstd)
        };
        let madds = numel(&s) as u64;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(s, value, op, OpKind::LayerNorm, madds))
    }

    /// Batch norm over an NCHW map. In `Train` mode it normalizes with batch
    /// statistics and returns them; in `Eval` mode it uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid(
                "batch_norm",
                format!("expected NCHW, got {s:?}"),
            ));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", &s, self.shape(p)));
            }
        }
        if mode == NormMode::Eval && running.is_none() {
            return Err(Error::UninitializedStats);
        }
        let madds = numel(&s) as u64;
        if self.shape_only {
            let op = Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Vec::new(),
                rstd: Vec::new(),
                train: mode == NormMode::Train,
            };
            return Ok((self.push(s, Vec::new(), op, OpKind::BatchNorm, madds), None));
        }
        let xv = self.value(x);
        let at = |ni: usize, ci: usize| (ni * c + ci) * plane;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); c];
        let mut stats = None;
        match mode {
            NormMode::Train => {
                let cnt = n * plane;
                let mut means = Vec::with_capacity(c);
                let mut vars = Vec::with_capacity(c);
                for ci in 0..c {
                    let row: Vec<T> = (0..n)
                        .flat_map(|ni| xv[at(ni, ci)..][..plane].iter().copied())
                        .collect();
                    let (xh, r) = kernels::normalize_rows(std::iter::once(row.clone()), T::c(eps));
                    rstd[ci] = r[0];
                    for ni in 0..n {
                        xhat[at(ni, ci)..][..plane].copy_from_slice(&xh[0][ni * plane..][..plane]);
                    }
                    let cntt = T::c(cnt as f64);
                    let mean = row.iter().copied().sum::<T>() / cntt;
                    let ss = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                    means.push(mean);
                    vars.push(if cnt > 1 {
                        ss / T::c((cnt - 1) as f64)
                    } else {
                        T::zero()
                    });
                }
                stats = Some(BatchStats {
                    mean: means,
                    var: vars,
                });
            }
            NormMode::Eval => {
                let (rm, rv) = running.expect("checked above");
                for ci in 0..c {
                    rstd[ci] = T::one() / (rv[ci] + T::c(eps)).sqrt();
                    for ni in 0..n {
                        let base = at(ni, ci);
                        for i in 0..plane {
                            xhat[base + i] = (xv[base + i] - rm[ci]) * rstd[ci];
                        }
                    }
                }
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let value = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let ci = (i / plane) % c;
                g[ci] * h + b[ci]
            })
            .collect();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            train: mode == NormMode::Train,
        };
        Ok((self.push(s, value, op, OpKind::BatchNorm, madds), stats))
    }

    /// 2-D convolution over NCHW input with kernel `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Stride(stride));
        }
        let (cin, cout) = (sx[1], sw[0]);
        if groups == 0 || cin % groups != 0 {
            return Err(Error::Divisibility {
                what: "conv2d input channels".into(),
                value: cin,
                by: groups,
            });
        }
        if cout % groups != 0 {
            return Err(Error::Divisibility {
                what: "conv2d output channels".into(),
                value: cout,
                by: groups,
            });
        }
        if sw[1] != cin / groups || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            cin,
            h: sx[2],
            w: sx[3],
            cout,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            groups,
        };
        let shape = vec![geom.n, cout, geom.out_h(), geom.out_w()];
        let value = if self.shape_only {
            Vec::new()
        } else {
            let bv = bias.map(|b| self.value(b));
            kernels::conv2d_forward(&geom, self.value(x), self.value(w), bv)
        };
        let madds = (numel(&shape) * geom.kh * geom.kw * (cin / groups)) as u64;
        Ok(self.push(
            shape,
            value,
            Op::Conv2d {
                x,
                w,
                b: bias,
                geom,
            },
            OpKind::Conv2d,
            madds,
        ))
    }

    /// Non-overlapping average pooling with a `kh × kw` window.
    pub fn avgpool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid(
                "avgpool2d",
                format!("expected NCHW, got {s:?}"),
            ));
        }
        if kh == 0 || kw == 0 || !s[2].is_multiple_of(kh) || !s[3].is_multiple_of(kw) {
            return Err(Error::invalid(
                "avgpool2d",
                format!("window {kh}x{kw} does not divide {}x{}", s[2], s[3]),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / kh, w / kw);
        let value = if self.shape_only {
            Vec::new()
        } else {
            let xv = self.value(x);
            let inv = T::one() / T::c((kh * kw) as f64);
            let mut out = vec![T::zero(); planes * oh * ow];
            for p in 0..planes {
                for y in 0..h {
                    for xx in 0..w {
                        out[(p * oh + y / kh) * ow + xx / kw] += xv[(p * h + y) * w + xx];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= inv);
            out
        };
        let madds = numel(&s) as u64;
        let op = Op::AvgPool {
            x,
            planes,
            h,
            w,
            kh,
            kw,
        };
        Ok(self.push(vec![s[0], s[1], oh, ow], value, op, OpKind::AvgPool, madds))
    }

    /// Channel-wise two-branch dynamic ReLU: `max(a1·x + b1, a2·x + b2)`.
    /// `coef: [N, 4C]` laid out as `[a1 | a2 | b1 | b2]`.
    pub fn dyrelu(&mut self, x: Var, coef: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let sc = self.shape(coef).to_vec();
        if s.len() != 4 || sc.len() != 2 || sc[0] != s[0] || sc[1] != 4 * s[1] {
            return Err(Error::shape("dyrelu", &s, &sc));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let value = if self.shape_only {
            Vec::new()
        } else {
            let (xv, cv) = (self.value(x), self.value(coef));
            let mut out = vec![T::zero(); xv.len()];
            for ni in 0..n {
                let k = &cv[ni * 4 * c..][..4 * c];
                for ci in 0..c {
                    let (a1, a2, b1, b2) = (k[ci], k[c + ci], k[2 * c + ci], k[3 * c + ci]);
                    let base = (ni * c + ci) * plane;
                    for i in base..base + plane {
                        out[i] = (a1 * xv[i] + b1).max(a2 * xv[i] + b2);
                    }
                }
            }
            out
        };
        let madds = 2 * numel(&s) as u64;
        Ok(self.push(
            s,
            value,
            Op::DyRelu {
                x,
                coef,
                n,
                c,
                plane,
            },
            OpKind::DyRelu,
            madds,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = if self.shape_only {
            Vec::new()
        } else {
            vec![self.value(x).iter().copied().sum()]
        };
        let madds = numel(self.shape(x)) as u64;
        Ok(self.push(vec![1], value, Op::Sum { x }, OpKind::Sum, madds))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let cnt = numel(self.shape(x));
        let value = if self.shape_only {
            Vec::new()
        } else {
            vec![self.value(x).iter().copied().sum::<T>() / T::c(cnt as f64)]
        };
        Ok(self.push(vec![1], value, Op::Mean { x }, OpKind::Mean, cnt as u64))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} >= {} classes", s[1]),
            ));
        }
        let (n, k) = (s[0], s[1]);
        let (value, probs) = if self.shape_only {
            (Vec::new(), Vec::new())
        } else {
            let probs = kernels::softmax_forward(self.value(logits), n, k, 1);
            let loss = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| -(probs[i * k + l].max(T::min_positive_value())).ln())
                .sum::<T>()
                / T::c(n as f64);
            (vec![loss], probs)
        };
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], value, op, OpKind::CrossEntropy, 3 * (n * k) as u64))
    }

    /// Smallest distance of any recorded activation input to a kink of its
    /// piecewise-linear activation (ReLU at 0, h-swish at ±3, dynamic ReLU
    /// where its two branches cross). `f64::INFINITY` when there are none.
    pub fn kink_margin(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.value(*x) {
                        best = best.min(v.abs().f64());
                    }
                }
                Op::HSwish { x } => {
                    for &v in self.value(*x) {
                        let v = v.f64();
                        best = best.min((v - 3.0).abs()).min((v + 3.0).abs());
                    }
                }
                Op::DyRelu {
                    x,
                    coef,
                    n,
                    c,
                    plane,
                } => {
                    let (xv, cv) = (self.value(*x), self.value(*coef));
                    for ni in 0..*n {
                        let k = &cv[ni * 4 * c..][..4 * c];
                        for ci in 0..*c {
                            let da = (k[ci] - k[c + ci]).f64();
                            let db = (k[2 * c + ci] - k[3 * c + ci]).f64();
                            let base = (ni * c + ci) * plane;
                            for &v in &xv[base..base + plane] {
                                best = best.min((da * v.f64() + db).abs());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        best
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates adjoints from the scalar `loss` and accumulates them into
    /// every leaf that requires a gradient. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape_only {
            return Err(Error::ShapeOnly);
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (var, contrib) in self.local_adjoints(i, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match adj[var.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &d)| *a += d),
                    None => adj[var.0] = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_adjoints(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v);
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (da, db) =
                    kernels::bmm_backward(val(*a), val(*b), g, *batch, *m, *k, *n, *trans_b);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose { x, batch, m, n } => vec![(*x, kernels::transpose(g, *batch, *n, *m))],
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Narrow {
                x,
                outer,
                len,
                inner,
                start,
                count,
            } => {
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    dx[(o * len + start) * inner..][..count * inner]
                        .copy_from_slice(&g[o * count * inner..][..count * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Concat {
                parts,
                outer,
                inner,
                total,
            } => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &(x, len) in parts {
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        dx.extend_from_slice(&g[(o * total + offset) * inner..][..len * inner]);
                    }
                    offset += len;
                    out.push((x, dx));
                }
                out
            }
            Op::Expand { x, times } => {
                let sz = g.len() / times;
                let mut dx = vec![T::zero(); sz];
                for t in 0..*times {
                    dx.iter_mut()
                        .zip(&g[t * sz..][..sz])
                        .for_each(|(d, &v)| *d += v);
                }
                vec![(*x, dx)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBias { x, b } => {
                let n = self.shape(*b)[0];
                let mut db = vec![T::zero(); n];
                for (j, &v) in g.iter().enumerate() {
                    db[j % n] += v;
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let da = g.iter().zip(bv).map(|(&d, &y)| d * y).collect();
                let db = g.iter().zip(av).map(|(&d, &x)| d * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { x, s } => vec![(*x, g.iter().map(|&d| d * *s).collect())],
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Gelu { x } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| d * kernels::gelu_grad(v))
                    .collect();
                vec![(*x, dx)]
            }
            Op::HSwish { x } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| d * kernels::hswish_grad(v))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => vec![(
                *x,
                kernels::softmax_backward(&node.value, g, *outer, *len, *inner),
            )],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gv = val(*gamma);
                let mut dx = Vec::with_capacity(g.len());
                let mut dg = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..][..d];
                    let xh = &xhat[r * d..][..d];
                    let dxhat: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                    dx.extend(kernels::normalize_backward(xh, &dxhat, rs));
                    for j in 0..d {
                        dg[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, dbeta)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            } => {
                let s = &node.shape;
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gv = val(*gamma);
                let at = |ni: usize, ci: usize| (ni * c + ci) * plane;
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ci in 0..c {
                    let mut gs = Vec::with_capacity(n * plane);
                    let mut hs = Vec::with_capacity(n * plane);
                    for ni in 0..n {
                        gs.extend_from_slice(&g[at(ni, ci)..][..plane]);
                        hs.extend_from_slice(&xhat[at(ni, ci)..][..plane]);
                    }
                    dg[ci] = gs.iter().zip(&hs).map(|(&a, &b)| a * b).sum();
                    dbeta[ci] = gs.iter().copied().sum();
                    if !rg(*x) {
                        continue;
                    }
                    let dxc: Vec<T> = if *train {
                        let dxhat: Vec<T> = gs.iter().map(|&v| v * gv[ci]).collect();
                        kernels::normalize_backward(&hs, &dxhat, rstd[ci])
                    } else {
                        gs.iter().map(|&v| v * gv[ci] * rstd[ci]).collect()
                    };
                    for ni in 0..n {
                        dx[at(ni, ci)..][..plane].copy_from_slice(&dxc[ni * plane..][..plane]);
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, dbeta)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(geom, val(*x), val(*w), g, b.is_some());
                let mut out = vec![(*x, dx), (*w, dw)];
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::AvgPool {
                x,
                planes,
                h,
                w,
                kh,
                kw,
            } => {
                let (oh, ow) = (h / kh, w / kw);
                let inv = T::one() / T::c((kh * kw) as f64);
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..*planes {
                    for y in 0..*h {
                        for xx in 0..*w {
                            dx[(p * h + y) * w + xx] = g[(p * oh + y / kh) * ow + xx / kw] * inv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::DyRelu {
                x,
                coef,
                n,
                c,
                plane,
            } => {
                let (xv, cv) = (val(*x), val(*coef));
                let mut dx = vec![T::zero(); xv.len()];
                let mut dc = vec![T::zero(); cv.len()];
                for ni in 0..*n {
                    let k = &cv[ni * 4 * c..][..4 * c];
                    for ci in 0..*c {
                        let (a1, a2, b1, b2) = (k[ci], k[c + ci], k[2 * c + ci], k[3 * c + ci]);
                        let base = (ni * c + ci) * plane;
                        let (mut ga1, mut ga2, mut gb1, mut gb2) =
                            (T::zero(), T::zero(), T::zero(), T::zero());
                        for j in base..base + plane {
                            let v = xv[j];
                            // ties go to the second branch: subgradient 0 at the ReLU kink
                            if a1 * v + b1 > a2 * v + b2 {
                                dx[j] = g[j] * a1;
                                ga1 += g[j] * v;
                                gb1 += g[j];
                            } else {
                                dx[j] = g[j] * a2;
                                ga2 += g[j] * v;
                                gb2 += g[j];
                            }
                        }
                        let kc = ni * 4 * c;
                        dc[kc + ci] = ga1;
                        dc[kc + c + ci] = ga2;
                        dc[kc + 2 * c + ci] = gb1;
                        dc[kc + 3 * c + ci] = gb2;
                    }
                }
                vec![(*x, dx), (*coef, dc)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; numel(self.shape(*x))])],
            Op::Mean { x } => {
                let cnt = numel(self.shape(*x));
                vec![(*x, vec![g[0] / T::c(cnt as f64); cnt])]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let inv = g[0] / T::c(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * inv).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= inv;
                }
                vec![(*logits, dx)]
            }
        }
    }
}

/// Central finite-difference gradient of a scalar function:
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` per element.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    let h = T::c(eps);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (h + h));
    }
    Tensor::new(x.shape(), grad).expect("same shape as x")
}

/// `|a - b| / max(|a|, |b|, floor)`, the comparison used by gradient checks.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_values_and_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = tape.leaf(t(&[2, 1], &[5.0, 6.0]).with_grad());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), &[17.0, 39.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_on_reuse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(t(&[1], &[3.0]));
        assert!(matches!(tape.backward(c), Err(Error::DetachedLoss)));
        let mut shapes = Tape::<f64>::shape_only();
        let p = shapes.placeholder(&[1]);
        assert!(matches!(shapes.backward(p), Err(Error::ShapeOnly)));
    }

    #[test]
    fn softmax_rows_normalize_along_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[5] - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[-4.0, -1.0, 0.0, 4.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 0.0, 4.0]);
        let h = tape.hswish(x).unwrap();
        assert_eq!(tape.value(h), &[0.0, -2.0 / 6.0, 0.0, 4.0]);
        let g = tape.gelu(x).unwrap();
        assert!((tape.value(g)[3] - 4.0).abs() < 1e-3);
        assert_eq!(tape.value(g)[2], 0.0);
    }

    #[test]
    fn dynamic_relu_takes_branch_maximum() {
        let mut tape = Tape::<f64>::new();
        // One sample, one channel, two pixels; branches 2x+1 and -x.
        let x = tape.leaf(t(&[1, 1, 1, 2], &[1.0, -3.0]));
        let coef = tape.leaf(t(&[1, 4], &[2.0, -1.0, 1.0, 0.0]));
        let y = tape.dyrelu(x, coef).unwrap();
        assert_eq!(tape.value(y), &[3.0, 3.0]);
    }

    #[test]
    fn conv_cost_and_shape() {
        let mut tape = Tape::<f32>::shape_only();
        let x = tape.placeholder(&[1, 8, 10, 10]);
        let w = tape.placeholder(&[16, 2, 3, 3]);
        let y = tape.conv2d(x, w, None, 2, 1, 4).unwrap();
        assert_eq!(tape.shape(y), &[1, 16, 5, 5]);
        assert_eq!(tape.total_madds(), 9 * 2 * 16 * 25);
        assert!(matches!(
            tape.conv2d(x, w, None, 3, 1, 4),
            Err(Error::Stride(3))
        ));
    }

    #[test]
    fn batch_norm_eval_needs_statistics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 2, 2]));
        let g = tape.leaf(Tensor::ones(&[2]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let r = tape.batch_norm(x, g, b, 1e-5, NormMode::Eval, None);
        assert!(matches!(r, Err(Error::UninitializedStats)));
        let (_, stats) = tape
            .batch_norm(x, g, b, 1e-5, NormMode::Train, None)
            .unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![1.0, 1.0]);
        assert_eq!(stats.var, vec![0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4]).with_grad());
        let l = tape.cross_entropy(x, &[0, 3]).unwrap();
        assert!((tape.value(l)[0] - 4f64.ln()).abs() < 1e-12);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[0] + 0.375).abs() < 1e-12);
        assert!((g[1] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn scopes_label_cost_events() {
        let mut tape = Tape::<f32>::shape_only();
        let a = tape.placeholder(&[1, 2, 3]);
        let b = tape.placeholder(&[1, 3, 4]);
        let prev = tape.enter("outer.inner", Pillar::Bridge);
        tape.bmm(a, b, false).unwrap();
        tape.leave(prev);
        tape.bmm(a, b, false).unwrap();
        let ev = tape.cost_events();
        assert_eq!(ev[0].path, "outer.inner");
        assert_eq!(ev[0].pillar, Pillar::Bridge);
        assert_eq!(ev[0].madds, 24);
        assert_eq!(ev[1].path, "");
    }

    #[test]
    fn kink_margin_sees_relu_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.25, -0.001, 2.0]));
        assert_eq!(tape.kink_margin(), f64::INFINITY);
        tape.relu(x).unwrap();
        assert!((tape.kink_margin() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-7), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-7) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
