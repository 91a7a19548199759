//! Reverse-mode tape.
//!
//! A [`Graph`] records every primitive executed on it. Shape errors are
//! contract violations and panic; numerical failures during the adjoint
//! sweep surface as [`AutodiffError`].

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvDims};
use super::tensor::{numel, split_at_axis, Precision, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite adjoint produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite value while evaluating `{0}`")]
    NonFiniteValue(String),
}

/// Handle to a node on a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Powf(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Expand(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Softmax(Var),
    Bilinear(Var, Var),
    Conv2d(Var, Var),
    Upsample2x(Var),
    AvgPool2x(Var),
    Composite {
        sigma: Var,
        rgb: Var,
        deltas: Rc<Vec<f64>>,
        bg: [f64; 3],
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Bilinear(a, b) | Op::Conv2d(a, b) => vec![*a, *b],
            Op::Composite { sigma, rgb, .. } => vec![*sigma, *rgb],
            Op::Concat(parts, _) => parts.clone(),
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Powf(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::LeakyRelu(a, _)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::MaxAxis(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Expand(a)
            | Op::Slice(a, _, _)
            | Op::Softmax(a)
            | Op::Upsample2x(a)
            | Op::AvgPool2x(a) => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Powf(..) => "powf",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sum(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MaxAxis(..) => "max_axis",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Expand(..) => "expand",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Softmax(..) => "softmax",
            Op::Bilinear(..) => "bilinear_sample",
            Op::Conv2d(..) => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::AvgPool2x(..) => "avg_pool2x",
            Op::Composite { .. } => "composite",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Not `Sync`: one graph per thread and step.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (na, nb) = (numel(a), numel(b));
    if a == b {
        return a.to_vec();
    }
    let (big, small) = if na >= nb { (a, b) } else { (b, a) };
    let ok = numel(small) == 1 || (small.len() <= big.len() && big.ends_with(small));
    assert!(
        ok,
        "shapes {a:?} and {b:?} only broadcast over leading batch dimensions or scalars"
    );
    big.to_vec()
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn out(&self, shape: &[usize], mut data: Vec<f64>) -> Tensor {
        self.precision.round_all(&mut data);
        Tensor::new(shape, data)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor) -> Var {
        let t = t.rounded(self.precision);
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        let t = t.rounded(self.precision);
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Detached copy of a value: same numbers, no gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf, false)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let shape = broadcast_shape(ta.shape(), tb.shape());
        let n = numel(&shape);
        let (da, db) = (ta.data(), tb.data());
        let (la, lb) = (da.len(), db.len());
        let data = if la == n && lb == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % la], db[i % lb])).collect()
        };
        (shape, data)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (shape, data) = self.binary(a, b, |x, y| x + y);
        let t = self.out(&shape, data);
        self.push(t, Op::Add(a, b), self.rg(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (shape, data) = self.binary(a, b, |x, y| x - y);
        let t = self.out(&shape, data);
        self.push(t, Op::Sub(a, b), self.rg(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (shape, data) = self.binary(a, b, |x, y| x * y);
        let t = self.out(&shape, data);
        self.push(t, Op::Mul(a, b), self.rg(&[a, b]))
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let data = ta.data().iter().map(|&x| f(x)).collect();
            self.out(ta.shape(), data)
        };
        self.push(t, op, self.rg(&[a]))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::MulScalar(a, c), |x| x * c)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn powf(&self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x >= 0.0 { x } else { slope * x })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let t = self.out(&[1], vec![s]);
        self.push(t, Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let t = {
            let ta = self.value(a);
            let (outer, n, inner) = split_at_axis(ta.shape(), axis);
            let d = ta.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
            let mut shape = ta.shape().to_vec();
            shape[axis] = 1;
            self.out(&shape, out)
        };
        self.push(t, Op::SumAxis(a, axis), self.rg(&[a]))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let n = self.value(a).shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Max over `axis`, keeping it with length 1. Ties resolve to the lowest index.
    pub fn max_axis(&self, a: Var, axis: usize) -> Var {
        let (t, arg) = {
            let ta = self.value(a);
            let (outer, n, inner) = split_at_axis(ta.shape(), axis);
            let d = ta.data();
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        let v = d[(o * n + k) * inner + i];
                        if v > out[o * inner + i] {
                            out[o * inner + i] = v;
                            arg[o * inner + i] = (o * n + k) * inner + i;
                        }
                    }
                }
            }
            let mut shape = ta.shape().to_vec();
            shape[axis] = 1;
            (self.out(&shape, out), arg)
        };
        self.push(t, Op::MaxAxis(a, arg), self.rg(&[a]))
    }

    // ---- linear algebra and shape ---------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            assert!(
                sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
                "matmul shape mismatch {sa:?} x {sb:?}"
            );
            let data = kernels::matmul(ta.data(), tb.data(), sa[0], sa[1], sb[1]);
            self.out(&[sa[0], sb[1]], data)
        };
        self.push(t, Op::MatMul(a, b), self.rg(&[a, b]))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let t = {
            let ta = self.value(a);
            let s = ta.shape();
            assert_eq!(s.len(), 2, "transpose expects a matrix");
            let (m, n) = (s[0], s[1]);
            let d = ta.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            Tensor::new(&[n, m], out)
        };
        self.push(t, Op::Transpose(a), self.rg(&[a]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        self.push(t, Op::Reshape(a), self.rg(&[a]))
    }

    /// Broadcast size-1 dimensions of `a` to `shape` (same rank).
    pub fn expand(&self, a: Var, shape: &[usize]) -> Var {
        let t = {
            let ta = self.value(a);
            let src = ta.shape();
            assert_eq!(src.len(), shape.len(), "expand keeps the rank");
            for (s, d) in src.iter().zip(shape) {
                assert!(*s == *d || *s == 1, "cannot expand {src:?} to {shape:?}");
            }
            let n = numel(shape);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push(ta.data()[expand_source_index(i, src, shape)]);
            }
            Tensor::new(shape, out)
        };
        self.push(t, Op::Expand(a), self.rg(&[a]))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let t = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (d, (x, y)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || x == y, "concat shape mismatch {s:?} vs {first:?}");
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_at_axis(&shape, axis);
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let tp = &nodes[p.0].value;
                    let len = tp.shape()[axis] * inner;
                    out.extend_from_slice(&tp.data()[o * len..(o + 1) * len]);
                }
            }
            Tensor::new(&shape, out)
        };
        self.push(t, Op::Concat(parts.to_vec(), axis), self.rg(parts))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = {
            let ta = self.value(a);
            let (outer, n, inner) = split_at_axis(ta.shape(), axis);
            assert!(start + len <= n && len > 0, "slice out of range");
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&ta.data()[base..base + len * inner]);
            }
            let mut shape = ta.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, out)
        };
        self.push(t, Op::Slice(a, axis, start), self.rg(&[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let t = {
            let ta = self.value(a);
            let n = *ta.shape().last().unwrap();
            let mut out = ta.data().to_vec();
            for row in out.chunks_mut(n) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            self.out(ta.shape(), out)
        };
        self.push(t, Op::Softmax(a), self.rg(&[a]))
    }

    // ---- spatial --------------------------------------------------------

    /// Bilinear lookup on a `[H, W, C]` plane at `uv: [N, 2]` (column
    /// coordinate, row coordinate), both in `[-1, 1]`; out-of-range
    /// coordinates clamp to the border.
    pub fn bilinear_sample(&self, plane: Var, uv: Var) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let (tp, tu) = (&nodes[plane.0].value, &nodes[uv.0].value);
            let s = tp.shape();
            assert_eq!(s.len(), 3, "plane must be [H, W, C]");
            assert!(
                tu.shape().len() == 2 && tu.shape()[1] == 2,
                "uv must be [N, 2]"
            );
            let data = kernels::bilinear(tp.data(), s[0], s[1], s[2], tu.data());
            self.out(&[tu.shape()[0], s[2]], data)
        };
        self.push(t, Op::Bilinear(plane, uv), self.rg(&[plane, uv]))
    }

    /// Same-padded stride-1 convolution of `[H, W, Cin]` with `[k, k, Cin, Cout]`.
    pub fn conv2d(&self, x: Var, w: Var) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let d = conv_dims(tx.shape(), tw.shape());
            let data = kernels::conv2d(tx.data(), tw.data(), d);
            self.out(&[d.h, d.w, d.cout], data)
        };
        self.push(t, Op::Conv2d(x, w), self.rg(&[x, w]))
    }

    /// Nearest-neighbour 2x upsampling of `[H, W, C]`.
    pub fn upsample2x(&self, a: Var) -> Var {
        let t = {
            let ta = self.value(a);
            let s = ta.shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let mut out = vec![0.0; 4 * h * w * c];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let src = &ta.data()[((y / 2) * w + x / 2) * c..][..c];
                    out[(y * 2 * w + x) * c..][..c].copy_from_slice(src);
                }
            }
            Tensor::new(&[2 * h, 2 * w, c], out)
        };
        self.push(t, Op::Upsample2x(a), self.rg(&[a]))
    }

    /// 2x2 average pooling of `[H, W, C]` (H, W even).
    pub fn avg_pool2x(&self, a: Var) -> Var {
        let t = {
            let ta = self.value(a);
            let s = ta.shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even sides");
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; oh * ow * c];
            for y in 0..h {
                for x in 0..w {
                    let src = &ta.data()[(y * w + x) * c..][..c];
                    let dst = &mut out[((y / 2) * ow + x / 2) * c..][..c];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += 0.25 * v;
                    }
                }
            }
            self.out(&[oh, ow, c], out)
        };
        self.push(t, Op::AvgPool2x(a), self.rg(&[a]))
    }

    /// Emission-absorption compositing; `sigma: [R, S]`, `rgb: [R, S, 3]`,
    /// `deltas: [R, S]` -> `[R, 3]`.
    pub fn composite(&self, sigma: Var, rgb: Var, deltas: Rc<Vec<f64>>, bg: [f64; 3]) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let (ts, tc) = (&nodes[sigma.0].value, &nodes[rgb.0].value);
            let ss = ts.shape();
            assert_eq!(ss.len(), 2, "sigma must be [R, S]");
            assert_eq!(tc.shape(), &[ss[0], ss[1], 3], "rgb must be [R, S, 3]");
            assert_eq!(deltas.len(), ts.len(), "deltas must match sigma");
            let data = kernels::composite(ts.data(), tc.data(), &deltas, bg, ss[1]);
            self.out(&[ss[0], 3], data)
        };
        let op = Op::Composite {
            sigma,
            rgb,
            deltas,
            bg,
        };
        self.push(t, op, self.rg(&[sigma, rgb]))
    }

    // ---- adjoint sweep --------------------------------------------------

    /// Reverse sweep from a scalar loss.
    pub fn backward(self, loss: Var) -> Result<Gradients, AutodiffError> {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward requires a scalar loss"
        );
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep with explicit upstream adjoints injected at arbitrary
    /// nodes. Seeds at the same node accumulate. Consumes the graph.
    pub fn backward_seeded(self, seeds: &[(Var, Tensor)]) -> Result<Gradients, AutodiffError> {
        let nodes = self.nodes.into_inner();
        let precision = self.precision;
        let mut adj: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            assert_eq!(
                nodes[v.0].value.shape(),
                seed.shape(),
                "seed shape must match its node"
            );
            accumulate(&mut adj[v.0], seed.data());
        }
        let mut grads = Gradients {
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        for idx in (0..nodes.len()).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                adj[idx] = None;
                continue;
            }
            let Some(mut g) = adj[idx].take() else {
                continue;
            };
            precision.round_all(&mut g);
            if let Op::Leaf = node.op {
                grads.grads[idx] = Some(Tensor::new(node.value.shape(), g));
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    op: node.op.name(),
                    node: idx,
                });
            }
            propagate(&nodes, idx, &g, &mut adj);
            for input in node.op.inputs() {
                if let Some(a) = &adj[input.0] {
                    if a.iter().any(|v| !v.is_finite()) {
                        return Err(AutodiffError::NonFinite {
                            op: node.op.name(),
                            node: idx,
                        });
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn conv_dims(xs: &[usize], ws: &[usize]) -> ConvDims {
    assert_eq!(xs.len(), 3, "conv input must be [H, W, C]");
    assert_eq!(ws.len(), 4, "conv kernel must be [k, k, Cin, Cout]");
    assert!(
        ws[0] == ws[1] && ws[0] % 2 == 1,
        "conv kernel must be square with odd size"
    );
    assert_eq!(xs[2], ws[2], "conv channel mismatch");
    ConvDims {
        h: xs[0],
        w: xs[1],
        cin: xs[2],
        cout: ws[3],
        k: ws[0],
    }
}

fn expand_source_index(mut i: usize, src: &[usize], dst: &[usize]) -> usize {
    let mut idx = 0;
    let mut stride = 1;
    for d in (0..dst.len()).rev() {
        let coord = i % dst[d];
        i /= dst[d];
        if src[d] != 1 {
            idx += coord * stride;
        }
        stride *= src[d];
    }
    idx
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Accumulate `g` into an operand that may have been broadcast.
fn accumulate_broadcast(slot: &mut Option<Vec<f64>>, len: usize, g: &[f64], scale: impl Fn(usize) -> f64) {
    let acc = slot.get_or_insert_with(|| vec![0.0; len]);
    if len == g.len() {
        for (i, (a, v)) in acc.iter_mut().zip(g).enumerate() {
            *a += v * scale(i);
        }
    } else {
        for (i, v) in g.iter().enumerate() {
            acc[i % len] += v * scale(i);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn propagate(nodes: &[Node], idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                if wants(v) {
                    accumulate_broadcast(&mut adj[v.0], val(v).len(), g, |_| sign);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                if wants(v) {
                    accumulate_broadcast(&mut adj[v.0], val(v).len(), g, |_| sign);
                }
            }
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a).data(), val(*b).data());
            if wants(*a) {
                let lb = db.len();
                accumulate_broadcast(&mut adj[a.0], da.len(), g, |i| db[i % lb]);
            }
            if wants(*b) {
                let la = da.len();
                accumulate_broadcast(&mut adj[b.0], db.len(), g, |i| da[i % la]);
            }
        }
        Op::AddScalar(a) => accumulate(&mut adj[a.0], g),
        Op::MulScalar(a, c) => {
            let gg: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(&mut adj[a.0], &gg);
        }
        Op::Powf(a, p) => {
            let x = val(*a).data();
            let gg: Vec<f64> = g
                .iter()
                .zip(x)
                .map(|(gv, &xv)| gv * p * xv.powf(p - 1.0))
                .collect();
            accumulate(&mut adj[a.0], &gg);
        }
        Op::Exp(a) => {
            let gg: Vec<f64> = g.iter().zip(out).map(|(gv, y)| gv * y).collect();
            accumulate(&mut adj[a.0], &gg);
        }
        Op::Log(a) => {
            let x = val(*a).data();
            let gg: Vec<f64> = g.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
            accumulate(&mut adj[a.0], &gg);
        }
        Op::Tanh(a) => {
            let gg: Vec<f64> = g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect();
            accumulate(&mut adj[a.0], &gg);
        }
        Op::Sigmoid(a) => {
            let gg: Vec<f64> = g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect();
            accumulate(&mut adj[a.0], &gg);
        }
        Op::Softplus(a) => {
            let x = val(*a).data();
            let gg: Vec<f64> = g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
            accumulate(&mut adj[a.0], &gg);
        }
        Op::LeakyRelu(a, slope) => {
            let x = val(*a).data();
            let gg: Vec<f64> = g
                .iter()
                .zip(x)
                .map(|(gv, &xv)| if xv >= 0.0 { *gv } else { gv * slope })
                .collect();
            accumulate(&mut adj[a.0], &gg);
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            accumulate(&mut adj[a.0], &vec![g[0]; n]);
        }
        Op::SumAxis(a, axis) => {
            let shape = val(*a).shape();
            let (outer, n, inner) = split_at_axis(shape, *axis);
            let acc = adj[a.0].get_or_insert_with(|| vec![0.0; outer * n * inner]);
            for o in 0..outer {
                for k in 0..n {
                    let dst = &mut acc[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d += v;
                    }
                }
            }
        }
        Op::MaxAxis(a, arg) => {
            let n = val(*a).len();
            let acc = adj[a.0].get_or_insert_with(|| vec![0.0; n]);
            for (gv, &src) in g.iter().zip(arg) {
                acc[src] += gv;
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if wants(*a) {
                let acc = adj[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                kernels::matmul_grad_a(g, tb.data(), m, k, n, acc);
            }
            if wants(*b) {
                let acc = adj[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                kernels::matmul_grad_b(g, ta.data(), m, k, n, acc);
            }
        }
        Op::Transpose(a) => {
            let s = val(*a).shape();
            let (m, n) = (s[0], s[1]);
            let acc = adj[a.0].get_or_insert_with(|| vec![0.0; m * n]);
            for i in 0..m {
                for j in 0..n {
                    acc[i * n + j] += g[j * m + i];
                }
            }
        }
        Op::Reshape(a) => accumulate(&mut adj[a.0], g),
        Op::Expand(a) => {
            let src = val(*a).shape();
            let dst = node.value.shape();
            let acc = adj[a.0].get_or_insert_with(|| vec![0.0; numel(src)]);
            for (i, gv) in g.iter().enumerate() {
                acc[expand_source_index(i, src, dst)] += gv;
            }
        }
        Op::Concat(parts, axis) => {
            let shape = node.value.shape();
            let (outer, total, inner) = split_at_axis(shape, *axis);
            let mut offset = 0;
            for p in parts {
                let len = val(*p).shape()[*axis];
                if wants(*p) {
                    let acc = adj[p.0].get_or_insert_with(|| vec![0.0; outer * len * inner]);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, v) in acc[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice(a, axis, start) => {
            let shape = val(*a).shape();
            let (outer, n, inner) = split_at_axis(shape, *axis);
            let len = node.value.shape()[*axis];
            let acc = adj[a.0].get_or_insert_with(|| vec![0.0; outer * n * inner]);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                for (d, v) in acc[base..base + len * inner]
                    .iter_mut()
                    .zip(&g[o * len * inner..(o + 1) * len * inner])
                {
                    *d += v;
                }
            }
        }
        Op::Softmax(a) => {
            let n = *node.value.shape().last().unwrap();
            let acc = adj[a.0].get_or_insert_with(|| vec![0.0; out.len()]);
            for ((y, gr), dst) in out.chunks(n).zip(g.chunks(n)).zip(acc.chunks_mut(n)) {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, yv), gv) in dst.iter_mut().zip(y).zip(gr) {
                    *d += yv * (gv - dot);
                }
            }
        }
        Op::Bilinear(plane, uv) => {
            let (tp, tu) = (val(*plane), val(*uv));
            let s = tp.shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let mut dp = wants(*plane).then(|| adj[plane.0].take().unwrap_or_else(|| vec![0.0; tp.len()]));
            let mut du = wants(*uv).then(|| adj[uv.0].take().unwrap_or_else(|| vec![0.0; tu.len()]));
            kernels::bilinear_backward(tp.data(), h, w, c, tu.data(), g, dp.as_deref_mut(), du.as_deref_mut());
            if dp.is_some() {
                adj[plane.0] = dp;
            }
            if du.is_some() {
                adj[uv.0] = du;
            }
        }
        Op::Conv2d(x, w) => {
            let (tx, tw) = (val(*x), val(*w));
            let d = conv_dims(tx.shape(), tw.shape());
            let mut dx = wants(*x).then(|| adj[x.0].take().unwrap_or_else(|| vec![0.0; tx.len()]));
            let mut dw = wants(*w).then(|| adj[w.0].take().unwrap_or_else(|| vec![0.0; tw.len()]));
            kernels::conv2d_backward(tx.data(), tw.data(), g, d, dx.as_deref_mut(), dw.as_deref_mut());
            if dx.is_some() {
                adj[x.0] = dx;
            }
            if dw.is_some() {
                adj[w.0] = dw;
            }
        }
        Op::Upsample2x(a) => {
            let s = val(*a).shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let acc = adj[a.0].get_or_insert_with(|| vec![0.0; h * w * c]);
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let src = &g[(y * 2 * w + x) * c..][..c];
                    let dst = &mut acc[((y / 2) * w + x / 2) * c..][..c];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        Op::AvgPool2x(a) => {
            let s = val(*a).shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let ow = w / 2;
            let acc = adj[a.0].get_or_insert_with(|| vec![0.0; h * w * c]);
            for y in 0..h {
                for x in 0..w {
                    let src = &g[((y / 2) * ow + x / 2) * c..][..c];
                    let dst = &mut acc[(y * w + x) * c..][..c];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += 0.25 * v;
                    }
                }
            }
        }
        Op::Composite {
            sigma,
            rgb,
            deltas,
            bg,
        } => {
            let (ts, tc) = (val(*sigma), val(*rgb));
            let s = ts.shape()[1];
            let mut ds = wants(*sigma).then(|| adj[sigma.0].take().unwrap_or_else(|| vec![0.0; ts.len()]));
            let mut dc = wants(*rgb).then(|| adj[rgb.0].take().unwrap_or_else(|| vec![0.0; tc.len()]));
            kernels::composite_backward(
                ts.data(),
                tc.data(),
                deltas,
                *bg,
                s,
                g,
                ds.as_deref_mut(),
                dc.as_deref_mut(),
            );
            if ds.is_some() {
                adj[sigma.0] = ds;
            }
            if dc.is_some() {
                adj[rgb.0] = dc;
            }
        }
    }
}
