//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built eagerly: each op computes its value on construction and
//! records its parents, so node indices are already a topological order.
//! [`Graph::backward`] walks that order in reverse.
//!
//! There is no implicit broadcasting. Shapes must agree exactly, and
//! [`Graph::repeat`] is the only way to expand a dimension.

use serde_json::json;

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Below this rotation angle the Rodrigues coefficients use their Taylor expansion.
pub const RODRIGUES_TAYLOR_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
struct Tap {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    x_free: bool,
    y_free: bool,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Variable,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    LeakyRelu { x: Var, slope: f64 },
    Softplus(Var),
    Softmax { x: Var, axis: usize },
    ReduceMean { x: Var, axis: usize },
    ReduceSum { x: Var, axis: usize },
    SumAll(Var),
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Bilinear { map: Var, coords: Var, taps: Vec<Tap> },
    Abs(Var),
    L1Distance(Var, Var),
    L2Squared(Var, Var),
    Repeat { x: Var, axis: usize, n: usize },
    Clamp { x: Var, lo: f64, hi: f64 },
    Rodrigues(Var),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Variable => "variable",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Softplus(..) => "softplus",
            Op::Softmax { .. } => "softmax",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::SumAll(..) => "sum_all",
            Op::MaxAxis { .. } => "max_axis",
            Op::IndexSelect { .. } => "index_select",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::Abs(..) => "abs",
            Op::L1Distance(..) => "l1_distance",
            Op::L2Squared(..) => "l2_squared",
            Op::Repeat { .. } => "repeat",
            Op::Clamp { .. } => "clamp",
            Op::Rodrigues(..) => "rodrigues",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Variable => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::L1Distance(a, b)
            | Op::L2Squared(a, b) => vec![*a, *b],
            Op::Bilinear { map, coords, .. } => vec![*map, *coords],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Softplus(x)
            | Op::SumAll(x)
            | Op::Abs(x)
            | Op::Rodrigues(x)
            | Op::Permute { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::Softmax { x, .. }
            | Op::ReduceMean { x, .. }
            | Op::ReduceSum { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Repeat { x, .. }
            | Op::Clamp { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, or `None` if `v` does not influence the root
    /// or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `(outer, n, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and the contiguous `c` (m x n); callers derive them from checked shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn skew(r: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    out
}

/// Rodrigues coefficients `(A, B)` with `R = I + A K + B K^2`, and their radial
/// derivatives divided by the angle, `(A'/t, B'/t)`.
fn rodrigues_coeffs(t: f64) -> (f64, f64, f64, f64) {
    let t2 = t * t;
    let (a, b) = if t < RODRIGUES_TAYLOR_THRESHOLD {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let h = (0.5 * t).sin() / (0.5 * t);
        (t.sin() / t, 0.5 * h * h)
    };
    let (da, db) = if t < 1e-2 {
        (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        (
            (t * t.cos() - t.sin()) / (t2 * t),
            (t * t.sin() - 2.0 * (1.0 - t.cos())) / (t2 * t2),
        )
    };
    (a, b, da, db)
}

/// Rotation matrix for one axis-angle vector (Rodrigues' formula).
pub fn rodrigues(r: [f64; 3]) -> [[f64; 3]; 3] {
    let t = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let (a, b, _, _) = rodrigues_coeffs(t);
    let k = skew(r);
    let k2 = mat3_mul(&k, &k);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    out
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

    /// Constant leaf; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; [`Graph::backward`] reports its gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Variable,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of the root; values are computed as the graph is built.
    pub fn forward(&self, root: Var) -> &Tensor {
        self.value(root)
    }

    /// Constant copy of `v`'s value: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(mismatch(op, shape, &[axis]));
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- linear algebra --------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                k,
                1,
                &db[i * k * n..],
                n,
                1,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push(Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b)))
    }

    // ---- elementwise -----------------------------------------------------

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu { x, slope })
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self
            .value(x)
            .map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.push(t, Op::Softplus(x))
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        self.push(t, Op::Abs(x))
    }

    /// Clamp into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp { x, lo, hi })
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(mismatch("permute", &shape, axes));
        }
        let t = permute_tensor(self.value(x), axes);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(mismatch("transpose", self.shape(x), &[2]));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Picks `indices` along `axis`; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis("index_select", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(mismatch("index_select", &shape, indices));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * n + i) * inner;
                out.extend_from_slice(&data[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Rows of a 2-D (or higher) tensor along axis 0.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.index_select(x, 0, rows)
    }

    /// Expands a size-1 `axis` to size `n` by copying.
    pub fn repeat(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        self.check_axis("repeat", x, axis)?;
        let shape = self.shape(x).to_vec();
        if shape[axis] != 1 || n == 0 {
            return Err(mismatch("repeat", &shape, &[axis, n]));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&data[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = n;
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Repeat { x, axis, n }))
    }

    // ---- reductions --------------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    fn reduce_axis(&self, x: Var, axis: usize, scale: f64) -> Tensor {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &t.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Tensor::from_parts(shape, out)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("reduce_sum", x, axis)?;
        let t = self.reduce_axis(x, axis, 1.0);
        Ok(self.push(t, Op::ReduceSum { x, axis }))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("reduce_mean", x, axis)?;
        let n = self.shape(x)[axis] as f64;
        let t = self.reduce_axis(x, axis, 1.0 / n);
        Ok(self.push(t, Op::ReduceMean { x, axis }))
    }

    /// Scalar sum of every element.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Scalar mean of every element.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Maximum over `axis` (removed from the shape). The gradient flows to the
    /// first maximal element only.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = t.data()[o * n * inner + i];
                for j in 1..n {
                    let v = t.data()[(o * n + j) * inner + i];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                out[o * inner + i] = best_v;
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaxAxis { x, axis, argmax },
        ))
    }

    /// Scalar `sum |a - b|`; subgradient 0 where `a == b`.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::L1Distance(a, b)))
    }

    /// Scalar `sum (a - b)^2`.
    pub fn l2_squared(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l2_squared", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::L2Squared(a, b)))
    }

    // ---- geometry ---------------------------------------------------------

    /// Bilinear sampling of `[b, h, w, c]` feature maps at `[b, m, 2]` pixel
    /// coordinates `(x, y)`, giving `[b, m, c]`. Coordinates are clamped to the
    /// map border; the coordinate gradient is zero along a clamped axis.
    ///
    /// A `[h, w, c]` map with `[m, 2]` coordinates is accepted as a batch of one
    /// and yields `[m, c]`.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let (sm, sc) = (self.shape(map).to_vec(), self.shape(coords).to_vec());
        if sm.len() == 3 && sc.len() == 2 {
            let m4 = self.reshape(map, &[1, sm[0], sm[1], sm[2]])?;
            let c3 = self.reshape(coords, &[1, sc[0], 2])?;
            let out = self.bilinear_sample(m4, c3)?;
            return self.reshape(out, &[sc[0], sm[2]]);
        }
        if sm.len() != 4 || sc.len() != 3 || sc[2] != 2 || sm[0] != sc[0] {
            return Err(mismatch("bilinear_sample", &sm, &sc));
        }
        let (b, h, w, c) = (sm[0], sm[1], sm[2], sm[3]);
        let m = sc[1];
        let fm = self.value(map).data();
        let cd = self.value(coords).data();
        let mut taps = Vec::with_capacity(b * m);
        let mut out = vec![0.0; b * m * c];
        let axis_tap = |v: f64, size: usize| -> (usize, usize, f64, bool) {
            let hi = (size - 1) as f64;
            let free = v > 0.0 && v < hi;
            let vc = v.clamp(0.0, hi);
            if size == 1 {
                return (0, 0, 0.0, false);
            }
            let i0 = (vc.floor() as usize).min(size - 2);
            (i0, i0 + 1, vc - i0 as f64, free)
        };
        for bi in 0..b {
            for mi in 0..m {
                let (x, y) = (cd[(bi * m + mi) * 2], cd[(bi * m + mi) * 2 + 1]);
                let (x0, x1, fx, x_free) = axis_tap(x, w);
                let (y0, y1, fy, y_free) = axis_tap(y, h);
                let tap = Tap {
                    x0,
                    y0,
                    x1,
                    y1,
                    fx,
                    fy,
                    x_free,
                    y_free,
                };
                let px = |yy: usize, xx: usize| ((bi * h + yy) * w + xx) * c;
                let (p00, p10, p01, p11) = (px(y0, x0), px(y0, x1), px(y1, x0), px(y1, x1));
                let (w00, w10, w01, w11) = (
                    (1.0 - fx) * (1.0 - fy),
                    fx * (1.0 - fy),
                    (1.0 - fx) * fy,
                    fx * fy,
                );
                let dst = &mut out[(bi * m + mi) * c..(bi * m + mi + 1) * c];
                for ch in 0..c {
                    dst[ch] = w00 * fm[p00 + ch]
                        + w10 * fm[p10 + ch]
                        + w01 * fm[p01 + ch]
                        + w11 * fm[p11 + ch];
                }
                taps.push(tap);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, m, c], out),
            Op::Bilinear { map, coords, taps },
        ))
    }

    /// Axis-angle rows `[n, 3]` to rotation matrices `[n, 3, 3]`.
    pub fn rodrigues(&mut self, r: Var) -> Result<Var> {
        let s = self.shape(r);
        if s.len() != 2 || s[1] != 3 {
            return Err(mismatch("rodrigues", s, &[0, 3]));
        }
        let n = s[0];
        let src = self.value(r).data();
        let mut out = Vec::with_capacity(n * 9);
        for row in src.chunks_exact(3) {
            let m = rodrigues([row[0], row[1], row[2]]);
            out.extend(m.iter().flatten());
        }
        Ok(self.push(Tensor::from_parts(vec![n, 3, 3], out), Op::Rodrigues(r)))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `root`. Every node that requires a gradient and
    /// influences the root receives `d root / d node`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Variable => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, n, 1, tb.data(), 1, n, &mut da, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), 1, k, gd, n, 1, &mut db, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if self.wants(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for s in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[s * m * n..],
                            n,
                            1,
                            &tb.data()[s * k * n..],
                            1,
                            n,
                            &mut da[s * m * k..(s + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(vec![bs, m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for s in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data()[s * m * k..],
                            1,
                            k,
                            &gd[s * m * n..],
                            n,
                            1,
                            &mut db[s * k * n..(s + 1) * k * n],
                            false,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![bs, k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let t = elementwise(g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, t);
                }
                if self.wants(*b) {
                    let t = elementwise(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Reshape(x) => {
                let t = Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec());
                self.accumulate(grads, *x, t);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accumulate(grads, *x, permute_tensor(g, &inv));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut part = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[start..start + n * inner]);
                        }
                        self.accumulate(
                            grads,
                            v,
                            Tensor::from_parts(self.shape(v).to_vec(), part),
                        );
                    }
                    offset += n;
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut dx = vec![0.0; outer * n * inner];
                let k = indices.len();
                for o in 0..outer {
                    for (pos, &src) in indices.iter().enumerate() {
                        let from = (o * k + pos) * inner;
                        let to = (o * n + src) * inner;
                        for t in 0..inner {
                            dx[to + t] += gd[from + t];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), dx));
            }
            Op::Repeat { x, axis, n } => {
                let shape = self.shape(*x);
                let (outer, _, inner) = split_axis(shape, *axis);
                let mut dx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for r in 0..*n {
                        let from = (o * n + r) * inner;
                        for t in 0..inner {
                            dx[o * inner + t] += gd[from + t];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), dx));
            }
            Op::LeakyRelu { x, slope } => {
                let t = elementwise(g, self.value(*x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else {
                        slope * gv
                    }
                });
                self.accumulate(grads, *x, t);
            }
            Op::Softplus(x) => {
                let t = elementwise(g, self.value(*x), |gv, xv| gv / (1.0 + (-xv).exp()));
                self.accumulate(grads, *x, t);
            }
            Op::Abs(x) => {
                let t = elementwise(g, self.value(*x), |gv, xv| gv * sign0(xv));
                self.accumulate(grads, *x, t);
            }
            Op::Clamp { x, lo, hi } => {
                let t = elementwise(g, self.value(*x), |gv, xv| {
                    if xv > *lo && xv < *hi {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, t);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let yd = y.data();
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| gd[idx(j)] * yd[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::ReduceSum { x, axis } | Op::ReduceMean { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let s = if matches!(node.op, Op::ReduceMean { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut dx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        dx.extend(gd[o * inner..(o + 1) * inner].iter().map(|v| v * s));
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), dx));
            }
            Op::SumAll(x) => {
                let t = Tensor::full(self.shape(*x), gd[0]);
                self.accumulate(grads, *x, t);
            }
            Op::MaxAxis { x, axis, argmax } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i];
                        dx[(o * n + j) * inner + i] = gd[o * inner + i];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), dx));
            }
            Op::L1Distance(a, b) => {
                let diff = elementwise(self.value(*a), self.value(*b), |x, y| gd[0] * sign0(x - y));
                if self.wants(*b) {
                    self.accumulate(grads, *b, diff.map(|v| -v));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::L2Squared(a, b) => {
                let diff =
                    elementwise(self.value(*a), self.value(*b), |x, y| 2.0 * gd[0] * (x - y));
                if self.wants(*b) {
                    self.accumulate(grads, *b, diff.map(|v| -v));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::Bilinear { map, coords, taps } => {
                let sm = self.shape(*map);
                let (b, h, w, c) = (sm[0], sm[1], sm[2], sm[3]);
                let m = self.shape(*coords)[1];
                let fm = self.value(*map).data();
                let want_map = self.wants(*map);
                let want_coords = self.wants(*coords);
                let mut dmap = if want_map {
                    vec![0.0; fm.len()]
                } else {
                    Vec::new()
                };
                let mut dcoords = vec![0.0; b * m * 2];
                for bi in 0..b {
                    for mi in 0..m {
                        let t = taps[bi * m + mi];
                        let px = |yy: usize, xx: usize| ((bi * h + yy) * w + xx) * c;
                        let (p00, p10, p01, p11) =
                            (px(t.y0, t.x0), px(t.y0, t.x1), px(t.y1, t.x0), px(t.y1, t.x1));
                        let go = &gd[(bi * m + mi) * c..(bi * m + mi + 1) * c];
                        let (fx, fy) = (t.fx, t.fy);
                        if want_map {
                            let (w00, w10, w01, w11) = (
                                (1.0 - fx) * (1.0 - fy),
                                fx * (1.0 - fy),
                                (1.0 - fx) * fy,
                                fx * fy,
                            );
                            for ch in 0..c {
                                dmap[p00 + ch] += w00 * go[ch];
                                dmap[p10 + ch] += w10 * go[ch];
                                dmap[p01 + ch] += w01 * go[ch];
                                dmap[p11 + ch] += w11 * go[ch];
                            }
                        }
                        if want_coords {
                            let (mut gx, mut gy) = (0.0, 0.0);
                            for ch in 0..c {
                                let (f00, f10, f01, f11) =
                                    (fm[p00 + ch], fm[p10 + ch], fm[p01 + ch], fm[p11 + ch]);
                                gx += go[ch] * ((1.0 - fy) * (f10 - f00) + fy * (f11 - f01));
                                gy += go[ch] * ((1.0 - fx) * (f01 - f00) + fx * (f11 - f10));
                            }
                            let k = (bi * m + mi) * 2;
                            dcoords[k] = if t.x_free { gx } else { 0.0 };
                            dcoords[k + 1] = if t.y_free { gy } else { 0.0 };
                        }
                    }
                }
                if want_map {
                    self.accumulate(grads, *map, Tensor::from_parts(sm.to_vec(), dmap));
                }
                if want_coords {
                    self.accumulate(grads, *coords, Tensor::from_parts(vec![b, m, 2], dcoords));
                }
            }
            Op::Rodrigues(r) => {
                let src = self.value(*r).data();
                let n = src.len() / 3;
                let mut dr = vec![0.0; n * 3];
                for row in 0..n {
                    let v = [src[row * 3], src[row * 3 + 1], src[row * 3 + 2]];
                    let t = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    let (a, bc, da, db) = rodrigues_coeffs(t);
                    let k = skew(v);
                    let k2 = mat3_mul(&k, &k);
                    let gm = &gd[row * 9..row * 9 + 9];
                    for comp in 0..3 {
                        let mut e = [0.0; 3];
                        e[comp] = 1.0;
                        let dk = skew(e);
                        let dkk = mat3_mul(&dk, &k);
                        let kdk = mat3_mul(&k, &dk);
                        let mut acc = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                let d = da * v[comp] * k[i][j]
                                    + a * dk[i][j]
                                    + db * v[comp] * k2[i][j]
                                    + bc * (dkk[i][j] + kdk[i][j]);
                                acc += gm[i * 3 + j] * d;
                            }
                        }
                        dr[row * 3 + comp] = acc;
                    }
                }
                self.accumulate(grads, *r, Tensor::from_parts(vec![n, 3], dr));
            }
        }
    }

    /// JSON adjacency list: one entry per node with id, op tag, shape and parents.
    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<_> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| {
                json!({
                    "id": id,
                    "op": n.op.tag(),
                    "shape": n.value.shape(),
                    "parents": n.op.parents().iter().map(|p| p.0).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({ "nodes": nodes })
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let nd = out_shape.len();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    if nd == 0 {
        return t.clone();
    }
    // Innermost output axis is walked in a tight loop.
    let last = nd - 1;
    let (inner_len, inner_stride) = (out_shape[last], src_strides[last]);
    let mut counter = vec![0usize; last];
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let base: usize = counter
            .iter()
            .zip(&src_strides[..last])
            .map(|(c, s)| c * s)
            .sum();
        out.extend((0..inner_len).map(|i| src[base + i * inner_stride]));
        for ax in (0..last).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}
