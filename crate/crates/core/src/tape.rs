//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and the rule
//! needed to push gradients back to its inputs. A tape is built fresh for
//! each forward pass and supports exactly one `backward` call.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise function paired with its derivative, used by [`Tape::map`].
pub type ScalarFn = fn(f64) -> f64;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LnClamp(Var, f64),
    SumRows(Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    Map(Var, ScalarFn),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.clear_grad();
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Constant copy of `v`'s value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let t = Tensor::new(shape, data)?.with_requires_grad(rg);
        Ok(self.push(t, op))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push_op(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `x + bias` with `bias: [1×n]` broadcast over the rows of `x: [m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let bshape = self.value(bias).shape();
        if bshape != [1, n] {
            return Err(Error::dim("add_bias", self.value(x).shape(), bshape));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push_op(vec![m, n], out, Op::AddBias(x, bias), &[x, bias])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op(shape, out, op, &[a, b])
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push_op(shape, out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// `ln(max(x, floor))`; no gradient flows through clamped entries.
    pub fn ln_clamp(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, Op::LnClamp(x, floor), |v| v.max(floor).ln())
    }

    /// Applies `f` elementwise, differentiating with the caller-supplied `df`.
    pub fn map(&mut self, x: Var, f: ScalarFn, df: ScalarFn) -> Result<Var> {
        self.unary(x, Op::Map(x, df), f)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.push_op(vec![m, n], out, Op::SoftmaxRows(x), &[x])
    }

    /// `[m×n] → [m×1]` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let out = t.data().chunks_exact(n).map(|r| r.iter().sum()).collect();
        self.push_op(vec![m, 1], out, Op::SumRows(x), &[x])
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push_op(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    /// Mean of all entries as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Picks rows of `x` (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let selected = t.select_rows(indices)?;
        let shape = selected.shape().to_vec();
        self.push_op(shape, selected.into_data(), Op::GatherRows(x, indices.to_vec()), &[x])
    }

    /// Propagates `∂loss/∂·` to every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; record a new forward pass",
            ));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let tracked = lv.requires_grad();
        self.backward_done = true;
        if !tracked {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.requires_grad() {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            // The tracked gradient lives in the tensor's own slot.
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].value.requires_grad();
        let val = |v: Var| &nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).cols();
                if tracked(*a) {
                    gemm_a_bt(g, val(*b).data(), slot(grads, *a, m * k), m, k, n);
                }
                if tracked(*b) {
                    gemm_at_b(val(*a).data(), g, slot(grads, *b, k * n), m, k, n);
                }
            }
            Op::AddBias(x, b) => {
                if tracked(*x) {
                    axpy(slot(grads, *x, g.len()), g, 1.0);
                }
                if tracked(*b) {
                    let n = val(*b).numel();
                    let gb = slot(grads, *b, n);
                    for row in g.chunks_exact(n) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if tracked(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if tracked(*b) {
                    axpy(slot(grads, *b, g.len()), g, sign);
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let other = val(*b).data();
                    for ((d, &gi), &o) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if tracked(*b) {
                    let other = val(*a).data();
                    for ((d, &gi), &o) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::Scale(x, c) => axpy(slot(grads, *x, g.len()), g, *c),
            Op::AddScalar(x) => axpy(slot(grads, *x, g.len()), g, 1.0),
            Op::Relu(x) => {
                let input = val(*x).data();
                for ((d, &gi), &xi) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(input) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::LnClamp(x, floor) => {
                let input = val(*x).data();
                for ((d, &gi), &xi) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(input) {
                    if xi > *floor {
                        *d += gi / xi;
                    }
                }
            }
            Op::Map(x, df) => {
                let input = val(*x).data();
                for ((d, &gi), &xi) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(input) {
                    *d += gi * df(xi);
                }
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                let dx = slot(grads, *x, g.len());
                for ((y, gr), d) in out
                    .data()
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((di, &yi), &gi) in d.iter_mut().zip(y).zip(gr) {
                        *di += yi * (gi - dot);
                    }
                }
            }
            Op::SumRows(x) => {
                let n = val(*x).cols();
                let dx = slot(grads, *x, g.len() * n);
                for (row, &gi) in dx.chunks_exact_mut(n).zip(g) {
                    row.iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                slot(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::GatherRows(x, indices) => {
                let src = val(*x);
                let c = src.cols();
                let dx = slot(grads, *x, src.numel());
                for (k, &i) in indices.iter().enumerate() {
                    axpy(&mut dx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
