//! Pointwise, structural and reduction primitives.
//!
//! Binary pointwise ops accept operands of identical shape, or one operand
//! holding a single element (scalar broadcast). Nothing else broadcasts.

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Broadcast)> {
    if a.shape() == b.shape() {
        Ok((a.shape().to_vec(), Broadcast::Same))
    } else if a.numel() == 1 {
        Ok((b.shape().to_vec(), Broadcast::LhsScalar))
    } else if b.numel() == 1 {
        Ok((a.shape().to_vec(), Broadcast::RhsScalar))
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Reduces a full-size gradient back onto a possibly-scalar operand.
fn reduce_to(g: Vec<f64>, target: &Tensor) -> Tensor {
    if target.numel() == 1 && g.len() != 1 {
        Tensor::from_parts(target.shape().to_vec(), vec![g.iter().sum()])
    } else {
        Tensor::from_parts(target.shape().to_vec(), g)
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinaryKind,
}

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let g = grad.data();
        let at = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        let (ga, gb): (Vec<f64>, Vec<f64>) = match self.kind {
            BinaryKind::Add => (g.to_vec(), g.to_vec()),
            BinaryKind::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
            BinaryKind::Mul => (
                g.iter().enumerate().map(|(i, v)| v * at(b, i)).collect(),
                g.iter().enumerate().map(|(i, v)| v * at(a, i)).collect(),
            ),
        };
        vec![Some(reduce_to(ga, a)), Some(reduce_to(gb, b))]
    }
}

enum UnaryKind {
    Exp,
    Log,
    Relu,
    Scale(f64),
    AddScalar(f64),
}

struct Unary(UnaryKind);

impl Backward for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Relu => "relu",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
        }
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0].data();
        let y = output.data();
        let g = grad.data();
        let out: Vec<f64> = match self.0 {
            UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
            UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
            UnaryKind::Relu => g
                .iter()
                .zip(x)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
            UnaryKind::Scale(k) => g.iter().map(|g| g * k).collect(),
            UnaryKind::AddScalar(_) => g.to_vec(),
        };
        vec![Some(Tensor::from_parts(grad.shape().to_vec(), out))]
    }
}

struct Concat {
    axis: usize,
    sizes: Vec<usize>,
}

impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let shape = grad.shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let total = shape[self.axis];
        let g = grad.data();
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (t, &size) in inputs.iter().zip(&self.sizes) {
            let mut data = Vec::with_capacity(t.numel());
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                data.extend_from_slice(&g[start..start + size * inner]);
            }
            out.push(Some(Tensor::from_parts(t.shape().to_vec(), data)));
            offset += size;
        }
        out
    }
}

struct Narrow {
    axis: usize,
    start: usize,
}

impl Backward for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let shape = inputs[0].shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let total = shape[self.axis];
        let len = grad.shape()[self.axis];
        let mut data = vec![0.0; inputs[0].numel()];
        let g = grad.data();
        for o in 0..outer {
            let dst = (o * total + self.start) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
        }
        vec![Some(Tensor::from_parts(shape.to_vec(), data))]
    }
}

struct Reshape;

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), grad.to_vec()))]
    }
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b, g) = (inputs[0].data(), inputs[1].data(), grad.data());
        let mut ga = vec![0.0; m * k];
        let mut gb = vec![0.0; k * n];
        for i in 0..m {
            for p in 0..k {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += g[i * n + j] * b[p * n + j];
                    gb[p * n + j] += a[i * k + p] * g[i * n + j];
                }
                ga[i * k + p] = acc;
            }
        }
        vec![
            Some(Tensor::from_parts(vec![m, k], ga)),
            Some(Tensor::from_parts(vec![k, n], gb)),
        ]
    }
}

struct Sum {
    scale: f64,
}

impl Backward for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0] * self.scale;
        vec![Some(Tensor::full(inputs[0].shape(), g))]
    }
}

struct WeightedSum {
    weights: Tensor,
}

impl Backward for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, grad: &Tensor, _inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0];
        vec![Some(self.weights.map(|w| w * g))]
    }
}

struct Gather {
    indices: Vec<usize>,
}

impl Backward for Gather {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let mut data = vec![0.0; inputs[0].numel()];
        for (&i, g) in self.indices.iter().zip(grad.data()) {
            data[i] += g;
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))]
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Softmax {
    axis: usize,
}

impl Backward for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, grad: &Tensor, _inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>> {
        let (outer, dim, inner) = axis_split(output.shape(), self.axis);
        let (y, g) = (output.data(), grad.data());
        let mut out = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let dot: f64 = (0..dim).map(|d| y[idx(d)] * g[idx(d)]).sum();
                for d in 0..dim {
                    out[idx(d)] = y[idx(d)] * (g[idx(d)] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(output.shape().to_vec(), out))]
    }
}

struct LogSoftmax {
    axis: usize,
}

impl Backward for LogSoftmax {
    fn name(&self) -> &'static str {
        "log_softmax"
    }

    fn backward(&self, grad: &Tensor, _inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>> {
        let (outer, dim, inner) = axis_split(output.shape(), self.axis);
        let (y, g) = (output.data(), grad.data());
        let mut out = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let gsum: f64 = (0..dim).map(|d| g[idx(d)]).sum();
                for d in 0..dim {
                    out[idx(d)] = g[idx(d)] - y[idx(d)].exp() * gsum;
                }
            }
        }
        vec![Some(Tensor::from_parts(output.shape().to_vec(), out))]
    }
}

fn softmax_forward(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, dim, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |d: usize| (o * dim + d) * inner + i;
            let max = (0..dim).map(|d| xd[idx(d)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..dim).map(|d| (xd[idx(d)] - max).exp()).sum();
            for d in 0..dim {
                let z = xd[idx(d)] - max;
                out[idx(d)] = if log { z - denom.ln() } else { z.exp() / denom };
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl Tape {
    fn binary(&self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let op = Binary { kind };
        let (shape, mode) = broadcast(op.name(), &ta, &tb)?;
        let (da, db) = (ta.data(), tb.data());
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = match mode {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::LhsScalar => db.iter().map(|&y| f(da[0], y)).collect(),
            Broadcast::RhsScalar => da.iter().map(|&x| f(x, db[0])).collect(),
        };
        debug_assert_eq!(data.len(), n);
        self.record(&[a, b], Tensor::from_parts(shape, data), op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    fn unary(&self, a: Var, kind: UnaryKind) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let out = match kind {
            UnaryKind::Exp => x.map(f64::exp),
            UnaryKind::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        msg: format!("non-positive input {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            UnaryKind::Relu => x.map(|v| v.max(0.0)),
            UnaryKind::Scale(k) => x.map(|v| v * k),
            UnaryKind::AddScalar(k) => x.map(|v| v + k),
        };
        self.record(&[a], out, Unary(kind))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn scale(&self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, UnaryKind::Scale(k))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, UnaryKind::AddScalar(k))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut sizes = Vec::with_capacity(vars.len());
        let values: Vec<Tensor> = vars.iter().map(|&v| self.value(v)).collect();
        for t in &values {
            let s = t.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &size) in values.iter().zip(&sizes) {
                let start = o * size * inner;
                data.extend_from_slice(&t.data()[start..start + size * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.record(vars, Tensor::from_parts(shape, data), Concat { axis, sizes })
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let shape = x.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidShape {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, total, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.record(&[a], Tensor::from_parts(out_shape, data), Narrow { axis, start })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).reshape(shape)?;
        self.record(&[a], out, Reshape)
    }

    /// Stacks equal-shape tensors along a new axis.
    pub fn stack(&self, vars: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(vars.len());
        for &v in vars {
            let mut s = self.shape(v);
            if axis > s.len() {
                return Err(Error::InvalidShape {
                    op: "stack",
                    msg: format!("axis {axis} out of range for {s:?}"),
                });
            }
            s.insert(axis, 1);
            expanded.push(self.reshape(v, &s)?);
        }
        self.concat(&expanded, axis)
    }

    /// Matrix product of an M×K and a K×N tensor.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        self.record(&[a, b], Tensor::from_parts(vec![m, n], out), MatMul { m, k, n })
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        self.record(&[a], Tensor::scalar(s), Sum { scale: 1.0 })
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let scale = 1.0 / x.numel() as f64;
        self.record(&[a], Tensor::scalar(x.sum() * scale), Sum { scale })
    }

    /// `Σ_i w_i · a_i` with constant weights of the same shape.
    pub fn weighted_sum(&self, a: Var, weights: &Tensor) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        if x.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: x.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let s: f64 = x.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum();
        self.record(
            &[a],
            Tensor::scalar(s),
            WeightedSum {
                weights: weights.clone(),
            },
        )
    }

    /// Picks flat (row-major) elements into a rank-1 tensor.
    pub fn gather(&self, a: Var, indices: &[usize]) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::InvalidShape {
                op: "gather",
                msg: format!("index {bad} out of range for {:?}", x.shape()),
            });
        }
        let data: Vec<f64> = indices.iter().map(|&i| x.data()[i]).collect();
        self.record(
            &[a],
            Tensor::from_parts(vec![indices.len()], data),
            Gather {
                indices: indices.to_vec(),
            },
        )
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<Tensor> {
        self.check(a)?;
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::InvalidShape {
                op,
                msg: format!("axis {axis} out of range for {:?}", x.shape()),
            });
        }
        Ok(x)
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.check_axis(a, axis, "softmax")?;
        self.record(&[a], softmax_forward(&x, axis, false), Softmax { axis })
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.check_axis(a, axis, "log_softmax")?;
        self.record(&[a], softmax_forward(&x, axis, true), LogSoftmax { axis })
    }
}
