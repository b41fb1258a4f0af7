use std::fmt;
use std::sync::Arc;

use super::kernels::{axis_split, col2im_add, gemm, im2col, ConvGeom, MatRef};
use super::{shape_err, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied primitive with its own vector-Jacobian product.
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradients for each input, given the gradient of the output.
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

/// Differentiable primitives. Binary elementwise ops broadcast the right
/// operand when its shape is a suffix of the left operand's shape.
#[derive(Clone, Debug)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// `[m, k] · [k, n]`.
    MatMul,
    /// Inputs `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, optional `bias: [O]`.
    Conv2d { stride: usize, padding: usize },
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    ClampMin(f64),
    /// Over the last axis, max-shifted.
    LogSumExp,
    /// Over the last axis, max-shifted.
    Softmax,
    /// `None` reduces every axis to a scalar.
    Mean { axis: Option<usize> },
    Sum { axis: Option<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape(Vec<usize>),
    SquaredNorm,
    /// Selects rows along axis 0; indices may repeat.
    GatherRows(Vec<usize>),
    Custom(Arc<dyn CustomOp>),
}

impl Primitive {
    pub fn name(&self) -> &str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "multiply",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::ClampMin(_) => "clamp_min",
            Primitive::LogSumExp => "logsumexp",
            Primitive::Softmax => "softmax",
            Primitive::Mean { .. } => "mean",
            Primitive::Sum { .. } => "sum",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape(_) => "reshape",
            Primitive::SquaredNorm => "squared_norm",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::Custom(op) => op.name(),
        }
    }
}

#[derive(Debug)]
enum NodeOp {
    Leaf { param: bool },
    Prim(Primitive),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: NodeOp,
    inputs: Vec<Var>,
    needs_grad: bool,
    saved: Option<Vec<f64>>,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to parameter leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Zero-filled when the variable does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter of a bound store, in store order.
    pub fn collect(&self, binding: &Binding) -> Vec<Tensor> {
        binding.vars.iter().map(|&v| self.get(v)).collect()
    }
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

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: NodeOp::Leaf { param },
            inputs: Vec::new(),
            needs_grad: param,
            saved: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(TensorError::InvalidArgument(format!(
                "{}: unknown node {}",
                prim.name(),
                bad.0
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(&prim, &values, needs_grad)?;
        self.nodes.push(Node {
            value,
            op: NodeOp::Prim(prim),
            inputs: inputs.to_vec(),
            needs_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::Scale(s), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let prim = Primitive::Conv2d { stride, padding };
        match bias {
            Some(b) => self.apply(prim, &[x, w, b]),
            None => self.apply(prim, &[x, w]),
        }
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(Primitive::ClampMin(floor), &[a])
    }
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSumExp, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean { axis: None }, &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Mean { axis: Some(axis) }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum { axis: None }, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum { axis: Some(axis) }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }
    pub fn squared_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SquaredNorm, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.apply(Primitive::GatherRows(rows.to_vec()), &[a])
    }
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        self.apply(Primitive::Custom(op), inputs)
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.value.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                NodeOp::Leaf { param } => {
                    if *param {
                        out[idx] = Some(Tensor {
                            shape: node.value.shape.clone(),
                            data: g,
                        });
                    }
                }
                NodeOp::Prim(prim) => {
                    if !node.needs_grad {
                        continue;
                    }
                    let inputs: Vec<&Tensor> =
                        node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|v| self.nodes[v.0].needs_grad)
                        .collect();
                    let input_grads =
                        vjp(prim, &inputs, &node.value, node.saved.as_deref(), &g, &needs);
                    for ((v, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                        let Some(ig) = ig else { continue };
                        if !need {
                            continue;
                        }
                        match &mut grads[v.0] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            grads: out,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }
}

fn suffix_broadcast(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (&a.shape, &b.shape);
    if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
        Ok(())
    } else {
        Err(shape_err(name, format!("{sa:?} with {sb:?}")))
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn last_axis(name: &str, x: &Tensor) -> Result<(usize, usize)> {
    let k = *x
        .shape
        .last()
        .ok_or_else(|| shape_err(name, "needs at least one axis"))?;
    Ok((x.len() / k, k))
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    let bad = || {
        shape_err(
            "conv2d",
            format!(
                "input {:?}, kernel {:?}, stride {stride}, padding {padding}",
                x.shape, w.shape
            ),
        )
    };
    if x.ndim() != 4 || w.ndim() != 4 || x.shape[1] != w.shape[1] || stride == 0 {
        return Err(bad());
    }
    let (h, wd, kh, kw) = (x.shape[2], x.shape[3], w.shape[2], w.shape[3]);
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(bad());
    }
    Ok(ConvGeom {
        channels: x.shape[1],
        height: h,
        width: wd,
        kh,
        kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (wd + 2 * padding - kw) / stride + 1,
    })
}

fn forward(prim: &Primitive, xs: &[&Tensor], needs_grad: bool) -> Result<(Tensor, Option<Vec<f64>>)> {
    let name = prim.name();
    let arity = |n: usize| -> Result<()> {
        if xs.len() == n {
            Ok(())
        } else {
            Err(shape_err(name, format!("expects {n} inputs, got {}", xs.len())))
        }
    };
    let out = match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            arity(2)?;
            let (a, b) = (xs[0], xs[1]);
            suffix_broadcast(name, a, b)?;
            let bl = b.len();
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = b.data[i % bl];
                    match prim {
                        Primitive::Add => x + y,
                        Primitive::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        }
        Primitive::Scale(s) => {
            arity(1)?;
            unary(xs[0], |v| v * s)
        }
        Primitive::MatMul => {
            arity(2)?;
            let (a, b) = (xs[0], xs[1]);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_err(name, format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = vec![0.0; m * n];
            gemm(MatRef::new(&a.data, m, k), MatRef::new(&b.data, k, n), &mut data, 0.0);
            Tensor {
                shape: vec![m, n],
                data,
            }
        }
        Primitive::Conv2d { stride, padding } => {
            if xs.len() != 2 && xs.len() != 3 {
                return Err(shape_err(name, format!("expects 2 or 3 inputs, got {}", xs.len())));
            }
            let (x, w) = (xs[0], xs[1]);
            let g = conv_geom(x, w, *stride, *padding)?;
            let o = w.shape[0];
            if let Some(b) = xs.get(2) {
                if b.shape != [o] {
                    return Err(shape_err(name, format!("bias {:?} for {o} filters", b.shape)));
                }
            }
            let n = x.shape[0];
            let (cr, cc) = (g.col_rows(), g.col_cols());
            let img = g.channels * g.height * g.width;
            let mut cols = vec![0.0; n * cr * cc];
            let mut data = vec![0.0; n * o * cc];
            for i in 0..n {
                let col = &mut cols[i * cr * cc..(i + 1) * cr * cc];
                im2col(&x.data[i * img..(i + 1) * img], &g, col);
                let dst = &mut data[i * o * cc..(i + 1) * o * cc];
                if let Some(b) = xs.get(2) {
                    for (f, row) in dst.chunks_mut(cc).enumerate() {
                        row.iter_mut().for_each(|v| *v = b.data[f]);
                    }
                }
                gemm(MatRef::new(&w.data, o, cr), MatRef::new(col, cr, cc), dst, 1.0);
            }
            let out = Tensor {
                shape: vec![n, o, g.out_h, g.out_w],
                data,
            };
            return Ok((out, needs_grad.then_some(cols)));
        }
        Primitive::Relu => {
            arity(1)?;
            unary(xs[0], |v| if v < 0.0 { 0.0 } else { v })
        }
        Primitive::Tanh => {
            arity(1)?;
            unary(xs[0], f64::tanh)
        }
        Primitive::Sigmoid => {
            arity(1)?;
            unary(xs[0], |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
        }
        Primitive::Exp => {
            arity(1)?;
            unary(xs[0], f64::exp)
        }
        Primitive::Log => {
            arity(1)?;
            if let Some((i, v)) = xs[0].data.iter().enumerate().find(|(_, v)| **v <= 0.0) {
                return Err(TensorError::Domain {
                    primitive: name.into(),
                    detail: format!("log of non-positive value {v} at index {i}"),
                });
            }
            unary(xs[0], f64::ln)
        }
        Primitive::ClampMin(floor) => {
            arity(1)?;
            unary(xs[0], |v| if v < *floor { *floor } else { v })
        }
        Primitive::LogSumExp => {
            arity(1)?;
            let x = xs[0];
            let (rows, k) = last_axis(name, x)?;
            let data = (0..rows)
                .map(|r| logsumexp_row(&x.data[r * k..(r + 1) * k]))
                .collect();
            Tensor {
                shape: x.shape[..x.ndim() - 1].to_vec(),
                data,
            }
        }
        Primitive::Softmax => {
            arity(1)?;
            let x = xs[0];
            let (rows, k) = last_axis(name, x)?;
            let mut data = x.data.clone();
            for r in 0..rows {
                let row = &mut data[r * k..(r + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        }
        Primitive::Mean { axis } | Primitive::Sum { axis } => {
            arity(1)?;
            let x = xs[0];
            let is_mean = matches!(prim, Primitive::Mean { .. });
            match axis {
                None => {
                    let s: f64 = x.data.iter().sum();
                    Tensor::scalar(if is_mean { s / x.len() as f64 } else { s })
                }
                Some(ax) => {
                    if *ax >= x.ndim() {
                        return Err(shape_err(name, format!("axis {ax} of {:?}", x.shape)));
                    }
                    let (outer, k, inner) = axis_split(&x.shape, *ax);
                    let mut data = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for j in 0..k {
                            let src = &x.data[(o * k + j) * inner..][..inner];
                            let dst = &mut data[o * inner..][..inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    if is_mean {
                        data.iter_mut().for_each(|v| *v /= k as f64);
                    }
                    let mut shape = x.shape.clone();
                    shape.remove(*ax);
                    Tensor { shape, data }
                }
            }
        }
        Primitive::Concat { axis } => {
            let first = xs
                .first()
                .ok_or_else(|| shape_err(name, "needs at least one input"))?;
            if *axis >= first.ndim() {
                return Err(shape_err(name, format!("axis {axis} of {:?}", first.shape)));
            }
            let mut total = 0;
            for x in xs {
                let same = x.ndim() == first.ndim()
                    && x.shape
                        .iter()
                        .zip(&first.shape)
                        .enumerate()
                        .all(|(d, (a, b))| d == *axis || a == b);
                if !same {
                    return Err(shape_err(
                        name,
                        format!("{:?} vs {:?} along axis {axis}", first.shape, x.shape),
                    ));
                }
                total += x.shape[*axis];
            }
            let (outer, _, inner) = axis_split(&first.shape, *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for x in xs {
                    let w = x.shape[*axis] * inner;
                    data.extend_from_slice(&x.data[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first.shape.clone();
            shape[*axis] = total;
            Tensor { shape, data }
        }
        Primitive::Slice { axis, start, end } => {
            arity(1)?;
            let x = xs[0];
            if *axis >= x.ndim() || start >= end || *end > x.shape[*axis] {
                return Err(shape_err(
                    name,
                    format!("[{start}, {end}) on axis {axis} of {:?}", x.shape),
                ));
            }
            let (outer, k, inner) = axis_split(&x.shape, *axis);
            let w = (end - start) * inner;
            let mut data = Vec::with_capacity(outer * w);
            for o in 0..outer {
                data.extend_from_slice(&x.data[(o * k + start) * inner..][..w]);
            }
            let mut shape = x.shape.clone();
            shape[*axis] = end - start;
            Tensor { shape, data }
        }
        Primitive::Reshape(shape) => {
            arity(1)?;
            xs[0].clone().reshaped(shape)?
        }
        Primitive::SquaredNorm => {
            arity(1)?;
            Tensor::scalar(xs[0].data.iter().map(|v| v * v).sum())
        }
        Primitive::GatherRows(rows) => {
            arity(1)?;
            let x = xs[0];
            let n = *x.shape.first().ok_or_else(|| shape_err(name, "scalar input"))?;
            if let Some(r) = rows.iter().find(|&&r| r >= n) {
                return Err(shape_err(name, format!("row {r} out of {n}")));
            }
            if rows.is_empty() {
                return Err(shape_err(name, "empty row selection"));
            }
            let w = x.len() / n;
            let mut data = Vec::with_capacity(rows.len() * w);
            for &r in rows {
                data.extend_from_slice(&x.data[r * w..(r + 1) * w]);
            }
            let mut shape = x.shape.clone();
            shape[0] = rows.len();
            Tensor { shape, data }
        }
        Primitive::Custom(op) => op.forward(xs)?,
    };
    Ok((out, None))
}

pub fn logsumexp_row(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn vjp(
    prim: &Primitive,
    xs: &[&Tensor],
    out: &Tensor,
    saved: Option<&[f64]>,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some((0..g.len()).map(|i| g[i] * f(i)).collect())]
    };
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (xs[0], xs[1]);
            let bl = b.len();
            let ga = needs[0].then(|| match prim {
                Primitive::Mul => g.iter().enumerate().map(|(i, v)| v * b.data[i % bl]).collect(),
                _ => g.to_vec(),
            });
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; bl];
                for (i, v) in g.iter().enumerate() {
                    acc[i % bl] += match prim {
                        Primitive::Add => *v,
                        Primitive::Sub => -*v,
                        _ => v * a.data[i],
                    };
                }
                acc
            });
            vec![ga, gb]
        }
        Primitive::Scale(s) => elementwise(&|_| *s),
        Primitive::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let gm = MatRef::new(g, m, n);
            let ga = needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(gm, MatRef::new(&b.data, k, n).t(), &mut d, 0.0);
                d
            });
            let gb = needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(MatRef::new(&a.data, m, k).t(), gm, &mut d, 0.0);
                d
            });
            vec![ga, gb]
        }
        Primitive::Conv2d { stride, padding } => {
            let (x, w) = (xs[0], xs[1]);
            let geom = conv_geom(x, w, *stride, *padding).expect("validated in forward");
            let (n, o) = (x.shape[0], w.shape[0]);
            let (cr, cc) = (geom.col_rows(), geom.col_cols());
            let img = geom.channels * geom.height * geom.width;
            let mut gx = needs[0].then(|| vec![0.0; x.len()]);
            let mut gw = needs[1].then(|| vec![0.0; w.len()]);
            let mut gb = (xs.len() == 3 && needs[2]).then(|| vec![0.0; o]);
            let mut dcols = vec![0.0; cr * cc];
            let mut cols_tmp = Vec::new();
            for i in 0..n {
                let gi = &g[i * o * cc..(i + 1) * o * cc];
                if let Some(gw) = gw.as_mut() {
                    let col = match saved {
                        Some(s) => &s[i * cr * cc..(i + 1) * cr * cc],
                        None => {
                            cols_tmp.resize(cr * cc, 0.0);
                            im2col(&x.data[i * img..(i + 1) * img], &geom, &mut cols_tmp);
                            &cols_tmp[..]
                        }
                    };
                    gemm(MatRef::new(gi, o, cc), MatRef::new(col, cr, cc).t(), gw, 1.0);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(MatRef::new(&w.data, o, cr).t(), MatRef::new(gi, o, cc), &mut dcols, 0.0);
                    col2im_add(&dcols, &geom, &mut gx[i * img..(i + 1) * img]);
                }
                if let Some(gb) = gb.as_mut() {
                    for (f, row) in gi.chunks(cc).enumerate() {
                        gb[f] += row.iter().sum::<f64>();
                    }
                }
            }
            let mut res = vec![gx, gw];
            if xs.len() == 3 {
                res.push(gb);
            }
            res
        }
        Primitive::Relu => elementwise(&|i| if xs[0].data[i] > 0.0 { 1.0 } else { 0.0 }),
        Primitive::Tanh => elementwise(&|i| 1.0 - out.data[i] * out.data[i]),
        Primitive::Sigmoid => elementwise(&|i| out.data[i] * (1.0 - out.data[i])),
        Primitive::Exp => elementwise(&|i| out.data[i]),
        Primitive::Log => elementwise(&|i| 1.0 / xs[0].data[i]),
        Primitive::ClampMin(floor) => {
            elementwise(&|i| if xs[0].data[i] > *floor { 1.0 } else { 0.0 })
        }
        Primitive::LogSumExp => {
            let x = xs[0];
            let k = *x.shape.last().expect("validated in forward");
            let d = x
                .data
                .iter()
                .enumerate()
                .map(|(i, v)| g[i / k] * (v - out.data[i / k]).exp())
                .collect();
            vec![Some(d)]
        }
        Primitive::Softmax => {
            let k = *out.shape.last().expect("validated in forward");
            let mut d = vec![0.0; g.len()];
            for r in 0..g.len() / k {
                let y = &out.data[r * k..(r + 1) * k];
                let gr = &g[r * k..(r + 1) * k];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    d[r * k + j] = y[j] * (gr[j] - dot);
                }
            }
            vec![Some(d)]
        }
        Primitive::Mean { axis } | Primitive::Sum { axis } => {
            let x = xs[0];
            let is_mean = matches!(prim, Primitive::Mean { .. });
            match axis {
                None => {
                    let v = if is_mean { g[0] / x.len() as f64 } else { g[0] };
                    vec![Some(vec![v; x.len()])]
                }
                Some(ax) => {
                    let (outer, k, inner) = axis_split(&x.shape, *ax);
                    let f = if is_mean { 1.0 / k as f64 } else { 1.0 };
                    let mut d = vec![0.0; x.len()];
                    for o in 0..outer {
                        for j in 0..k {
                            let dst = &mut d[(o * k + j) * inner..][..inner];
                            let src = &g[o * inner..][..inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a = b * f);
                        }
                    }
                    vec![Some(d)]
                }
            }
        }
        Primitive::Concat { axis } => {
            let (outer, total, inner) = axis_split(&out.shape, *axis);
            let mut res = Vec::with_capacity(xs.len());
            let mut offset = 0;
            for (x, need) in xs.iter().zip(needs) {
                let k = x.shape[*axis];
                if *need {
                    let mut d = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        d.extend_from_slice(&g[(o * total + offset) * inner..][..k * inner]);
                    }
                    res.push(Some(d));
                } else {
                    res.push(None);
                }
                offset += k;
            }
            res
        }
        Primitive::Slice { axis, start, end } => {
            let x = xs[0];
            let (outer, k, inner) = axis_split(&x.shape, *axis);
            let w = (end - start) * inner;
            let mut d = vec![0.0; x.len()];
            for o in 0..outer {
                d[(o * k + start) * inner..][..w].copy_from_slice(&g[o * w..(o + 1) * w]);
            }
            vec![Some(d)]
        }
        Primitive::Reshape(_) => vec![Some(g.to_vec())],
        Primitive::SquaredNorm => vec![Some(xs[0].data.iter().map(|v| 2.0 * v * g[0]).collect())],
        Primitive::GatherRows(rows) => {
            let x = xs[0];
            let w = x.len() / x.shape[0];
            let mut d = vec![0.0; x.len()];
            for (i, &r) in rows.iter().enumerate() {
                d[r * w..(r + 1) * w]
                    .iter_mut()
                    .zip(&g[i * w..(i + 1) * w])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(d)]
        }
        Primitive::Custom(op) => {
            let go = Tensor {
                shape: out.shape.clone(),
                data: g.to_vec(),
            };
            op.vjp(xs, out, &go)
                .into_iter()
                .map(|t| Some(t.data))
                .collect()
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn checksum(&self) -> u64 {
        self.tensors
            .iter()
            .fold(0u64, |h, t| h.rotate_left(7) ^ t.checksum())
    }

    /// Registers every tensor as a leaf of `graph`; trainable leaves
    /// receive gradients, frozen ones are constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.input(t.clone())
                }
            })
            .collect();
        Binding { vars }
    }
}

/// Graph leaves for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps leaves created elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
