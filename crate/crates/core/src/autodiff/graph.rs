use std::fmt;

use super::kernels::{self, Conv2dSpec, ConvDims};
use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-supplied primitive:
/// `(inputs, output, grad_output) -> grad per input`.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    ReduceMax { input: Var, argmax: Vec<usize> },
    ReduceMean { input: Var, axis: usize },
    Sum(Var),
    Broadcast { input: Var, map: Vec<usize> },
    Gather { input: Var, index: Vec<usize> },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec },
    Softmax(Var),
    Upsample(Var),
    Custom { name: &'static str, inputs: Vec<Var>, backward: CustomBackward },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::ReduceMax { .. } => "reduce_max",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::Sum(_) => "sum",
            Op::Broadcast { .. } => "broadcast",
            Op::Gather { .. } => "gather",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax(_) => "softmax",
            Op::Upsample(_) => "upsample_bilinear",
            Op::Custom { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Softmax(a)
            | Op::Upsample(a) => vec![*a],
            Op::ReduceMax { input, .. }
            | Op::ReduceMean { input, .. }
            | Op::Broadcast { input, .. }
            | Op::Gather { input, .. } => vec![*input],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in topological order and runs reverse-mode
/// differentiation over them.
///
/// A graph is single-use: build it with a forward pass, call
/// [`Graph::backward`] once, read gradients with [`Graph::grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Splits a shape around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    /// Adds a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, "operands must have equal shapes", &[sa, sb]));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// 2-D matrix product: (m×k)·(k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", "expected (m×k)·(k×n)", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        self.push(value, Op::Matmul(a, b))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs", &[]));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range"), &[&first]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return Err(Error::shape("concat", format!("extents differ off axis {axis}"), &shapes));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// Channel (first-axis) concatenation.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, 0)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push(value, Op::Reshape(a))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", "expected a matrix", &[s]));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(&[c, r], kernels::transpose(self.value(a).data(), r, c))?;
        self.push(value, Op::Transpose(a))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0) {
            return Err(Error::config(format!("leaky_relu slope must be > 0, got {alpha}")));
        }
        let value = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.push(value, Op::LeakyRelu(a, alpha))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Natural logarithm; nonpositive inputs surface as a numeric error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    /// Maximum along `axis`, which is removed from the shape. Ties resolve to
    /// the first index, which is also where the gradient goes.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape("reduce_max", format!("axis {axis} out of range"), &[t.shape()]));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for k in 1..n {
                    let idx = (o * n + k) * inner + i;
                    if t.data()[idx] > t.data()[best] {
                        best = idx;
                    }
                }
                data.push(t.data()[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(&drop_axis(t.shape(), axis), data)?;
        self.push(value, Op::ReduceMax { input: a, argmax })
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape("reduce_mean", format!("axis {axis} out of range"), &[t.shape()]));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += t.data()[(o * n + k) * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        let value = Tensor::new(&drop_axis(t.shape(), axis), data)?;
        self.push(value, Op::ReduceMean { input: a, axis })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts to `shape` with right-aligned dimensions; each source
    /// extent must equal the target extent or be 1.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() > shape.len() {
            return Err(Error::shape("broadcast", "source has higher rank", &[&src, shape]));
        }
        let lead = shape.len() - src.len();
        for (i, &d) in src.iter().enumerate() {
            if d != 1 && d != shape[lead + i] {
                return Err(Error::shape("broadcast", format!("extent mismatch at dim {i}"), &[&src, shape]));
            }
        }
        let src_strides = strides(&src);
        let n: usize = shape.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            let mut off = 0;
            for (i, &d) in src.iter().enumerate() {
                if d != 1 {
                    off += idx[lead + i] * src_strides[i];
                }
            }
            map.push(off);
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        let t = self.value(a);
        let data = map.iter().map(|&o| t.data()[o]).collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Broadcast { input: a, map })
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`. Repeated indices
    /// are allowed; their gradients accumulate.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of range"), &[t.shape()]));
        }
        let data: Vec<f64> = index.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Gather { input: a, index })
    }

    /// Selects columns of a matrix; `cols` may repeat.
    pub fn select_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("select_columns", "expected a matrix", &[s]));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::shape("select_columns", format!("column {bad} out of range"), &[s]));
        }
        let index = (0..r).flat_map(|i| cols.iter().map(move |&j| i * c + j)).collect();
        self.gather(a, index, &[r, cols.len()])
    }

    /// Cross-correlation of a `c_in×H×W` input with a `c_out×c_in×kh×kw`
    /// kernel and optional `c_out` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let dims = self.conv_dims(input, weight, bias, &spec)?;
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
            &spec,
        );
        let value = Tensor::new(&[dims.c_out, dims.oh, dims.ow], data)?;
        self.push(value, Op::Conv2d { input, weight, bias, spec })
    }

    fn conv_dims(&self, input: Var, weight: Var, bias: Option<Var>, spec: &Conv2dSpec) -> Result<ConvDims> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] {
            return Err(Error::shape("conv2d", "expected c_in×H×W input and c_out×c_in×kh×kw weight", &[si, sw]));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::shape("conv2d", "stride and dilation must be >= 1", &[si, sw]));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [sw[0]] {
                return Err(Error::shape("conv2d", "bias must have c_out elements", &[si, sw, sb]));
            }
        }
        let (oh, ow) = match (spec.out_extent(si[1], sw[2]), spec.out_extent(si[2], sw[3])) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("output extent < 1 (stride {}, pad {}, dilation {})", spec.stride, spec.padding, spec.dilation),
                    &[si, sw],
                ))
            }
        };
        Ok(ConvDims { c_in: si[0], h: si[1], w: si[2], c_out: sw[0], kh: sw[2], kw: sw[3], oh, ow })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().expect("rank >= 1");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(t.shape(), data)?;
        self.push(value, Op::Softmax(a))
    }

    /// Bilinear resize of a `c×H×W` tensor, align-corners-false.
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("upsample_bilinear", format!("bad target {out_h}×{out_w}"), &[s]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let data = kernels::upsample_forward(self.value(a).data(), c, h, w, out_h, out_w);
        let value = Tensor::new(&[c, out_h, out_w], data)?;
        self.push(value, Op::Upsample(a))
    }

    /// Registers a primitive whose forward value is computed by the caller
    /// and whose backward is `backward`.
    pub fn custom(&mut self, name: &'static str, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Result<Var> {
        self.push(value, Op::Custom { name, inputs: inputs.to_vec(), backward })
    }

    /// `x·W + b`-style affine map on columns: `weight` (out×in) times `x`
    /// (in×N) plus `bias` (out) broadcast along columns.
    pub fn linear_columns(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(weight, x)?;
        match bias {
            None => Ok(y),
            Some(b) => {
                let out = self.shape(y).to_vec();
                let col = self.reshape(b, &[out[0], 1])?;
                let bb = self.broadcast(col, &out)?;
                self.add(y, bb)
            }
        }
    }

    /// Reverse pass from a one-element `loss`. Gradients are accumulated in
    /// reverse node order, so repeated runs are bit-identical.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar", &[self.shape(loss)]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let contributions = self.vjp(id, &g)?;
            for (v, gv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gv),
                }
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric { op: self.nodes[id].op.name() });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn vjp(&self, id: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: &Var| self.nodes[v.0].value.data();
        let shape = |v: &Var| self.nodes[v.0].value.shape();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b)).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(a)).map(|(x, y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                let ga = g.iter().zip(vb).map(|(x, y)| x / y).collect();
                let gb = g.iter().zip(va).zip(vb).map(|((x, n), d)| -x * n / (d * d)).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|x| x * f).collect())],
            Op::Matmul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                let bt = kernels::transpose(val(b), k, n);
                let at = kernels::transpose(val(a), m, k);
                vec![(*a, kernels::matmul(g, &bt, m, n, k)), (*b, kernels::matmul(&at, g, k, m, n))]
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut parts: Vec<Vec<f64>> = inputs.iter().map(|v| Vec::with_capacity(val(v).len())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let block = shape(v)[*axis] * inner;
                        parts[k].extend_from_slice(&g[off..off + block]);
                        off += block;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Transpose(a) => {
                let (r, c) = (shape(a)[0], shape(a)[1]);
                vec![(*a, kernels::transpose(g, c, r))]
            }
            Op::LeakyRelu(a, alpha) => {
                let ga = g.iter().zip(val(a)).map(|(gv, &x)| if x > 0.0 { *gv } else { alpha * gv }).collect();
                vec![(*a, ga)]
            }
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect())],
            Op::Log(a) => vec![(*a, g.iter().zip(val(a)).map(|(gv, x)| gv / x).collect())],
            Op::Sqrt(a) => {
                // Subgradient 0 at the origin, where the derivative is unbounded.
                let ga = g.iter().zip(out).map(|(gv, &y)| if y > 0.0 { gv * 0.5 / y } else { 0.0 }).collect();
                vec![(*a, ga)]
            }
            Op::ReduceMax { input, argmax } => {
                let mut ga = vec![0.0; val(input).len()];
                for (gv, &i) in g.iter().zip(argmax) {
                    ga[i] += gv;
                }
                vec![(*input, ga)]
            }
            Op::ReduceMean { input, axis } => {
                let (outer, n, inner) = split_axis(shape(input), *axis);
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            ga[(o * n + k) * inner + i] = g[o * inner + i] / n as f64;
                        }
                    }
                }
                vec![(*input, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(a).len()])],
            Op::Broadcast { input, map } | Op::Gather { input, index: map } => {
                let mut ga = vec![0.0; val(input).len()];
                for (gv, &i) in g.iter().zip(map) {
                    ga[i] += gv;
                }
                vec![(*input, ga)]
            }
            Op::Conv2d { input, weight, bias, spec } => {
                let dims = self.conv_dims(*input, *weight, *bias, spec)?;
                let (gi, gw, gb) = kernels::conv2d_backward(val(input), val(weight), g, &dims, spec);
                let mut v = vec![(*input, gi), (*weight, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::Softmax(a) => {
                let n = *shape(a).last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (gv - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Upsample(a) => {
                let s = shape(a);
                let os = node.value.shape();
                vec![(*a, kernels::upsample_backward(g, s[0], s[1], s[2], os[1], os[2]))]
            }
            Op::Custom { name, inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gout = Tensor::new(node.value.shape(), g.to_vec())?;
                let gs = backward(&ins, &node.value, &gout);
                if gs.len() != inputs.len() || gs.iter().zip(&ins).any(|(a, b)| a.shape() != b.shape()) {
                    return Err(Error::shape(name, "custom backward returned wrong shapes", &[]));
                }
                inputs.iter().copied().zip(gs.into_iter().map(Tensor::into_data)).collect()
            }
        })
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
