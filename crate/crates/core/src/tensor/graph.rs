use super::{Tensor, TensorError, NORM_EPS};

/// Handle to a node of one [`Graph`]. Ids are append-order indices, so every
/// input of a node has a smaller id than the node itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Mish(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sqrt(Var),
    Clamp { x: Var, min: f64, max: f64 },
    L2Normalize(Var),
    Cosine(Var, Var),
    Conv1d { x: Var, kernel: Var },
    Gather { x: Var, indices: Vec<usize> },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
}

/// Attributes for the string-tagged [`Graph::apply`] entry point.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub start: usize,
    pub end: usize,
    pub shape: Vec<usize>,
    pub min: f64,
    pub max: f64,
    pub indices: Vec<usize>,
    pub constant: Option<Tensor>,
}

/// Append-only record of primitive applications.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

pub(crate) fn mish_grad(x: f64) -> f64 {
    let t = softplus(x).tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

/// Right-aligned NumPy broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast input.
/// Element count of `input` when it equals the trailing dimensions of `out`,
/// so that broadcasting repeats it whole.
pub(crate) fn trailing_block(out: &[usize], input: &[usize]) -> Option<usize> {
    (input.len() <= out.len() && out[out.len() - input.len()..] == *input).then(|| input.iter().product())
}

pub(crate) fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    if let Some(n) = trailing_block(out, input).filter(|&n| n > 0) {
        let total: usize = out.iter().product();
        return (0..total).map(|i| i % n).collect();
    }
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        strides[i + offset] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Views a matmul operand as a matrix: `(rows, cols)`.
fn mat_dims(shape: &[usize], left: bool) -> Option<(usize, usize)> {
    match shape.len() {
        1 if left => Some((1, shape[0])),
        1 => Some((shape[0], 1)),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · bᵀ` for `b[n×k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out.push(arow.iter().zip(brow).map(|(x, y)| x * y).sum());
        }
    }
    out
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `[k×n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize, TensorError> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(TensorError::invalid(op, format!("needs a non-empty last axis, got {:?}", t.shape()))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A non-differentiable input, e.g. sampled noise or a dropout mask.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Applies a primitive by name; the typed methods are the usual route.
    pub fn apply(&mut self, tag: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var, TensorError> {
        let arg = |i: usize| -> Result<Var, TensorError> {
            inputs.get(i).copied().ok_or_else(|| {
                TensorError::Invalid {
                    op: "apply",
                    msg: format!("`{tag}` expects at least {} inputs", i + 1),
                }
            })
        };
        match tag {
            "matmul" => self.matmul(arg(0)?, arg(1)?),
            "add" => self.add(arg(0)?, arg(1)?),
            "sub" => self.sub(arg(0)?, arg(1)?),
            "mul" => self.mul(arg(0)?, arg(1)?),
            "div" => self.div(arg(0)?, arg(1)?),
            "concat" => self.concat(inputs, attrs.axis.unwrap_or(0)),
            "slice" => self.slice(arg(0)?, attrs.axis.unwrap_or(0), attrs.start, attrs.end),
            "reshape" => self.reshape(arg(0)?, &attrs.shape),
            "transpose" => self.transpose(arg(0)?),
            "sum" => match attrs.axis {
                Some(a) => self.sum_axis(arg(0)?, a),
                None => Ok(self.sum(arg(0)?)),
            },
            "mean" => match attrs.axis {
                Some(a) => self.mean_axis(arg(0)?, a),
                None => Ok(self.mean(arg(0)?)),
            },
            "exp" => Ok(self.exp(arg(0)?)),
            "log" => Ok(self.log(arg(0)?)),
            "sigmoid" => Ok(self.sigmoid(arg(0)?)),
            "tanh" => Ok(self.tanh(arg(0)?)),
            "relu" => Ok(self.relu(arg(0)?)),
            "gelu" => Ok(self.gelu(arg(0)?)),
            "mish" => Ok(self.mish(arg(0)?)),
            "softmax" => self.softmax(arg(0)?),
            "log_softmax" => self.log_softmax(arg(0)?),
            "sqrt" => Ok(self.sqrt(arg(0)?)),
            "clamp" => self.clamp(arg(0)?, attrs.min, attrs.max),
            "l2_normalize" => self.l2_normalize(arg(0)?),
            "cosine" => self.cosine(arg(0)?, arg(1)?),
            "conv1d" => self.conv1d(arg(0)?, arg(1)?),
            "gather" => self.gather(arg(0)?, &attrs.indices),
            "constant" => match &attrs.constant {
                Some(t) => Ok(self.constant(t.clone())),
                None => Err(TensorError::invalid("constant", "missing `constant` attribute")),
            },
            other => Err(TensorError::UnknownOp(other.to_string())),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k) = mat_dims(&sa, true).ok_or_else(mismatch)?;
        let (k2, n) = mat_dims(&sb, false).ok_or_else(mismatch)?;
        if k != k2 {
            return Err(mismatch());
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = match (sa.len(), sb.len()) {
            (1, 1) => vec![],
            (1, _) => vec![n],
            (_, 1) => vec![m],
            _ => vec![m, n],
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(Op::MatMul(a, b), out, &[a, b]))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 && tb.rank() <= ta.rank() {
            let y = tb.data()[0];
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())?
        } else if ta.numel() == 1 && ta.rank() <= tb.rank() {
            let x = ta.data()[0];
            Tensor::new(tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op: op_name,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                }
            })?;
            if let Some(n) = trailing_block(&shape, tb.shape()).filter(|&n| n > 0 && ta.shape() == shape.as_slice()) {
                let data = ta
                    .data()
                    .chunks(n)
                    .flat_map(|row| row.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
                    .collect();
                return Ok(self.push_op(op, Tensor::new(shape, data)?, &[a, b]));
            }
            let ma = broadcast_map(&shape, ta.shape());
            let mb = broadcast_map(&shape, tb.shape());
            let data = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect();
            Tensor::new(shape, data)?
        };
        Ok(self.push_op(op, out, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a * k` for a constant `k`.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let c = self.scalar(k);
        self.mul(a, c).expect("scalar broadcast")
    }

    /// `a + k` for a constant `k`.
    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let c = self.scalar(k);
        self.add(a, c).expect("scalar broadcast")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out,
            inputs,
        ))
    }

    /// Elements `start..end` along `axis`; the axis is kept.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let (outer, dim, inner) = outer_inner(&s, axis);
        let t = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&t[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(Op::Slice { x, axis, start }, out, &[x]))
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let cols = self.shape(x)[1];
        let s = self.slice(x, 0, r, r + 1)?;
        self.reshape(s, &[cols])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(Op::Reshape(x), out, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(TensorError::invalid("transpose", format!("rank 2 required, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        Ok(self.push_op(Op::Transpose(x), out, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push_op(Op::Sum { x, axis: None }, Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_op(Op::Mean { x, axis: None }, Tensor::scalar(m), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::invalid("sum", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, dim, inner) = outer_inner(&s, axis);
        let t = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &t[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if mean {
            let k = dim as f64;
            data.iter_mut().for_each(|v| *v /= k);
        }
        let mut shape = s;
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        let op = if mean {
            Op::Mean { x, axis: Some(axis) }
        } else {
            Op::Sum { x, axis: Some(axis) }
        };
        Ok(self.push_op(op, out, &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(x, axis, true)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        self.push_op(op, out, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    /// `x·tanh(ln(1 + eˣ))`.
    pub fn mish(&mut self, x: Var) -> Var {
        self.unary(x, mish, Op::Mish(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Clamps into `[min, max]`; the gradient passes on the closed interval.
    pub fn clamp(&mut self, x: Var, min: f64, max: f64) -> Result<Var, TensorError> {
        if min > max || min.is_nan() || max.is_nan() {
            return Err(TensorError::invalid("clamp", format!("empty interval [{min}, {max}]")));
        }
        Ok(self.unary(x, |v| v.clamp(min, max), Op::Clamp { x, min, max }))
    }

    fn rowwise(
        &mut self,
        op_name: &'static str,
        x: Var,
        f: impl Fn(&[f64], &mut [f64]),
        op: Op,
    ) -> Result<Var, TensorError> {
        let t = self.value(x);
        let d = last_dim(op_name, t)?;
        let mut data = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(d).zip(data.chunks_mut(d)) {
            f(src, dst);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(op, out, &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.rowwise("softmax", x, softmax_row, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.rowwise(
            "log_softmax",
            x,
            |src, dst| {
                let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + src.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for (o, v) in dst.iter_mut().zip(src) {
                    *o = v - lse;
                }
            },
            Op::LogSoftmax(x),
        )
    }

    /// `x / max(‖x‖, ε)` along the last axis; the zero vector maps to itself.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        self.rowwise(
            "l2_normalize",
            x,
            |src, dst| {
                let n = norm(src).max(NORM_EPS);
                for (o, v) in dst.iter_mut().zip(src) {
                    *o = v / n;
                }
            },
            Op::L2Normalize(x),
        )
    }

    /// Pairwise cosine similarity over the last axis. Defined as 0 when
    /// either vector has norm below [`NORM_EPS`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let da = last_dim("cosine", ta)?;
        let db = last_dim("cosine", tb)?;
        if da != db {
            return Err(TensorError::ShapeMismatch {
                op: "cosine",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut shape = ta.shape()[..ta.rank() - 1].to_vec();
        shape.extend_from_slice(&tb.shape()[..tb.rank() - 1]);
        let nb: Vec<f64> = tb.data().chunks(db).map(norm).collect();
        let mut data = Vec::with_capacity(shape.iter().product());
        for ra in ta.data().chunks(da) {
            let na = norm(ra);
            for (rb, &nbv) in tb.data().chunks(db).zip(&nb) {
                data.push(cosine_value(ra, rb, na, nbv));
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(Op::Cosine(a, b), out, &[a, b]))
    }

    /// Same-padded 1-D convolution over time: `x[L×c] ⊛ kernel[w×c×f] → [L×f]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var, TensorError> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        if tx.rank() != 2 || tk.rank() != 3 || tx.shape()[1] != tk.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (len, ch) = (tx.shape()[0], tx.shape()[1]);
        let (width, filters) = (tk.shape()[0], tk.shape()[2]);
        if len == 0 {
            return Err(TensorError::invalid("conv1d", "empty sequence"));
        }
        if width % 2 == 0 {
            return Err(TensorError::invalid("conv1d", format!("kernel width {width} must be odd")));
        }
        let pad = width / 2;
        let mut data = vec![0.0; len * filters];
        for t in 0..len {
            let out = &mut data[t * filters..(t + 1) * filters];
            for s in 0..width {
                let src = t + s;
                if src < pad || src - pad >= len {
                    continue;
                }
                let xrow = tx.row(src - pad);
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &tk.data()[(s * ch + c) * filters..(s * ch + c + 1) * filters];
                    for (o, &kv) in out.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![len, filters], data)?;
        Ok(self.push_op(Op::Conv1d { x, kernel }, out, &[x, kernel]))
    }

    /// Picks flat elements by index into a rank-1 result.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(TensorError::invalid(
                "gather",
                format!("index {bad} out of range for {} elements", t.numel()),
            ));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::vector(data);
        Ok(self.push_op(
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            out,
            &[x],
        ))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }
}

pub(crate) fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in dst.iter_mut().zip(src) {
        *o = (v - m).exp();
        z += *o;
    }
    dst.iter_mut().for_each(|o| *o /= z);
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn cosine_value(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}
