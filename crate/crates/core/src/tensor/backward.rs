use super::graph::{
    broadcast_map, cosine_value, gelu_grad, matmul_nt, matmul_tn, trailing_block, mish_grad, norm, outer_inner,
    Graph, Op, Var,
};
use super::{Tensor, TensorError, NORM_EPS};

/// Gradients of one scalar loss, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Sums a broadcast gradient back onto the input's shape.
fn unbroadcast(g: &Tensor, input: &[usize]) -> Tensor {
    if g.shape() == input {
        return g.clone();
    }
    let mut out = Tensor::zeros(input);
    if out.numel() == 1 {
        out.data_mut()[0] = g.data().iter().sum();
        return out;
    }
    if let Some(n) = trailing_block(g.shape(), input) {
        for row in g.data().chunks(n) {
            for (o, &v) in out.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
        return out;
    }
    let map = broadcast_map(g.shape(), input);
    for (&j, &v) in map.iter().zip(g.data()) {
        out.data_mut()[j] += v;
    }
    out
}

fn broadcast_operand(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    broadcast_map(out_shape, t.shape())
        .into_iter()
        .map(|i| t.data()[i])
        .collect()
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

impl Graph {
    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Slice { x, axis, start } = &node.op {
                // Added in place so slicing a long tensor step by step stays linear.
                if self.nodes[x.0].requires_grad {
                    let tx = self.value(*x);
                    let acc = grads[x.0].get_or_insert_with(|| Tensor::zeros(tx.shape()));
                    let (outer, dim, inner) = outer_inner(tx.shape(), *axis);
                    let len = node.value.shape()[*axis];
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        let src = o * len * inner;
                        for (a, &v) in acc.data_mut()[dst..dst + len * inner].iter_mut().zip(&g.data()[src..src + len * inner]) {
                            *a += v;
                        }
                    }
                }
                continue;
            }
            for (input, contrib) in self.input_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Leaves keep their gradient; interior buffers are dropped once consumed.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, id: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |v: &Var| self.value(*v);
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = match ta.rank() {
                    1 => (1, ta.shape()[0]),
                    _ => (ta.shape()[0], ta.shape()[1]),
                };
                let n = match tb.rank() {
                    1 => 1,
                    _ => tb.shape()[1],
                };
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let da = matmul_nt(g.data(), tb.data(), m, n, k);
                    out.push((*a, Tensor::new(ta.shape().to_vec(), da).unwrap()));
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn(ta.data(), g.data(), m, k, n);
                    out.push((*b, Tensor::new(tb.shape().to_vec(), db).unwrap()));
                }
                out
            }
            Op::Add(a, b) => vec![
                (*a, unbroadcast(g, val(a).shape())),
                (*b, unbroadcast(g, val(b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, unbroadcast(g, val(a).shape())),
                (*b, unbroadcast(&g.map(|v| -v), val(b).shape())),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let bb = broadcast_operand(tb, g.shape());
                    let d = g.data().iter().zip(&bb).map(|(x, y)| x * y).collect();
                    out.push((*a, unbroadcast(&Tensor::new(g.shape().to_vec(), d).unwrap(), ta.shape())));
                }
                if self.requires_grad(*b) {
                    let ab = broadcast_operand(ta, g.shape());
                    let d = g.data().iter().zip(&ab).map(|(x, y)| x * y).collect();
                    out.push((*b, unbroadcast(&Tensor::new(g.shape().to_vec(), d).unwrap(), tb.shape())));
                }
                out
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let bb = broadcast_operand(tb, g.shape());
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(&bb).map(|(x, y)| x / y).collect();
                    out.push((*a, unbroadcast(&Tensor::new(g.shape().to_vec(), d).unwrap(), ta.shape())));
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -y/b
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(&bb)
                        .map(|((gv, yv), bv)| -gv * yv / bv)
                        .collect();
                    out.push((*b, unbroadcast(&Tensor::new(g.shape().to_vec(), d).unwrap(), tb.shape())));
                }
                out
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = outer_inner(y.shape(), *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(v).numel()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (i, v) in inputs.iter().enumerate() {
                        let chunk = val(v).shape()[*axis] * inner;
                        parts[i].extend_from_slice(&g.data()[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                inputs
                    .iter()
                    .zip(parts)
                    .map(|(v, d)| (*v, Tensor::new(val(v).shape().to_vec(), d).unwrap()))
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                let tx = val(x);
                let (outer, dim, inner) = outer_inner(tx.shape(), *axis);
                let len = y.shape()[*axis];
                let mut d = Tensor::zeros(tx.shape());
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    d.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*x, d)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshaped(val(x).shape()).unwrap())],
            Op::Transpose(x) => {
                let (r, c) = (val(x).shape()[0], val(x).shape()[1]);
                vec![(*x, Tensor::new(vec![r, c], transpose_raw(g.data(), c, r)).unwrap())]
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let tx = val(x);
                let mean = matches!(node.op, Op::Mean { .. });
                match axis {
                    None => {
                        let k = if mean { 1.0 / tx.numel() as f64 } else { 1.0 };
                        vec![(*x, Tensor::full(tx.shape(), g.item() * k))]
                    }
                    Some(axis) => {
                        let (outer, dim, inner) = outer_inner(tx.shape(), *axis);
                        let k = if mean { 1.0 / dim as f64 } else { 1.0 };
                        let mut d = Tensor::zeros(tx.shape());
                        for o in 0..outer {
                            let src = &g.data()[o * inner..(o + 1) * inner];
                            for j in 0..dim {
                                let dst = &mut d.data_mut()[(o * dim + j) * inner..(o * dim + j + 1) * inner];
                                for (a, b) in dst.iter_mut().zip(src) {
                                    *a = b * k;
                                }
                            }
                        }
                        vec![(*x, d)]
                    }
                }
            }
            Op::Exp(x) => vec![(*x, elementwise(g, y, |gv, yv| gv * yv))],
            Op::Log(x) => vec![(*x, elementwise(g, val(x), |gv, xv| gv / xv))],
            Op::Sigmoid(x) => vec![(*x, elementwise(g, y, |gv, yv| gv * yv * (1.0 - yv)))],
            Op::Tanh(x) => vec![(*x, elementwise(g, y, |gv, yv| gv * (1.0 - yv * yv)))],
            Op::Relu(x) => vec![(*x, elementwise(g, val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Gelu(x) => vec![(*x, elementwise(g, val(x), |gv, xv| gv * gelu_grad(xv)))],
            Op::Mish(x) => vec![(*x, elementwise(g, val(x), |gv, xv| gv * mish_grad(xv)))],
            Op::Sqrt(x) => vec![(*x, elementwise(g, y, |gv, yv| gv / (2.0 * yv)))],
            Op::Clamp { x, min, max } => vec![(
                *x,
                elementwise(g, val(x), |gv, xv| if xv >= *min && xv <= *max { gv } else { 0.0 }),
            )],
            Op::Softmax(x) => {
                let d = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                for ((yr, gr), or) in y.data().chunks(d).zip(g.data().chunks(d)).zip(out.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), out).unwrap())]
            }
            Op::LogSoftmax(x) => {
                let d = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                for ((yr, gr), or) in y.data().chunks(d).zip(g.data().chunks(d)).zip(out.chunks_mut(d)) {
                    let gs: f64 = gr.iter().sum();
                    for ((o, yv), gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * gs;
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), out).unwrap())]
            }
            Op::L2Normalize(x) => {
                let tx = val(x);
                let d = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                for (((xr, yr), gr), or) in tx
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                    .zip(out.chunks_mut(d))
                {
                    let n = norm(xr);
                    if n >= NORM_EPS {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * dot) / n;
                        }
                    } else {
                        for (o, gv) in or.iter_mut().zip(gr) {
                            *o = gv / NORM_EPS;
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), out).unwrap())]
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let d = *ta.shape().last().unwrap();
                let nb: Vec<f64> = tb.data().chunks(d).map(norm).collect();
                let rows_b = nb.len();
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for (p, ra) in ta.data().chunks(d).enumerate() {
                    let na = norm(ra);
                    if na < NORM_EPS {
                        continue;
                    }
                    for (q, rb) in tb.data().chunks(d).enumerate() {
                        let nbq = nb[q];
                        if nbq < NORM_EPS {
                            continue;
                        }
                        let gv = g.data()[p * rows_b + q];
                        if gv == 0.0 {
                            continue;
                        }
                        let c = cosine_value(ra, rb, na, nbq);
                        let inv = 1.0 / (na * nbq);
                        for i in 0..d {
                            da[p * d + i] += gv * (rb[i] * inv - c * ra[i] / (na * na));
                            db[q * d + i] += gv * (ra[i] * inv - c * rb[i] / (nbq * nbq));
                        }
                    }
                }
                vec![
                    (*a, Tensor::new(ta.shape().to_vec(), da).unwrap()),
                    (*b, Tensor::new(tb.shape().to_vec(), db).unwrap()),
                ]
            }
            Op::Conv1d { x, kernel } => {
                let (tx, tk) = (val(x), val(kernel));
                let (len, ch) = (tx.shape()[0], tx.shape()[1]);
                let (width, filters) = (tk.shape()[0], tk.shape()[2]);
                let pad = width / 2;
                let mut dx = vec![0.0; tx.numel()];
                let mut dk = vec![0.0; tk.numel()];
                let need_x = self.requires_grad(*x);
                for t in 0..len {
                    let gr = &g.data()[t * filters..(t + 1) * filters];
                    for s in 0..width {
                        let src = t + s;
                        if src < pad || src - pad >= len {
                            continue;
                        }
                        let r = src - pad;
                        for c in 0..ch {
                            let base = (s * ch + c) * filters;
                            let krow = &tk.data()[base..base + filters];
                            let xv = tx.data()[r * ch + c];
                            let mut acc = 0.0;
                            for ((dkv, &kv), &gv) in dk[base..base + filters].iter_mut().zip(krow).zip(gr) {
                                *dkv += xv * gv;
                                acc += kv * gv;
                            }
                            if need_x {
                                dx[r * ch + c] += acc;
                            }
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(tx.shape().to_vec(), dx).unwrap()),
                    (*kernel, Tensor::new(tk.shape().to_vec(), dk).unwrap()),
                ]
            }
            Op::Gather { x, indices } => {
                let mut d = Tensor::zeros(val(x).shape());
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    d.data_mut()[i] += gv;
                }
                vec![(*x, d)]
            }
        }
    }
}
