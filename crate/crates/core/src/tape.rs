//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products into per-node gradient buffers.
//!
//! Tape policy: one tape per forward pass. Nodes are never removed; calling
//! `backward` again discards the previous gradient buffers and recomputes
//! them from scratch. Gradients from fan-out are summed, so a value consumed
//! T times by a recurrence receives the sum of its T contributions.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, m: usize, n: usize },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddRow { a: Var, row: Var, d: usize },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    MeanRows { a: Var, n: usize, d: usize },
    StackRows { rows: Vec<Var> },
    SelectRow { a: Var, index: usize, d: usize },
    Column { a: Var, index: usize, rows: usize, cols: usize },
    Sum { a: Var },
    CrossEntropy { logits: Var, target: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// `w[m×k] · x[k]`, returning a length-m vector.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let k = match self.shape(x) {
            [k] => *k,
            s => return Err(Error::shape("matvec", self.shape(w), s)),
        };
        let col = self.reshape(x, &[k, 1])?;
        let prod = self.matmul(w, col)?;
        let m = self.shape(prod)[0];
        self.reshape(prod, &[m])
    }

    /// `x[k] · m[k×n]`, returning a length-n vector.
    pub fn vecmat(&mut self, x: Var, m: Var) -> Result<Var> {
        let k = match self.shape(x) {
            [k] => *k,
            s => return Err(Error::shape("vecmat", s, self.shape(m))),
        };
        let row = self.reshape(x, &[1, k])?;
        let prod = self.matmul(row, m)?;
        let n = self.shape(prod)[1];
        self.reshape(prod, &[n])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match self.shape(a) {
            [m, n] => (*m, *n),
            s => return Err(Error::shape("transpose", s, &[])),
        };
        let out = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose { a, m, n }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|x| x * factor).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    /// Adds `row[d]` to every row of `a[n×d]` (the "repeat then add" pattern).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let d = match (sa, sr) {
            ([_, d], [e]) if d == e => *d,
            _ => return Err(Error::shape("add_row", sa, sr)),
        };
        let r = self.value(row).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow { a, row, d }, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid { a }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg)
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax { a, outer, len, inner },
            rg,
        ))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(Error::shape("concat", t.shape(), &[]));
            }
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::vector(data),
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Elements `start..start+len` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || start + len > t.numel() {
            return Err(Error::shape("slice", t.shape(), &[start, len]));
        }
        let value = Tensor::vector(t.data()[start..start + len].to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice { a, start }, rg))
    }

    /// Column-wise mean of an `n×d` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = match self.shape(a) {
            [n, d] if *n > 0 => (*n, *d),
            s => return Err(Error::shape("mean_rows", s, &[])),
        };
        let t = self.value(a);
        let mut acc = vec![0.0; d];
        for r in 0..n {
            for (o, v) in acc.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(acc), Op::MeanRows { a, n, d }, rg))
    }

    /// Stacks equally long vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let d = match rows.first() {
            Some(&r) => self.value(r).numel(),
            None => return Err(Error::contract("stack_rows of zero rows")),
        };
        let mut data = Vec::with_capacity(d * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.shape() != [d] {
                return Err(Error::shape("stack_rows", &[d], t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], data)?,
            Op::StackRows {
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_row(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        let (n, d) = match t.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::shape("select_row", s, &[index])),
        };
        if index >= n {
            return Err(Error::contract(format!("row {index} out of {n}")));
        }
        let value = Tensor::vector(t.row(index).to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectRow { a, index, d }, rg))
    }

    /// Column `index` of a matrix, as a vector. Used for embedding lookup.
    pub fn column(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("column", s, &[index])),
        };
        if index >= cols {
            return Err(Error::contract(format!("column {index} out of {cols}")));
        }
        let value = Tensor::vector((0..rows).map(|r| t.data()[r * cols + index]).collect());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Column { a, index, rows, cols }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// `-log softmax(logits)[target]` for a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 1 || target >= t.numel() {
            return Err(Error::contract(format!(
                "cross_entropy target {target} for logits {:?}",
                t.shape()
            )));
        }
        let loss = -log_softmax(t.data())[target];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }, rg))
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[idx].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                // dA = G · Bᵀ
                acc(*a, &mut |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                buf[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, m, n } => {
                let back = transpose_raw(g, *n, *m);
                acc(*a, &mut |buf| add_into(buf, &back));
            }
            Op::Reshape { a } => acc(*a, &mut |buf| add_into(buf, g)),
            Op::Add { a, b } => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul { a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, factor } => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, x)| *o += x * factor));
            }
            Op::AddRow { a, row, d } => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*row, &mut |buf| {
                    for chunk in g.chunks(*d) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Sigmoid { a } => acc(*a, &mut |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Tanh { a } => acc(*a, &mut |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Relu { a } => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        if av[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                })
            }
            Op::Softmax { a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*a, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|j| g[base + j * inner] * out[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                buf[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                })
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Slice { a, start } => {
                acc(*a, &mut |buf| add_into(&mut buf[*start..*start + g.len()], g));
            }
            Op::MeanRows { a, n, d } => {
                let inv = 1.0 / *n as f64;
                acc(*a, &mut |buf| {
                    for r in 0..*n {
                        for c in 0..*d {
                            buf[r * d + c] += g[c] * inv;
                        }
                    }
                })
            }
            Op::StackRows { rows } => {
                let d = g.len() / rows.len();
                for (r, &v) in rows.iter().enumerate() {
                    acc(v, &mut |buf| add_into(buf, &g[r * d..(r + 1) * d]));
                }
            }
            Op::SelectRow { a, index, d } => {
                acc(*a, &mut |buf| add_into(&mut buf[index * d..(index + 1) * d], g));
            }
            Op::Column { a, index, rows, cols } => acc(*a, &mut |buf| {
                for r in 0..*rows {
                    buf[r * cols + index] += g[r];
                }
            }),
            Op::Sum { a } => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::CrossEntropy { logits, target } => {
                let lv = nodes[logits.0].value.data();
                let probs: Vec<f64> = log_softmax(lv).into_iter().map(f64::exp).collect();
                acc(*logits, &mut |buf| {
                    for (i, p) in probs.iter().enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        buf[i] += g[0] * (p - onehot);
                    }
                })
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (o, x) in buf.iter_mut().zip(g) {
        *o += x;
    }
}

/// Numerically stable log-softmax of a slice.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}
