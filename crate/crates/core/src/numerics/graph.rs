//! Eager reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation computes its value immediately and records how to
//! propagate gradients. [`Graph::backward`] walks the tape in reverse
//! insertion order and accumulates parameter gradients into a
//! [`ParameterStore`].

use super::params::ParameterStore;
use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, sigmoid, softmax_slice, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    SegmentSoftmax {
        input: Var,
        segments: Vec<usize>,
        temperature: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        weights: Vec<f64>,
    },
    Sum(Var),
    Clamp {
        input: Var,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    BinaryCrossEntropy {
        pred: Var,
        targets: Vec<f64>,
        eps: f64,
    },
    MaskedSquaredError {
        pred: Var,
        targets: Vec<f64>,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> Result<Var> {
        ensure_finite(&data, name)?;
        self.nodes.push(Node {
            value: Tensor::from_parts_unchecked(shape, data),
            op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// A constant input (no gradient is reported for it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to a named parameter of `store`.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims(a)?;
        let (k2, c) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), r, k, c);
        self.push(vec![r, c], data, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        self.push(self.value(a).shape().to_vec(), data, Op::Add(a, b), "add")
    }

    /// `a (r x c) + bias (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let (br, bc) = self.dims(bias)?;
        if br != 1 || bc != c {
            return Err(Error::Shape {
                op: "add_row",
                left: self.value(a).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in 0..r {
            for (x, bv) in data[row * c..(row + 1) * c].iter_mut().zip(b) {
                *x += bv;
            }
        }
        self.push(self.value(a).shape().to_vec(), data, Op::AddRow(a, bias), "add_row")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        self.push(self.value(a).shape().to_vec(), data, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.push(self.value(a).shape().to_vec(), data, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x / y);
        self.push(self.value(a).shape().to_vec(), data, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Scale(a, factor), "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Sigmoid(a), "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Relu(a), "relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| softplus(x)).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Softplus(a), "softplus")
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rows = self.dims(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(vec![rows, total], data, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Row-major reshape (no data movement).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.value(a).shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        let data = self.value(a).data().to_vec();
        self.push(vec![rows, cols], data, Op::Reshape(a), "reshape")
    }

    /// Select rows by index (repeats allowed); used for embedding lookups.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("gather index {bad} out of {r} rows")));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            vec![indices.len(), c],
            data,
            Op::GatherRows(a, indices.to_vec()),
            "gather_rows",
        )
    }

    /// Softmax of `x / temperature` over the whole tensor.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let n = self.value(x).len();
        self.segment_softmax(x, &[n], temperature)
    }

    /// Softmax of `x / temperature` computed independently on contiguous
    /// segments of the flattened input.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize], temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let src = self.value(x).data();
        if segments.iter().sum::<usize>() != src.len() || segments.contains(&0) {
            return Err(Error::Shape {
                op: "segment_softmax",
                left: self.value(x).shape().to_vec(),
                right: segments.to_vec(),
            });
        }
        let mut data = Vec::with_capacity(src.len());
        let mut offset = 0;
        for &len in segments {
            data.extend(softmax_slice(&src[offset..offset + len], temperature));
            offset += len;
        }
        let op = Op::SegmentSoftmax {
            input: x,
            segments: segments.to_vec(),
            temperature,
        };
        self.push(self.value(x).shape().to_vec(), data, op, "softmax")
    }

    /// Single-head scaled dot-product attention `softmax(Q K^T / sqrt(d)) V`,
    /// applied independently to consecutive blocks of `block` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, block: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, d) = self.dims(q)?;
        if block == 0 || rows % block != 0 {
            return Err(Error::Shape {
                op: "attention",
                left: self.value(q).shape().to_vec(),
                right: vec![block],
            });
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = Vec::with_capacity(rows * block);
        let mut out = Vec::with_capacity(rows * d);
        for b in 0..rows / block {
            let span = b * block * d..(b + 1) * block * d;
            let scores = matmul_a_bt(&qd[span.clone()], &kd[span.clone()], block, d, block);
            let mut attn = Vec::with_capacity(block * block);
            for r in 0..block {
                let row: Vec<f64> = scores[r * block..(r + 1) * block].iter().map(|s| s * scale).collect();
                attn.extend(softmax_slice(&row, 1.0));
            }
            out.extend(matmul_raw(&attn, &vd[span], block, block, d));
            weights.extend(attn);
        }
        let op = Op::Attention {
            q,
            k,
            v,
            block,
            weights,
        };
        self.push(vec![rows, d], out, op, "attention")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push(vec![1], vec![total], Op::Sum(a), "sum")
    }

    /// Element-wise clamp to per-element bounds; gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let n = self.value(a).len();
        if lo.len() != n || hi.len() != n {
            return Err(Error::Shape {
                op: "clamp",
                left: self.value(a).shape().to_vec(),
                right: vec![lo.len(), hi.len()],
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(&x, (&l, &h))| x.max(l).min(h))
            .collect();
        let op = Op::Clamp {
            input: a,
            lo: lo.to_vec(),
            hi: hi.to_vec(),
        };
        self.push(self.value(a).shape().to_vec(), data, op, "clamp")
    }

    /// `-sum(y log p + (1 - y) log(1 - p))` with `p` clipped to `[eps, 1 - eps]`.
    pub fn binary_cross_entropy(&mut self, pred: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != targets.len() {
            return Err(Error::Shape {
                op: "binary_cross_entropy",
                left: self.value(pred).shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let loss = p
            .iter()
            .zip(targets)
            .map(|(&q, &y)| {
                let q = q.clamp(eps, 1.0 - eps);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        let op = Op::BinaryCrossEntropy {
            pred,
            targets: targets.to_vec(),
            eps,
        };
        self.push(vec![1], vec![loss], op, "binary_cross_entropy")
    }

    /// `sum(mask * (pred - target)^2)`.
    pub fn masked_squared_error(&mut self, pred: Var, targets: &[f64], mask: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != targets.len() || p.len() != mask.len() {
            return Err(Error::Shape {
                op: "masked_squared_error",
                left: self.value(pred).shape().to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let loss = p
            .iter()
            .zip(targets.iter().zip(mask))
            .map(|(&q, (&y, &w))| w * (q - y) * (q - y))
            .sum();
        let op = Op::MaskedSquaredError {
            pred,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
        };
        self.push(vec![1], vec![loss], op, "masked_squared_error")
    }

    /// Reverse pass from a scalar `loss`; parameter gradients are added to `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(&grads) {
            if let (Some(name), Some(g)) = (&node.param, grad) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Gradient of a scalar `loss` with respect to every node (None when unreachable).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        grads.resize(self.nodes.len(), None);
        Ok(grads)
    }

    fn propagate(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = self.dims(*a)?;
                let c = self.dims(*b)?.1;
                let da = matmul_a_bt(up, self.value(*b).data(), r, c, k);
                let db = matmul_at_b(self.value(*a).data(), up, r, k, c);
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, up);
                accumulate(grads, *b, up);
            }
            Op::AddRow(a, bias) => {
                let c = self.dims(*a)?.1;
                let mut db = vec![0.0; c];
                for row in up.chunks(c) {
                    for (d, u) in db.iter_mut().zip(row) {
                        *d += u;
                    }
                }
                accumulate(grads, *a, up);
                accumulate(grads, *bias, &db);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, up);
                let neg: Vec<f64> = up.iter().map(|u| -u).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = zip_map(up, bv, |u, y| u * y);
                let db = zip_map(up, av, |u, x| u * x);
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                let da = zip_map(up, bv, |u, y| u / y);
                let db: Vec<f64> = up
                    .iter()
                    .zip(out.iter().zip(bv))
                    .map(|(u, (o, y))| -u * o / y)
                    .collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = up.iter().map(|u| u * f).collect();
                accumulate(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da = zip_map(up, out, |u, s| u * s * (1.0 - s));
                accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da = zip_map(up, self.value(*a).data(), |u, x| if x > 0.0 { u } else { 0.0 });
                accumulate(grads, *a, &da);
            }
            Op::Softplus(a) => {
                let da = zip_map(up, self.value(*a).data(), |u, x| u * sigmoid(x));
                accumulate(grads, *a, &da);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p)?.1;
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&up[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, &dp);
                    offset += w;
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, up),
            Op::GatherRows(a, indices) => {
                let (r, c) = self.dims(*a)?;
                let mut da = vec![0.0; r * c];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, u) in da[i * c..(i + 1) * c].iter_mut().zip(&up[k * c..(k + 1) * c]) {
                        *d += u;
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::SegmentSoftmax {
                input,
                segments,
                temperature,
            } => {
                let mut dx = Vec::with_capacity(out.len());
                let mut offset = 0;
                for &len in segments {
                    let s = &out[offset..offset + len];
                    let u = &up[offset..offset + len];
                    let dot: f64 = s.iter().zip(u).map(|(a, b)| a * b).sum();
                    dx.extend(s.iter().zip(u).map(|(si, ui)| si * (ui - dot) / temperature));
                    offset += len;
                }
                accumulate(grads, *input, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                block,
                weights,
            } => {
                let (rows, d) = self.dims(*q)?;
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let (mut dq, mut dk, mut dv) = (Vec::new(), Vec::new(), Vec::new());
                let b2 = block * block;
                for b in 0..rows / block {
                    let span = b * block * d..(b + 1) * block * d;
                    let attn = &weights[b * b2..(b + 1) * b2];
                    let dout = &up[span.clone()];
                    dv.extend(matmul_at_b(attn, dout, *block, *block, d));
                    let dattn = matmul_a_bt(dout, &vd[span.clone()], *block, d, *block);
                    let mut dscore = vec![0.0; b2];
                    for r in 0..*block {
                        let a_row = &attn[r * block..(r + 1) * block];
                        let g_row = &dattn[r * block..(r + 1) * block];
                        let dot: f64 = a_row.iter().zip(g_row).map(|(x, y)| x * y).sum();
                        for c in 0..*block {
                            dscore[r * block + c] = a_row[c] * (g_row[c] - dot) * scale;
                        }
                    }
                    dq.extend(matmul_raw(&dscore, &kd[span.clone()], *block, *block, d));
                    dk.extend(matmul_at_b(&dscore, &qd[span], *block, *block, d));
                }
                accumulate(grads, *q, &dq);
                accumulate(grads, *k, &dk);
                accumulate(grads, *v, &dv);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![up[0]; n]);
            }
            Op::Clamp { input, lo, hi } => {
                let da: Vec<f64> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(up)
                    .zip(lo.iter().zip(hi))
                    .map(|((&x, &u), (&l, &h))| if x > l && x < h { u } else { 0.0 })
                    .collect();
                accumulate(grads, *input, &da);
            }
            Op::BinaryCrossEntropy { pred, targets, eps } => {
                let da: Vec<f64> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&q, &y)| {
                        if q < *eps || q > 1.0 - eps {
                            0.0
                        } else {
                            up[0] * (-(y / q) + (1.0 - y) / (1.0 - q))
                        }
                    })
                    .collect();
                accumulate(grads, *pred, &da);
            }
            Op::MaskedSquaredError { pred, targets, mask } => {
                let da: Vec<f64> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(targets.iter().zip(mask))
                    .map(|(&q, (&y, &w))| up[0] * 2.0 * w * (q - y))
                    .collect();
                accumulate(grads, *pred, &da);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (x, d) in g.iter_mut().zip(delta) {
                *x += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}
