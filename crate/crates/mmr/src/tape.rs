//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operations append nodes to the tape and return `Var` handles. The
//! primitive catalog is sized to what the model needs: matmul, pointwise
//! arithmetic, broadcast multiply, concatenation along the last axis,
//! axis reductions, affine layers, Leaky ReLU, softmax, clamped log and
//! inverted dropout. Every primitive checks its output for NaN/Inf and
//! fails hard instead of propagating poison.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// add a scalar tensor to every element
    AddScalar(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// rank-2 lhs multiplied row-wise by a length-rows vector, or any
    /// tensor by a scalar tensor.
    BroadcastMul(Var, Var),
    /// multiply by a compile-time constant (not a differentiable input)
    Scale(Var, f64),
    ConcatLast(Var, Var),
    MeanAxis(Var, usize),
    SumAxis(Var, usize),
    Transpose(Var),
    Affine { x: Var, w: Var, b: Var },
    LeakyRelu(Var),
    /// softmax over the last axis (rank-1 vector or rank-2 rows)
    Softmax(Var),
    /// ln(max(x, eps)); eps = 0 gives the plain logarithm
    Log(Var, f64),
    /// inverted dropout: mask entries are 0 or 1/(1-p), fixed at record time
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-writer recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by `Tape::backward`. Untouched nodes get
/// zero tensors of the right shape.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    // ── forward primitives ──────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = eval_matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = eval_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    /// a + s with s a single-element tensor, broadcast over a.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("broadcast addend must be scalar, got {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).data()[0];
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| x + sv).collect(),
        )?;
        self.push(v, Op::AddScalar(a, s), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = eval_zip(self.value(a), self.value(b), "subtract", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "subtract")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = eval_zip(self.value(a), self.value(b), "multiply", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "multiply")
    }

    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = eval_broadcast_mul(self.value(a), self.value(b))?;
        self.push(v, Op::BroadcastMul(a, b), "broadcast-multiply")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| x * c).collect(),
        )?;
        self.push(v, Op::Scale(a, c), "scale")
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = eval_concat_last(self.value(a), self.value(b))?;
        self.push(v, Op::ConcatLast(a, b), "concat-last-axis")
    }

    /// Vertical stack of two rank-2 matrices with equal column counts,
    /// composed from transpose and concat-last-axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let at = self.transpose(a)?;
        let bt = self.transpose(b)?;
        let cat = self.concat_last(at, bt)?;
        self.transpose(cat)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = eval_reduce_axis(self.value(a), axis, true)?;
        self.push(v, Op::MeanAxis(a, axis), "mean-over-axis")
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = eval_reduce_axis(self.value(a), axis, false)?;
        self.push(v, Op::SumAxis(a, axis), "sum-over-axis")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", t.shape()),
            });
        }
        let v = t.transpose2();
        self.push(v, Op::Transpose(a), "transpose")
    }

    /// x·W + bias, with x a vector or a matrix of row vectors.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = eval_affine(self.value(x), self.value(w), self.value(b))?;
        self.push(v, Op::Affine { x, w, b }, "affine")
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .map(|&x| if x > 0.0 { x } else { LEAKY_SLOPE * x })
                .collect(),
        )?;
        self.push(v, Op::LeakyRelu(a), "leaky-relu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = eval_softmax(self.value(a))?;
        self.push(v, Op::Softmax(a), "softmax-over-axis")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.log_clamped(a, 0.0)
    }

    /// ln(max(x, eps)); the classification head uses eps = 1e-12 so a
    /// saturated softmax cannot produce -inf.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&x| x.max(eps).ln()).collect(),
        )?;
        self.push(v, Op::Log(a, eps), "log")
    }

    /// Inverted dropout. `train = false` is the identity, element-exact.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {} outside [0,1)", p)));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        self.push(v, Op::Dropout(a, mask), "dropout-train")
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Accumulates adjoints of `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("loss var not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = grads[i].clone();
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (da, db) = adjoint_matmul(self.value(*a), self.value(*b), &g);
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::AddScalar(a, s) => {
                    accumulate(&mut grads[a.0], &g);
                    let ds = Tensor::new(
                        self.value(*s).shape().to_vec(),
                        vec![g.data().iter().sum()],
                    )
                    .expect("scalar adjoint");
                    accumulate(&mut grads[s.0], &ds);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    let neg = map(&g, |x| -x);
                    accumulate(&mut grads[b.0], &neg);
                }
                Op::Mul(a, b) => {
                    let da = zip(&g, self.value(*b), |x, y| x * y);
                    let db = zip(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::BroadcastMul(a, b) => {
                    let (da, db) = adjoint_broadcast_mul(self.value(*a), self.value(*b), &g);
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Scale(a, c) => {
                    let da = map(&g, |x| x * c);
                    accumulate(&mut grads[a.0], &da);
                }
                Op::ConcatLast(a, b) => {
                    let (da, db) = adjoint_concat_last(self.value(*a), self.value(*b), &g);
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::MeanAxis(a, axis) => {
                    let da = adjoint_reduce(self.value(*a), *axis, &g, true);
                    accumulate(&mut grads[a.0], &da);
                }
                Op::SumAxis(a, axis) => {
                    let da = adjoint_reduce(self.value(*a), *axis, &g, false);
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[a.0], &g.transpose2());
                }
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) = adjoint_affine(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads[x.0], &dx);
                    accumulate(&mut grads[w.0], &dw);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::LeakyRelu(a) => {
                    let da = zip(&g, self.value(*a), |gy, x| {
                        gy * if x > 0.0 { 1.0 } else { LEAKY_SLOPE }
                    });
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Softmax(a) => {
                    let da = adjoint_softmax(&self.nodes[i].value, &g);
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Log(a, eps) => {
                    let da = zip(&g, self.value(*a), |gy, x| {
                        if x > *eps {
                            gy / x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Dropout(a, mask) => {
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(gy, m)| gy * m).collect(),
                    )
                    .expect("dropout mask length");
                    accumulate(&mut grads[a.0], &da);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Recomputes every node from its record and checks the stored forward
    /// values bitwise.
    pub fn replay_check(&self) -> Result<bool> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::MatMul(a, b) => eval_matmul(&values[a.0], &values[b.0])?,
                Op::Add(a, b) => eval_zip(&values[a.0], &values[b.0], "add", |x, y| x + y)?,
                Op::AddScalar(a, s) => {
                    let sv = values[s.0].data()[0];
                    Tensor::new(
                        values[a.0].shape().to_vec(),
                        values[a.0].data().iter().map(|x| x + sv).collect(),
                    )?
                }
                Op::Sub(a, b) => eval_zip(&values[a.0], &values[b.0], "subtract", |x, y| x - y)?,
                Op::Mul(a, b) => eval_zip(&values[a.0], &values[b.0], "multiply", |x, y| x * y)?,
                Op::BroadcastMul(a, b) => eval_broadcast_mul(&values[a.0], &values[b.0])?,
                Op::Scale(a, c) => Tensor::new(
                    values[a.0].shape().to_vec(),
                    values[a.0].data().iter().map(|x| x * c).collect(),
                )?,
                Op::ConcatLast(a, b) => eval_concat_last(&values[a.0], &values[b.0])?,
                Op::MeanAxis(a, axis) => eval_reduce_axis(&values[a.0], *axis, true)?,
                Op::SumAxis(a, axis) => eval_reduce_axis(&values[a.0], *axis, false)?,
                Op::Transpose(a) => values[a.0].transpose2(),
                Op::Affine { x, w, b } => eval_affine(&values[x.0], &values[w.0], &values[b.0])?,
                Op::LeakyRelu(a) => Tensor::new(
                    values[a.0].shape().to_vec(),
                    values[a.0]
                        .data()
                        .iter()
                        .map(|&x| if x > 0.0 { x } else { LEAKY_SLOPE * x })
                        .collect(),
                )?,
                Op::Softmax(a) => eval_softmax(&values[a.0])?,
                Op::Log(a, eps) => Tensor::new(
                    values[a.0].shape().to_vec(),
                    values[a.0].data().iter().map(|&x| x.max(*eps).ln()).collect(),
                )?,
                Op::Dropout(a, mask) => Tensor::new(
                    values[a.0].shape().to_vec(),
                    values[a.0].data().iter().zip(mask).map(|(x, m)| x * m).collect(),
                )?,
            };
            if v.shape() != node.value.shape()
                || v.data().iter().zip(node.value.data()).any(|(x, y)| x.to_bits() != y.to_bits())
            {
                return Ok(false);
            }
            values.push(v);
        }
        Ok(true)
    }
}

// ── shared forward kernels (used by both record and replay) ─────────

fn eval_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (r, ca) = (a.rows(), a.cols());
            let (rb, k) = (b.rows(), b.cols());
            if ca != rb {
                return Err(shape_err("matmul", a, b));
            }
            let mut out = Tensor::zeros(vec![r, k]);
            for i in 0..r {
                for p in 0..ca {
                    let av = a.at(i, p);
                    if av == 0.0 {
                        continue;
                    }
                    let brow = b.row(p);
                    let orow = &mut out.data_mut()[i * k..(i + 1) * k];
                    for j in 0..k {
                        orow[j] += av * brow[j];
                    }
                }
            }
            Ok(out)
        }
        (1, 2) => {
            let c = a.shape()[0];
            if c != b.rows() {
                return Err(shape_err("matmul", a, b));
            }
            let k = b.cols();
            let mut out = vec![0.0; k];
            for p in 0..c {
                let av = a.data()[p];
                let brow = b.row(p);
                for j in 0..k {
                    out[j] += av * brow[j];
                }
            }
            Ok(Tensor::from_vec(out))
        }
        (2, 1) => {
            if a.cols() != b.shape()[0] {
                return Err(shape_err("matmul", a, b));
            }
            let out = (0..a.rows())
                .map(|i| a.row(i).iter().zip(b.data()).map(|(x, y)| x * y).sum())
                .collect();
            Ok(Tensor::from_vec(out))
        }
        _ => Err(shape_err("matmul", a, b)),
    }
}

fn adjoint_matmul(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let da = eval_matmul(g, &b.transpose2()).expect("matmul adjoint");
            let db = eval_matmul(&a.transpose2(), g).expect("matmul adjoint");
            (da, db)
        }
        (1, 2) => {
            // y = a·B, a: [c], B: c×k, g: [k]
            let da = eval_matmul(b, g).expect("matmul adjoint"); // B·g : [c]
            let db = outer(a, g);
            (da, db)
        }
        (2, 1) => {
            // y = A·b, g: [r]
            let da = outer(g, b);
            let db = eval_matmul(&a.transpose2(), g).expect("matmul adjoint");
            (da, db)
        }
        _ => unreachable!("recorded matmul had valid ranks"),
    }
}

fn outer(u: &Tensor, v: &Tensor) -> Tensor {
    let (n, m) = (u.len(), v.len());
    let mut out = Tensor::zeros(vec![n, m]);
    for i in 0..n {
        for j in 0..m {
            out.data_mut()[i * m + j] = u.data()[i] * v.data()[j];
        }
    }
    out
}

fn eval_zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
}

fn eval_broadcast_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.len() == 1 {
        let s = b.data()[0];
        return Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * s).collect());
    }
    if a.rank() == 2 && b.rank() == 1 && b.len() == a.rows() {
        let c = a.cols();
        let mut out = a.clone();
        for i in 0..a.rows() {
            let s = b.data()[i];
            for x in &mut out.data_mut()[i * c..(i + 1) * c] {
                *x *= s;
            }
        }
        return Ok(out);
    }
    Err(shape_err("broadcast-multiply", a, b))
}

fn adjoint_broadcast_mul(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    if b.len() == 1 {
        let s = b.data()[0];
        let da = map(g, |x| x * s);
        let db = Tensor::new(
            b.shape().to_vec(),
            vec![g.data().iter().zip(a.data()).map(|(x, y)| x * y).sum()],
        )
        .expect("scalar adjoint");
        (da, db)
    } else {
        let c = a.cols();
        let mut da = Tensor::zeros(a.shape().to_vec());
        let mut db = Tensor::zeros(b.shape().to_vec());
        for i in 0..a.rows() {
            let s = b.data()[i];
            let mut acc = 0.0;
            for j in 0..c {
                let idx = i * c + j;
                da.data_mut()[idx] = g.data()[idx] * s;
                acc += g.data()[idx] * a.data()[idx];
            }
            db.data_mut()[i] = acc;
        }
        (da, db)
    }
}

fn eval_concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.rank(), b.rank()) {
        (1, 1) => {
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Ok(Tensor::from_vec(data))
        }
        (2, 2) if a.rows() == b.rows() => {
            let (r, ca, cb) = (a.rows(), a.cols(), b.cols());
            let mut data = Vec::with_capacity(r * (ca + cb));
            for i in 0..r {
                data.extend_from_slice(a.row(i));
                data.extend_from_slice(b.row(i));
            }
            Tensor::matrix(r, ca + cb, data)
        }
        _ => Err(shape_err("concat-last-axis", a, b)),
    }
}

fn adjoint_concat_last(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    match (a.rank(), b.rank()) {
        (1, 1) => {
            let da = Tensor::from_vec(g.data()[..a.len()].to_vec());
            let db = Tensor::from_vec(g.data()[a.len()..].to_vec());
            (da, db)
        }
        (2, 2) => {
            let (r, ca, cb) = (a.rows(), a.cols(), b.cols());
            let mut da = Tensor::zeros(vec![r, ca]);
            let mut db = Tensor::zeros(vec![r, cb]);
            for i in 0..r {
                let grow = g.row(i);
                da.data_mut()[i * ca..(i + 1) * ca].copy_from_slice(&grow[..ca]);
                db.data_mut()[i * cb..(i + 1) * cb].copy_from_slice(&grow[ca..]);
            }
            (da, db)
        }
        _ => unreachable!("recorded concat had valid ranks"),
    }
}

fn eval_reduce_axis(a: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    match a.rank() {
        1 => {
            if axis != 0 {
                return Err(Error::ShapeMismatch {
                    op: "reduce-axis",
                    detail: format!("axis {} on rank-1 tensor", axis),
                });
            }
            let s: f64 = a.data().iter().sum();
            let n = a.len() as f64;
            Ok(Tensor::scalar(if mean { s / n } else { s }))
        }
        2 => {
            let (r, c) = (a.rows(), a.cols());
            match axis {
                0 => {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (j, o) in out.iter_mut().enumerate() {
                            *o += a.at(i, j);
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|x| *x /= r as f64);
                    }
                    Ok(Tensor::from_vec(out))
                }
                1 => {
                    let out = (0..r)
                        .map(|i| {
                            let s: f64 = a.row(i).iter().sum();
                            if mean {
                                s / c as f64
                            } else {
                                s
                            }
                        })
                        .collect();
                    Ok(Tensor::from_vec(out))
                }
                _ => Err(Error::ShapeMismatch {
                    op: "reduce-axis",
                    detail: format!("axis {} on rank-2 tensor", axis),
                }),
            }
        }
        _ => Err(Error::ShapeMismatch {
            op: "reduce-axis",
            detail: format!("unsupported rank {:?}", a.shape()),
        }),
    }
}

fn adjoint_reduce(a: &Tensor, axis: usize, g: &Tensor, mean: bool) -> Tensor {
    let mut da = Tensor::zeros(a.shape().to_vec());
    match a.rank() {
        1 => {
            let gy = g.data()[0] * if mean { 1.0 / a.len() as f64 } else { 1.0 };
            da.data_mut().iter_mut().for_each(|x| *x = gy);
        }
        2 => {
            let (r, c) = (a.rows(), a.cols());
            match axis {
                0 => {
                    let scale = if mean { 1.0 / r as f64 } else { 1.0 };
                    for i in 0..r {
                        for j in 0..c {
                            da.data_mut()[i * c + j] = g.data()[j] * scale;
                        }
                    }
                }
                1 => {
                    let scale = if mean { 1.0 / c as f64 } else { 1.0 };
                    for i in 0..r {
                        for j in 0..c {
                            da.data_mut()[i * c + j] = g.data()[i] * scale;
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
        _ => unreachable!(),
    }
    da
}

fn eval_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || b.rank() != 1 || b.len() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "affine",
            detail: format!("w {:?}, b {:?}", w.shape(), b.shape()),
        });
    }
    let mut y = eval_matmul(x, w)?;
    match y.rank() {
        1 => {
            for (o, bias) in y.data_mut().iter_mut().zip(b.data()) {
                *o += bias;
            }
        }
        2 => {
            let c = y.cols();
            for i in 0..y.rows() {
                for j in 0..c {
                    y.data_mut()[i * c + j] += b.data()[j];
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(y)
}

fn adjoint_affine(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (dx, dw) = adjoint_matmul(x, w, g);
    let db = match g.rank() {
        1 => g.clone(),
        2 => eval_reduce_axis(g, 0, false).expect("bias adjoint"),
        _ => unreachable!(),
    };
    (dx, dw, db)
}

fn eval_softmax(a: &Tensor) -> Result<Tensor> {
    match a.rank() {
        1 => Ok(Tensor::from_vec(softmax_slice(a.data()))),
        2 => {
            let (r, c) = (a.rows(), a.cols());
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                data.extend_from_slice(&softmax_slice(a.row(i)));
            }
            Tensor::matrix(r, c, data)
        }
        _ => Err(Error::ShapeMismatch {
            op: "softmax-over-axis",
            detail: format!("unsupported rank {:?}", a.shape()),
        }),
    }
}

fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn adjoint_softmax(y: &Tensor, g: &Tensor) -> Tensor {
    // dx = y ⊙ (g − <g, y>) along the softmaxed axis
    let mut da = Tensor::zeros(y.shape().to_vec());
    let rows = if y.rank() == 2 { y.rows() } else { 1 };
    let c = if y.rank() == 2 { y.cols() } else { y.len() };
    for i in 0..rows {
        let yr = &y.data()[i * c..(i + 1) * c];
        let gr = &g.data()[i * c..(i + 1) * c];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            da.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
        }
    }
    da
}

fn accumulate(into: &mut Tensor, g: &Tensor) {
    debug_assert_eq!(into.shape(), g.shape());
    for (a, b) in into.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("map")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    eval_zip(a, b, "zip", f).expect("zip shapes")
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) }
}
