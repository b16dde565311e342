//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the list in reverse and accumulates vector-Jacobian products into the
//! nodes that (transitively) depend on a `requires_grad` leaf.

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Clip01,
}

/// Second operand for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    None,
    Var(Var),
    Scalar(f32),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcasts a length-n vector over every row of a `B×n` matrix.
    AddRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Clip01(Var),
    Recip(Var),
    Sum(Var),
    SumSquares(Var),
    Mse(Var, Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to a single thread of execution.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss
    /// through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, as zeros when `v` received none.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input whose gradient will be reported.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        self.record(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Dispatches an elementwise operation; see [`Elementwise`].
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, operand: Operand) -> Result<Var> {
        match (kind, operand) {
            (Elementwise::Add, Operand::Var(b)) => self.add(a, b),
            (Elementwise::Add, Operand::Scalar(s)) => self.add_scalar(a, s),
            (Elementwise::Sub, Operand::Var(b)) => self.sub(a, b),
            (Elementwise::Sub, Operand::Scalar(s)) => self.add_scalar(a, -s),
            (Elementwise::Mul, Operand::Var(b)) => self.mul(a, b),
            (Elementwise::Mul | Elementwise::Scale, Operand::Scalar(s)) => self.scale(a, s),
            (Elementwise::Relu, Operand::None) => self.relu(a),
            (Elementwise::Clip01, Operand::None) => self.clip01(a),
            (kind, operand) => Err(Error::Contract(format!(
                "{kind:?} does not accept operand {operand:?}"
            ))),
        }
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.record(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.record(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.record(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// `a[i, j] + row[j]` for a `B×n` matrix and a length-n vector.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if ta.shape().len() != 2 || tr.len() != n {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tr.shape()),
            ));
        }
        let rv = tr.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(rv).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.record(out, Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.record(out, Op::Scale(a, s), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.record(out, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.record(out, Op::Relu(a), &[a], "relu")
    }

    pub fn clip01(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(0.0, 1.0));
        self.record(out, Op::Clip01(a), &[a], "clip01")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| 1.0 / x);
        self.record(out, Op::Recip(a), &[a], "recip")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| f64::from(x)).sum();
        self.record(Tensor::scalar(s as f32), Op::Sum(a), &[a], "sum")
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum();
        self.record(Tensor::scalar(s as f32), Op::SumSquares(a), &[a], "sum_squares")
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = f64::from(x) - f64::from(y);
                d * d
            })
            .sum();
        let out = Tensor::scalar((s / ta.len() as f64) as f32);
        self.record(out, Op::Mse(a, b), &[a, b], "mse")
    }

    /// Mean over rows of `-log softmax(logits)[target]`, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.rows() != targets.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {:?} with {} targets", t.shape(), targets.len()),
            ));
        }
        let classes = t.cols();
        if let Some(&bad) = targets.iter().find(|&&y| y >= classes) {
            return Err(Error::Index(format!(
                "target {bad} outside {classes} classes"
            )));
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut total = 0.0f64;
        for (i, &y) in targets.iter().enumerate() {
            let row = t.row_slice(i);
            let (p, lse) = softmax_row(row);
            total += lse - f64::from(row[y]);
            probs.extend(p);
        }
        let out = Tensor::scalar((total / targets.len() as f64) as f32);
        let op = Op::SoftmaxCe {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.record(out, op, &[logits], "softmax_cross_entropy")
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// The tape is left untouched, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(delta.data())
                    .for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    acc(*a, matmul_nt(g, tb));
                }
                if self.requires_grad(*b) {
                    acc(*b, matmul_tn(ta, g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, zip(g, tb, |gv, bv| gv * bv));
                acc(*b, zip(g, ta, |gv, av| gv * av));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.requires_grad(*row) {
                    let tr = self.value(*row);
                    let n = tr.len();
                    let mut col = vec![0.0f64; n];
                    for r in gd.chunks(n) {
                        col.iter_mut().zip(r).for_each(|(c, &v)| *c += f64::from(v));
                    }
                    let data = col.into_iter().map(|v| v as f32).collect();
                    acc(*row, Tensor::new(tr.shape().to_vec(), data).expect("row shape"));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let ta = self.value(*a);
                acc(*a, zip(g, ta, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Clip01(a) => {
                let ta = self.value(*a);
                acc(
                    *a,
                    zip(g, ta, |gv, x| if x > 0.0 && x < 1.0 { gv } else { 0.0 }),
                );
            }
            Op::Recip(a) => {
                // d(1/x) = -1/x² = -out²
                acc(*a, zip(g, out, |gv, o| -gv * o * o));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::full(ta.shape(), gd[0]));
            }
            Op::SumSquares(a) => {
                let ta = self.value(*a);
                let s = 2.0 * gd[0];
                acc(*a, ta.map(|x| s * x));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = 2.0 * gd[0] / ta.len() as f32;
                let diff = zip(ta, tb, |x, y| s * (x - y));
                if self.requires_grad(*b) {
                    acc(*b, diff.map(|x| -x));
                }
                acc(*a, diff);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let tl = self.value(*logits);
                let c = tl.cols();
                let s = gd[0] / targets.len() as f32;
                let mut d = probs.clone();
                for (i, &y) in targets.iter().enumerate() {
                    d[i * c + y] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= s);
                acc(*logits, Tensor::new(tl.shape().to_vec(), d).expect("logit shape"));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("matching shapes")
}

/// Stable softmax of one row; also returns log-sum-exp.
pub(crate) fn softmax_row(row: &[f32]) -> (Vec<f32>, f64) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v - max)).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs = exps.iter().map(|&e| (e / z) as f32).collect();
    (probs, f64::from(max) + z.ln())
}
