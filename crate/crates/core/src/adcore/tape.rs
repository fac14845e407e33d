//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede it
//! and the backward sweep is a single reverse pass. Only leaves created with
//! [`Tape::leaf`] receive gradients; constants and anything computed purely
//! from constants are skipped during the sweep.

use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, bcast: Bcast },
    Mul { a: Var, b: Var, bcast: Bcast },
    Scale { a: Var, c: f64 },
    Relu(Var),
    Exp(Var),
    Log { a: Var, floor: f64 },
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SqL2(Var),
    ConcatRows(Vec<Var>),
    Dropout { a: Var, mask: Tensor },
    GradReverse { a: Var, lambda: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf. `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    /// `a · b`, or `a · bᵀ` when `trans_b` is set.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n, bs) = if trans_b {
            (bv.cols(), bv.rows(), (1, bv.cols()))
        } else {
            (bv.rows(), bv.cols(), (bv.cols(), 1))
        };
        if k != k2 || av.shape().len() != 2 || bv.shape().len() != 2 {
            let op = if trans_b { "matmul_nt" } else { "matmul" };
            return Err(shape_err(op, format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), bs, &mut out, 0.0);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn bcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Ok(Bcast::Same)
        } else if bv.len() == 1 {
            Ok(Bcast::Scalar)
        } else if bv.rows() == 1 && bv.cols() == av.cols() && bv.shape().len() <= 2 {
            Ok(Bcast::Row)
        } else {
            Err(shape_err(op, format!("{:?} with {:?}", av.shape(), bv.shape())))
        }
    }

    fn broadcast_zip(
        a: &Tensor,
        b: &Tensor,
        bcast: Bcast,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let cols = a.cols().max(1);
        let data = match bcast {
            Bcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => {
                let y = b.item();
                a.data().iter().map(|&x| f(x, y)).collect()
            }
            Bcast::Row => a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % cols]))
                .collect(),
        };
        Tensor::new(a.shape().to_vec(), data).expect("broadcast keeps shape")
    }

    /// Elementwise sum. `b` may also be a scalar or a row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.bcast_kind("add", a, b)?;
        let value = Self::broadcast_zip(self.value(a), self.value(b), bcast, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b, bcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.bcast_kind("mul", a, b)?;
        let value = Self::broadcast_zip(self.value(a), self.value(b), bcast, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b, bcast }, rg))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.log_clamped(a, 0.0)
    }

    /// `ln(max(x, floor))`; entries at or below `floor` get zero gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let value = self
            .value(a)
            .map(|x| if floor > 0.0 { x.max(floor).ln() } else { x.ln() });
        let rg = self.rg(&[a]);
        self.push(value, Op::Log { a, floor }, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Empty { op: "mean" });
        }
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Sum of squared entries.
    pub fn sq_l2(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SqL2(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "concat_rows" });
        }
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::vstack(&refs).map_err(|_| {
            shape_err(
                "concat_rows",
                format!("{:?}", refs.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()),
            )
        })?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Multiplies by a frozen mask (already scaled for inverted dropout).
    pub fn dropout(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != mask.shape() {
            return Err(shape_err("dropout", format!("{:?} vs mask {:?}", av.shape(), mask.shape())));
        }
        let value = av.zip_map(&mask, |x, m| x * m)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Dropout { a, mask }, rg))
    }

    /// Identity forward; the backward pass multiplies the adjoint by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Var {
        let value = self.value(a).clone();
        let rg = self.rg(&[a]);
        self.push(value, Op::GradReverse { a, lambda }, rg)
    }

    /// Propagates adjoints from a scalar output back to every leaf.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(Error::NonScalarOutput {
                shape: ov.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        adj[out.0] = Some(Tensor::full(ov.shape(), 1.0));
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                op => self.propagate(op, &node.value, g, &mut adj),
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn reduce_bcast(&self, g: Tensor, b: Var, bcast: Bcast) -> Tensor {
        let shape = self.value(b).shape().to_vec();
        match bcast {
            Bcast::Same => g,
            Bcast::Scalar => Tensor::full(&shape, g.sum()),
            Bcast::Row => {
                let cols = g.cols();
                let mut acc = vec![0.0; cols];
                for row in g.iter_rows() {
                    for (a, &x) in acc.iter_mut().zip(row) {
                        *a += x;
                    }
                }
                Tensor::new(shape, acc).expect("row broadcast keeps width")
            }
        }
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: Tensor, adj: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = value.cols();
                if self.requires_grad(*a) {
                    // dA[m,k] = dC[m,n] · B̂ᵀ
                    let bs = if *trans_b { (bv.cols(), 1) } else { (1, bv.cols()) };
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), bv.data(), bs, &mut da, 0.0);
                    self.accumulate(adj, *a, Tensor::matrix(m, k, da).unwrap());
                }
                if self.requires_grad(*b) {
                    let db = if *trans_b {
                        // dB[n,k] = dCᵀ[n,m] · A[m,k]
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), (1, n), av.data(), (k, 1), &mut db, 0.0);
                        Tensor::matrix(n, k, db).unwrap()
                    } else {
                        // dB[k,n] = Aᵀ[k,m] · dC[m,n]
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), &mut db, 0.0);
                        Tensor::matrix(k, n, db).unwrap()
                    };
                    self.accumulate(adj, *b, db);
                }
            }
            Op::Add { a, b, bcast } => {
                if self.requires_grad(*b) {
                    let gb = self.reduce_bcast(g.clone(), *b, *bcast);
                    self.accumulate(adj, *b, gb);
                }
                self.accumulate(adj, *a, g);
            }
            Op::Mul { a, b, bcast } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = Self::broadcast_zip(&g, bv, *bcast, |x, y| x * y);
                    self.accumulate(adj, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = g.zip_map(av, |x, y| x * y).unwrap();
                    let gb = self.reduce_bcast(gb, *b, *bcast);
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Scale { a, c } => self.accumulate(adj, *a, g.map(|x| x * c)),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }).unwrap();
                self.accumulate(adj, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(value, |x, y| x * y).unwrap();
                self.accumulate(adj, *a, ga);
            }
            Op::Log { a, floor } => {
                let floor = *floor;
                let ga = g
                    .zip_map(self.value(*a), |x, y| {
                        if floor > 0.0 && y <= floor {
                            0.0
                        } else {
                            x / y
                        }
                    })
                    .unwrap();
                self.accumulate(adj, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g;
                for r in 0..value.rows() {
                    let y = value.row(r);
                    let row = ga.row_mut(r);
                    let dot: f64 = row.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for (gi, yi) in row.iter_mut().zip(y) {
                        *gi = yi * (*gi - dot);
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(adj, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.item() / av.len() as f64;
                self.accumulate(adj, *a, Tensor::full(av.shape(), s));
            }
            Op::SqL2(a) => {
                let s = 2.0 * g.item();
                self.accumulate(adj, *a, self.value(*a).map(|x| s * x));
            }
            Op::ConcatRows(parts) => {
                let cols = value.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    if self.requires_grad(*p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        self.accumulate(adj, *p, Tensor::new(pv.shape().to_vec(), slice).unwrap());
                    }
                    offset += pv.rows() * cols;
                }
            }
            Op::Dropout { a, mask } => {
                let ga = g.zip_map(mask, |x, m| x * m).unwrap();
                self.accumulate(adj, *a, ga);
            }
            Op::GradReverse { a, lambda } => {
                let l = *lambda;
                self.accumulate(adj, *a, g.map(|x| -l * x));
            }
        }
    }
}

/// Row-wise softmax with per-row max shift.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() || x.cols() == 0 {
        return Err(Error::Empty { op: "softmax_rows" });
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}
