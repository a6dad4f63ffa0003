use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
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
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Transpose {
        a: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    ScaleBy {
        a: Var,
        s: Var,
    },
    Sigmoid {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    Reshape {
        a: Var,
    },
    Concat {
        a: Var,
        b: Var,
        left: usize,
        right: usize,
    },
    Slice {
        a: Var,
        start: usize,
        len: usize,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        classes: usize,
    },
    Sum {
        a: Var,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamic reverse-mode tape. Nodes are appended in execution order, so the
/// node list is already topologically sorted.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input tensor. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Records a copy of a parameter as a tracked leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut copy = t.clone();
        copy.requires_grad = true;
        self.leaf(copy)
    }

    /// Records a copy of `t` as an untracked constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut copy = t.clone();
        copy.requires_grad = false;
        self.leaf(copy)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Smallest |input| over every ReLU on the tape; `None` if there are no
    /// ReLUs. Finite-difference checks use it to stay clear of kinks.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).iter().map(|x| x.abs()))
            .reduce(f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn emit(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let mut t = Tensor::new(shape, data).expect("op produced consistent shape");
        t.requires_grad = inputs.iter().any(|&v| self.tracked(v));
        self.push(t, op)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`. `b` is either `[k, n]`, shared across all leading
    /// axes of `a`, or `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if k != kb || (!shared_rhs && &sb[..sb.len() - 2] != lead) {
            return Err(self.shape_err("matmul", a, b));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a), self.value(b));
            if shared_rhs {
                kernels::gemm_nn(ad, bd, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    kernels::gemm_nn(
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        };
        Ok(self.emit(&shape, out, op, &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (rows, cols) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch = sa[..sa.len() - 2].iter().product();
        let out = transpose_blocks(self.value(a), batch, rows, cols);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([cols, rows]);
        Ok(self.emit(&shape, out, Op::Transpose { a, batch, rows, cols }, &[a]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.emit(&shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.emit(&shape, out, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.emit(&shape, out, Op::Mul { a, b }, &[a, b]))
    }

    /// `a[.., n] + bias[n]`, broadcasting the bias over every leading index.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        if sb.len() != 1 || sa.last() != sb.first() {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let n = sb[0];
        let bd = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &b)| x + b))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(&shape, out, Op::AddBias { a, bias }, &[a, bias]))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.emit(&shape, out, Op::Scale { a, c }, &[a])
    }

    /// Multiplies by a (possibly learnable) one-element tensor.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.tensor(s).numel() != 1 {
            return Err(self.shape_err("scale_by", a, s));
        }
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(&shape, out, Op::ScaleBy { a, s }, &[a, s]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.emit(&shape, out, Op::Sigmoid { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.emit(&shape, out, Op::Relu { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.emit(&shape, out, Op::Tanh { a }, &[a])
    }

    /// Softmax over the last axis, i.e. over each row of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let cols = match self.shape(a).last() {
            Some(&c) => c,
            None => {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    lhs: vec![],
                    rhs: vec![],
                })
            }
        };
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for (row, dst) in src.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            kernels::softmax_row(row, dst);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.emit(&shape, out, Op::Softmax { a, cols }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(a).numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        Ok(self.emit(shape, out, Op::Reshape { a }, &[a]))
    }

    /// Concatenation along the last axis; all other axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(self.shape_err("concat_last", a, b));
        }
        let (left, right) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = left + right;
        let mut out = Vec::with_capacity(self.tensor(a).numel() + self.tensor(b).numel());
        for (ra, rb) in self.value(a).chunks_exact(left).zip(self.value(b).chunks_exact(right)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        Ok(self.emit(&shape, out, Op::Concat { a, b, left, right }, &[a, b]))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let cols = match sa.last() {
            Some(&c) if len > 0 && start + len <= c => c,
            _ => {
                return Err(Error::Shape {
                    op: "slice_last",
                    lhs: sa,
                    rhs: vec![start, len],
                })
            }
        };
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = sa;
        *shape.last_mut().unwrap() = len;
        Ok(self.emit(&shape, out, Op::Slice { a, start, len, cols }, &[a]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![labels.len()],
            });
        }
        let classes = sl[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: classes,
            });
        }
        let total: f64 = self
            .value(logits)
            .chunks_exact(classes)
            .zip(labels)
            .map(|(row, &y)| kernels::log_sum_exp(row) - row[y])
            .sum();
        let loss = total / labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            classes,
        };
        Ok(self.emit(&[], vec![loss], op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.emit(&[], vec![s], Op::Sum { a }, &[a])
    }

    /// Populates `grad` on every tracked node that `loss` depends on.
    /// Gradients add onto whatever a previous call left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.tensor(loss);
        if root.numel() != 1 {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx].value;
            if node.grad.is_some() {
                node.accumulate_grad(&g);
            } else {
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                if self.tracked(a) {
                    let bd = self.value(b);
                    let da = slot(grads, a, batch * m * k);
                    if shared_rhs {
                        kernels::gemm_nt(g, bd, da, batch * m, n, k);
                    } else {
                        for i in 0..batch {
                            kernels::gemm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                if self.tracked(b) {
                    let ad = self.value(a);
                    if shared_rhs {
                        let db = slot(grads, b, k * n);
                        kernels::gemm_tn(ad, g, db, batch * m, k, n);
                    } else {
                        let db = slot(grads, b, batch * k * n);
                        for i in 0..batch {
                            kernels::gemm_tn(
                                &ad[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            &Op::Transpose { a, batch, rows, cols } => {
                if self.tracked(a) {
                    let back = transpose_blocks(g, batch, cols, rows);
                    add_into(slot(grads, a, back.len()), &back);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.tracked(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if self.tracked(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.tracked(b) {
                    let db = slot(grads, b, g.len());
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.tracked(v) {
                        let od = self.value(other);
                        let dv = slot(grads, v, g.len());
                        for ((d, &gi), &o) in dv.iter_mut().zip(g).zip(od) {
                            *d += gi * o;
                        }
                    }
                }
            }
            &Op::AddBias { a, bias } => {
                if self.tracked(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.tracked(bias) {
                    let n = self.tensor(bias).numel();
                    let db = slot(grads, bias, n);
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Scale { a, c } => {
                if self.tracked(a) {
                    kernels::axpy(c, g, slot(grads, a, g.len()));
                }
            }
            &Op::ScaleBy { a, s } => {
                if self.tracked(a) {
                    let sv = self.value(s)[0];
                    kernels::axpy(sv, g, slot(grads, a, g.len()));
                }
                if self.tracked(s) {
                    let ds = kernels::dot(g, self.value(a));
                    slot(grads, s, 1)[0] += ds;
                }
            }
            &Op::Sigmoid { a } => {
                if self.tracked(a) {
                    let da = slot(grads, a, g.len());
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            &Op::Relu { a } => {
                if self.tracked(a) {
                    let x = self.value(a);
                    let da = slot(grads, a, g.len());
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::Tanh { a } => {
                if self.tracked(a) {
                    let da = slot(grads, a, g.len());
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            &Op::Softmax { a, cols } => {
                if self.tracked(a) {
                    let da = slot(grads, a, g.len());
                    for ((drow, grow), yrow) in da
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(out.chunks_exact(cols))
                    {
                        let s = kernels::dot(grow, yrow);
                        for ((d, &gi), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gi - s);
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if self.tracked(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
            }
            &Op::Concat { a, b, left, right } => {
                let width = left + right;
                if self.tracked(a) {
                    let da = slot(grads, a, g.len() / width * left);
                    for (drow, grow) in da.chunks_exact_mut(left).zip(g.chunks_exact(width)) {
                        add_into(drow, &grow[..left]);
                    }
                }
                if self.tracked(b) {
                    let db = slot(grads, b, g.len() / width * right);
                    for (drow, grow) in db.chunks_exact_mut(right).zip(g.chunks_exact(width)) {
                        add_into(drow, &grow[left..]);
                    }
                }
            }
            &Op::Slice { a, start, len, cols } => {
                if self.tracked(a) {
                    let da = slot(grads, a, g.len() / len * cols);
                    for (drow, grow) in da.chunks_exact_mut(cols).zip(g.chunks_exact(len)) {
                        add_into(&mut drow[start..start + len], grow);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                classes,
            } => {
                let logits = *logits;
                if self.tracked(logits) {
                    let scale = g[0] / labels.len() as f64;
                    let x = self.value(logits);
                    let dl = slot(grads, logits, x.len());
                    let mut p = vec![0.0; *classes];
                    for ((drow, xrow), &y) in dl.chunks_exact_mut(*classes).zip(x.chunks_exact(*classes)).zip(labels) {
                        kernels::softmax_row(xrow, &mut p);
                        p[y] -= 1.0;
                        kernels::axpy(scale, &p, drow);
                    }
                }
            }
            &Op::Sum { a } => {
                if self.tracked(a) {
                    let da = slot(grads, a, self.tensor(a).numel());
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_blocks(src: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..batch {
        let off = bi * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[off + c * rows + r] = src[off + r * cols + c];
            }
        }
    }
    out
}
