//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape once in reverse. Operations panic on shape mismatch: shapes
//! are validated by the public model API before anything reaches the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Matrix, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    SumRows(Var),
    MeanRows(Var),
    RowMax(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        let var = (*self.param_vars.get(id.index())?)?;
        self.wrt(var)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Leaf that receives a gradient but is not backed by a stored parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds the `1 × c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(r), (1, cols), "add_row shape");
        let mut value = self.value(a).clone();
        let row = self.value(r).data().to_vec();
        for i in 0..rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&row) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        self.push(value, Op::AddRow(a, r), rg)
    }

    /// Multiplies every row of `a` elementwise by the `1 × c` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(r), (1, cols), "mul_row shape");
        let mut value = self.value(a).clone();
        let row = self.value(r).data().to_vec();
        for i in 0..rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&row) {
                *v *= b;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        self.push(value, Op::MulRow(a, r), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a constant matrix (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let value = self.value(a).zip_map(c, |x, y| x + y);
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// `ln(1 + eˣ)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let s = crate::tensor::softmax(src.row(r));
            value.row_mut(r).copy_from_slice(&s);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let row = src.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
            for (o, &x) in value.row_mut(r).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        let mut value = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            for (o, &x) in value.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm(a, inv_std), rg)
    }

    /// Scales each row to unit L2 norm; rows with zero norm map to zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        let mut norms = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let n = crate::tensor::norm(src.row(r));
            norms.push(n);
            if n >= NORM_EPS {
                for (o, &x) in value.row_mut(r).iter_mut().zip(src.row(r)) {
                    *o = x / n;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::L2NormalizeRows(a, norms), rg)
    }

    /// Builds a `rows × cols` matrix whose k-th element (row-major) is the
    /// `index[k]`-th element of `a`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Matrix::new(rows, cols, data).expect("gather shape");
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, index), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let cols = self.shape(a).1;
        let index = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        self.gather(a, index, rows.len(), cols)
    }

    /// Picks `a[r, cols[r]]` for every row, giving a `rows × 1` column.
    pub fn pick(&mut self, a: Var, cols_per_row: &[usize]) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(rows, cols_per_row.len(), "pick length");
        let index = cols_per_row
            .iter()
            .enumerate()
            .map(|(r, &c)| r * cols + c)
            .collect();
        self.gather(a, index, rows, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats).expect("concat_rows columns");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Column sums as a `1 × c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_rows();
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Row-wise maximum as an `r × 1` column (ties go to the first column).
    pub fn row_max(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut arg = Vec::with_capacity(src.rows());
        let mut data = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let (mut best, mut best_v) = (0, f64::NEG_INFINITY);
            for (c, &v) in src.row(r).iter().enumerate() {
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            arg.push(best);
            data.push(best_v);
        }
        let value = Matrix::new(src.rows(), 1, data).expect("row_max");
        let rg = self.rg(a);
        self.push(value, Op::RowMax(a, arg), rg)
    }

    /// Sum of scalar nodes; `None` if `terms` is empty.
    pub fn add_all(&mut self, terms: &[Var]) -> Option<Var> {
        let (&first, rest) = terms.split_first()?;
        Some(rest.iter().fold(first, |acc, &t| self.add(acc, t)))
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Const | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if self.rg(*r) {
                    acc(*r, g.sum_rows());
                }
            }
            Op::MulRow(a, r) => {
                let row = self.value(*r);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for k in 0..ga.rows() {
                        for (v, b) in ga.row_mut(k).iter_mut().zip(row.data()) {
                            *v *= b;
                        }
                    }
                    acc(*a, ga);
                }
                if self.rg(*r) {
                    acc(*r, g.zip_map(self.value(*a), |x, y| x * y).sum_rows());
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 })),
            Op::Softplus(a) => acc(*a, g.zip_map(self.value(*a), |gx, x| gx * sigmoid(x))),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(self.value(*a), |gx, x| if x >= *lo && x <= *hi { gx } else { 0.0 }),
            ),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dotv = crate::tensor::dot(g.row(r), y.row(r));
                    for ((o, &gy), &yy) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yy * (gy - dotv);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((o, &gy), &ly) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = gy - libm::exp(ly) * gsum;
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let cols = y.cols() as f64;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.iter().sum::<f64>() / cols;
                    let mean_gy = crate::tensor::dot(gr, yr) / cols;
                    for ((o, &gy), &yy) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gy - mean_g - yy * mean_gy);
                    }
                }
                acc(*a, ga);
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    if norms[r] < NORM_EPS {
                        continue;
                    }
                    let dotv = crate::tensor::dot(g.row(r), y.row(r));
                    for ((o, &gy), &yy) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gy - yy * dotv) / norms[r];
                    }
                }
                acc(*a, ga);
            }
            Op::Gather(a, index) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Matrix::zeros(rows, cols);
                let dst = ga.data_mut();
                for (&src_i, &gv) in index.iter().zip(g.data()) {
                    dst[src_i] += gv;
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    if self.rg(*p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(*p, Matrix::new(rows, cols, slice).expect("concat grad"));
                    }
                    offset += rows;
                }
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                acc(*a, Matrix::filled(rows, cols, g.item()));
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let scale = if matches!(node.op, Op::MeanRows(_)) {
                    1.0 / rows as f64
                } else {
                    1.0
                };
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for (o, &gv) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv * scale;
                    }
                }
                acc(*a, ga);
            }
            Op::RowMax(a, arg) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Matrix::zeros(rows, cols);
                for (r, &c) in arg.iter().enumerate() {
                    ga.set(r, c, g.get(r, 0));
                }
                acc(*a, ga);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}
