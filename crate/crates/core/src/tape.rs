//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints, skipping subgraphs that do not depend on
//! any trainable leaf. Matrix products use a fixed summation order so that evaluating a batch of
//! rows gives bit-identical results to evaluating the rows one at a time.

use std::borrow::Cow;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::gaussmath::JITTER_LADDER;
use crate::geometry::wrap_angle;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
struct ConvShape {
    h: usize,
    w: usize,
    cin: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    WrapAngle(Var),
    Sum(Var),
    ColSum(Var),
    RowSum(Var),
    Slice { src: Var, r0: usize, c0: usize },
    HStack(Vec<Var>),
    VStack(Vec<Var>),
    RepeatRows(Var),
    Reshape(Var),
    Diag(Var),
    DiagMatrix(Var),
    Cholesky(Var),
    Inverse(Var),
    SoftmaxCol(Var),
    Clamp { src: Var, mask: DMatrix<f64> },
    MinEigenvalue { src: Var, vec: nalgebra::DVector<f64> },
    Conv2d { input: Var, weight: Var, bias: Var, cols: DMatrix<f64>, shape: ConvShape },
}

struct Node<'a> {
    value: Cow<'a, DMatrix<f64>>,
    op: Op,
    grad: bool,
}

/// Operation recorder; values of borrowed leaves live as long as `'a`.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<DMatrix<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `a · b` with a fixed per-entry summation order.
pub fn matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimensions");
    let at = a.transpose();
    let (m, n) = (a.nrows(), b.ncols());
    let mut out = DMatrix::zeros(m, n);
    for j in 0..n {
        let bj = b.column(j);
        let bj = bj.as_slice();
        for i in 0..m {
            let ai = at.column(i);
            out[(i, j)] = dot(ai.as_slice(), bj);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &DMatrix<f64>, s: &ConvShape) -> DMatrix<f64> {
    let mut cols = DMatrix::zeros(s.ho * s.wo, 9 * s.cin);
    for oy in 0..s.ho {
        for ox in 0..s.wo {
            let row = oy * s.wo + ox;
            for ky in 0..3 {
                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                if iy < 0 || iy >= s.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                    if ix < 0 || ix >= s.w as isize {
                        continue;
                    }
                    let src = iy as usize * s.w + ix as usize;
                    for c in 0..s.cin {
                        cols[(row, (ky * 3 + kx) * s.cin + c)] = x[(src, c)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &DMatrix<f64>, s: &ConvShape) -> DMatrix<f64> {
    let mut dx = DMatrix::zeros(s.h * s.w, s.cin);
    for oy in 0..s.ho {
        for ox in 0..s.wo {
            let row = oy * s.wo + ox;
            for ky in 0..3 {
                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                if iy < 0 || iy >= s.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                    if ix < 0 || ix >= s.w as isize {
                        continue;
                    }
                    let dst = iy as usize * s.w + ix as usize;
                    for c in 0..s.cin {
                        dx[(dst, c)] += dcols[(row, (ky * 3 + kx) * s.cin + c)];
                    }
                }
            }
        }
    }
    dx
}

fn lower_tri(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if i >= j { m[(i, j)] } else { 0.0 })
}

fn solve_upper(u: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    u.solve_upper_triangular(b).expect("nonsingular triangular factor")
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, DMatrix<f64>>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: DMatrix<f64>, op: Op, parents: &[Var]) -> Var {
        let grad = parents.iter().any(|p| self.nodes[p.0].grad);
        self.push(Cow::Owned(value), op, grad)
    }

    /// Trainable leaf borrowed from its owner.
    pub fn param(&mut self, m: &'a DMatrix<f64>) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, true)
    }

    /// Trainable leaf owned by the tape.
    pub fn param_owned(&mut self, m: DMatrix<f64>) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, true)
    }

    pub fn constant(&mut self, m: DMatrix<f64>) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, m: &'a DMatrix<f64>) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(DMatrix::from_element(1, 1, v))
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn same_shape(&self, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a) + self.value(b);
        self.derived(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a) - self.value(b);
        self.derived(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a).component_mul(self.value(b));
        self.derived(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 × n` row `r` to every row of `m`.
    pub fn add_row(&mut self, m: Var, r: Var) -> Var {
        let (rows, cols) = self.shape(m);
        assert_eq!(self.shape(r), (1, cols), "add_row shape");
        let mut v = self.value(m).clone();
        let rv = self.value(r);
        for j in 0..cols {
            for i in 0..rows {
                v[(i, j)] += rv[(0, j)];
            }
        }
        self.derived(v, Op::AddRow(m, r), &[m, r])
    }

    /// Multiplies every row of `m` elementwise by the `1 × n` row `r`.
    pub fn mul_row(&mut self, m: Var, r: Var) -> Var {
        let (rows, cols) = self.shape(m);
        assert_eq!(self.shape(r), (1, cols), "mul_row shape");
        let mut v = self.value(m).clone();
        let rv = self.value(r);
        for j in 0..cols {
            for i in 0..rows {
                v[(i, j)] *= rv[(0, j)];
            }
        }
        self.derived(v, Op::MulRow(m, r), &[m, r])
    }

    /// Multiplies row `i` of `m` by entry `i` of the column `c`.
    pub fn mul_col(&mut self, m: Var, c: Var) -> Var {
        let (rows, cols) = self.shape(m);
        assert_eq!(self.shape(c), (rows, 1), "mul_col shape");
        let mut v = self.value(m).clone();
        let cv = self.value(c);
        for j in 0..cols {
            for i in 0..rows {
                v[(i, j)] *= cv[(i, 0)];
            }
        }
        self.derived(v, Op::MulCol(m, c), &[m, c])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.derived(v, Op::Scale(a, s), &[a])
    }

    /// Adds a constant matrix (no gradient flows into the constant).
    pub fn offset(&mut self, a: Var, c: &DMatrix<f64>) -> Var {
        assert_eq!(self.shape(a), c.shape(), "offset shape");
        let v = self.value(a) + c;
        self.derived(v, Op::Offset(a), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).add_scalar(s);
        self.derived(v, Op::Offset(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.derived(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.derived(v, Op::Transpose(a), &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        self.derived(v, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Wraps angles into (−π, π]; the derivative is one almost everywhere.
    pub fn wrap_angle(&mut self, a: Var) -> Var {
        self.map(a, wrap_angle, Op::WrapAngle(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.derived(v, Op::Sum(a), &[a])
    }

    /// `1 × n` column sums.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sum();
        let v = DMatrix::from_row_slice(1, v.len(), v.as_slice());
        self.derived(v, Op::ColSum(a), &[a])
    }

    /// `m × 1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).column_sum();
        let v = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        self.derived(v, Op::RowSum(a), &[a])
    }

    pub fn slice(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let v = self.value(a).view((r0, c0), (rows, cols)).into_owned();
        self.derived(v, Op::Slice { src: a, r0, c0 }, &[a])
    }

    pub fn cols(&mut self, a: Var, c0: usize, cols: usize) -> Var {
        let rows = self.shape(a).0;
        self.slice(a, 0, c0, rows, cols)
    }

    pub fn rows(&mut self, a: Var, r0: usize, rows: usize) -> Var {
        let cols = self.shape(a).1;
        self.slice(a, r0, 0, rows, cols)
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = DMatrix::zeros(rows, total);
        let mut c = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.nrows(), rows, "hstack rows");
            v.view_mut((0, c), m.shape()).copy_from(m);
            c += m.ncols();
        }
        self.derived(v, Op::HStack(parts.to_vec()), parts)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut v = DMatrix::zeros(total, cols);
        let mut r = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.ncols(), cols, "vstack cols");
            v.view_mut((r, 0), m.shape()).copy_from(m);
            r += m.nrows();
        }
        self.derived(v, Op::VStack(parts.to_vec()), parts)
    }

    /// Repeats a `1 × n` row `count` times.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.nrows(), 1, "repeat_rows expects a row");
        let v = DMatrix::from_fn(count, m.ncols(), |_, j| m[(0, j)]);
        self.derived(v, Op::RepeatRows(a), &[a])
    }

    /// Reinterprets the column-major storage with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.len(), rows * cols, "reshape size");
        let v = DMatrix::from_column_slice(rows, cols, m.as_slice());
        self.derived(v, Op::Reshape(a), &[a])
    }

    /// Diagonal of a square matrix as an `n × 1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let d = self.value(a).diagonal();
        let v = DMatrix::from_column_slice(d.len(), 1, d.as_slice());
        self.derived(v, Op::Diag(a), &[a])
    }

    /// Square matrix with the entries of a row or column on its diagonal.
    pub fn diag_matrix(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.len();
        let mut v = DMatrix::zeros(n, n);
        for (i, x) in m.iter().enumerate() {
            v[(i, i)] = *x;
        }
        self.derived(v, Op::DiagMatrix(a), &[a])
    }

    /// `½ (A + Aᵀ)`.
    pub fn symmetrize(&mut self, a: Var) -> Var {
        let t = self.transpose(a);
        let s = self.add(a, t);
        self.scale(s, 0.5)
    }

    /// Lower Cholesky factor with the jitter ladder; the jitter is treated as a constant.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let n = m.nrows();
        for &j in &JITTER_LADDER {
            let shifted = m + DMatrix::identity(n, n) * j;
            if let Some(c) = shifted.cholesky() {
                let l = c.l();
                if l.iter().all(|v| v.is_finite()) {
                    return Ok(self.derived(l, Op::Cholesky(a), &[a]));
                }
            }
        }
        Err(Error::NotPsd { jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] })
    }

    /// Inverse of a symmetric positive-definite block, jittered if needed.
    pub fn inverse_spd(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let n = m.nrows();
        for &j in &JITTER_LADDER {
            let shifted = m + DMatrix::identity(n, n) * j;
            if let Some(c) = shifted.cholesky() {
                let inv = c.inverse();
                if inv.iter().all(|v| v.is_finite()) {
                    let inv = (&inv + inv.transpose()) * 0.5;
                    return Ok(self.derived(inv, Op::Inverse(a), &[a]));
                }
            }
        }
        Err(Error::SingularBlock)
    }

    /// Softmax over the entries of a column.
    pub fn softmax_col(&mut self, a: Var) -> Var {
        let m = self.value(a);
        assert_eq!(m.ncols(), 1, "softmax_col expects a column");
        let mx = m.max();
        let e = m.map(|x| (x - mx).exp());
        let v = &e / e.sum();
        self.derived(v, Op::SoftmaxCol(a), &[a])
    }

    /// Elementwise clamp into per-column closed intervals; no gradient where clamped.
    pub fn clamp_cols(&mut self, a: Var, lo: &[f64], hi: &[f64]) -> Var {
        let m = self.value(a);
        assert_eq!(lo.len(), m.ncols(), "clamp bounds");
        let mut v = m.clone();
        let mut mask = DMatrix::from_element(m.nrows(), m.ncols(), 1.0);
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let x = m[(i, j)];
                if x < lo[j] {
                    v[(i, j)] = lo[j];
                    mask[(i, j)] = 0.0;
                } else if x > hi[j] {
                    v[(i, j)] = hi[j];
                    mask[(i, j)] = 0.0;
                }
            }
        }
        self.derived(v, Op::Clamp { src: a, mask }, &[a])
    }

    /// Smallest eigenvalue of a symmetric matrix as a `1 × 1` node.
    pub fn min_eigenvalue(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let (k, lam) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc });
        let vec = eig.eigenvectors.column(k).into_owned();
        self.derived(DMatrix::from_element(1, 1, lam), Op::MinEigenvalue { src: a, vec }, &[a])
    }

    /// 3×3 convolution over an `(h·w) × cin` feature map (pixel index `row·w + col`).
    ///
    /// `weight` is `(9·cin) × cout` with row index `(ky·3 + kx)·cin + c`; `bias` is `1 × cout`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, h: usize, w: usize, stride: usize, pad: usize) -> Var {
        let x = self.value(input);
        let cin = x.ncols();
        assert_eq!(x.nrows(), h * w, "conv2d input size");
        assert_eq!(self.shape(weight).0, 9 * cin, "conv2d weight rows");
        let ho = (h + 2 * pad - 3) / stride + 1;
        let wo = (w + 2 * pad - 3) / stride + 1;
        let shape = ConvShape { h, w, cin, stride, pad, ho, wo };
        let cols = im2col(x, &shape);
        let mut v = matmul(&cols, self.value(weight));
        let b = self.value(bias);
        for j in 0..v.ncols() {
            for i in 0..v.nrows() {
                v[(i, j)] += b[(0, j)];
            }
        }
        self.derived(v, Op::Conv2d { input, weight, bias, cols, shape }, &[input, weight, bias])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => *e += g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.component_mul(self.value(*b)));
                self.acc(grads, *b, g.component_mul(self.value(*a)));
            }
            Op::AddRow(m, r) => {
                self.acc(grads, *m, g.clone());
                let s = g.row_sum();
                self.acc(grads, *r, DMatrix::from_row_slice(1, s.len(), s.as_slice()));
            }
            Op::MulRow(m, r) => {
                let rv = self.value(*r);
                let mv = self.value(*m);
                let mut gm = g.clone();
                let mut gr = DMatrix::zeros(1, g.ncols());
                for j in 0..g.ncols() {
                    for i in 0..g.nrows() {
                        gm[(i, j)] *= rv[(0, j)];
                        gr[(0, j)] += g[(i, j)] * mv[(i, j)];
                    }
                }
                self.acc(grads, *m, gm);
                self.acc(grads, *r, gr);
            }
            Op::MulCol(m, c) => {
                let cv = self.value(*c);
                let mv = self.value(*m);
                let mut gm = g.clone();
                let mut gc = DMatrix::zeros(g.nrows(), 1);
                for j in 0..g.ncols() {
                    for i in 0..g.nrows() {
                        gm[(i, j)] *= cv[(i, 0)];
                        gc[(i, 0)] += g[(i, j)] * mv[(i, j)];
                    }
                }
                self.acc(grads, *m, gm);
                self.acc(grads, *c, gc);
            }
            Op::Scale(a, s) => self.acc(grads, *a, g * *s),
            Op::Offset(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                if self.nodes[a.0].grad {
                    self.acc(grads, *a, matmul(g, &self.value(*b).transpose()));
                }
                if self.nodes[b.0].grad {
                    self.acc(grads, *b, matmul(&self.value(*a).transpose(), g));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gi, xi| gi * sigmoid(xi)));
            }
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(out, |gi, y| gi * y * (1.0 - y))),
            Op::Exp(a) => self.acc(grads, *a, g.component_mul(out)),
            Op::Log(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gi, xi| gi / xi));
            }
            Op::Sqrt(a) => self.acc(grads, *a, g.zip_map(out, |gi, y| 0.5 * gi / y)),
            Op::Recip(a) => self.acc(grads, *a, g.zip_map(out, |gi, y| -gi * y * y)),
            Op::Square(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gi, xi| 2.0 * gi * xi));
            }
            Op::WrapAngle(a) => self.acc(grads, *a, g.clone()),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::ColSum(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, DMatrix::from_fn(r, c, |_, j| g[(0, j)]));
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, DMatrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::Slice { src, r0, c0 } => {
                let (r, c) = self.shape(*src);
                let mut gs = DMatrix::zeros(r, c);
                gs.view_mut((*r0, *c0), g.shape()).copy_from(g);
                self.acc(grads, *src, gs);
            }
            Op::HStack(parts) => {
                let mut c = 0;
                for p in parts {
                    let (pr, pc) = self.shape(*p);
                    self.acc(grads, *p, g.view((0, c), (pr, pc)).into_owned());
                    c += pc;
                }
            }
            Op::VStack(parts) => {
                let mut r = 0;
                for p in parts {
                    let (pr, pc) = self.shape(*p);
                    self.acc(grads, *p, g.view((r, 0), (pr, pc)).into_owned());
                    r += pr;
                }
            }
            Op::RepeatRows(a) => {
                let s = g.row_sum();
                self.acc(grads, *a, DMatrix::from_row_slice(1, s.len(), s.as_slice()));
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, DMatrix::from_column_slice(r, c, g.as_slice()));
            }
            Op::Diag(a) => {
                let n = self.shape(*a).0;
                let mut ga = DMatrix::zeros(n, n);
                for i in 0..n {
                    ga[(i, i)] = g[(i, 0)];
                }
                self.acc(grads, *a, ga);
            }
            Op::DiagMatrix(a) => {
                let (r, c) = self.shape(*a);
                let d = g.diagonal();
                self.acc(grads, *a, DMatrix::from_column_slice(r, c, d.as_slice()));
            }
            Op::Cholesky(a) => {
                // Ā = ½(S + Sᵀ), S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹ with Φ taking the lower triangle, halved diagonal.
                let l = out;
                let lbar = lower_tri(g);
                let mut p = lower_tri(&(l.transpose() * lbar));
                for i in 0..p.nrows() {
                    p[(i, i)] *= 0.5;
                }
                let lt = l.transpose();
                let w = solve_upper(&lt, &p);
                let s = solve_upper(&lt, &w.transpose()).transpose();
                self.acc(grads, *a, (&s + s.transpose()) * 0.5);
            }
            Op::Inverse(a) => {
                let it = out.transpose();
                self.acc(grads, *a, -(&it * g * &it));
            }
            Op::SoftmaxCol(a) => {
                let d = g.dot(out);
                self.acc(grads, *a, out.zip_map(g, |y, gi| y * (gi - d)));
            }
            Op::Clamp { src, mask } => self.acc(grads, *src, g.component_mul(mask)),
            Op::MinEigenvalue { src, vec } => self.acc(grads, *src, vec * vec.transpose() * g[(0, 0)]),
            Op::Conv2d { input, weight, bias, cols, shape } => {
                if self.nodes[weight.0].grad {
                    self.acc(grads, *weight, matmul(&cols.transpose(), g));
                }
                if self.nodes[bias.0].grad {
                    let s = g.row_sum();
                    self.acc(grads, *bias, DMatrix::from_row_slice(1, s.len(), s.as_slice()));
                }
                if self.nodes[input.0].grad {
                    let dcols = matmul(g, &self.value(*weight).transpose());
                    self.acc(grads, *input, col2im(&dcols, shape));
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `Σ R ⊙ f(inputs)` against the tape gradient.
    pub(crate) fn fd_check(inputs: Vec<DMatrix<f64>>, h: f64, tol: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|m| t.param_owned(m.clone())).collect();
            let o = f(&mut t, &vars);
            let (r, c) = t.shape(o);
            DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
        };
        let eval = |ins: &[DMatrix<f64>]| -> (f64, Vec<DMatrix<f64>>) {
            let mut t = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|m| t.param_owned(m.clone())).collect();
            let o = f(&mut t, &vars);
            let w = t.constant(probe.clone());
            let p = t.mul(o, w);
            let s = t.sum(p);
            let g = t.backward(s);
            let grads = vars
                .iter()
                .map(|v| g.get(*v).cloned().unwrap_or_else(|| DMatrix::zeros(t.shape(*v).0, t.shape(*v).1)))
                .collect();
            (t.scalar(s), grads)
        };
        let (_, grads) = eval(&inputs);
        for (k, m) in inputs.iter().enumerate() {
            for idx in 0..m.len() {
                let mut plus = inputs.clone();
                plus[k][idx] += h;
                let mut minus = inputs.clone();
                minus[k][idx] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = grads[k][idx];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
                assert!(err < tol, "input {k} entry {idx}: fd {fd} analytic {an}");
            }
        }
    }

    fn rand_mat(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = rand_mat(n, n, rng);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn matmul_is_row_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(37, 45, &mut rng);
        let b = rand_mat(45, 13, &mut rng);
        let full = matmul(&a, &b);
        for i in 0..a.nrows() {
            let row = matmul(&a.rows(i, 1).into_owned(), &b);
            assert_eq!(row.as_slice(), full.row(i).transpose().as_slice());
        }
        assert!((full - &a * &b).amax() < 1e-12);
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(3, 4, &mut rng);
        let b = rand_mat(3, 4, &mut rng);
        let pos = a.map(|x| x.abs() + 0.5);
        fd_check(vec![a.clone(), b.clone()], 1e-6, 1e-6, |t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[1]);
            let m = t.mul(d, v[1]);
            let r = t.relu(m);
            let sp = t.softplus(r);
            let sg = t.sigmoid(v[0]);
            let e = t.exp(sg);
            let sq = t.square(e);
            let w = t.wrap_angle(sq);
            let o = t.add(sp, w);
            t.scale(o, 1.7)
        });
        fd_check(vec![pos], 1e-6, 1e-6, |t, v| {
            let l = t.ln(v[0]);
            let s = t.sqrt(v[0]);
            let r = t.recip(v[0]);
            let a = t.add(l, s);
            let o = t.add(a, r);
            t.add_scalar(o, 2.0)
        });
    }

    #[test]
    fn structural_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = rand_mat(5, 3, &mut rng);
        let r = rand_mat(1, 3, &mut rng);
        let c = rand_mat(5, 1, &mut rng);
        let b = rand_mat(3, 4, &mut rng);
        fd_check(vec![m, r, c, b], 1e-6, 1e-6, |t, v| {
            let a = t.add_row(v[0], v[1]);
            let a = t.mul_row(a, v[1]);
            let a = t.mul_col(a, v[2]);
            let p = t.matmul(a, v[3]);
            let pt = t.transpose(p);
            let cs = t.col_sum(pt);
            let rs = t.row_sum(pt);
            let rr = t.repeat_rows(cs, 4);
            let sl = t.slice(p, 1, 1, 3, 2);
            let rsh = t.reshape(sl, 2, 3);
            let hs = t.hstack(&[rr, rs]);
            let vs = t.vstack(&[rsh, rsh]);
            let s1 = t.sum(hs);
            let s2 = t.sum(vs);
            let s3 = t.mul(s1, s2);
            let rs = t.scale(rs, 0.3);
            let sm = t.softmax_col(rs);
            let ss = t.sum(sm);
            t.add(s3, ss)
        });
    }

    #[test]
    fn softmax_and_clamp_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(6, 1, &mut rng);
        fd_check(vec![x.clone()], 1e-6, 1e-6, |t, v| t.softmax_col(v[0]));
        let m = DMatrix::from_row_slice(2, 2, &[0.5, -2.0, 0.1, 3.0]);
        fd_check(vec![m], 1e-6, 1e-6, |t, v| t.clamp_cols(v[0], &[0.0, -1.0], &[1.0, 1.0]));
    }

    #[test]
    fn linalg_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 3, 5, 8] {
            let a = spd(n, &mut rng);
            // Symmetric use of the input, as in every caller.
            fd_check(vec![a.clone()], 1e-6, 1e-5, |t, v| {
                let s = t.symmetrize(v[0]);
                t.cholesky(s).unwrap()
            });
            fd_check(vec![a.clone()], 1e-6, 1e-5, |t, v| {
                let s = t.symmetrize(v[0]);
                t.inverse_spd(s).unwrap()
            });
            fd_check(vec![a.clone()], 1e-6, 1e-5, |t, v| {
                let s = t.symmetrize(v[0]);
                let d = t.diag(s);
                let dm = t.diag_matrix(d);
                t.matmul(dm, s)
            });
        }
        let a = spd(3, &mut rng);
        fd_check(vec![a], 1e-6, 1e-5, |t, v| {
            let s = t.symmetrize(v[0]);
            t.min_eigenvalue(s)
        });
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(36, 2, &mut rng);
        let w = rand_mat(18, 3, &mut rng);
        let b = rand_mat(1, 3, &mut rng);
        fd_check(vec![x, w, b], 1e-6, 1e-6, |t, v| t.conv2d(v[0], v[1], v[2], 6, 6, 2, 1));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w, cin, cout) = (8, 6, 2, 3);
        let x = rand_mat(h * w, cin, &mut rng);
        let k = rand_mat(9 * cin, cout, &mut rng);
        let b = rand_mat(1, cout, &mut rng);
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, kv, bv, h, w, 2, 1);
        let y = t.value(y);
        assert_eq!(y.shape(), (4 * 3, cout));
        for oy in 0..4 {
            for ox in 0..3 {
                for co in 0..cout {
                    let mut s = b[(0, co)];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            let ix = (2 * ox + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                s += x[(iy as usize * w + ix as usize, c)] * k[((ky * 3 + kx) * cin + c, co)];
                            }
                        }
                    }
                    assert!((y[(oy * 3 + ox, co)] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(DMatrix::from_element(2, 2, 1.0));
        let p = t.param_owned(DMatrix::from_element(2, 2, 2.0));
        let m = t.mul(c, p);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &DMatrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn cholesky_jitter_and_failure() {
        let mut t = Tape::new();
        let z = t.constant(DMatrix::zeros(3, 3));
        let l = t.cholesky(z).unwrap();
        assert!((t.value(l)[(0, 0)] - 1e-9f64.sqrt()).abs() < 1e-15);
        let mut neg = DMatrix::identity(2, 2);
        neg[(1, 1)] = -1.0;
        let n = t.constant(neg);
        assert!(matches!(t.cholesky(n), Err(Error::NotPsd { .. })));
    }
}
