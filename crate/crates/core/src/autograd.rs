//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Each recorded
//! node keeps its value; [`Tape::backward`] walks the nodes in reverse and
//! returns the gradient of a `1 × 1` root with respect to every node.
//!
//! Besides the usual elementwise and matrix operations the tape knows the
//! structured pieces the GP heads need: Cholesky factorization, triangular
//! solves, symmetric Toeplitz expansion, Kronecker matrix products, grid
//! interpolation and the RBF kernel.

use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};

use crate::error::Result;
use crate::gp::grid::InducingGrid;
use crate::linalg::{self, JitterPolicy, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Ln,
    Tanh,
    Softsign,
    Sigmoid,
    Softplus,
    LogSigmoid,
    Gelu,
    Sqrt,
    Square,
    ClampMin(f64),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    MaskedSoftmax(Var),
    Gather { table: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Factor of `a + c·Σ|a_ii|·I`; `c` is the relative jitter per unit of
    /// diagonal mass, so the jitter is differentiated along with `a`.
    Cholesky(Var, f64),
    SolveLower(Var, Var),
    SolveUpperT(Var, Var),
    Toeplitz(Var),
    Diag(Var),
    Tril(Var),
    KronMatMul { factors: Vec<Var>, x: Var, stages: Vec<Array3<f64>> },
    Interp { x: Var, z: Var, grid: Arc<InducingGrid>, cells: Vec<(usize, f64)> },
    Rbf { x1: Var, x2: Var, log_ls: Var, log_os: Var },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    jitters: Vec<f64>,
}

/// Gradients of a scalar root with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when the root does not
    /// depend on `v`.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

fn acc(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(s) => *s += &g,
        None => *slot = Some(g),
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn sigmoid_f(x: f64) -> f64 {
    sigmoid(x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Softsign => x / (1.0 + x.abs()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::LogSigmoid => log_sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::ClampMin(f) => x.max(f),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Softsign => (1.0 + x.abs()).powi(-2),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::LogSigmoid => sigmoid(-x),
            Unary::Gelu => gelu_grad(x),
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::ClampMin(f) => {
                if x > f {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `F ×_mode T` for a tensor stored as `(outer, n, inner)`.
fn mode_product(f: ArrayView2<f64>, t: &Array3<f64>) -> Array3<f64> {
    let (outer, _, inner) = t.dim();
    let mut out = Array3::zeros((outer, f.nrows(), inner));
    for o in 0..outer {
        let block = f.dot(&t.index_axis(Axis(0), o));
        out.index_axis_mut(Axis(0), o).assign(&block);
    }
    out
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Jitters added by every Cholesky recorded so far.
    pub fn jitters(&self) -> &[f64] {
        &self.jitters
    }

    /// Hash of the discrete choices made during the forward pass: the
    /// interpolation cells of every grid lookup and the jitter level of every
    /// Cholesky. Finite differences are only meaningful between evaluations
    /// that share a signature.
    pub fn signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Interp { cells, .. } => {
                    for (c, _) in cells {
                        c.hash(&mut h);
                    }
                }
                Op::Cholesky(_, c) => {
                    let level = if *c > 0.0 {
                        (c * node.value.nrows() as f64).log10().round() as i64
                    } else {
                        i64::MIN
                    };
                    level.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input that is not differentiated (its gradient is still available).
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + 1 rᵀ` with `r` a `1 × n` row.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.shape(r), (1, self.shape(a).1), "add_row shape");
        let v = self.value(a) + self.value(r);
        self.push(v, Op::AddRow(a, r))
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.shape(r), (1, self.shape(a).1), "mul_row shape");
        let v = self.value(a) * self.value(r);
        self.push(v, Op::MulRow(a, r))
    }

    /// `a + c 1ᵀ` with `c` an `n × 1` column.
    pub fn add_col(&mut self, a: Var, c: Var) -> Var {
        assert_eq!(self.shape(c), (self.shape(a).0, 1), "add_col shape");
        let v = self.value(a) + self.value(c);
        self.push(v, Op::AddCol(a, c))
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        assert_eq!(self.shape(c), (self.shape(a).0, 1), "mul_col shape");
        let v = self.value(a) * self.value(c);
        self.push(v, Op::MulCol(a, c))
    }

    /// `a` times the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar node");
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::Offset(a))
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let v = self.value(a).mapv(|x| u.apply(x));
        self.push(v, Op::Unary(a, u))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    /// `x / (1 + |x|)`
    pub fn softsign(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softsign)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSigmoid)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Unary::ClampMin(floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Column sums, `1 × n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    /// Row sums, `n × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut out = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                out[[i, j]] = (row[j] - mean) * is;
            }
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// Row-wise softmax over the columns for which `key_mask` is true.
    /// Masked columns receive exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ncols(), key_mask.len(), "softmax mask length");
        let mut out = Mat::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let max = row
                .iter()
                .zip(key_mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for (j, (&v, &m)) in row.iter().zip(key_mask).enumerate() {
                if m {
                    let e = (v - max).exp();
                    out[[i, j]] = e;
                    z += e;
                }
            }
            out.row_mut(i).mapv_inplace(|e| e / z);
        }
        self.push(out, Op::MaskedSoftmax(x))
    }

    /// Rows of `table` selected by `rows`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros((rows.len(), tv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(r));
        }
        self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Lower Cholesky factor of `a + jitter I`, with the jitter chosen by
    /// `policy`. The jitter is proportional to the diagonal mass of `a` and is
    /// differentiated as such.
    pub fn cholesky(&mut self, a: Var, policy: JitterPolicy) -> Result<Var> {
        let av = self.value(a);
        let (l, jitter) = linalg::cholesky_jittered(av.view(), policy)?;
        let mass: f64 = av.diag().iter().map(|v| v.abs()).sum();
        let c = if jitter > 0.0 && mass > 0.0 { jitter / mass } else { 0.0 };
        self.jitters.push(jitter);
        Ok(self.push(l, Op::Cholesky(a, c)))
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Var {
        let v = linalg::solve_lower(self.value(l).view(), self.value(b).view());
        self.push(v, Op::SolveLower(l, b))
    }

    /// `L⁻ᵀ B`.
    pub fn solve_upper_t(&mut self, l: Var, b: Var) -> Var {
        let v = linalg::solve_upper_t(self.value(l).view(), self.value(b).view());
        self.push(v, Op::SolveUpperT(l, b))
    }

    /// Symmetric Toeplitz matrix from an `n × 1` first column.
    pub fn toeplitz(&mut self, c: Var) -> Var {
        let cv = self.value(c);
        assert_eq!(cv.ncols(), 1, "toeplitz expects a column");
        let n = cv.nrows();
        let v = Mat::from_shape_fn((n, n), |(i, j)| cv[[i.abs_diff(j), 0]]);
        self.push(v, Op::Toeplitz(c))
    }

    /// Diagonal as an `n × 1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let v = self.value(a).diag().to_owned().insert_axis(Axis(1));
        self.push(v, Op::Diag(a))
    }

    /// Lower triangle (including the diagonal).
    pub fn tril(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for ((i, j), x) in v.indexed_iter_mut() {
            if j > i {
                *x = 0.0;
            }
        }
        self.push(v, Op::Tril(a))
    }

    /// `(F_1 ⊗ F_2 ⊗ … ⊗ F_k) X`.
    pub fn kron_matmul(&mut self, factors: &[Var], x: Var) -> Var {
        let dims_in: Vec<usize> = factors.iter().map(|&f| self.shape(f).1).collect();
        let (rows, cols) = self.shape(x);
        assert_eq!(rows, dims_in.iter().product::<usize>(), "kron_matmul rows");
        let mut dims = dims_in.clone();
        let mut stages = Vec::with_capacity(factors.len() + 1);
        let mut cur = self.value(x).as_standard_layout().into_owned().into_shape_with_order((1, rows, cols)).unwrap();
        // reshape helper: current tensor viewed as (outer, dims[t], inner)
        for (t, &f) in factors.iter().enumerate() {
            let outer: usize = dims[..t].iter().product();
            let inner: usize = dims[t + 1..].iter().product::<usize>() * cols;
            let t3 = cur
                .into_shape_with_order((outer, dims[t], inner))
                .expect("kron stage reshape");
            let next = mode_product(self.value(f).view(), &t3);
            stages.push(t3);
            dims[t] = self.shape(f).0;
            cur = next;
        }
        let out_rows: usize = dims.iter().product();
        let value = cur
            .into_shape_with_order((out_rows, cols))
            .expect("kron output reshape");
        self.push(
            value,
            Op::KronMatMul {
                factors: factors.to_vec(),
                x,
                stages,
            },
        )
    }

    /// Interpolates rows of `z` (indexed by grid point) at the latent
    /// points `x`: `Y = W(x) Z`.
    pub fn interp(&mut self, x: Var, z: Var, grid: Arc<InducingGrid>) -> Result<Var> {
        let cells = grid.locate(self.value(x).view())?;
        let zv = self.value(z);
        assert_eq!(zv.nrows(), grid.len(), "interp table rows");
        let d = grid.dim();
        let n = self.shape(x).0;
        let mut out = Mat::zeros((n, zv.ncols()));
        for i in 0..n {
            for corner in grid.corners(&cells[i * d..(i + 1) * d]) {
                if corner.weight != 0.0 {
                    out.row_mut(i)
                        .scaled_add(corner.weight, &zv.row(corner.index));
                }
            }
        }
        Ok(self.push(out, Op::Interp { x, z, grid, cells }))
    }

    /// `K_ij = exp(log_os) exp(-½ Σ_d (x1_id - x2_jd)² / exp(log_ls_d)²)`.
    pub fn rbf(&mut self, x1: Var, x2: Var, log_ls: Var, log_os: Var) -> Var {
        let (a, b) = (self.value(x1), self.value(x2));
        let d = a.ncols();
        assert_eq!(b.ncols(), d, "rbf input dims");
        assert_eq!(self.shape(log_ls), (1, d), "rbf lengthscale shape");
        let inv_l2: Vec<f64> = self
            .value(log_ls)
            .iter()
            .map(|l| (-2.0 * l).exp())
            .collect();
        let os = self.scalar(log_os).exp();
        let mut k = Mat::zeros((a.nrows(), b.nrows()));
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                let mut s = 0.0;
                for t in 0..d {
                    let r = a[[i, t]] - b[[j, t]];
                    s += r * r * inv_l2[t];
                }
                k[[i, j]] = os * (-0.5 * s).exp();
            }
        }
        self.push(
            k,
            Op::Rbf {
                x1,
                x2,
                log_ls,
                log_os,
            },
        )
    }

    /// Sum over rows of the softmax cross-entropy `-log softmax(logits)[t]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "xent targets");
        let mut probs = Mat::zeros(lv.dim());
        let mut total = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[targets[i]];
            for (j, v) in row.iter().enumerate() {
                probs[[i, j]] = (v - lse).exp();
            }
        }
        self.push(
            Mat::from_elem((1, 1), total),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from the `1 × 1` node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads[a.0], g.dot(&val(*b).t()));
                    acc(&mut grads[b.0], val(*a).t().dot(&g));
                }
                Op::Transpose(a) => acc(&mut grads[a.0], g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads[b.0], g.clone());
                    acc(&mut grads[a.0], g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[b.0], -&g);
                    acc(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads[a.0], &g * val(*b));
                    acc(&mut grads[b.0], &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads[r.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads[a.0], g.clone());
                }
                Op::MulRow(a, r) => {
                    let gr = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[a.0], &g * val(*r));
                    acc(&mut grads[r.0], gr);
                }
                Op::AddCol(a, c) => {
                    acc(&mut grads[c.0], g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(&mut grads[a.0], g.clone());
                }
                Op::MulCol(a, c) => {
                    let gc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads[a.0], &g * val(*c));
                    acc(&mut grads[c.0], gc);
                }
                Op::ScaleBy(a, s) => {
                    let k = val(*s)[[0, 0]];
                    let gs = (&g * val(*a)).sum();
                    acc(&mut grads[a.0], &g * k);
                    acc(&mut grads[s.0], Mat::from_elem((1, 1), gs));
                }
                Op::Scale(a, k) => acc(&mut grads[a.0], &g * *k),
                Op::Offset(a) => acc(&mut grads[a.0], g.clone()),
                Op::Unary(a, u) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(val(*a))
                        .and(y)
                        .for_each(|gv, &x, &yv| *gv *= u.derivative(x, yv));
                    acc(&mut grads[a.0], ga);
                }
                Op::SumAll(a) => {
                    let k = g[[0, 0]];
                    acc(&mut grads[a.0], Mat::from_elem(val(*a).dim(), k));
                }
                Op::SumRows(a) => {
                    let full = g.broadcast(val(*a).dim()).unwrap().to_owned();
                    acc(&mut grads[a.0], full);
                }
                Op::SumCols(a) => {
                    let full = g.broadcast(val(*a).dim()).unwrap().to_owned();
                    acc(&mut grads[a.0], full);
                }
                Op::LayerNorm { x, inv_std } => {
                    let (n, d) = y.dim();
                    let mut gx = Mat::zeros((n, d));
                    for i in 0..n {
                        let gy = g.row(i);
                        let yr = y.row(i);
                        let mg = gy.sum() / d as f64;
                        let mgy = gy.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            gx[[i, j]] = inv_std[i] * (gy[j] - mg - yr[j] * mgy);
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::MaskedSoftmax(x) => {
                    let mut gx = Mat::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..y.ncols() {
                            gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::Gather { table, rows } => {
                    let mut gt = Mat::zeros(val(*table).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads[table.0], gt);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Mat::zeros(val(*x).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads[x.0], gx);
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Mat::zeros(val(*x).dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads[x.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(&mut grads[p.0], g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        acc(&mut grads[p.0], g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Cholesky(a, c) => {
                    // Ā = ½ (S + Sᵀ), S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹, Φ = tril with halved diagonal
                    let l = y;
                    let mut gl = g.clone();
                    for ((i, j), v) in gl.indexed_iter_mut() {
                        if j > i {
                            *v = 0.0;
                        }
                    }
                    let mut p = l.t().dot(&gl);
                    for ((i, j), v) in p.indexed_iter_mut() {
                        if j > i {
                            *v = 0.0;
                        } else if i == j {
                            *v *= 0.5;
                        }
                    }
                    let left = linalg::solve_upper_t(l.view(), p.view());
                    let sm = linalg::solve_lower_right(l.view(), left.view());
                    let mut ga = (&sm + &sm.t()) * 0.5;
                    if *c > 0.0 {
                        let av = val(*a);
                        let tr: f64 = ga.diag().sum();
                        for i in 0..ga.nrows() {
                            ga[[i, i]] += c * tr * av[[i, i]].signum();
                        }
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::SolveLower(l, b) => {
                    let gb = linalg::solve_upper_t(val(*l).view(), g.view());
                    let mut gl = -gb.dot(&y.t());
                    tril_inplace(&mut gl);
                    acc(&mut grads[l.0], gl);
                    acc(&mut grads[b.0], gb);
                }
                Op::SolveUpperT(l, b) => {
                    let gb = linalg::solve_lower(val(*l).view(), g.view());
                    let mut gl = -y.dot(&gb.t());
                    tril_inplace(&mut gl);
                    acc(&mut grads[l.0], gl);
                    acc(&mut grads[b.0], gb);
                }
                Op::Toeplitz(c) => {
                    let n = y.nrows();
                    let mut gc = Mat::zeros((n, 1));
                    for ((i, j), v) in g.indexed_iter() {
                        gc[[i.abs_diff(j), 0]] += v;
                    }
                    acc(&mut grads[c.0], gc);
                }
                Op::Diag(a) => {
                    let mut ga = Mat::zeros(val(*a).dim());
                    for i in 0..g.nrows() {
                        ga[[i, i]] = g[[i, 0]];
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::Tril(a) => {
                    let mut ga = g.clone();
                    tril_inplace(&mut ga);
                    acc(&mut grads[a.0], ga);
                }
                Op::KronMatMul { factors, x, stages } => {
                    let cols = val(*x).ncols();
                    let mut dims_out: Vec<usize> =
                        factors.iter().map(|f| val(*f).nrows()).collect();
                    let mut cur_g = g.clone();
                    for t in (0..factors.len()).rev() {
                        let input = &stages[t];
                        let (outer, n_in, inner) = input.dim();
                        let m_out = dims_out[t];
                        let g3 = cur_g
                            .into_shape_with_order((outer, m_out, inner))
                            .expect("kron grad reshape");
                        let f = val(factors[t]);
                        let mut gf = Mat::zeros(f.dim());
                        for o in 0..outer {
                            let go = g3.index_axis(Axis(0), o);
                            let io = input.index_axis(Axis(0), o);
                            gf += &go.dot(&io.t());
                        }
                        acc(&mut grads[factors[t].0], gf);
                        let gin = mode_product(f.t(), &g3);
                        dims_out[t] = n_in;
                        let rows = outer * n_in * inner / cols;
                        cur_g = gin
                            .into_shape_with_order((rows, cols))
                            .expect("kron grad reshape back");
                    }
                    acc(&mut grads[x.0], cur_g);
                }
                Op::Interp { x, z, grid, cells } => {
                    let zv = val(*z);
                    let d = grid.dim();
                    let n = val(*x).nrows();
                    let mut gz = Mat::zeros(zv.dim());
                    let mut gx = Mat::zeros((n, d));
                    for i in 0..n {
                        let c = &cells[i * d..(i + 1) * d];
                        let gi = g.row(i);
                        for corner in grid.corners(c) {
                            if corner.weight != 0.0 {
                                gz.row_mut(corner.index).scaled_add(corner.weight, &gi);
                            }
                            let proj: f64 = gi.dot(&zv.row(corner.index));
                            for k in 0..d {
                                gx[[i, k]] +=
                                    grid.corner_weight_derivative(c, &corner, k) * proj;
                            }
                        }
                    }
                    acc(&mut grads[z.0], gz);
                    acc(&mut grads[x.0], gx);
                }
                Op::Rbf {
                    x1,
                    x2,
                    log_ls,
                    log_os,
                } => {
                    let (a, b) = (val(*x1), val(*x2));
                    let d = a.ncols();
                    let inv_l2: Vec<f64> =
                        val(*log_ls).iter().map(|l| (-2.0 * l).exp()).collect();
                    let gk = &g * y;
                    let mut ga = Mat::zeros(a.dim());
                    let mut gb = Mat::zeros(b.dim());
                    let mut gl = Mat::zeros((1, d));
                    for i in 0..a.nrows() {
                        for j in 0..b.nrows() {
                            let w = gk[[i, j]];
                            if w == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                let r = a[[i, t]] - b[[j, t]];
                                let dr = -w * r * inv_l2[t];
                                ga[[i, t]] += dr;
                                gb[[j, t]] -= dr;
                                gl[[0, t]] += w * r * r * inv_l2[t];
                            }
                        }
                    }
                    acc(&mut grads[log_os.0], Mat::from_elem((1, 1), gk.sum()));
                    acc(&mut grads[log_ls.0], gl);
                    acc(&mut grads[x1.0], ga);
                    acc(&mut grads[x2.0], gb);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let k = g[[0, 0]];
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[[i, t]] -= 1.0;
                    }
                    acc(&mut grads[logits.0], gl * k);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn tril_inplace(m: &mut Mat) {
    for ((i, j), v) in m.indexed_iter_mut() {
        if j > i {
            *v = 0.0;
        }
    }
}

/// Identity matrix helper.
pub fn eye(n: usize) -> Mat {
    Array2::eye(n)
}
