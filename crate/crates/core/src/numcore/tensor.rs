use crate::error::{Error, Result};
use crate::par::*;

/// Marker for a masked logit. It is only ever produced by masking code and is
/// checked for explicitly before exponentiation.
pub const MASKED: f64 = f64::NEG_INFINITY;

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension("transpose needs a matrix".into()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// `self · x` for a matrix `self` and vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (r, c) = (self.rows(), self.cols());
        if c != x.len() {
            return Err(Error::Dimension(format!(
                "matvec {}x{} with vector of {}",
                r,
                c,
                x.len()
            )));
        }
        Ok((0..r).map(|i| dot(self.row(i), x)).collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// Matrix product with optional transposition of either operand.
pub fn matmul_t(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "matmul needs matrices, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, ka) = if ta {
        (a.shape[1], a.shape[0])
    } else {
        (a.shape[0], a.shape[1])
    };
    let (kb, n) = if tb {
        (b.shape[1], b.shape[0])
    } else {
        (b.shape[0], b.shape[1])
    };
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?}{} x {:?}{}",
            a.shape,
            if ta { "ᵀ" } else { "" },
            b.shape,
            if tb { "ᵀ" } else { "" }
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        ka,
        n,
        Operand::new(&a.data, a.shape[1], ta),
        Operand::new(&b.data, b.shape[1], tb),
        &mut out,
        false,
    );
    Tensor::matrix(m, n, out)
}

/// Strided view of a row-major matrix, possibly transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> Operand<'a> {
    /// `ld` is the stored row length; `trans` reads the stored matrix transposed.
    pub(crate) fn new(data: &'a [f64], ld: usize, trans: bool) -> Self {
        if trans {
            Operand {
                data,
                rs: 1,
                cs: ld as isize,
            }
        } else {
            Operand {
                data,
                rs: ld as isize,
                cs: 1,
            }
        }
    }
}

const TILE_ROWS: usize = 64;
const TILE_COLS: usize = 256;
const TILE_MIN_WORK: usize = 1 << 18;

#[derive(Clone, Copy)]
struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

/// `c[m×n] (+)= a[m×k] · b[k×n]`.
///
/// Large products are split into fixed output tiles that depend only on the
/// shape, so sequential and parallel builds run identical kernel calls.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_>,
    b: Operand<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let tiled = m * n * k >= TILE_MIN_WORK && (m > TILE_ROWS || n > TILE_COLS);
    if !tiled {
        // SAFETY: strides describe in-bounds row-major layouts checked by callers.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    let row_tiles = m.div_ceil(TILE_ROWS);
    let col_tiles = n.div_ceil(TILE_COLS);
    let cptr = SendPtr(c.as_mut_ptr());
    let a_ptr = a.data.as_ptr() as usize;
    let b_ptr = b.data.as_ptr() as usize;
    (0..row_tiles * col_tiles).into_par_iter().for_each(|tile| {
        let cp = cptr;
        let (ti, tj) = (tile / col_tiles, tile % col_tiles);
        let r0 = ti * TILE_ROWS;
        let c0 = tj * TILE_COLS;
        let mr = TILE_ROWS.min(m - r0);
        let nc = TILE_COLS.min(n - c0);
        // SAFETY: tiles write disjoint regions of `c`; operand offsets stay in bounds.
        unsafe {
            let ap = (a_ptr as *const f64).offset(r0 as isize * a.rs);
            let bp = (b_ptr as *const f64).offset(c0 as isize * b.cs);
            let cp = cp.0.add(r0 * n + c0);
            matrixmultiply::dgemm(
                mr, k, nc, 1.0, ap, a.rs, a.cs, bp, b.rs, b.cs, beta, cp, n as isize, 1,
            );
        }
    });
}

/// Masked, numerically stable softmax over a vector.
///
/// Entries equal to [`MASKED`] receive exactly zero probability.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(Tensor::vector(softmax_slice(logits.data())?))
}

pub fn softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        if l.is_nan() || l == f64::INFINITY {
            return Err(Error::NonFinite("softmax input".into()));
        }
        if l != MASKED && l > max {
            max = l;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidDistribution(
            "every softmax entry is masked".into(),
        ));
    }
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| if l == MASKED { 0.0 } else { (l - max).exp() })
        .collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

/// `log Σ exp(l)` over unmasked entries. Returns `MASKED` when all are masked.
pub fn logsumexp(logits: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = logits
        .clone()
        .filter(|&l| l != MASKED)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return MASKED;
    }
    let s: f64 = logits
        .filter(|&l| l != MASKED)
        .map(|l| (l - max).exp())
        .sum();
    max + s.ln()
}
