//! Dense and matrix-free numerical kernels.
//!
//! Everything here is deterministic and dependency-free: Householder
//! tridiagonalization plus implicit QL with Wilkinson shifts for the
//! symmetric eigenproblem, Cholesky reduction for generalized pencils,
//! conjugate gradients in a caller-supplied weighted inner product, and
//! matrix functions through the eigendecomposition. Problem sizes in this
//! crate stay at desk scale (a few thousand unknowns), where dense solves
//! are both fast enough and reproducible.

use crate::error::{CgFailure, Error, Result};

/// Iteration cap per eigenvalue in the implicit QL sweep.
const MAX_QL_ITERATIONS: usize = 64;

// ── DenseSymMatrix ──────────────────────────────────────────────────

/// Dense symmetric matrix, row-major full storage.
///
/// Symmetry is enforced at construction and preserved by `set_sym`.
#[derive(Debug, Clone)]
pub struct DenseSymMatrix {
    n: usize,
    a: Vec<f64>,
}

impl DenseSymMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseSymMatrix { n, a: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        m
    }

    /// Build from full rows; entries must satisfy `a[i][j] == a[j][i]` exactly.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: r.len() });
            }
            for j in 0..i {
                if rows[i][j] != rows[j][i] {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n..(i + 1) * n].copy_from_slice(&rows[i]);
        }
        Ok(DenseSymMatrix { n, a })
    }

    /// Build from `f(i, j)` evaluated on the lower triangle and mirrored.
    pub fn from_fn_sym(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                m.a[i * n + j] = v;
                m.a[j * n + i] = v;
            }
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.a[i * d.len() + i] = v;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    /// Set entry (i, j) and its mirror.
    #[inline]
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
        self.a[j * self.n + i] = v;
    }

    #[inline]
    pub fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] += v;
        if i != j {
            self.a[j * self.n + i] += v;
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = self.row(i);
            let mut s = 0.0;
            for j in 0..self.n {
                s += row[j] * x[j];
            }
            y[i] = s;
        }
        y
    }

    pub fn max_abs(&self) -> f64 {
        self.a.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        DenseSymMatrix { n: self.n, a: self.a.iter().map(|v| c * v).collect() }
    }

    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        assert_eq!(self.n, other.n);
        for (a, b) in self.a.iter_mut().zip(other.a.iter()) {
            *a += c * b;
        }
    }

    /// Sum of all entries (used e.g. for partition-of-unity checks).
    pub fn entry_sum(&self) -> f64 {
        self.a.iter().sum()
    }
}

// ── DenseMatrix (rectangular helper) ────────────────────────────────

/// Plain dense rectangular matrix, row-major.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    a: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, a: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut a = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            a.extend_from_slice(row);
        }
        DenseMatrix { rows: r, cols: c, a }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.cols + j] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.a[i * self.cols..(i + 1) * self.cols];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        y
    }

    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut x = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = &self.a[i * self.cols..(i + 1) * self.cols];
            let yi = y[i];
            for (xj, a) in x.iter_mut().zip(row) {
                *xj += a * yi;
            }
        }
        x
    }

    /// Gram matrix `self^T self`, symmetric by construction.
    pub fn gram(&self) -> DenseSymMatrix {
        let mut g = DenseSymMatrix::zeros(self.cols);
        for i in 0..self.cols {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..self.rows {
                    s += self.a[k * self.cols + i] * self.a[k * self.cols + j];
                }
                g.set_sym(i, j, s);
            }
        }
        g
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows);
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.a[i * self.cols + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.a[i * other.cols + j] += aik * other.a[k * other.cols + j];
                }
            }
        }
        out
    }
}

// ── Cholesky ────────────────────────────────────────────────────────

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

/// Factor `a = L L^T`. Fails with the pivot index on loss of positivity.
pub fn cholesky(a: &DenseSymMatrix) -> Result<Cholesky> {
    let n = a.dim();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let dj = d.sqrt();
        l[j * n + j] = dj;
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / dj;
        }
    }
    Ok(Cholesky { n, l })
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Forward substitution `L y = b`.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// Backward substitution `L^T x = y`.
    pub fn backward(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.backward(&self.forward(b))
    }
}

// ── Symmetric eigendecomposition ────────────────────────────────────

/// Eigenvalues ascending with the matching orthonormal eigenvectors.
///
/// Eigenvectors are stored column-contiguous: `vector(k)` is the k-th column.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    vectors: Vec<f64>,
    n: usize,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.n..(k + 1) * self.n]
    }

    /// Apply `Q diag(f(lambda)) Q^T` to a vector.
    pub fn apply_function(&self, x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.n;
        assert_eq!(x.len(), n);
        let mut y = vec![0.0; n];
        for k in 0..n {
            let q = self.vector(k);
            let c: f64 = q.iter().zip(x).map(|(a, b)| a * b).sum();
            let fc = f(self.eigenvalues[k]) * c;
            for (yi, qi) in y.iter_mut().zip(q) {
                *yi += fc * qi;
            }
        }
        y
    }

    /// Assemble `Q diag(f(lambda)) Q^T` densely.
    pub fn assemble_function(&self, f: impl Fn(f64) -> f64) -> DenseSymMatrix {
        let n = self.n;
        let mut m = DenseSymMatrix::zeros(n);
        for k in 0..n {
            let fk = f(self.eigenvalues[k]);
            if fk == 0.0 {
                continue;
            }
            let q = self.vector(k);
            for i in 0..n {
                let qi = fk * q[i];
                for j in 0..=i {
                    m.add_sym(i, j, qi * q[j]);
                }
            }
        }
        m
    }
}

/// Householder reduction to tridiagonal form, accumulating Q in `v`.
///
/// Classic EISPACK `tred2`; `v` enters holding the matrix and leaves holding
/// the orthogonal transformation, `d`/`e` hold diagonal and subdiagonal.
fn tred2(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) {
    for j in 0..n {
        d[j] = v[(n - 1) * n + j];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for item in d.iter().take(i) {
            scale += item.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1) * n + j];
                v[i * n + j] = 0.0;
                v[j * n + i] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for item in e.iter_mut().take(i) {
                *item = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j * n + i] = f;
                g = e[j] + v[j * n + j] * f;
                for k in (j + 1)..i {
                    g += v[k * n + j] * d[k];
                    e[k] += v[k * n + j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k * n + j] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1) * n + j];
                v[i * n + j] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..(n - 1) {
        v[(n - 1) * n + i] = v[i * n + i];
        v[i * n + i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k * n + i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k * n + i + 1] * v[k * n + j];
                }
                for k in 0..=i {
                    v[k * n + j] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k * n + i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1) * n + j];
        v[(n - 1) * n + j] = 0.0;
    }
    v[(n - 1) * n + (n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL with Wilkinson shifts on the tridiagonal form ( EISPACK `tql2`).
fn tql2(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0_f64;
    let mut tst1 = 0.0_f64;
    let eps = 2.0_f64.powi(-52);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERATIONS {
                    return Err(Error::EigenNonConvergence { iterations: iter });
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0_f64;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0_f64;
                let mut s2 = 0.0_f64;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g2 = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g2;
                    d[i + 1] = h + s * (c * g2 + s * d[i]);
                    for k in 0..n {
                        h = v[k * n + i + 1];
                        v[k * n + i + 1] = s * v[k * n + i] + c * h;
                        v[k * n + i] = c * v[k * n + i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Symmetric eigendecomposition, eigenvalues ascending.
///
/// Ties are broken by the stable original-index order so that repeated runs
/// and files derived from them are byte-identical.
pub fn sym_eig(a: &DenseSymMatrix) -> Result<EigenDecomposition> {
    let n = a.dim();
    if n == 0 {
        return Err(Error::DimensionMismatch { expected: 1, got: 0 });
    }
    let mut v = a.a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(n, &mut v, &mut d, &mut e);
    tql2(n, &mut v, &mut d, &mut e)?;

    // stable ascending sort of (eigenvalue, column)
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap().then(i.cmp(&j)));

    let mut eigenvalues = Vec::with_capacity(n);
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        eigenvalues.push(d[src]);
        for row in 0..n {
            vectors[col * n + row] = v[row * n + src];
        }
    }
    Ok(EigenDecomposition { eigenvalues, vectors, n })
}

/// Generalized symmetric eigenproblem `A x = lambda M x` with `M` SPD.
///
/// Reduced through `M = L L^T` to a standard problem for `L^{-1} A L^{-T}`;
/// the returned eigenvectors are M-orthonormal.
pub fn gen_sym_eig(a: &DenseSymMatrix, m: &DenseSymMatrix) -> Result<EigenDecomposition> {
    let n = a.dim();
    if m.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: m.dim() });
    }
    let chol = cholesky(m)?;

    // w = L^{-1} A L^{-T}, computed column- then row-wise
    let mut w = vec![0.0; n * n];
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| a.get(i, j)).collect();
        let y = chol.forward(&col);
        for i in 0..n {
            w[i * n + j] = y[i];
        }
    }
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| w[i * n + j]).collect();
        let y = chol.forward(&row);
        for j in 0..n {
            w[i * n + j] = y[j];
        }
    }
    // symmetrize away the last rounding
    let mut ws = DenseSymMatrix::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            ws.set_sym(i, j, 0.5 * (w[i * n + j] + w[j * n + i]));
        }
    }
    let eig = sym_eig(&ws)?;

    // back-transform x = L^{-T} y; M-orthonormality carries over exactly
    let mut vectors = vec![0.0; n * n];
    for k in 0..n {
        let x = chol.backward(eig.vector(k));
        vectors[k * n..(k + 1) * n].copy_from_slice(&x);
    }
    Ok(EigenDecomposition { eigenvalues: eig.eigenvalues, vectors, n })
}

/// Matrix function `f(A) = Q diag(f(lambda)) Q^T` of a symmetric matrix.
pub fn matrix_function(a: &DenseSymMatrix, f: impl Fn(f64) -> f64) -> Result<DenseSymMatrix> {
    let eig = sym_eig(a)?;
    for &lam in &eig.eigenvalues {
        let v = f(lam);
        if !v.is_finite() {
            return Err(Error::MatrixFunctionDomain { eigenvalue: lam });
        }
    }
    Ok(eig.assemble_function(f))
}

// ── Inner products ──────────────────────────────────────────────────

/// Weighted inner product `<v, w> = v^T (G w)` given through the Gram action.
pub struct InnerProduct {
    gram: Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl InnerProduct {
    pub fn euclidean() -> Self {
        InnerProduct { gram: Box::new(|v: &[f64]| v.to_vec()) }
    }

    pub fn from_diag(weights: Vec<f64>) -> Self {
        InnerProduct {
            gram: Box::new(move |v: &[f64]| {
                v.iter().zip(&weights).map(|(a, w)| a * w).collect()
            }),
        }
    }

    pub fn from_matrix(g: DenseSymMatrix) -> Self {
        InnerProduct { gram: Box::new(move |v: &[f64]| g.matvec(v)) }
    }

    pub fn from_fn(gram: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        InnerProduct { gram: Box::new(gram) }
    }

    pub fn apply_gram(&self, v: &[f64]) -> Vec<f64> {
        (self.gram)(v)
    }

    pub fn inner(&self, v: &[f64], w: &[f64]) -> f64 {
        let gw = (self.gram)(w);
        v.iter().zip(&gw).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        self.inner(v, v).max(0.0).sqrt()
    }
}

// ── Conjugate gradients ─────────────────────────────────────────────

/// Converged CG solve: solution, iterations used, final weighted residual.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Conjugate gradients for an operator that is SPD with respect to `ip`.
///
/// Stops when the ip-norm of the residual drops below `tol` times the
/// ip-norm of the right-hand side. Exceeding `max_iter` fails with the best
/// iterate attached; non-finite values fail immediately.
pub fn conjugate_gradient(
    op: impl Fn(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    ip: &InnerProduct,
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let n = rhs.len();
    let rhs_norm = ip.norm(rhs);
    if !rhs_norm.is_finite() {
        return Err(Error::NonFinite { context: "cg right-hand side" });
    }
    if rhs_norm == 0.0 {
        return Ok(CgOutcome { solution: vec![0.0; n], iterations: 0, residual: 0.0 });
    }
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut rz = ip.inner(&r, &r);
    if rz.sqrt() <= tol * rhs_norm {
        return Ok(CgOutcome { solution: x, iterations: 0, residual: rz.sqrt() });
    }
    let mut p = r.clone();
    for iter in 1..=max_iter {
        let ap = op(&p);
        let pap = ip.inner(&p, &ap);
        if !pap.is_finite() {
            return Err(Error::NonFinite { context: "cg operator application" });
        }
        if pap <= 0.0 {
            return Err(Error::CgBreakdown { iteration: iter, curvature: pap });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rz_new = ip.inner(&r, &r);
        if !rz_new.is_finite() {
            return Err(Error::NonFinite { context: "cg residual" });
        }
        if rz_new.sqrt() <= tol * rhs_norm {
            return Ok(CgOutcome { solution: x, iterations: iter, residual: rz_new.sqrt() });
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::CgMaxIter(Box::new(CgFailure {
        best: x,
        residual: rz.sqrt(),
        iterations: max_iter,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;
    use proptest::prelude::*;

    fn random_sym(n: usize, rng: &mut Rng64) -> DenseSymMatrix {
        DenseSymMatrix::from_fn_sym(n, |_, _| rng.normal())
    }

    fn random_spd(n: usize, rng: &mut Rng64) -> DenseSymMatrix {
        // R^T R + n I keeps the spectrum comfortably positive
        let r = DenseMatrix::from_rows(
            &(0..n).map(|_| (0..n).map(|_| rng.normal()).collect()).collect::<Vec<_>>(),
        );
        let mut g = r.gram();
        for i in 0..n {
            g.add_sym(i, i, n as f64);
        }
        g
    }

    fn eig_residual(a: &DenseSymMatrix, eig: &EigenDecomposition) -> f64 {
        let n = a.dim();
        let mut worst = 0.0_f64;
        for k in 0..n {
            let q = eig.vector(k);
            let aq = a.matvec(q);
            for i in 0..n {
                worst = worst.max((aq[i] - eig.eigenvalues[k] * q[i]).abs());
            }
        }
        worst
    }

    fn orthonormality_defect(eig: &EigenDecomposition) -> f64 {
        let n = eig.dim();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..=i {
                let d: f64 = eig.vector(i).iter().zip(eig.vector(j)).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    #[test]
    fn identity_eigenvalues() {
        let eig = sym_eig(&DenseSymMatrix::identity(3)).unwrap();
        for &l in &eig.eigenvalues {
            assert!((l - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn two_by_two_hand_computed() {
        // [[2,1],[1,2]] has characteristic polynomial (2-l)^2 - 1 -> l = 1, 3
        let a = DenseSymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let eig = sym_eig(&a).unwrap();
        assert!((eig.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((eig.eigenvalues[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_case_sorted_with_unit_vectors() {
        let a = DenseSymMatrix::from_diag(&[5.0, -1.0, 0.0]);
        let eig = sym_eig(&a).unwrap();
        assert_eq!(eig.eigenvalues, vec![-1.0, 0.0, 5.0]);
        for (k, expect) in [(0usize, 1usize), (1, 2), (2, 0)] {
            let q = eig.vector(k);
            assert!((q[expect].abs() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn residual_and_orthonormality_on_random_matrices() {
        let mut rng = Rng64::new(11);
        for n in [1usize, 2, 5, 12, 30] {
            let a = random_sym(n, &mut rng);
            let eig = sym_eig(&a).unwrap();
            assert!(orthonormality_defect(&eig) <= 1e-10, "n={n}");
            assert!(eig_residual(&a, &eig) <= 1e-8 * a.max_abs().max(1.0), "n={n}");
        }
    }

    #[test]
    fn asymmetric_rows_rejected() {
        let err = DenseSymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.1, 1.0]]).unwrap_err();
        assert!(matches!(err, Error::NotSymmetric { .. }));
    }

    #[test]
    fn gen_eig_reduces_to_standard_for_identity_mass() {
        let mut rng = Rng64::new(3);
        let a = random_sym(8, &mut rng);
        let m = DenseSymMatrix::identity(8);
        let e1 = sym_eig(&a).unwrap();
        let e2 = gen_sym_eig(&a, &m).unwrap();
        for (x, y) in e1.eigenvalues.iter().zip(&e2.eigenvalues) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn gen_eig_identity_pencil() {
        let mut rng = Rng64::new(4);
        let m = random_spd(6, &mut rng);
        let eig = gen_sym_eig(&m, &m).unwrap();
        for &l in &eig.eigenvalues {
            assert!((l - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gen_eig_two_by_two_pencil_by_hand() {
        // A = diag(2,1), M = diag(1,2): eigenvalues 2 and 1/2
        let a = DenseSymMatrix::from_diag(&[2.0, 1.0]);
        let m = DenseSymMatrix::from_diag(&[1.0, 2.0]);
        let eig = gen_sym_eig(&a, &m).unwrap();
        assert!((eig.eigenvalues[0] - 0.5).abs() < 1e-14);
        assert!((eig.eigenvalues[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn gen_eig_m_orthonormal_vectors() {
        let mut rng = Rng64::new(5);
        let a = random_sym(10, &mut rng);
        let m = random_spd(10, &mut rng);
        let eig = gen_sym_eig(&a, &m).unwrap();
        for i in 0..10 {
            for j in 0..=i {
                let mx = m.matvec(eig.vector(j));
                let d: f64 = eig.vector(i).iter().zip(&mx).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((d - target).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gen_eig_rejects_indefinite_mass() {
        let a = DenseSymMatrix::identity(2);
        let m = DenseSymMatrix::from_diag(&[1.0, -1.0]);
        let err = gen_sym_eig(&a, &m).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { pivot: 1 }));
    }

    #[test]
    fn cg_identity_one_iteration() {
        let out = conjugate_gradient(
            |v: &[f64]| v.to_vec(),
            &[1.0, 2.0, 3.0],
            &InnerProduct::euclidean(),
            1e-12,
            10,
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        assert!((out.solution[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cg_diagonal_solve() {
        let out = conjugate_gradient(
            |v: &[f64]| vec![v[0], 2.0 * v[1]],
            &[1.0, 2.0],
            &InnerProduct::euclidean(),
            1e-12,
            10,
        )
        .unwrap();
        assert!((out.solution[0] - 1.0).abs() < 1e-12);
        assert!((out.solution[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cg_matches_dense_cholesky_on_random_spd() {
        let mut rng = Rng64::new(7);
        let a = random_spd(20, &mut rng);
        let rhs: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let chol = cholesky(&a).unwrap();
        let exact = chol.solve(&rhs);
        let out = conjugate_gradient(|v| a.matvec(v), &rhs, &InnerProduct::euclidean(), 1e-12, 200)
            .unwrap();
        let num: f64 = exact
            .iter()
            .zip(&out.solution)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = exact.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den < 1e-8);
    }

    #[test]
    fn cg_max_iter_carries_best_iterate() {
        let mut rng = Rng64::new(9);
        let a = random_spd(15, &mut rng);
        let rhs: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let err =
            conjugate_gradient(|v| a.matvec(v), &rhs, &InnerProduct::euclidean(), 1e-14, 2)
                .unwrap_err();
        match err {
            Error::CgMaxIter(fail) => {
                assert_eq!(fail.iterations, 2);
                assert_eq!(fail.best.len(), 15);
                assert!(fail.residual.is_finite());
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cg_rejects_non_finite() {
        let err = conjugate_gradient(
            |v: &[f64]| vec![f64::NAN * v[0]],
            &[1.0],
            &InnerProduct::euclidean(),
            1e-10,
            5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn cg_weighted_inner_product() {
        // operator diag(1,4) is self-adjoint in the diag(3, 0.5) weighting
        let ip = InnerProduct::from_diag(vec![3.0, 0.5]);
        let out = conjugate_gradient(
            |v: &[f64]| vec![v[0], 4.0 * v[1]],
            &[3.0, 8.0],
            &ip,
            1e-13,
            10,
        )
        .unwrap();
        assert!((out.solution[0] - 3.0).abs() < 1e-10);
        assert!((out.solution[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn inner_product_symmetry_and_positivity() {
        let mut rng = Rng64::new(23);
        let g = random_spd(8, &mut rng);
        let ip = InnerProduct::from_matrix(g);
        for _ in 0..20 {
            let v: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let w: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let vw = ip.inner(&v, &w);
            let wv = ip.inner(&w, &v);
            assert!((vw - wv).abs() <= 1e-12 * vw.abs().max(1.0));
            assert!(ip.inner(&v, &v) > 0.0);
        }
    }

    #[test]
    fn matrix_function_identity_map() {
        let mut rng = Rng64::new(13);
        let a = random_sym(9, &mut rng);
        let same = matrix_function(&a, |x| x).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert!((same.get(i, j) - a.get(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matrix_function_exp_on_diagonal() {
        let a = DenseSymMatrix::from_diag(&[0.0, 2.0_f64.ln()]);
        let e = matrix_function(&a, f64::exp).unwrap();
        assert!((e.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((e.get(1, 1) - 2.0).abs() < 1e-12);
        assert!(e.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn matrix_sqrt_squares_back() {
        let mut rng = Rng64::new(17);
        let a = random_spd(12, &mut rng);
        let s = matrix_function(&a, f64::sqrt).unwrap();
        // s * s == a
        for i in 0..12 {
            let col: Vec<f64> = (0..12).map(|j| s.get(j, i)).collect();
            let sq = s.matvec(&col);
            for j in 0..12 {
                assert!((sq[j] - a.get(j, i)).abs() < 1e-8 * a.max_abs());
            }
        }
    }

    #[test]
    fn matrix_sqrt_rejects_negative_spectrum() {
        let a = DenseSymMatrix::from_diag(&[1.0, -2.0]);
        let err = matrix_function(&a, f64::sqrt).unwrap_err();
        match err {
            Error::MatrixFunctionDomain { eigenvalue } => assert!((eigenvalue + 2.0).abs() < 1e-12),
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn spectral_norm(m: &DenseMatrix) -> f64 {
        sym_eig(&m.gram()).unwrap().eigenvalues.last().unwrap().max(0.0).sqrt()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        // eigenvalue sandwich under congruence with a boundedly invertible map
        #[test]
        fn eigenvalue_sandwich(seed in 0u64..1000) {
            let mut rng = Rng64::new(seed);
            let n = 10;
            // PSD C
            let r = DenseMatrix::from_rows(
                &(0..n).map(|_| (0..n).map(|_| rng.normal()).collect()).collect::<Vec<_>>());
            let c = r.gram();
            // invertible T = I + small perturbation
            let mut t_rows = vec![vec![0.0; n]; n];
            for (i, row) in t_rows.iter_mut().enumerate() {
                for (j, val) in row.iter_mut().enumerate() {
                    *val = if i == j { 1.0 } else { 0.0 };
                    *val += 0.3 * rng.normal();
                }
            }
            let t = DenseMatrix::from_rows(&t_rows);
            let t_norm = spectral_norm(&t);
            // invert T densely via Gram trick: T^{-1} = (T^T T)^{-1} T^T
            let gram = t.gram();
            let chol = match cholesky(&gram) { Ok(c) => c, Err(_) => return Ok(()) };
            let mut tinv = DenseMatrix::zeros(n, n);
            for j in 0..n {
                let ej: Vec<f64> = (0..n).map(|i| if i == j {1.0} else {0.0}).collect();
                let x = chol.solve(&t.t_matvec(&ej));
                for i in 0..n { tinv.set(i, j, x[i]); }
            }
            let tinv_norm = spectral_norm(&tinv);
            // C~ = T^{-T} C T^{-1}, assembled column-wise then symmetrized
            let mut ct_full = DenseMatrix::zeros(n, n);
            for j in 0..n {
                let col: Vec<f64> = (0..n).map(|i| tinv.get(i, j)).collect();
                let cc = c.matvec(&col);
                let out = tinv.t_matvec(&cc);
                for i in 0..n { ct_full.set(i, j, out[i]); }
            }
            let mut ct_sym = DenseSymMatrix::zeros(n);
            for i in 0..n {
                for j in 0..=i {
                    ct_sym.set_sym(i, j, 0.5 * (ct_full.get(i, j) + ct_full.get(j, i)));
                }
            }
            let mut lam = sym_eig(&c).unwrap().eigenvalues;
            let mut mu = sym_eig(&ct_sym).unwrap().eigenvalues;
            lam.reverse();
            mu.reverse();
            let slack = 1e-9 * (1.0 + lam[0].abs());
            for k in 0..n {
                prop_assert!(lam[k] >= mu[k] / (tinv_norm * tinv_norm) - slack);
                prop_assert!(lam[k] <= t_norm * t_norm * mu[k] + slack);
            }
        }

        // pencil eigenvalues are invariant under congruence (A, M) -> (S^T A S, S^T M S)
        #[test]
        fn gen_eig_congruence_invariance(seed in 0u64..1000) {
            let mut rng = Rng64::new(seed.wrapping_add(999));
            let n = 6;
            let a = DenseSymMatrix::from_fn_sym(n, |_, _| rng.normal());
            let r = DenseMatrix::from_rows(
                &(0..n).map(|_| (0..n).map(|_| rng.normal()).collect()).collect::<Vec<_>>());
            let mut m = r.gram();
            for i in 0..n { m.add_sym(i, i, n as f64); }
            // S = I + 0.2 * noise, comfortably invertible
            let mut s_rows = vec![vec![0.0; n]; n];
            for (i, row) in s_rows.iter_mut().enumerate() {
                for (j, val) in row.iter_mut().enumerate() {
                    *val = if i == j { 1.0 } else { 0.0 };
                    *val += 0.2 * rng.normal();
                }
            }
            let s = DenseMatrix::from_rows(&s_rows);
            let congr = |x: &DenseSymMatrix| {
                let mut out = DenseSymMatrix::zeros(n);
                for i in 0..n {
                    let si: Vec<f64> = (0..n).map(|k| s.get(k, i)).collect();
                    let xsi = x.matvec(&si);
                    for j in 0..=i {
                        let sj: Vec<f64> = (0..n).map(|k| s.get(k, j)).collect();
                        let v: f64 = sj.iter().zip(&xsi).map(|(p, q)| p * q).sum();
                        out.set_sym(i, j, v);
                    }
                }
                out
            };
            let e1 = gen_sym_eig(&a, &m).unwrap();
            let e2 = gen_sym_eig(&congr(&a), &congr(&m)).unwrap();
            for (x, y) in e1.eigenvalues.iter().zip(&e2.eigenvalues) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }

        // exact-arithmetic-scale CG termination: with k <= n distinct
        // eigenvalues the Krylov space is exhausted after k steps, and at
        // these scales floating point reproduces the exact property
        #[test]
        fn cg_terminates_within_dimension(seed in 0u64..1000, n in 2usize..30) {
            let mut rng = Rng64::new(seed.wrapping_mul(31).wrapping_add(n as u64));
            let k = 1 + n / 3;
            let values: Vec<f64> = (0..k).map(|i| 1.0 + i as f64).collect();
            let d: Vec<f64> = (0..n).map(|i| values[i % k]).collect();
            // conjugate by a Householder reflector to hide the diagonal
            let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let vn: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in v.iter_mut() { *x /= vn; }
            let reflect = |y: &[f64]| -> Vec<f64> {
                let c: f64 = 2.0 * v.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                y.iter().zip(&v).map(|(yi, vi)| yi - c * vi).collect()
            };
            let apply = |y: &[f64]| -> Vec<f64> {
                let w = reflect(y);
                let dw: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a * b).collect();
                reflect(&dw)
            };
            let rhs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let out = conjugate_gradient(apply, &rhs, &InnerProduct::euclidean(), 1e-12, n + 1).unwrap();
            prop_assert!(out.iterations <= n, "{} iterations for n = {n}", out.iterations);
        }
    }
}
