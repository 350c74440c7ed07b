//! Small dense matrices for the discrete code solver.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Panics on ragged input; intended for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    // Plain loops: every output column is computed by the same instruction
    // sequence, so equal input columns give bitwise-equal output columns.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for t in 0..self.cols {
                let a = self.data[i * self.cols + t];
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(t)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim(
                "matmul_t",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            self.row(i)
                .iter()
                .zip(other.row(j))
                .map(|(a, b)| a * b)
                .sum()
        }))
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim(
                "t_matmul",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        self.transpose().matmul(other)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_diag(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `||self * self^T - I||_F`.
    pub fn orthogonality_error(&self) -> f64 {
        let mut g = self.matmul_t(self).expect("square product");
        g.add_diag(-1.0);
        g.frobenius()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Numerical rank by Gaussian elimination with partial pivoting.
pub fn rank(m: &Matrix, rtol: f64) -> usize {
    let mut a = m.clone();
    let scale = m.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = rtol * scale.max(f64::MIN_POSITIVE) * m.rows.max(m.cols) as f64;
    let mut r = 0;
    for c in 0..a.cols {
        if r == a.rows {
            break;
        }
        let pivot = (r..a.rows)
            .max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs()))
            .unwrap();
        if a[(pivot, c)].abs() <= tol {
            continue;
        }
        for t in 0..a.cols {
            a.data.swap(r * a.cols + t, pivot * a.cols + t);
        }
        for i in r + 1..a.rows {
            let f = a[(i, c)] / a[(r, c)];
            for t in c..a.cols {
                let v = a[(r, t)];
                a[(i, t)] -= f * v;
            }
        }
        r += 1;
    }
    r
}

/// Ridge values tried, in order, when the plain factorization fails.
pub const RIDGE_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for t in 0..j {
            d -= l[(j, t)] * l[(j, t)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for t in 0..j {
                s -= l[(i, t)] * l[(j, t)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows;
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..n {
            let mut s = x[(i, c)];
            for t in 0..i {
                s -= l[(i, t)] * x[(t, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for t in i + 1..n {
                s -= l[(t, i)] * x[(t, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `a x = b` for symmetric positive definite `a`.
///
/// `a` is symmetrized first. If the Cholesky factorization breaks down, ridges
/// from [`RIDGE_LADDER`] are added to the diagonal until it succeeds.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n || b.rows != n {
        return Err(Error::dim(
            "solve_spd",
            &[a.rows, a.cols],
            &[b.rows, b.cols],
        ));
    }
    let sym = Matrix::from_fn(n, n, |r, c| 0.5 * (a[(r, c)] + a[(c, r)]));
    if let Some(l) = cholesky(&sym) {
        return Ok(cholesky_solve(&l, b));
    }
    for ridge in RIDGE_LADDER {
        let mut reg = sym.clone();
        reg.add_diag(ridge);
        if let Some(l) = cholesky(&reg) {
            return Ok(cholesky_solve(&l, b));
        }
    }
    Err(Error::Singular {
        ridge: *RIDGE_LADDER.last().unwrap(),
    })
}

/// Thin SVD `m = U diag(S) V^T` of a square matrix.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows, self.u.cols, |r, c| self.u[(r, c)] * self.s[c]);
        us.matmul_t(&self.v).expect("svd factors conform")
    }
}

pub const SVD_MAX_SWEEPS: usize = 100;
pub const SVD_MAX_DIM: usize = 64;

/// Cyclic one-sided Jacobi SVD for square matrices up to [`SVD_MAX_DIM`].
///
/// Singular values are returned in descending order. Columns of `U` that
/// belong to (numerically) zero singular values are completed to an
/// orthonormal basis.
pub fn svd_small(m: &Matrix) -> Result<Svd> {
    let n = m.rows;
    if m.cols != n {
        return Err(Error::dim("svd_small", &[m.rows, m.cols], &[n, n]));
    }
    if n > SVD_MAX_DIM {
        return Err(Error::Config(format!(
            "svd_small supports k <= {SVD_MAX_DIM}, got {n}"
        )));
    }
    // Work column-major: a[j] is column j.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = f64::EPSILON;
    // Columns below this squared norm are numerically zero; rotating them only
    // shuffles rounding noise.
    let negligible = (eps * m.frobenius()).powi(2);
    // Pairs whose cosine is at rounding level count as orthogonal; with equal
    // singular values a tighter test keeps rotating by 45 degrees forever.
    let ortho_tol = 4.0 * eps * n as f64;
    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= ortho_tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    let mut sv: Vec<f64> = a
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if !converged {
        let residual = off_diagonal(&a);
        return Err(Error::Numerical {
            what: "one-sided Jacobi SVD",
            residual,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));
    let smax = order.first().map_or(0.0, |&i| sv[i]);
    let tiny = smax * eps * n as f64;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s_sorted = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    for &j in &order {
        let sj = sv[j];
        let col = if sj > tiny {
            a[j].iter().map(|x| x / sj).collect()
        } else {
            sv[j] = 0.0;
            vec![0.0; n]
        };
        u_cols.push(col);
        s_sorted.push(sv[j]);
        v_cols.push(v[j].clone());
    }
    orthonormalize(&mut u_cols);

    let u = Matrix::from_fn(n, n, |r, c| u_cols[c][r]);
    let v = Matrix::from_fn(n, n, |r, c| v_cols[c][r]);
    Ok(Svd { u, s: s_sorted, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn off_diagonal(cols: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for p in 0..cols.len() {
        for q in p + 1..cols.len() {
            let g: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
            acc += g * g;
        }
    }
    acc.sqrt()
}

/// Modified Gram-Schmidt that replaces degenerate columns by the standard
/// basis vector with the largest component orthogonal to the columns so far.
fn orthonormalize(cols: &mut [Vec<f64>]) {
    fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
        for _pass in 0..2 {
            for b in basis {
                let d: f64 = b.iter().zip(v.iter()).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
    }
    let n = cols.len();
    for j in 0..n {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        project_out(col, done);
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            col.iter_mut().for_each(|x| *x /= norm);
            continue;
        }
        let (best, best_norm) = (0..n)
            .map(|i| {
                let mut cand = vec![0.0; n];
                cand[i] = 1.0;
                project_out(&mut cand, done);
                let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
                (cand, norm)
            })
            .fold(
                (Vec::new(), -1.0),
                |acc, c| if c.1 > acc.1 { c } else { acc },
            );
        *col = best.into_iter().map(|x| x / best_norm).collect();
    }
}
