//! Dense row-major `f64` matrices and the small amount of linear algebra the
//! engine needs: products, norms, trace products, cosine similarity and a
//! one-sided Jacobi SVD.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sweep cap for the Jacobi SVD.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal threshold below which a column pair counts as orthogonal.
pub const SVD_OFF_DIAGONAL_TOL: f64 = 1e-12;
/// Norm below which a vector is treated as zero by [`cosine`].
pub const COSINE_DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    /// Builds a matrix from row-major data, rejecting empty shapes, length
    /// mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite entry at flat index {i}")));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Mat::new(r, c, rows.concat())
    }

    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Mat::new(1, v.len(), v.to_vec())
    }

    pub fn column_vector(v: &[f64]) -> Result<Self> {
        Mat::new(v.len(), 1, v.to_vec())
    }

    pub fn scalar(v: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// The single entry of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Mat {
        self.map(|v| alpha * v)
    }

    fn zip_with(&self, other: &Mat, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Mat {
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

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn axpy(&mut self, alpha: f64, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "axpy: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copy of the leading `n` columns.
    pub fn leading_cols(&self, n: usize) -> Mat {
        assert!(n >= 1 && n <= self.cols);
        let mut out = Mat::zeros(self.rows, n);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[..n]);
        }
        out
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape(format!(
                "mul_vec: {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ · v` without materialising the transpose.
    pub fn tmul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::shape(format!(
                "tmul_vec: ({}x{})ᵀ times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o += x * vr;
            }
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Matrix product. Each output entry sums over the shared index left to right.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_nt: {}x{} times ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul_tn: ({}x{})ᵀ times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

pub fn frobenius_norm(m: &Mat) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `tr(aᵀb) = Σ a_ij b_ij`.
pub fn trace_product(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "trace_product: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(dot(&a.data, &b.data))
}

/// Cosine similarity; 0 when either vector has norm below 1e-12.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine: lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm2(u);
    let nv = norm2(v);
    if nu < COSINE_DEGENERATE_NORM || nv < COSINE_DEGENERATE_NORM {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Thin SVD `x = u · diag(s) · vt` with `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Mat,
    pub s: Vec<f64>,
    pub vt: Mat,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Mat {
        let mut us = self.u.clone();
        for r in 0..us.rows {
            for (c, sv) in self.s.iter().enumerate() {
                us[(r, c)] *= sv;
            }
        }
        matmul(&us, &self.vt).expect("svd factors are conformable")
    }
}

/// One-sided Jacobi SVD.
///
/// Right singular vectors are sign-normalised so their first entry with
/// magnitude above 1e-12 is positive; the matching left vector flips with it.
pub fn svd(x: &Mat) -> Result<SvdResult> {
    if !x.is_finite() {
        return Err(Error::numeric("svd input has non-finite entries"));
    }
    let (u, s, vt) = if x.rows >= x.cols {
        let (u, s, v) = jacobi_tall(x)?;
        (u, s, v.transpose())
    } else {
        // xᵀ = U' S V'ᵀ  =>  x = V' S U'ᵀ
        let (u_t, s, v_t) = jacobi_tall(&x.transpose())?;
        (v_t, s, u_t.transpose())
    };
    let mut res = SvdResult { u, s, vt };
    fix_signs(&mut res);
    Ok(res)
}

/// Jacobi on a tall (m >= n) matrix. Returns `(u: m×n, s: n, v: n×n)`.
fn jacobi_tall(x: &Mat) -> Result<(Mat, Vec<f64>, Mat)> {
    let (m, n) = x.shape();
    // Work column-major so rotations touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| x.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == SVD_MAX_SWEEPS {
            return Err(Error::numeric(format!(
                "jacobi svd did not converge after {sweeps} sweeps"
            )));
        }
        sweeps += 1;
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= SVD_OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        converged = !rotated;
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps column order for equal singular values.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let tiny = smax * (m.max(n) as f64) * f64::EPSILON;

    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            (norms[j] > tiny && norms[j] > 0.0).then(|| cols[j].iter().map(|v| v / norms[j]).collect())
        })
        .collect();
    complete_orthonormal(&mut u_cols, m);

    let mut u = Mat::zeros(m, n);
    for (c, col) in u_cols.iter().enumerate() {
        let col = col.as_ref().expect("completed");
        for r in 0..m {
            u[(r, c)] = col[r];
        }
    }
    let mut vm = Mat::zeros(n, n);
    for (c, &j) in order.iter().enumerate() {
        for r in 0..n {
            vm[(r, c)] = v[j][r];
        }
    }
    Ok((u, s, vm))
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let ci = &mut lo[i];
    let cj = &mut hi[0];
    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot,
/// trying standard basis vectors in order.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        loop {
            assert!(candidate < dim, "cannot complete orthonormal basis");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes for stability.
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let p = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= p * o;
                    }
                }
            }
            let nrm = norm2(&e);
            if nrm > 0.5 {
                cols[slot] = Some(e.iter().map(|v| v / nrm).collect());
                break;
            }
        }
    }
}

fn fix_signs(res: &mut SvdResult) {
    let k = res.s.len();
    for i in 0..k {
        let flip = res
            .vt
            .row(i)
            .iter()
            .find(|v| v.abs() > 1e-12)
            .is_some_and(|&v| v < 0.0);
        if flip {
            for v in res.vt.row_mut(i) {
                *v = -*v;
            }
            for r in 0..res.u.rows() {
                res.u[(r, i)] = -res.u[(r, i)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Mat::new(rows, cols, data).unwrap()
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(matches!(Mat::new(2, 2, vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(Mat::new(0, 2, vec![]), Err(Error::Shape(_))));
        assert!(matches!(
            Mat::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = random(3, 4, 1);
        assert_eq!(matmul(&Mat::identity(3), &m).unwrap(), m);

        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let p = matmul(&a, &b).unwrap();
        assert_eq!(p.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(5, 4, 2);
        let b = random(4, 3, 3);
        let p = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a[(i, k)] * b[(k, j)];
                }
                assert!((p[(i, j)] - acc).abs() <= 1e-12);
            }
        }
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree() {
        let a = random(6, 4, 4);
        let b = random(5, 4, 5);
        let c = random(6, 3, 6);
        let nt = matmul_nt(&a, &b).unwrap();
        assert!(nt.max_abs_diff(&matmul(&a, &b.transpose()).unwrap()) < 1e-12);
        let tn = matmul_tn(&a, &c).unwrap();
        assert!(tn.max_abs_diff(&matmul(&a.transpose(), &c).unwrap()) < 1e-12);
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&Mat::zeros(3, 3)), 0.0);
        assert_eq!(frobenius_norm(&Mat::row_vector(&[3.0, 4.0]).unwrap()), 5.0);
        let m = random(6, 6, 7);
        let mut acc = 0.0;
        for r in 0..6 {
            for c in 0..6 {
                acc += m[(r, c)] * m[(r, c)];
            }
        }
        let f = frobenius_norm(&m);
        assert!((f - acc.sqrt()).abs() / f <= 1e-14);
    }

    #[test]
    fn trace_product_cases() {
        let i4 = Mat::identity(4);
        assert_eq!(trace_product(&i4, &i4).unwrap(), 4.0);
        let m = random(3, 5, 8);
        let unit = m.scale(1.0 / frobenius_norm(&m));
        assert!((trace_product(&unit, &unit).unwrap() - 1.0).abs() < 1e-14);

        let a = random(4, 3, 9);
        let b = random(4, 3, 10);
        let prod = matmul(&a.transpose(), &b).unwrap();
        let tr: f64 = (0..3).map(|i| prod[(i, i)]).sum();
        assert!((trace_product(&a, &b).unwrap() - tr).abs() <= 1e-12);
        assert!(matches!(trace_product(&a, &i4), Err(Error::Shape(_))));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let r = svd(&Mat::identity(3)).unwrap();
        assert_eq!(r.s, vec![1.0, 1.0, 1.0]);

        let d = Mat::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let r = svd(&d).unwrap();
        assert_eq!(r.s, vec![3.0, 0.0]);
        let utu = matmul_tn(&r.u, &r.u).unwrap();
        assert!(utu.max_abs_diff(&Mat::identity(2)) < 1e-12);
        assert!(r.reconstruct().max_abs_diff(&d) < 1e-12);
    }

    #[test]
    fn svd_zero_matrix() {
        let r = svd(&Mat::zeros(3, 2)).unwrap();
        assert_eq!(r.s, vec![0.0, 0.0]);
        let utu = matmul_tn(&r.u, &r.u).unwrap();
        assert!(utu.max_abs_diff(&Mat::identity(2)) < 1e-12);
    }

    #[test]
    fn svd_wide_and_tall_reconstruct() {
        for (m, n, seed) in [(8, 5, 11), (5, 8, 12), (1, 6, 13), (6, 1, 14), (3, 40, 15)] {
            let x = random(m, n, seed);
            let r = svd(&x).unwrap();
            let k = m.min(n);
            assert_eq!(r.u.shape(), (m, k));
            assert_eq!(r.vt.shape(), (k, n));
            assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
            let err = frobenius_norm(&r.reconstruct().sub(&x).unwrap());
            assert!(err <= 1e-10 * frobenius_norm(&x), "{m}x{n}: {err}");
            let vvt = matmul_nt(&r.vt, &r.vt).unwrap();
            assert!(vvt.max_abs_diff(&Mat::identity(k)) < 1e-8);
            for i in 0..k {
                let first = r.vt.row(i).iter().find(|v| v.abs() > 1e-12).unwrap();
                assert!(*first > 0.0);
            }
        }
    }

    #[test]
    fn svd_is_deterministic() {
        let x = random(7, 9, 21);
        let a = svd(&x).unwrap();
        let b = svd(&x).unwrap();
        assert_eq!(a.s, b.s);
        assert_eq!(a.vt, b.vt);
        assert_eq!(a.u, b.u);
    }
}
