//! Small linear-algebra kernels.
//!
//! Two flavors live here: generic routines over [`Scalar`] so that metric
//! inversion and coframe orthonormalization can be evaluated on dual numbers
//! (giving exact q-derivatives of the whole pipeline), and f64 helpers built
//! on nalgebra's SVD for rank decisions and pseudo-inverses.

use crate::dual::Scalar;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Relative singular-value threshold for all rank decisions.
pub const RANK_REL_TOL: f64 = 1e-9;

/// Dense generic matrix, row-major. Only what the assembly pipeline needs.
#[derive(Clone, Debug)]
pub struct GMat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> GMat<T> {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        GMat { rows, cols, data }
    }

    pub fn at(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len());
        (0..self.rows)
            .map(|i| {
                let mut acc = x[0].lift(0.0);
                for j in 0..self.cols {
                    acc = acc.add(&self.at(i, j).mul(&x[j]));
                }
                acc
            })
            .collect()
    }

    /// Gauss-Jordan inverse with partial pivoting on the real parts.
    pub fn inverse(&self) -> Result<GMat<T>> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let proto = self.data[0].clone();
        let mut a = self.clone();
        let mut inv = GMat::from_fn(n, n, |i, j| proto.lift(if i == j { 1.0 } else { 0.0 }));
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    a.at(i, col)
                        .value()
                        .abs()
                        .partial_cmp(&a.at(j, col).value().abs())
                        .unwrap()
                })
                .unwrap();
            if a.at(pivot, col).value().abs() < 1e-300 {
                return Err(Error::RankDeficient("singular matrix in inverse".into()));
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(col * n + j, pivot * n + j);
                    inv.data.swap(col * n + j, pivot * n + j);
                }
            }
            let d = a.at(col, col).clone();
            for j in 0..n {
                a.set(col, j, a.at(col, j).div(&d));
                inv.set(col, j, inv.at(col, j).div(&d));
            }
            for i in 0..n {
                if i == col {
                    continue;
                }
                // eliminate even when the real part is zero: dual parts may not be
                let factor = a.at(i, col).clone();
                for j in 0..n {
                    let v = a.at(i, j).sub(&factor.mul(a.at(col, j)));
                    a.set(i, j, v);
                    let v = inv.at(i, j).sub(&factor.mul(inv.at(col, j)));
                    inv.set(i, j, v);
                }
            }
        }
        Ok(inv)
    }
}

/// Modified Gram-Schmidt in the inner product `<a,b> = a^T M b`.
///
/// Returns the orthonormalized vectors; errors if a vector's norm collapses
/// below `1e-10` of its original (rank deficiency).
pub fn gram_schmidt<T: Scalar>(vectors: &[Vec<T>], m: &GMat<T>) -> Result<Vec<Vec<T>>> {
    let inner = |a: &[T], b: &[T]| -> T {
        let mb = m.matvec(b);
        let mut acc = a[0].lift(0.0);
        for (ai, mbi) in a.iter().zip(&mb) {
            acc = acc.add(&ai.mul(mbi));
        }
        acc
    };
    let mut out: Vec<Vec<T>> = Vec::with_capacity(vectors.len());
    for (idx, v) in vectors.iter().enumerate() {
        let mut w = v.clone();
        let norm0 = inner(v, v).value().sqrt();
        for u in &out {
            let c = inner(&w, u);
            for (wi, ui) in w.iter_mut().zip(u) {
                *wi = wi.sub(&c.mul(ui));
            }
        }
        let n2 = inner(&w, &w);
        if n2.value() <= 0.0 || n2.value().sqrt() < 1e-10 * norm0.max(1e-30) {
            return Err(Error::RankDeficient(format!(
                "coframe row {idx} is dependent on earlier rows"
            )));
        }
        let norm = n2.sqrt();
        for wi in w.iter_mut() {
            *wi = wi.div(&norm);
        }
        out.push(w);
    }
    Ok(out)
}

/// Number of singular values above `RANK_REL_TOL * sigma_max`.
pub fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_REL_TOL * smax).count()
}

/// Moore-Penrose pseudo-inverse with singular values truncated at
/// `RANK_REL_TOL * sigma_max`.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_capped(m, usize::MAX)
}

/// Pseudo-inverse keeping at most the `rank_cap` largest singular values
/// (and only those above the relative threshold). Capping at the expected
/// rank keeps Gauss-Newton steps well-posed near a rank-deficient zero set,
/// where the extra singular values are small but nonzero.
pub fn pinv_capped(m: &DMatrix<f64>, rank_cap: usize) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = RANK_REL_TOL * smax;
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let mut sinv = DMatrix::zeros(vt.nrows(), u.ncols());
    for &i in order.iter().take(rank_cap) {
        let s = svd.singular_values[i];
        if s > tol {
            sinv[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * sinv * u.transpose()
}

/// Orthonormal basis of the kernel (right singular vectors below threshold).
pub fn kernel_basis(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let svd = m.clone().svd(false, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = RANK_REL_TOL * smax;
    let vt = svd.v_t.as_ref().unwrap();
    let mut out = Vec::new();
    let ncols = m.ncols();
    for i in 0..ncols {
        let s = if i < svd.singular_values.len() {
            svd.singular_values[i]
        } else {
            0.0
        };
        if s <= tol || smax == 0.0 {
            out.push(vt.row(i).transpose());
        }
    }
    out
}

/// Central finite-difference Jacobian of a black-box map, with step
/// `h = h_scale * (1 + |x|)` per the geometry module's fallback convention.
pub fn fd_jacobian(
    f: &dyn Fn(&[f64]) -> Result<DVector<f64>>,
    x: &[f64],
    h_scale: f64,
) -> Result<DMatrix<f64>> {
    let fx = f(x)?;
    let m = fx.len();
    let n = x.len();
    let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = h_scale * (1.0 + xnorm);
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for j in 0..n {
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
        xp[j] = x[j];
        xm[j] = x[j];
    }
    Ok(jac)
}

/// Stack column vectors into a matrix.
pub fn columns(n: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}
