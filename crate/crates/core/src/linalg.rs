//! Thin singular value decomposition for the compression codec.
//!
//! The SVD is obtained from the symmetric eigenproblem of the smaller Gram
//! matrix (`AᵀA` or `AAᵀ`), solved with cyclic Jacobi rotations. The large
//! factor is then recovered by one multiplication with `A`, so `U Σ Vᵀ`
//! reproduces `A` to working precision even when small singular values are
//! only known in absolute (not relative) accuracy.

use ndarray::{Array2, ArrayView2, Axis};

use crate::{Error, Result, Scalar};

/// `A = U diag(σ) Vᵀ` with `k = min(m, n)` columns in `U` and rows in `Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    pub u: Array2<T>,
    /// Descending, nonnegative.
    pub singular_values: Vec<T>,
    pub v_t: Array2<T>,
}

impl<T: Scalar> Svd<T> {
    /// Leading `rank` factors as `(U_r Σ_r, V_rᵀ)`.
    pub fn truncate(&self, rank: usize) -> (Array2<T>, Array2<T>) {
        let r = rank.min(self.singular_values.len());
        let mut u_prime = self.u.slice(ndarray::s![.., ..r]).to_owned();
        for (mut col, &s) in u_prime.axis_iter_mut(Axis(1)).zip(&self.singular_values) {
            col.mapv_inplace(|v| v * s);
        }
        let v_t = self.v_t.slice(ndarray::s![..r, ..]).to_owned();
        (u_prime, v_t)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi sweeps.
///
/// Returns eigenvalues (unsorted) and the matrix whose columns are the
/// corresponding orthonormal eigenvectors.
pub fn symmetric_eigen<T: Scalar>(sym: &Array2<T>) -> (Vec<T>, Array2<T>) {
    let n = sym.nrows();
    let mut a: Vec<T> = sym.iter().copied().collect();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let total: T = a.iter().map(|&x| x * x).sum();
    let tol = T::epsilon() * T::epsilon() * total;
    let two = T::of(2.0);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= tol || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (two * apq);
                let t = if theta.is_infinite() {
                    T::zero()
                } else {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                if t == T::zero() {
                    continue;
                }
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i * n + i]).collect();
    let vectors = Array2::from_shape_vec((n, n), v).expect("square");
    (eigenvalues, vectors)
}

/// Tall case (`m >= n`): right vectors from `AᵀA`, left from `A V`.
fn svd_tall<T: Scalar>(a: ArrayView2<T>) -> Svd<T> {
    let gram = a.t().dot(&a);
    let (_, v) = symmetric_eigen(&gram);
    let av = a.dot(&v);
    let norms: Vec<T> = av
        .axis_iter(Axis(1))
        .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let (m, n) = a.dim();
    let mut u = Array2::zeros((m, n));
    let mut v_t = Array2::zeros((n, n));
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > T::zero() {
            u.column_mut(dst).assign(&av.column(src).mapv(|x| x / s));
        }
        v_t.row_mut(dst).assign(&v.column(src));
    }
    Svd {
        u,
        singular_values: sigma,
        v_t,
    }
}

/// Thin SVD of any finite matrix.
pub fn thin_svd<T: Scalar>(a: ArrayView2<T>) -> Result<Svd<T>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("matrix passed to SVD"));
    }
    let (m, n) = a.dim();
    if m == 0 || n == 0 {
        return Err(Error::structural("SVD of an empty matrix"));
    }
    if m >= n {
        Ok(svd_tall(a))
    } else {
        let t = svd_tall(a.t());
        Ok(Svd {
            u: t.v_t.reversed_axes(),
            singular_values: t.singular_values,
            v_t: t.u.reversed_axes(),
        })
    }
}
