//! Tridiagonal kernels: pivoted LU, Thomas sweeps, Sturm bisection and
//! inverse iteration for symmetric tridiagonal eigenproblems.

use crate::error::{LabError, Result};
use crate::scalar::{c, Real};

/// LU factors of a general tridiagonal matrix with partial pivoting.
///
/// Row interchanges fill one extra superdiagonal (`du2`), as in LAPACK `gttrf`.
#[derive(Clone, Debug)]
pub struct TridiagLu<T: Real = f64> {
    dl: Vec<T>,
    d: Vec<T>,
    du: Vec<T>,
    du2: Vec<T>,
    swap: Vec<bool>,
}

impl<T: Real> TridiagLu<T> {
    /// Factor the matrix with sub-diagonal `sub`, diagonal `diag`, super-diagonal `sup`.
    pub fn factor(sub: &[T], diag: &[T], sup: &[T]) -> Result<Self> {
        let n = diag.len();
        if n == 0 || sub.len() + 1 != n || sup.len() + 1 != n {
            return Err(LabError::ShapeMismatch("tridiagonal bands have inconsistent lengths".into()));
        }
        let mut dl = sub.to_vec();
        let mut d = diag.to_vec();
        let mut du = sup.to_vec();
        let mut du2 = vec![T::zero(); n.saturating_sub(2)];
        let mut swap = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] == T::zero() {
                    return Err(LabError::DegenerateInput("singular tridiagonal matrix".into()));
                }
                let f = dl[i] / d[i];
                dl[i] = f;
                d[i + 1] -= f * du[i];
            } else {
                let f = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = f;
                let tmp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = tmp - f * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -f * du[i + 1];
                }
                swap[i] = true;
            }
        }
        if d[n - 1] == T::zero() || !d[n - 1].is_finite() {
            return Err(LabError::DegenerateInput("singular tridiagonal matrix".into()));
        }
        Ok(Self { dl, d, du, du2, swap })
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.d.len();
        for i in 0..n.saturating_sub(1) {
            if self.swap[i] {
                b.swap(i, i + 1);
            }
            let t = b[i];
            b[i + 1] -= self.dl[i] * t;
        }
        b[n - 1] /= self.d[n - 1];
        if n >= 2 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
    }
}

/// Thomas algorithm without pivoting; adequate for diagonally dominant systems.
pub fn thomas<T: Real>(sub: &[T], diag: &[T], sup: &[T], rhs: &mut [T], scratch: &mut Vec<T>) {
    let n = diag.len();
    scratch.clear();
    scratch.resize(n, T::zero());
    let mut beta = diag[0];
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = sup[i - 1] / beta;
        beta = diag[i] - sub[i - 1] * scratch[i];
        rhs[i] = (rhs[i] - sub[i - 1] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let t = rhs[i + 1];
        rhs[i] -= scratch[i + 1] * t;
    }
}

/// Symmetric tridiagonal matrix (diagonal `d`, off-diagonal `e`).
#[derive(Clone, Debug)]
pub struct SymTridiag<T: Real = f64> {
    pub d: Vec<T>,
    pub e: Vec<T>,
}

impl<T: Real> SymTridiag<T> {
    pub fn new(d: Vec<T>, e: Vec<T>) -> Result<Self> {
        if d.is_empty() || e.len() + 1 != d.len() {
            return Err(LabError::ShapeMismatch("symmetric tridiagonal bands".into()));
        }
        Ok(Self { d, e })
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }
    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    /// Number of eigenvalues strictly below `x` (Sturm sequence).
    pub fn count_below(&self, x: T) -> usize {
        let tiny = T::min_positive_value().sqrt();
        let guard = |q: T| if q.abs() < tiny { -tiny } else { q };
        let mut q = guard(self.d[0] - x);
        let mut count = usize::from(q < T::zero());
        for i in 1..self.d.len() {
            q = guard(self.d[i] - x - self.e[i - 1] * self.e[i - 1] / q);
            if q < T::zero() {
                count += 1;
            }
        }
        count
    }

    pub fn gershgorin(&self) -> (T, T) {
        let n = self.d.len();
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for i in 0..n {
            let mut rad = T::zero();
            if i > 0 {
                rad += self.e[i - 1].abs();
            }
            if i + 1 < n {
                rad += self.e[i].abs();
            }
            lo = lo.min(self.d[i] - rad);
            hi = hi.max(self.d[i] + rad);
        }
        (lo, hi)
    }

    /// The `k`-th smallest eigenvalue (0-based) by bisection.
    pub fn eigenvalue(&self, k: usize) -> Result<T> {
        if k >= self.len() {
            return Err(LabError::InvalidParameter(format!("eigenvalue index {k} out of range")));
        }
        let (mut lo, mut hi) = self.gershgorin();
        let scale = lo.abs().max(hi.abs()).max(T::one());
        for _ in 0..200 {
            let mid = c::<T>(0.5) * (lo + hi);
            if self.count_below(mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= c::<T>(4.0) * T::epsilon() * scale {
                break;
            }
        }
        Ok(c::<T>(0.5) * (lo + hi))
    }

    /// Unit eigenvector for an eigenvalue estimate, by shifted inverse iteration.
    pub fn eigenvector(&self, lambda: T) -> Result<Vec<T>> {
        let n = self.len();
        let scale = self.gershgorin().1.abs().max(T::one());
        let shift = lambda + c::<T>(64.0) * T::epsilon() * scale;
        let diag: Vec<T> = self.d.iter().map(|&d| d - shift).collect();
        let lu = TridiagLu::factor(&self.e, &diag, &self.e).or_else(|_| {
            let nudged: Vec<T> = diag.iter().map(|&d| d - T::epsilon() * scale).collect();
            TridiagLu::factor(&self.e, &nudged, &self.e)
        })?;
        let mut v: Vec<T> = (0..n).map(|i| T::one() + c::<T>(1e-3) * T::from_usize_lossy(i % 7)).collect();
        normalize(&mut v);
        let mut prev = v.clone();
        for _ in 0..8 {
            lu.solve_in_place(&mut v);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(LabError::EigenNonConvergence("inverse iteration overflowed".into()));
            }
            normalize(&mut v);
            let dot: T = v.iter().zip(&prev).map(|(&a, &b)| a * b).sum();
            if T::one() - dot.abs() < c::<T>(100.0) * T::epsilon() {
                break;
            }
            prev.clone_from(&v);
        }
        Ok(v)
    }

    pub fn matvec(&self, x: &[T], out: &mut [T]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = self.d[i] * x[i];
            if i > 0 {
                acc += self.e[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.e[i] * x[i + 1];
            }
            out[i] = acc;
        }
    }
}

pub fn normalize<T: Real>(v: &mut [T]) {
    let n: T = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if n > T::zero() {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Solve a small dense system by Gaussian elimination with partial pivoting.
pub fn solve_dense<T: Real>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Result<Vec<T>> {
    let n = b.len();
    if a.len() != n || a.iter().any(|row| row.len() != n) {
        return Err(LabError::ShapeMismatch("dense system".into()));
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(col);
        if a[piv][col] == T::zero() || !a[piv][col].is_finite() {
            return Err(LabError::SingularModulation("singular dense system".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != T::zero() {
                for k in col..n {
                    let t = a[col][k];
                    a[row][k] -= f * t;
                }
                let t = b[col];
                b[row] -= f * t;
            }
        }
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let s: T = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pivoted_lu_solves_indefinite_system() {
        let sub = vec![1.0, 3.0, -2.0, 0.5];
        let diag = vec![1e-14, 2.0, -1.0, 4.0, 1.0];
        let sup = vec![2.0, 1.0, 0.5, 3.0];
        let x_true = vec![1.0, -2.0, 0.5, 3.0, -1.0];
        let mut b = vec![0.0; 5];
        for i in 0..5 {
            b[i] = diag[i] * x_true[i];
            if i > 0 {
                b[i] += sub[i - 1] * x_true[i - 1];
            }
            if i < 4 {
                b[i] += sup[i] * x_true[i + 1];
            }
        }
        let lu = TridiagLu::factor(&sub, &diag, &sup).unwrap();
        lu.solve_in_place(&mut b);
        for (a, e) in b.iter().zip(&x_true) {
            assert_relative_eq!(*a, *e, epsilon = 1e-12);
        }
    }

    #[test]
    fn sturm_bisection_on_discrete_laplacian() {
        let n = 50;
        let t = SymTridiag::new(vec![2.0; n], vec![-1.0; n - 1]).unwrap();
        for k in 0..5 {
            let exact = 2.0 - 2.0 * ((k + 1) as f64 * std::f64::consts::PI / (n + 1) as f64).cos();
            assert_relative_eq!(t.eigenvalue(k).unwrap(), exact, epsilon = 1e-13);
            let v = t.eigenvector(exact).unwrap();
            let mut av = vec![0.0; n];
            t.matvec(&v, &mut av);
            for i in 0..n {
                assert!((av[i] - exact * v[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn thomas_matches_lu_for_dominant_system() {
        let n = 20;
        let sub = vec![-1.0; n - 1];
        let sup = vec![-0.5; n - 1];
        let diag = vec![3.0; n];
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut a = rhs.clone();
        let mut b = rhs.clone();
        thomas(&sub, &diag, &sup, &mut a, &mut Vec::new());
        TridiagLu::factor(&sub, &diag, &sup).unwrap().solve_in_place(&mut b);
        for i in 0..n {
            assert_relative_eq!(a[i], b[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn dense_solver() {
        let a = vec![vec![0.0, 2.0], vec![3.0, 1.0]];
        let x = solve_dense(a, vec![4.0, 5.0]).unwrap();
        assert_relative_eq!(x[0], 1.0);
        assert_relative_eq!(x[1], 2.0);
    }
}
