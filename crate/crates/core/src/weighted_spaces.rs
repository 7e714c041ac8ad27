//! Grids, Gaussian weights, Hermite polynomials and quadrature.
//!
//! Radial integrals carry the three-dimensional volume factor `r^2`, so a
//! radial inner product is `∫ f g r^2 ρ_r dr` with `ρ_r = exp(-r^2/4)`.
//! Cylinder grids store only `z >= 0`; even symmetry doubles z-integrals.

use crate::error::{LabError, Result};
use crate::scalar::{c, Real};

/// Maximum Hermite order supported by [`hermite_eval`].
pub const HERMITE_MAX_ORDER: usize = 60;

/// Node placement on `[0, R]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Spacing<T> {
    Uniform,
    /// `r(ξ) = R sinh(sξ)/sinh(s)` for uniform `ξ ∈ [0,1]`; refines near the axis.
    Graded { stretch: T },
}

#[derive(Clone, Debug)]
pub struct RadialGrid<T: Real = f64> {
    nodes: Vec<T>,
    /// `dr/dξ` at each node, with `ξ` spaced by `1/(n-1)`.
    jac: Vec<T>,
    r_max: T,
    spacing: Spacing<T>,
}

impl<T: Real> RadialGrid<T> {
    pub fn uniform(r_max: T, h: T) -> Result<Self> {
        if !(h > T::zero()) || !(r_max > h) {
            return Err(LabError::DegenerateInput(format!(
                "uniform grid needs 0 < h < R (h={h}, R={r_max})"
            )));
        }
        let n = (r_max / h).round().to_usize().unwrap_or(0);
        let h = r_max / T::from_usize_lossy(n);
        let nodes: Vec<T> = (0..=n).map(|i| T::from_usize_lossy(i) * h).collect();
        let jac = vec![r_max; n + 1];
        Ok(Self { nodes, jac, r_max, spacing: Spacing::Uniform })
    }

    pub fn graded(r_max: T, count: usize, stretch: T) -> Result<Self> {
        if count < 3 || !(stretch > T::zero()) || !(r_max > T::zero()) {
            return Err(LabError::DegenerateInput("graded grid needs >= 3 nodes and stretch > 0".into()));
        }
        let n = count - 1;
        let sh = stretch.sinh();
        let mut nodes = Vec::with_capacity(count);
        let mut jac = Vec::with_capacity(count);
        for i in 0..=n {
            let xi = T::from_usize_lossy(i) / T::from_usize_lossy(n);
            nodes.push(r_max * (stretch * xi).sinh() / sh);
            jac.push(r_max * stretch * (stretch * xi).cosh() / sh);
        }
        Ok(Self { nodes, jac, r_max, spacing: Spacing::Graded { stretch } })
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn r_max(&self) -> T {
        self.r_max
    }
    pub fn spacing(&self) -> Spacing<T> {
        self.spacing
    }
    pub fn is_uniform(&self) -> bool {
        matches!(self.spacing, Spacing::Uniform)
    }
    /// Spacing of a uniform grid, or `None` when graded.
    pub fn h(&self) -> Option<T> {
        self.is_uniform().then(|| self.nodes[1] - self.nodes[0])
    }

    /// Composite quadrature weights for `∫_0^R f dr`.
    ///
    /// Simpson in the computational variable when the node count is odd,
    /// with a trapezoid closing panel otherwise.
    pub fn dr_weights(&self) -> Vec<T> {
        let n = self.len();
        let dxi = T::one() / T::from_usize_lossy(n - 1);
        let w = simpson_weights::<T>(n);
        w.iter().zip(&self.jac).map(|(&wi, &j)| wi * dxi * j).collect()
    }

    /// Weights for `∫ f r^2 ρ_r dr`.
    pub fn rho_weights(&self) -> Vec<T> {
        self.dr_weights()
            .into_iter()
            .zip(&self.nodes)
            .map(|(w, &r)| w * r * r * rho_r(r))
            .collect()
    }

    /// `(f, g)_{L^2_{ρ_r}}` on this grid.
    pub fn inner(&self, f: &[T], g: &[T]) -> Result<T> {
        check_len(self.len(), f.len(), "inner f")?;
        check_len(self.len(), g.len(), "inner g")?;
        Ok(self.rho_weights().iter().zip(f).zip(g).map(|((&w, &a), &b)| w * a * b).sum())
    }

    pub fn norm(&self, f: &[T]) -> Result<T> {
        Ok(self.inner(f, f)?.sqrt())
    }
}

/// Samples on a radial grid, optionally with derivative samples.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction<T: Real = f64> {
    pub values: Vec<T>,
    pub deriv: Option<Vec<T>>,
}

impl<T: Real> GridFunction<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values, deriv: None }
    }
    pub fn with_deriv(values: Vec<T>, deriv: Vec<T>) -> Self {
        Self { values, deriv: Some(deriv) }
    }
    pub fn from_fn(grid: &RadialGrid<T>, f: impl Fn(T) -> T) -> Self {
        Self::new(grid.nodes().iter().map(|&r| f(r)).collect())
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Tensor grid in `(r, z)` with `z >= 0`.
#[derive(Clone, Debug)]
pub struct CylGrid<T: Real = f64> {
    pub r: RadialGrid<T>,
    pub z: Vec<T>,
    pub hz: T,
}

impl<T: Real> CylGrid<T> {
    pub fn new(r: RadialGrid<T>, z_max: T, nz_cells: usize) -> Result<Self> {
        if nz_cells < 2 || !(z_max > T::zero()) {
            return Err(LabError::DegenerateInput("cylinder grid needs nz >= 2 and Z > 0".into()));
        }
        let hz = z_max / T::from_usize_lossy(nz_cells);
        let z = (0..=nz_cells).map(|k| T::from_usize_lossy(k) * hz).collect();
        Ok(Self { r, z, hz })
    }
    pub fn nr(&self) -> usize {
        self.r.len()
    }
    pub fn nz(&self) -> usize {
        self.z.len()
    }
    /// Flat index, r fastest.
    #[inline]
    pub fn idx(&self, i: usize, k: usize) -> usize {
        k * self.nr() + i
    }

    /// Weights for `∫_ℝ f dz` over even functions sampled on `z >= 0`.
    ///
    /// Trapezoid on the full line is spectrally accurate for smooth
    /// Gaussian-decaying integrands.
    pub fn dz_weights(&self) -> Vec<T> {
        let two = c::<T>(2.0);
        let n = self.nz();
        (0..n)
            .map(|k| if k == 0 || k + 1 == n { self.hz } else { two * self.hz })
            .collect()
    }

    /// `∫∫ f(r,z) w(r,z) r^2 dr dz` over `r ∈ [0,R]`, `z ∈ ℝ`.
    pub fn integrate(&self, f: &[T], weight: impl Fn(T, T) -> T) -> Result<T> {
        check_len(self.nr() * self.nz(), f.len(), "cylinder integrand")?;
        let wr = self.r.dr_weights();
        let wz = self.dz_weights();
        let mut acc = T::zero();
        for (k, (&z, &wzk)) in self.z.iter().zip(&wz).enumerate() {
            let mut row = T::zero();
            for (i, (&r, &wri)) in self.r.nodes().iter().zip(&wr).enumerate() {
                row += wri * r * r * weight(r, z) * f[self.idx(i, k)];
            }
            acc += wzk * row;
        }
        Ok(acc)
    }

    /// `(f, g)_{L^2_{ρ_Y}}`.
    pub fn inner_rho(&self, f: &[T], g: &[T]) -> Result<T> {
        check_len(f.len(), g.len(), "inner_rho")?;
        let prod: Vec<T> = f.iter().zip(g).map(|(&a, &b)| a * b).collect();
        self.integrate(&prod, |r, z| rho_r(r) * rho_z(z))
    }
}

/// Samples on a [`CylGrid`], r fastest, with optional gradient samples.
#[derive(Clone, Debug)]
pub struct CylFunction<T: Real = f64> {
    pub values: Vec<T>,
    pub dr: Option<Vec<T>>,
    pub dz: Option<Vec<T>>,
}

impl<T: Real> CylFunction<T> {
    pub fn from_fn(grid: &CylGrid<T>, f: impl Fn(T, T) -> T) -> Self {
        let mut values = Vec::with_capacity(grid.nr() * grid.nz());
        for &z in &grid.z {
            for &r in grid.r.nodes() {
                values.push(f(r, z));
            }
        }
        Self { values, dr: None, dz: None }
    }

    /// Samples with an analytic gradient `(u, ∂_r u, ∂_z u)`.
    pub fn from_fn_grad(grid: &CylGrid<T>, f: impl Fn(T, T) -> (T, T, T)) -> Self {
        let n = grid.nr() * grid.nz();
        let (mut v, mut dr, mut dz) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for &z in &grid.z {
            for &r in grid.r.nodes() {
                let (a, b, cz) = f(r, z);
                v.push(a);
                dr.push(b);
                dz.push(cz);
            }
        }
        Self { values: v, dr: Some(dr), dz: Some(dz) }
    }

    /// Gradient samples, by second-order differences when not supplied.
    pub fn gradient(&self, grid: &CylGrid<T>) -> (Vec<T>, Vec<T>) {
        let dr = self.dr.clone().unwrap_or_else(|| fd_gradient_r(grid, &self.values));
        let dz = self.dz.clone().unwrap_or_else(|| fd_gradient_z(grid, &self.values));
        (dr, dz)
    }
}

fn fd_gradient_r<T: Real>(grid: &CylGrid<T>, u: &[T]) -> Vec<T> {
    let (nr, nz) = (grid.nr(), grid.nz());
    let r = grid.r.nodes();
    let mut out = vec![T::zero(); u.len()];
    for k in 0..nz {
        let row = &u[k * nr..(k + 1) * nr];
        for i in 0..nr {
            out[k * nr + i] = if i == 0 {
                T::zero()
            } else if i + 1 == nr {
                (row[i] - row[i - 1]) / (r[i] - r[i - 1])
            } else {
                (row[i + 1] - row[i - 1]) / (r[i + 1] - r[i - 1])
            };
        }
    }
    out
}

fn fd_gradient_z<T: Real>(grid: &CylGrid<T>, u: &[T]) -> Vec<T> {
    let (nr, nz) = (grid.nr(), grid.nz());
    let two = c::<T>(2.0);
    let mut out = vec![T::zero(); u.len()];
    for k in 0..nz {
        for i in 0..nr {
            out[k * nr + i] = if k == 0 {
                T::zero()
            } else if k + 1 == nz {
                (u[k * nr + i] - u[(k - 1) * nr + i]) / grid.hz
            } else {
                (u[(k + 1) * nr + i] - u[(k - 1) * nr + i]) / (two * grid.hz)
            };
        }
    }
    out
}

/// Simpson weights on `n` unit-spaced nodes; trapezoid on a trailing odd panel.
pub fn simpson_weights<T: Real>(n: usize) -> Vec<T> {
    let mut w = vec![T::zero(); n];
    if n < 2 {
        return w;
    }
    if n == 2 {
        w[0] = c(0.5);
        w[1] = c(0.5);
        return w;
    }
    let m = if n % 2 == 1 { n } else { n - 1 };
    let third = c::<T>(1.0 / 3.0);
    for i in (0..m - 1).step_by(2) {
        w[i] += third;
        w[i + 1] += c::<T>(4.0) * third;
        w[i + 2] += third;
    }
    if m < n {
        w[n - 2] += c(0.5);
        w[n - 1] += c(0.5);
    }
    w
}

pub fn rho_r<T: Real>(r: T) -> T {
    (-r * r / c(4.0)).exp()
}

pub fn rho_z<T: Real>(z: T) -> T {
    (-z * z / c(4.0)).exp()
}

pub fn rho_y<T: Real>(r: T, z: T) -> T {
    rho_r(r) * rho_z(z)
}

/// `ν_K(z) = 1/(1 + z^{2K})`.
pub fn nu_k<T: Real>(z: T, k: u32) -> T {
    T::one() / (T::one() + z.powi(2 * k as i32))
}

/// `⟨r⟩ = sqrt(1 + r^2)`.
pub fn bracket<T: Real>(r: T) -> T {
    (T::one() + r * r).sqrt()
}

/// Hermite polynomial `P_m` orthogonal for `exp(-z^2/4)`, leading coefficient one.
///
/// `P_{m+1} = z P_m - 2m P_{m-1}`.
pub fn hermite_eval<T: Real>(m: usize, z: T) -> Result<T> {
    if m > HERMITE_MAX_ORDER {
        return Err(LabError::UnsupportedOrder(format!("hermite order {m} > {HERMITE_MAX_ORDER}")));
    }
    let (mut p0, mut p1) = (T::one(), z);
    if m == 0 {
        return Ok(p0);
    }
    for k in 1..m {
        let p2 = z * p1 - c::<T>(2.0 * k as f64) * p0;
        p0 = p1;
        p1 = p2;
    }
    Ok(p1)
}

/// All `P_0..=P_m` at `z`.
pub fn hermite_all<T: Real>(m: usize, z: T) -> Result<Vec<T>> {
    if m > HERMITE_MAX_ORDER {
        return Err(LabError::UnsupportedOrder(format!("hermite order {m} > {HERMITE_MAX_ORDER}")));
    }
    let mut out = Vec::with_capacity(m + 1);
    out.push(T::one());
    if m >= 1 {
        out.push(z);
    }
    for k in 1..m {
        let next = z * out[k] - c::<T>(2.0 * k as f64) * out[k - 1];
        out.push(next);
    }
    Ok(out)
}

/// `‖P_m‖^2_{L^2_{ρ_z}} = sqrt(π) 2^{m+1} m!`.
pub fn hermite_norm_sq<T: Real>(m: usize) -> Result<T> {
    if m > HERMITE_MAX_ORDER {
        return Err(LabError::UnsupportedOrder(format!("hermite order {m} > {HERMITE_MAX_ORDER}")));
    }
    let mut acc = T::PI().sqrt() * c::<T>(2.0);
    for k in 1..=m {
        acc *= c::<T>(2.0 * k as f64);
    }
    Ok(acc)
}

/// Ratio `∫ν_K|u|^2(1+r^2)ρ_r dY / ∫ν_K(|u|^2+|∇u|^2)ρ_r dY`.
pub fn coercivity_ratio<T: Real>(grid: &CylGrid<T>, u: &CylFunction<T>, k: u32) -> Result<T> {
    check_len(grid.nr() * grid.nz(), u.values.len(), "coercivity sample")?;
    let (dr, dz) = u.gradient(grid);
    let sq: Vec<T> = u.values.iter().map(|&v| v * v).collect();
    let num = grid.integrate(&sq, |r, z| nu_k(z, k) * (T::one() + r * r) * rho_r(r))?;
    let h1: Vec<T> = (0..sq.len()).map(|i| sq[i] + dr[i] * dr[i] + dz[i] * dz[i]).collect();
    let den = grid.integrate(&h1, |r, z| nu_k(z, k) * rho_r(r))?;
    if !(den > T::zero()) {
        return Err(LabError::DegenerateInput("zero H^1 norm in coercivity ratio".into()));
    }
    Ok(num / den)
}

pub(crate) fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(LabError::ShapeMismatch(format!("{what}: expected {expected} samples, got {got}")));
    }
    Ok(())
}

/// Finite-volume discretisation of `-(1/(r^2 w)) ∂_r(r^2 w ∂_r)` on a uniform grid.
///
/// Cell volumes are exact for the `r^2` factor (`r^2 h + h^3/12`, axis cell
/// `h^3/24`), which keeps the truncation error uniformly second order up to
/// the axis and gives an error expansion in even powers of `h`.
#[derive(Clone, Debug)]
pub struct SphericalFv<T: Real = f64> {
    pub h: T,
    pub mass: Vec<T>,
    /// `flux[i]` couples nodes `i` and `i+1`.
    pub flux: Vec<T>,
}

impl<T: Real> SphericalFv<T> {
    pub fn new(n_nodes: usize, h: T, w: impl Fn(T) -> T) -> Self {
        let twelfth = c::<T>(1.0 / 12.0);
        let mut mass = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let r = T::from_usize_lossy(i) * h;
            let vol = if i == 0 { h * h * h / c(24.0) } else { r * r * h + h * h * h * twelfth };
            mass.push(vol * w(r));
        }
        let flux = (0..n_nodes.saturating_sub(1))
            .map(|i| {
                let rm = (T::from_usize_lossy(i) + c(0.5)) * h;
                rm * rm * w(rm) / h
            })
            .collect();
        Self { h, mass, flux }
    }

    /// `(A u)_i` with natural (zero-flux) closure at the last node.
    pub fn apply(&self, u: &[T], out: &mut [T]) {
        let n = self.mass.len();
        for i in 0..n {
            let mut acc = T::zero();
            if i + 1 < n {
                acc += self.flux[i] * (u[i] - u[i + 1]);
            }
            if i > 0 {
                acc += self.flux[i - 1] * (u[i] - u[i - 1]);
            }
            out[i] = acc / self.mass[i];
        }
    }
}

/// Finite-volume `-(1/w) ∂_z(w ∂_z)` on uniform `z >= 0` with even symmetry at `z = 0`.
#[derive(Clone, Debug)]
pub struct PlanarFv<T: Real = f64> {
    pub h: T,
    pub mass: Vec<T>,
    pub flux: Vec<T>,
}

impl<T: Real> PlanarFv<T> {
    pub fn new(n_nodes: usize, h: T, w: impl Fn(T) -> T) -> Self {
        let mass = (0..n_nodes)
            .map(|k| {
                let z = T::from_usize_lossy(k) * h;
                if k == 0 { w(z) * h * c(0.5) } else { w(z) * h }
            })
            .collect();
        let flux = (0..n_nodes.saturating_sub(1))
            .map(|k| w((T::from_usize_lossy(k) + c(0.5)) * h) / h)
            .collect();
        Self { h, mass, flux }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gaussian_moments_on_radial_grid() {
        let g = RadialGrid::<f64>::uniform(20.0, 0.01).unwrap();
        let one = vec![1.0; g.len()];
        let r2: Vec<f64> = g.nodes().iter().map(|r| r * r).collect();
        let m0 = g.inner(&one, &one).unwrap();
        // ∫ r^2 e^{-r^2/4} dr = 2 sqrt(pi)
        assert_relative_eq!(m0, 2.0 * std::f64::consts::PI.sqrt(), max_relative = 1e-10);
        assert_relative_eq!(g.inner(&r2, &one).unwrap() / m0, 6.0, max_relative = 1e-10);
    }

    #[test]
    fn graded_grid_integrates_like_uniform() {
        let g = RadialGrid::<f64>::graded(20.0, 2001, 3.0).unwrap();
        let one = vec![1.0; g.len()];
        assert_relative_eq!(g.inner(&one, &one).unwrap(), 2.0 * std::f64::consts::PI.sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn hermite_low_orders() {
        for &z in &[-1.3_f64, 0.0, 0.7, 2.5] {
            assert_relative_eq!(hermite_eval(2, z).unwrap(), z * z - 2.0, epsilon = 1e-14);
            assert_relative_eq!(hermite_eval(4, z).unwrap(), z.powi(4) - 12.0 * z * z + 12.0, epsilon = 1e-12);
        }
        assert!(matches!(hermite_eval::<f64>(61, 0.1), Err(LabError::UnsupportedOrder(_))));
        assert_relative_eq!(hermite_norm_sq::<f64>(0).unwrap(), 2.0 * std::f64::consts::PI.sqrt());
    }

    #[test]
    fn hermite_works_in_single_precision() {
        let v = hermite_eval(3, 1.5_f32).unwrap();
        assert!((v - (1.5f32.powi(3) - 9.0)).abs() < 1e-5);
    }

    #[test]
    fn constant_function_coercivity_ratio() {
        let r = RadialGrid::<f64>::uniform(16.0, 0.02).unwrap();
        let g = CylGrid::new(r, 40.0, 800).unwrap();
        let u = CylFunction::from_fn_grad(&g, |_, _| (1.0, 0.0, 0.0));
        // 1 + E[r^2] = 7 for the radial Gaussian measure in three dimensions.
        assert_relative_eq!(coercivity_ratio(&g, &u, 2).unwrap(), 7.0, max_relative = 1e-8);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = RadialGrid::<f64>::uniform(5.0, 0.1).unwrap();
        assert!(matches!(g.inner(&[1.0], &[1.0]), Err(LabError::ShapeMismatch(_))));
    }

    #[test]
    fn spherical_fv_is_exact_on_r_squared() {
        let h = 0.1;
        let fv = SphericalFv::<f64>::new(50, h, |_| 1.0);
        let u: Vec<f64> = (0..50).map(|i| (i as f64 * h).powi(2)).collect();
        let mut out = vec![0.0; 50];
        fv.apply(&u, &mut out);
        for v in &out[..49] {
            assert_relative_eq!(*v, -6.0, epsilon = 1e-10);
        }
    }
}
