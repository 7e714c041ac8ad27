//! Spectrum of `𝓛_r = -Δ_r + ½Λ_r - pΦ^{p-1}` in `L^2_{ρ_r}`.
//!
//! The operator is discretised by the mass-symmetric finite-volume scheme of
//! [`SphericalFv`] and symmetrised to a tridiagonal matrix. Eigenvalues come
//! from Sturm bisection on grids `h` and `2h` with Richardson extrapolation;
//! eigenfunctions come from inverse iteration on the `h` grid and are
//! orthonormal for that grid's mass weights.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::SymTridiag;
use crate::profile_solver::Profile;
use crate::weighted_spaces::{hermite_eval, rho_r, rho_y, CylFunction, CylGrid, GridFunction, RadialGrid, SphericalFv};

/// Discrete `𝓛_r + shift` on a uniform grid `[0, R]`.
#[derive(Clone, Debug)]
pub struct RadialOperator {
    pub h: f64,
    pub r: Vec<f64>,
    pub fv: SphericalFv<f64>,
    /// `α/2 - pΦ^{p-1}` at the nodes.
    pub potential: Vec<f64>,
    pub shift: f64,
    /// Extra diagonal term from the Robin closure at `R`.
    robin: f64,
}

impl RadialOperator {
    /// Assemble on `n_cells` cells of width `h`.
    ///
    /// With `robin` set, the outer closure imposes `u' = e u / r` with the
    /// algebraic exponent `e = -2(V_∞ + shift)` of the non-growing solution.
    pub fn new(profile: &Profile, h: f64, n_cells: usize, shift: f64, robin: bool) -> Self {
        let p = profile.p;
        let al = profile.alpha();
        let n = n_cells + 1;
        let r: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
        let fv = SphericalFv::new(n, h, rho_r);
        let potential: Vec<f64> = r.iter().map(|&x| 0.5 * al - p * profile.eval(x).powf(p - 1.0)).collect();
        let robin = if robin {
            let r_end = r[n - 1];
            let v_inf = if profile.is_constant() { potential[n - 1] } else { 0.5 * al };
            let e = -2.0 * (v_inf + shift);
            let rm = r_end + 0.5 * h;
            let flux = rm * rm * rho_r(rm) / h;
            // The ghost difference u_{N+1} - u_N ≈ h e u_N / r_{N+½} enters with a minus sign.
            -flux * h * e / rm / fv.mass[n - 1]
        } else {
            0.0
        };
        Self { h, r, fv, potential, shift, robin }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }
    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Symmetrised matrix `M^{1/2} A M^{-1/2}`.
    pub fn symmetric(&self) -> SymTridiag<f64> {
        let n = self.len();
        let m = &self.fv.mass;
        let f = &self.fv.flux;
        let mut d = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = 0.0;
            if i > 0 {
                s += f[i - 1];
            }
            if i + 1 < n {
                s += f[i];
            }
            let mut di = s / m[i] + self.potential[i] + self.shift;
            if i + 1 == n {
                di += self.robin;
            }
            d.push(di);
        }
        let e = (0..n - 1).map(|i| -f[i] / (m[i] * m[i + 1]).sqrt()).collect();
        SymTridiag { d, e }
    }

    /// `(𝓛_r + shift) u` at the nodes.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.fv.apply(u, &mut out);
        let n = u.len();
        for i in 0..n {
            out[i] += (self.potential[i] + self.shift) * u[i];
        }
        out[n - 1] += self.robin * u[n - 1];
        out
    }

    pub fn mass_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.fv.mass.iter().zip(f).zip(g).map(|((&m, &a), &b)| m * a * b).sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralParams {
    pub r_max: f64,
    pub h: f64,
    pub count: usize,
    pub richardson: bool,
    /// Distance of `-λ_j` to the integers below which a mode is flagged degenerate.
    pub nondegeneracy_tol: f64,
    pub hermite_cap: usize,
}

impl Default for SpectralParams {
    fn default() -> Self {
        Self { r_max: 15.0, h: 0.0025, count: 8, richardson: true, nondegeneracy_tol: 1e-3, hermite_cap: 60 }
    }
}

/// Eigenpairs of `𝓛_r` indexed so that `j = -ℓ_0, …, -1, 0, 1, …`.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub p: f64,
    pub grid: RadialGrid<f64>,
    /// Finite-volume masses used for orthonormality.
    pub mass: Vec<f64>,
    /// Eigenvalues in increasing order (extrapolated when enabled).
    pub eigenvalues: Vec<f64>,
    /// Raw eigenvalues on the `h` grid.
    pub eigenvalues_h: Vec<f64>,
    pub eigenfunctions: Vec<GridFunction<f64>>,
    /// Number of negative eigenvalues.
    pub ell0: usize,
    pub hermite_cap: usize,
}

impl Spectrum {
    /// Position of `λ_j` in the ascending list.
    pub fn index_of(&self, j: i32) -> Option<usize> {
        let k = self.ell0 as i64 + j as i64;
        (k >= 0 && (k as usize) < self.eigenvalues.len()).then_some(k as usize)
    }

    pub fn lambda(&self, j: i32) -> Option<f64> {
        self.index_of(j).map(|k| self.eigenvalues[k])
    }

    pub fn psi(&self, j: i32) -> Option<&GridFunction<f64>> {
        self.index_of(j).map(|k| &self.eigenfunctions[k])
    }

    /// `ψ_j(r)` by cubic interpolation on the eigenfunction grid.
    pub fn psi_at(&self, j: i32, r: f64) -> Option<f64> {
        let h = self.grid.h()?;
        self.psi(j).map(|g| interp_cubic(&g.values, h, r))
    }

    /// `M(j) = ⌊-λ_j⌋`: modes `M = 0..=M(j)` satisfy `λ_j + M < 0` or sit on zero.
    pub fn m_of(&self, j: i32) -> Option<usize> {
        self.lambda(j).map(|l| if l < 0.0 { (-l + 1e-9).floor() as usize } else { 0 })
    }

    /// Tensor modes `(j, M, μ = λ_j + M)` with `j < 0` and `M <= M(j)`, even Hermite order `2M`.
    pub fn unstable_modes(&self) -> Vec<(i32, usize, f64)> {
        let mut out = Vec::new();
        for k in 0..self.ell0 {
            let j = k as i32 - self.ell0 as i32;
            let l = self.eigenvalues[k];
            let mmax = self.m_of(j).unwrap_or(0);
            for m in 0..=mmax {
                out.push((j, m, l + m as f64));
            }
        }
        out
    }

    /// Table `μ_{j,M} = λ_j + M` for the stored eigenvalues and `M <= m_max`.
    pub fn tensorize(&self, m_max: usize) -> Vec<(i32, usize, f64)> {
        let mut out = Vec::new();
        for (k, &l) in self.eigenvalues.iter().enumerate() {
            let j = k as i32 - self.ell0 as i32;
            for m in 0..=m_max {
                out.push((j, m, l + m as f64));
            }
        }
        out
    }

    /// Maximum deviation from mass-orthonormality of the stored eigenfunctions.
    pub fn orthonormality_defect(&self) -> f64 {
        let n = self.eigenfunctions.len();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..=a {
                let ip: f64 = self
                    .mass
                    .iter()
                    .zip(&self.eigenfunctions[a].values)
                    .zip(&self.eigenfunctions[b].values)
                    .map(|((&m, &x), &y)| m * x * y)
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((ip - target).abs());
            }
        }
        worst
    }
}

/// Lowest `count` eigenvalues of an operator.
fn lowest(op: &RadialOperator, count: usize) -> Result<Vec<f64>> {
    let s = op.symmetric();
    (0..count.min(s.len())).map(|k| s.eigenvalue(k)).collect()
}

pub fn compute_spectrum(profile: &Profile, params: &SpectralParams) -> Result<Spectrum> {
    let n_cells = (params.r_max / params.h).round() as usize;
    if n_cells < 8 || !n_cells.is_multiple_of(2) {
        return Err(LabError::InvalidParameter("spectral grid needs an even number of cells".into()));
    }
    let h = params.r_max / n_cells as f64;
    let fine = RadialOperator::new(profile, h, n_cells, 0.0, false);
    let raw = lowest(&fine, params.count)?;
    let eigenvalues = if params.richardson {
        let coarse = RadialOperator::new(profile, 2.0 * h, n_cells / 2, 0.0, false);
        let raw2 = lowest(&coarse, params.count)?;
        raw.iter().zip(&raw2).map(|(&a, &b)| (4.0 * a - b) / 3.0).collect()
    } else {
        raw.clone()
    };
    let s = fine.symmetric();
    let mut eigenfunctions = Vec::with_capacity(raw.len());
    for &l in &raw {
        let x = s.eigenvector(l)?;
        let mut u: Vec<f64> = x.iter().zip(&fine.fv.mass).map(|(&xi, &m)| xi / m.sqrt()).collect();
        let sign = if u[0] < 0.0 { -1.0 } else { 1.0 };
        u.iter_mut().for_each(|v| *v *= sign);
        let res = residual(&fine, &u, l);
        if !(res < 1e-6) {
            return Err(LabError::EigenNonConvergence(format!("eigenpair residual {res:.2e} at λ={l:.6}")));
        }
        eigenfunctions.push(GridFunction::new(u));
    }
    let ell0 = count_negative(&eigenvalues, params.nondegeneracy_tol);
    Ok(Spectrum {
        p: profile.p,
        grid: RadialGrid::uniform(params.r_max, h)?,
        mass: fine.fv.mass.clone(),
        eigenvalues,
        eigenvalues_h: raw,
        eigenfunctions,
        ell0,
        hermite_cap: params.hermite_cap,
    })
}

/// Mass-weighted relative residual `‖Au - λu‖ / ‖u‖`.
fn residual(op: &RadialOperator, u: &[f64], l: f64) -> f64 {
    let au = op.apply(u);
    let diff: Vec<f64> = au.iter().zip(u).map(|(&a, &b)| a - l * b).collect();
    (op.mass_inner(&diff, &diff) / op.mass_inner(u, u)).sqrt() / (1.0 + l.abs())
}

/// Outcome of the nondegeneracy test.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NondegeneracyVerdict {
    pub lambda_minus1: f64,
    pub lambda_minus1_ok: bool,
    /// `cos(ψ_{-1}, ΛΦ)` in `L^2_{ρ_r}`.
    pub alignment: f64,
    pub alignment_ok: bool,
    /// `(j, λ_j, dist(-λ_j, ℤ))` for `j <= -2`.
    pub deep_modes: Vec<(i32, f64, f64)>,
    pub integer_collision: bool,
    pub hermite_cap_ok: bool,
    pub nondegenerate: bool,
}

/// Eigenvalues below `-tol`; a numerical zero such as the constant
/// profile's `λ_0` is not counted as negative.
pub fn count_negative(eigenvalues: &[f64], tol: f64) -> usize {
    eigenvalues.iter().filter(|&&l| l < -tol).count()
}

/// Pure decision logic on a list of eigenvalues and an alignment value.
pub fn nondegeneracy_verdict(eigenvalues: &[f64], alignment: f64, tol: f64, hermite_cap: usize) -> NondegeneracyVerdict {
    let ell0 = count_negative(eigenvalues, tol);
    let lm1 = if ell0 >= 1 { eigenvalues[ell0 - 1] } else { f64::NAN };
    let lambda_minus1_ok = (lm1 + 1.0).abs() < tol;
    let alignment_ok = alignment > 1.0 - 1e-4;
    let mut deep = Vec::new();
    let mut collision = false;
    let mut cap_ok = true;
    for (k, &l) in eigenvalues.iter().enumerate().take(ell0.saturating_sub(1)) {
        let j = k as i32 - ell0 as i32;
        let dist = (l - l.round()).abs();
        collision |= dist < tol;
        cap_ok &= 2 * ((-l).floor().max(0.0) as usize) <= hermite_cap;
        deep.push((j, l, dist));
    }
    NondegeneracyVerdict {
        lambda_minus1: lm1,
        lambda_minus1_ok,
        alignment,
        alignment_ok,
        deep_modes: deep,
        integer_collision: collision,
        hermite_cap_ok: cap_ok,
        nondegenerate: lambda_minus1_ok && alignment_ok && !collision,
    }
}

/// `cos(ψ_{-1}, ΛΦ)` with the spectrum's mass weights.
pub fn alignment_with_lambda_phi(spectrum: &Spectrum, profile: &Profile) -> Result<f64> {
    let psi = spectrum.psi(-1).ok_or_else(|| LabError::DegenerateInput("no negative eigenvalue".into()))?;
    let lphi: Vec<f64> = spectrum.grid.nodes().iter().map(|&r| profile.lambda_iterates_at(r, 1)[1]).collect();
    let dot: f64 = spectrum.mass.iter().zip(&psi.values).zip(&lphi).map(|((&m, &a), &b)| m * a * b).sum();
    let n1: f64 = spectrum.mass.iter().zip(&psi.values).map(|(&m, &a)| m * a * a).sum();
    let n2: f64 = spectrum.mass.iter().zip(&lphi).map(|(&m, &a)| m * a * a).sum();
    Ok((dot / (n1 * n2).sqrt()).abs())
}

pub fn check_nondegeneracy(spectrum: &Spectrum, profile: &Profile, tol: f64) -> Result<NondegeneracyVerdict> {
    let align = alignment_with_lambda_phi(spectrum, profile)?;
    Ok(nondegeneracy_verdict(&spectrum.eigenvalues, align, tol, spectrum.hermite_cap))
}

/// Cubic Lagrange interpolation on a uniform grid starting at zero, even extension at the axis.
pub fn interp_cubic(v: &[f64], h: f64, r: f64) -> f64 {
    let n = v.len();
    let x = r.abs() / h;
    let i = (x.floor() as isize).clamp(0, n as isize - 2);
    let t = x - i as f64;
    let at = |k: isize| -> f64 {
        let kk = if k < 0 { -k } else { k };
        v[(kk as usize).min(n - 1)]
    };
    let (y0, y1, y2, y3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
    let (tm1, tp1, tp2) = (t + 1.0, t - 1.0, t - 2.0);
    -y0 * t * tp1 * tp2 / 6.0 + y1 * tm1 * tp1 * tp2 / 2.0 - y2 * tm1 * t * tp2 / 2.0 + y3 * tm1 * t * tp1 / 6.0
}

/// Smallest Rayleigh ratio `(𝓛_Y ε, ε) / ‖ε‖^2_{H^1_ρ}` over random smooth `ε`
/// orthogonal to the modes in `removed`.
pub fn spectral_gap_probe(
    spectrum: &Spectrum,
    profile: &Profile,
    removed: &[(i32, usize)],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rg = RadialGrid::uniform(12.0, 0.05)?;
    let grid = CylGrid::new(rg, 16.0, 320)?;
    let p = profile.p;
    let al = profile.alpha();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for &(j, m) in removed {
        let mut f = Vec::with_capacity(grid.nr() * grid.nz());
        for &z in &grid.z {
            let pz = hermite_eval(2 * m, z)?;
            for &r in grid.r.nodes() {
                f.push(spectrum.psi_at(j, r).ok_or_else(|| LabError::DegenerateInput(format!("no mode j={j}")))? * pz);
            }
        }
        for b in &basis {
            let ip = grid.inner_rho(&f, b)?;
            f.iter_mut().zip(b).for_each(|(x, &y)| *x -= ip * y);
        }
        let nrm = grid.inner_rho(&f, &f)?.sqrt();
        f.iter_mut().for_each(|x| *x /= nrm);
        basis.push(f);
    }
    let pot: Vec<f64> = grid
        .z
        .iter()
        .flat_map(|_| grid.r.nodes().iter().map(|&r| 0.5 * al - p * profile.eval(r).powf(p - 1.0)))
        .collect();
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let coef: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (sr, sz) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
        let mut u = CylFunction::from_fn(&grid, |r, z| {
            let (x, y) = (r / sr, z / sz);
            let mut acc = 0.0;
            for a in 0..4 {
                for b in 0..3 {
                    acc += coef[a * 3 + b] * x.powi(2 * a as i32) * y.powi(2 * b as i32);
                }
            }
            acc * (-(x * x + y * y) / 8.0).exp()
        })
        .values;
        for b in &basis {
            let ip = grid.inner_rho(&u, b)?;
            u.iter_mut().zip(b).for_each(|(x, &y)| *x -= ip * y);
        }
        let cf = CylFunction { values: u.clone(), dr: None, dz: None };
        let (dr, dz) = cf.gradient(&grid);
        let grad2: Vec<f64> = dr.iter().zip(&dz).map(|(a, b)| a * a + b * b).collect();
        let quad: Vec<f64> = (0..u.len()).map(|i| grad2[i] + pot[i] * u[i] * u[i]).collect();
        let h1: Vec<f64> = (0..u.len()).map(|i| grad2[i] + u[i] * u[i]).collect();
        let num = grid.integrate(&quad, rho_y)?;
        let den = grid.integrate(&h1, rho_y)?;
        worst = worst.min(num / den);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_flags_integer_collision() {
        let v = nondegeneracy_verdict(&[-3.0004, -1.0, 0.4], 1.0, 1e-3, 60);
        assert!(v.integer_collision);
        assert!(!v.nondegenerate);
        let v = nondegeneracy_verdict(&[-2.5, -1.0, 0.4], 1.0, 1e-3, 60);
        assert!(v.nondegenerate);
    }

    #[test]
    fn verdict_requires_minus_one() {
        let v = nondegeneracy_verdict(&[-0.9, 0.3], 1.0, 1e-3, 60);
        assert!(!v.lambda_minus1_ok);
        assert!(!v.nondegenerate);
    }

    #[test]
    fn cubic_interpolation_is_exact_on_cubics() {
        let h = 0.1;
        let v: Vec<f64> = (0..40).map(|i| { let r = i as f64 * h; 1.0 + r * r - 0.3 * r * r * r }).collect();
        let r = 1.234;
        let exact = 1.0 + r * r - 0.3 * r * r * r;
        assert!((interp_cubic(&v, h, r) - exact).abs() < 1e-12);
    }
}
