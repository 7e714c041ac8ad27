//! Inverse of `𝓛_r + j` in weighted spaces.
//!
//! The banded path solves the finite-volume system on grids `h, 2h, 4h`
//! and Romberg-combines them. When `-j` is an eigenvalue (the
//! resonances `j = 1`, kernel `ΛΦ`, and for the constant profile `j = 0`,
//! kernel `r^2 - 6`), the right side must be orthogonal to the kernel; the
//! system is then solved on the orthogonal complement by shifted iteration,
//! and the result is made orthogonal to the continuous kernel.
//!
//! The variation-of-constants path builds a fundamental pair with the
//! adaptive integrator and is used as an independent cross-check.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::TridiagLu;
use crate::ode::{Dopri, OdeOptions};
use crate::profile_solver::Profile;
use crate::spectral::RadialOperator;
use crate::weighted_spaces::{rho_r, RadialGrid};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct InverterParams {
    pub r_max: f64,
    pub h: f64,
    pub j_max: usize,
    /// Number of grids `h, 2h, 4h, …` combined by Romberg extrapolation (1 disables it).
    pub levels: usize,
    /// Eigenvalues of the discrete `𝓛_r + j` below this size mark a resonance.
    pub resonance_tol: f64,
    /// Relative size of `(f, kernel)` tolerated in a resonant solve.
    pub solvability_tol: f64,
}

impl Default for InverterParams {
    fn default() -> Self {
        Self { r_max: 15.0, h: 0.0025, j_max: 6, levels: 3, resonance_tol: 1e-2, solvability_tol: 1e-6 }
    }
}

const SHIFT_TAU: f64 = 0.1;

enum LevelSolver {
    Direct(TridiagLu<f64>),
    Deflated { shifted: TridiagLu<f64>, kernel: Vec<f64>, index: usize },
}

struct Level {
    op: RadialOperator,
    sqrt_mass: Vec<f64>,
    solver: LevelSolver,
}

impl Level {
    /// `deflate`: index of the eigenvalue to deflate, decided on the finest grid
    /// (`None` there means detect it here). Coarse grids reuse the index because
    /// their near-resonant eigenvalue may drift outside the tolerance window.
    fn new(profile: &Profile, h: f64, n_cells: usize, j: usize, tol: f64, deflate: Option<Option<usize>>) -> Result<Self> {
        let op = RadialOperator::new(profile, h, n_cells, j as f64, true);
        let s = op.symmetric();
        let sqrt_mass = op.fv.mass.iter().map(|m| m.sqrt()).collect();
        let index = match deflate {
            Some(index) => index,
            None => match s.count_below(tol) - s.count_below(-tol) {
                0 => None,
                1 => Some(s.count_below(-tol)),
                _ => return Err(LabError::Solvability(format!("multiple near-zero eigenvalues for j={j}"))),
            },
        };
        let solver = match index {
            None => LevelSolver::Direct(TridiagLu::factor(&s.e, &s.d, &s.e)?),
            Some(k) => {
                let nu = s.eigenvalue(k)?;
                let kernel = s.eigenvector(nu)?;
                let shifted: Vec<f64> = s.d.iter().map(|d| d + SHIFT_TAU).collect();
                LevelSolver::Deflated { shifted: TridiagLu::factor(&s.e, &shifted, &s.e)?, kernel, index: k }
            }
        };
        Ok(Self { op, sqrt_mass, solver })
    }

    fn solve(&self, f: &[f64]) -> Vec<f64> {
        let g: Vec<f64> = f.iter().zip(&self.sqrt_mass).map(|(a, s)| a * s).collect();
        let x = match &self.solver {
            LevelSolver::Direct(lu) => {
                let mut x = g;
                lu.solve_in_place(&mut x);
                x
            }
            LevelSolver::Deflated { shifted, kernel, .. } => {
                let mut g = g;
                project_out(&mut g, kernel);
                let mut x = vec![0.0; g.len()];
                for _ in 0..60 {
                    let mut next: Vec<f64> = g.iter().zip(&x).map(|(a, b)| a + SHIFT_TAU * b).collect();
                    shifted.solve_in_place(&mut next);
                    project_out(&mut next, kernel);
                    let delta = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    let size = next.iter().map(|a| a.abs()).fold(0.0, f64::max);
                    x = next;
                    if delta <= 1e-15 * size.max(1e-300) {
                        break;
                    }
                }
                x
            }
        };
        x.iter().zip(&self.sqrt_mass).map(|(a, s)| a / s).collect()
    }

    fn is_resonant(&self) -> bool {
        matches!(self.solver, LevelSolver::Deflated { .. })
    }

    fn deflated_index(&self) -> Option<usize> {
        match self.solver {
            LevelSolver::Deflated { index, .. } => Some(index),
            LevelSolver::Direct(_) => None,
        }
    }
}

fn project_out(x: &mut [f64], unit: &[f64]) {
    let d: f64 = x.iter().zip(unit).map(|(a, b)| a * b).sum();
    x.iter_mut().zip(unit).for_each(|(a, b)| *a -= d * b);
}

/// Banded solver for `(𝓛_r + j) u = f`, `0 <= j <= j_max`.
pub struct Inverter {
    pub params: InverterParams,
    /// Nodes of the output grid (spacing `h`).
    pub r: Vec<f64>,
    /// Mass weights of the output grid, `≈ r^2 ρ_r dr`.
    pub mass: Vec<f64>,
    lambda_phi: Vec<f64>,
    constant_profile: bool,
    alpha: f64,
    levels: Vec<Vec<Level>>,
}

impl Inverter {
    pub fn new(profile: &Profile, params: InverterParams) -> Result<Self> {
        let n_cells = (params.r_max / params.h).round() as usize;
        let stride = 1usize << params.levels.saturating_sub(1);
        if params.levels == 0 || n_cells < 16 * stride || !n_cells.is_multiple_of(stride) {
            return Err(LabError::InvalidParameter(format!(
                "inverter grid needs a cell count divisible by {stride}"
            )));
        }
        let h = params.r_max / n_cells as f64;
        let mut levels = Vec::with_capacity(params.j_max + 1);
        for j in 0..=params.j_max {
            let fine = Level::new(profile, h, n_cells, j, params.resonance_tol, None)?;
            let index = fine.deflated_index();
            let mut per_j = vec![fine];
            for l in 1..params.levels {
                per_j.push(Level::new(profile, h * (1 << l) as f64, n_cells >> l, j, params.resonance_tol, Some(index))?);
            }
            levels.push(per_j);
        }
        let r: Vec<f64> = (0..=n_cells).map(|i| i as f64 * h).collect();
        let lambda_phi = r.iter().map(|&x| profile.lambda_iterates_at(x, 1)[1]).collect();
        // Simpson weights keep solvability checks and projections fourth-order accurate.
        let mass = RadialGrid::uniform(params.r_max, h)?.rho_weights();
        Ok(Self {
            params: InverterParams { h, ..params },
            r,
            mass,
            lambda_phi,
            constant_profile: profile.is_constant(),
            alpha: profile.alpha(),
            levels,
        })
    }

    pub fn h(&self) -> f64 {
        self.params.h
    }

    pub fn j_max(&self) -> usize {
        self.params.j_max
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.mass.iter().zip(f).zip(g).map(|((&m, &a), &b)| m * a * b).sum()
    }

    pub fn lambda_phi(&self) -> &[f64] {
        &self.lambda_phi
    }

    pub fn is_resonant(&self, j: usize) -> bool {
        self.levels.get(j).map(|l| l[0].is_resonant()).unwrap_or(false)
    }

    /// Continuous kernel direction for a resonant `j`, if known in closed form.
    pub fn kernel(&self, j: usize) -> Option<Vec<f64>> {
        if !self.is_resonant(j) {
            return None;
        }
        if j == 1 {
            return Some(self.lambda_phi.clone());
        }
        if j == 0 && self.constant_profile {
            return Some(self.r.iter().map(|&x| x * x - 6.0).collect());
        }
        match &self.levels[j][0].solver {
            LevelSolver::Deflated { kernel, .. } => {
                Some(kernel.iter().zip(&self.levels[j][0].sqrt_mass).map(|(a, s)| a / s).collect())
            }
            LevelSolver::Direct(_) => None,
        }
    }

    /// Solve `(𝓛_r + j) u = f` with `f` sampled on the output grid.
    pub fn solve(&self, f: &[f64], j: usize) -> Result<Vec<f64>> {
        if f.len() != self.r.len() {
            return Err(LabError::ShapeMismatch(format!("rhs has {} samples, grid {}", f.len(), self.r.len())));
        }
        let levels = self
            .levels
            .get(j)
            .ok_or_else(|| LabError::InvalidParameter(format!("j={j} exceeds j_max={}", self.params.j_max)))?;
        let kernel = self.kernel(j);
        if let Some(k) = &kernel {
            let ip = self.inner(f, k);
            let scale = (self.inner(f, f) * self.inner(k, k)).sqrt();
            if ip.abs() > self.params.solvability_tol * scale.max(f64::MIN_POSITIVE) {
                return Err(LabError::Solvability(format!(
                    "rhs not orthogonal to the kernel at j={j}: relative overlap {:.2e}",
                    ip.abs() / scale
                )));
            }
        }
        let sols: Vec<Vec<f64>> = levels
            .iter()
            .enumerate()
            .map(|(l, lev)| {
                let fl: Vec<f64> = f.iter().step_by(1 << l).copied().collect();
                lev.solve(&fl)
            })
            .collect();
        let mut u = romberg(sols, self.params.h, &self.r);
        if let Some(k) = &kernel {
            orthogonalize(&mut u, k, &self.mass);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Accuracy(format!("non-finite solution at j={j}")));
        }
        Ok(u)
    }

    /// `(𝓛_r + j) u` with the fine-grid operator.
    pub fn apply(&self, u: &[f64], j: usize) -> Result<Vec<f64>> {
        let levels = self
            .levels
            .get(j)
            .ok_or_else(|| LabError::InvalidParameter(format!("j={j} exceeds j_max")))?;
        Ok(levels[0].op.apply(u))
    }
}

/// Eight-point Lagrange interpolation on a uniform grid from zero, even extension at the axis.
///
/// Romberg corrections are interpolated to the skipped nodes; a low-order rule
/// leaves node-to-node noise that second differences of the output amplify by `1/h²`.
pub fn interp_even8(v: &[f64], h: f64, r: f64) -> f64 {
    let n = v.len() as isize;
    let x = r.abs() / h;
    let base = (x.floor() as isize - 3).min(n - 8);
    let at = |k: isize| v[k.unsigned_abs().min(n as usize - 1)];
    let mut acc = 0.0;
    for a in 0..8 {
        let ka = base + a;
        let mut w = 1.0;
        for b in 0..8 {
            if a != b {
                let kb = base + b;
                w *= (x - kb as f64) / (ka - kb) as f64;
            }
        }
        acc += w * at(ka);
    }
    acc
}

/// Romberg extrapolation of solutions on grids `h, 2h, 4h, …` (even error expansion).
///
/// Stage `k` combines neighbouring levels on the coarser grid; each stage's
/// correction is interpolated back to the finest grid.
fn romberg(sols: Vec<Vec<f64>>, h: f64, r: &[f64]) -> Vec<f64> {
    let mut u = sols[0].clone();
    let mut table = sols;
    let mut stage = 1;
    while table.len() > 1 {
        let factor = 4f64.powi(stage);
        let next: Vec<Vec<f64>> = (0..table.len() - 1)
            .map(|l| {
                let coarse = &table[l + 1];
                coarse.iter().enumerate().map(|(i, &c)| (factor * table[l][2 * i] - c) / (factor - 1.0)).collect()
            })
            .collect();
        // Correction relative to the previous stage's finest entry, on that entry's grid.
        let stride = 1usize << stage;
        let hc = h * stride as f64;
        let corr: Vec<f64> = next[0].iter().enumerate().map(|(i, &v)| v - table[0][2 * i]).collect();
        for (i, ui) in u.iter_mut().enumerate() {
            *ui += if i % stride == 0 { corr[i / stride] } else { interp_even8(&corr, hc, r[i]) };
        }
        table = next;
        stage += 1;
    }
    u
}

pub fn orthogonalize(u: &mut [f64], k: &[f64], mass: &[f64]) {
    let ip: f64 = mass.iter().zip(u.iter()).zip(k).map(|((&m, &a), &b)| m * a * b).sum();
    let kk: f64 = mass.iter().zip(k).map(|(&m, &b)| m * b * b).sum();
    if kk > 0.0 {
        u.iter_mut().zip(k).for_each(|(a, &b)| *a -= ip / kk * b);
    }
}

/// Fundamental pair of `(𝓛_r + j) u = 0` sampled on a uniform grid.
#[derive(Clone, Debug)]
pub struct HomogeneousPair {
    pub j: usize,
    pub resonant: bool,
    pub r: Vec<f64>,
    /// Regular at the origin.
    pub phi1: Vec<f64>,
    pub dphi1: Vec<f64>,
    /// Decaying at infinity (non-resonant), or any independent solution (resonant).
    pub phi2: Vec<f64>,
    pub dphi2: Vec<f64>,
}

impl HomogeneousPair {
    /// `r^2 e^{-r^2/4} (φ1' φ2 - φ2' φ1)` at each node.
    pub fn wronskian(&self) -> Vec<f64> {
        (0..self.r.len())
            .map(|i| {
                let r = self.r[i];
                r * r * rho_r(r) * (self.dphi1[i] * self.phi2[i] - self.dphi2[i] * self.phi1[i])
            })
            .collect()
    }
}

fn homogeneous_rhs(profile: &Profile, j: f64) -> impl FnMut(f64, &[f64], &mut [f64]) + '_ {
    let p = profile.p;
    let half_alpha = 0.5 * profile.alpha();
    move |r, y, dy| {
        let v = half_alpha - p * profile.eval(r).powf(p - 1.0);
        dy[0] = y[1];
        dy[1] = -2.0 / r * y[1] + 0.5 * r * y[1] + (v + j) * y[0];
    }
}

/// Build the pair on `[0, r_far]` with spacing close to `h`; the decaying solution is seeded at `r_far`.
/// Closed-form kernel `(value, slope)` of `𝓛_r + j`, normalised to one on the axis.
///
/// Integrating the kernel outward would pick up the growing mode, so known
/// kernels are evaluated directly.
/// Closed-form kernel returning value and derivative at `r`.
type Kernel<'a> = Box<dyn Fn(f64) -> (f64, f64) + 'a>;

fn analytic_kernel(profile: &Profile, j: usize) -> Option<Kernel<'_>> {
    match (profile.is_constant(), j) {
        (true, 1) => Some(Box::new(|_| (1.0, 0.0))),
        (true, 0) => Some(Box::new(|x: f64| ((x * x - 6.0) / -6.0, -x / 3.0))),
        (false, 1) => {
            let al = profile.alpha();
            let scale = 1.0 / (al * profile.a);
            Some(Box::new(move |x: f64| {
                let d = profile.derivs(x, 2);
                (scale * (al * d[0] + x * d[1]), scale * ((al + 1.0) * d[1] + x * d[2]))
            }))
        }
        _ => None,
    }
}

pub fn homogeneous_pair(profile: &Profile, j: usize, resonant: bool, h: f64, r_far: f64) -> Result<HomogeneousPair> {
    let n = (r_far / h).round() as usize;
    let h = r_far / n as f64;
    let r: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let jf = j as f64;
    let opts = OdeOptions { rtol: 1e-13, atol: 1e-300, h_init: 1e-5, h_max: 0.05, ..Default::default() };
    let p = profile.p;
    let v0 = 0.5 * profile.alpha() - p * profile.a.powf(p - 1.0);

    let (phi1, dphi1) = if let Some(k) = analytic_kernel(profile, j).filter(|_| resonant) {
        r.iter().map(|&x| k(x)).unzip()
    } else {
        let r0 = 1e-4;
        let beta = (v0 + jf) / 6.0;
        let mut ode = Dopri::new(homogeneous_rhs(profile, jf), r0, &[1.0 + beta * r0 * r0, 2.0 * beta * r0], opts);
        let (mut phi1, mut dphi1) = (vec![1.0], vec![0.0]);
        for &x in &r[1..] {
            ode.advance_to(x)?;
            phi1.push(ode.y[0]);
            dphi1.push(ode.y[1]);
        }
        (phi1, dphi1)
    };

    let (mut phi2, mut dphi2) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    if resonant {
        // Any solution independent of φ1: vanish at r = 1 with unit slope.
        let i1 = (1.0 / h).round() as usize;
        let ra = r[i1];
        let mut up = Dopri::new(homogeneous_rhs(profile, jf), ra, &[0.0, 1.0], opts);
        phi2[i1] = 0.0;
        dphi2[i1] = 1.0;
        for i in i1 + 1..=n {
            up.advance_to(r[i])?;
            phi2[i] = up.y[0];
            dphi2[i] = up.y[1];
        }
        let mut down = Dopri::new(homogeneous_rhs(profile, jf), ra, &[0.0, 1.0], opts);
        for i in (1..i1).rev() {
            down.advance_to(r[i])?;
            phi2[i] = down.y[0];
            dphi2[i] = down.y[1];
        }
    } else {
        let v_inf = if profile.is_constant() { v0 } else { 0.5 * profile.alpha() };
        let e = -2.0 * (v_inf + jf);
        let decay_term = if profile.is_constant() { 0.0 } else { p * profile.c_inf.unwrap_or(0.0).powf(p - 1.0) };
        let a1 = -e * (e + 1.0) - decay_term;
        let rf = r_far;
        let y0 = [rf.powf(e) * (1.0 + a1 / (rf * rf)), e * rf.powf(e - 1.0) + a1 * (e - 2.0) * rf.powf(e - 3.0)];
        let mut down = Dopri::new(homogeneous_rhs(profile, jf), rf, &y0, opts);
        phi2[n] = y0[0];
        dphi2[n] = y0[1];
        for i in (1..n).rev() {
            down.advance_to(r[i])?;
            phi2[i] = down.y[0];
            dphi2[i] = down.y[1];
        }
    }
    phi2[0] = f64::INFINITY;
    dphi2[0] = f64::NEG_INFINITY;

    // Normalise the Wronskian to one at r = 1.
    let i1 = (1.0 / h).round() as usize;
    let w1 = r[i1] * r[i1] * rho_r(r[i1]) * (dphi1[i1] * phi2[i1] - dphi2[i1] * phi1[i1]);
    if !(w1.abs() > 0.0) || !w1.is_finite() {
        return Err(LabError::Accuracy("degenerate fundamental pair".into()));
    }
    phi2.iter_mut().for_each(|v| *v /= w1);
    dphi2.iter_mut().for_each(|v| *v /= w1);
    Ok(HomogeneousPair { j, resonant, r, phi1, dphi1, phi2, dphi2 })
}

/// Cumulative `∫_{r_0}^{r_i} F` with a fourth-order rule on a uniform grid.
pub fn cumulative_integral(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    if n < 4 {
        for i in 1..n {
            out[i] = out[i - 1] + 0.5 * h * (f[i - 1] + f[i]);
        }
        return out;
    }
    for i in 0..n - 1 {
        let seg = if i == 0 {
            h * (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3]) / 24.0
        } else if i == n - 2 {
            h * (f[n - 4] - 5.0 * f[n - 3] + 19.0 * f[n - 2] + 9.0 * f[n - 1]) / 24.0
        } else {
            h * (-f[i - 1] + 13.0 * f[i] + 13.0 * f[i + 1] - f[i + 2]) / 24.0
        };
        out[i + 1] = out[i] + seg;
    }
    out
}

/// `∫_{r_i}^{r_end} f`, accumulated from the right end.
pub fn tail_integral(f: &[f64], h: f64) -> Vec<f64> {
    let rev: Vec<f64> = f.iter().rev().copied().collect();
    let mut out = cumulative_integral(&rev, h);
    out.reverse();
    out
}

/// Variation-of-constants solution of `(𝓛_r + j) u = f` at the pair's nodes.
///
/// Non-resonant: `u = φ2 ∫_0^r φ1 m f + φ1 ∫_r^∞ φ2 m f`.
/// Resonant: `u = -φ2 ∫_r^∞ φ1 m f - φ1 ∫_0^r φ2 m f`, defined up to multiples of `φ1`.
pub fn voc_solve(pair: &HomogeneousPair, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let r = &pair.r;
    let n = r.len();
    let h = r[1] - r[0];
    let m: Vec<f64> = r.iter().map(|&x| x * x * rho_r(x)).collect();
    let fv: Vec<f64> = r.iter().map(|&x| f(x)).collect();
    let g1: Vec<f64> = (0..n).map(|i| pair.phi1[i] * m[i] * fv[i]).collect();
    let g2: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { pair.phi2[i] * m[i] * fv[i] }).collect();
    // Tail integrals are accumulated from the far end: forming `total - partial`
    // would cancel catastrophically against the exponentially growing factor.
    if pair.resonant {
        let tail1 = tail_integral(&g1, h);
        let c2 = cumulative_integral(&g2, h);
        (0..n)
            .map(|i| if i == 0 { 0.0 } else { -pair.phi2[i] * tail1[i] - pair.phi1[i] * c2[i] })
            .collect()
    } else {
        let c1 = cumulative_integral(&g1, h);
        let tail2 = tail_integral(&g2, h);
        (0..n)
            .map(|i| if i == 0 { pair.phi1[0] * tail2[0] } else { pair.phi2[i] * c1[i] + pair.phi1[i] * tail2[i] })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cumulative_rule_is_exact_on_cubics() {
        let h = 0.1;
        let f: Vec<f64> = (0..30).map(|i| { let x = i as f64 * h; x * x * x - x }).collect();
        let c = cumulative_integral(&f, h);
        for (i, v) in c.iter().enumerate() {
            let x = i as f64 * h;
            assert_relative_eq!(*v, x.powi(4) / 4.0 - x * x / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kappa_scalar_rhs_gives_constant_solution() {
        // On constants 𝓛_κ acts as -1, so (𝓛_κ + 3) 1 = 2.
        let prof = Profile::kappa(7.0, 20.0, 0.01).unwrap();
        let inv = Inverter::new(&prof, InverterParams { j_max: 3, ..Default::default() }).unwrap();
        let f = vec![2.0; inv.r.len()];
        let u = inv.solve(&f, 3).unwrap();
        for (i, v) in u.iter().enumerate().take(inv.r.len() - 1200) {
            assert!((v - 1.0).abs() < 1e-8, "i={i} u={v}");
        }
    }

    #[test]
    fn resonant_solvability_is_enforced() {
        let prof = Profile::kappa(7.0, 20.0, 0.01).unwrap();
        let inv = Inverter::new(&prof, InverterParams { j_max: 1, ..Default::default() }).unwrap();
        assert!(inv.is_resonant(0) && inv.is_resonant(1));
        let f = vec![1.0; inv.r.len()];
        assert!(matches!(inv.solve(&f, 1), Err(LabError::Solvability(_))));
    }
}
