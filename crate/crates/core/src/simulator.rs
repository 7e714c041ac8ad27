//! Modulated flow in self-similar variables.
//!
//! The solution is written `u(t,x) = λ^{-α} U(s, x/λ)` and `U` evolves by
//! `∂_s U = ΔU + (λ_s/λ) ΛU + U^p` on a truncated cylinder `r ≤ R`, `0 ≤ z ≤ Z`
//! (even in `z`). Each step is a convex–concave IMEX step: diffusion, drift and
//! the linear mass term are implicit (alternating-direction line solves), the
//! power nonlinearity is explicit. The rate `m = λ_s/λ + 1/2` and `b` are then
//! fixed so that `ε = U − Φ̃_b − ψ` is `L²_{ρ_Y}`-orthogonal to every unstable
//! tensor mode `ψ_j(r) P_{2M}(z)`, `j ≤ -1`, `M ≤ M(j)`.
//!
//! The next-step field is affine in `m` at a frozen implicit operator, so the
//! orthogonality system is a small Newton problem in `(m, b, a)`; the frozen
//! operator is re-assembled at the solved `m` until the two agree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::Corrector;
use crate::error::{LabError, Result};
use crate::linalg::{solve_dense, thomas};
use crate::profile_solver::{alpha, Profile};
use crate::spectral::{interp_cubic, Spectrum};
use crate::weighted_spaces::{hermite_eval, hermite_norm_sq, simpson_weights, RadialGrid, HERMITE_MAX_ORDER};

/// Bits of the bootstrap verdict mask; a set bit marks a violated bound.
pub mod verdict {
    pub const SCALING: u32 = 1 << 0;
    pub const B_LAW: u32 = 1 << 1;
    pub const UNSTABLE: u32 = 1 << 2;
    pub const EPS_H2: u32 = 1 << 3;
    pub const GRAD_EPS: u32 = 1 << 4;
    pub const NU_K_L2: u32 = 1 << 5;
    pub const NU_K_W1: u32 = 1 << 6;
    pub const SOBOLEV: u32 = 1 << 7;
    pub const NAMES: [&str; 8] = ["scaling", "b_law", "unstable", "eps_h2", "grad_eps", "nuK_l2", "nuK_w1", "sobolev"];
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SimConfig {
    pub p: f64,
    pub s0: f64,
    /// Defaults to `1/(c₁ s₀)`.
    pub b0: Option<f64>,
    /// Defaults to `e^{-s₀/2}`.
    pub lambda0: Option<f64>,
    pub r_max: f64,
    pub nr: usize,
    pub z_max: f64,
    pub nz: usize,
    pub ds: f64,
    pub steps: usize,
    /// Stop once `s` reaches this value, if set.
    pub s_end: Option<f64>,
    /// Polynomial weight exponent `K` in `ν_K`.
    pub k_weight: u32,
    /// Integrability exponent; defaults to the least integer with `(q+1)/(p-1) > 2`.
    pub q: Option<u32>,
    /// Corrector order.
    pub n: usize,
    pub delta_q: f64,
    pub mode_damping: bool,
    pub seed: u64,
    /// Amplitude of the random stable perturbation added to the initial profile.
    pub perturbation: f64,
    /// Stop when `λ` drops below this value; `0` disables the test.
    pub lambda_exit: f64,
    /// Consecutive failing-verdict steps that end a run.
    pub verdict_patience: usize,
    pub basin_tol: f64,
    /// Constants `(c, C)` of the logged Lyapunov surrogate.
    pub lyap_c: f64,
    pub lyap_const: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p: 7.0,
            s0: 50.0,
            b0: None,
            lambda0: None,
            r_max: 12.0,
            nr: 400,
            z_max: 60.0,
            nz: 600,
            ds: 2e-3,
            steps: 20_000,
            s_end: None,
            k_weight: 4,
            q: None,
            n: 3,
            delta_q: 0.05,
            mode_damping: true,
            seed: 0,
            perturbation: 0.0,
            lambda_exit: 0.0,
            verdict_patience: 100,
            basin_tol: 0.1,
            lyap_c: 0.1,
            lyap_const: 1.0,
        }
    }
}

impl SimConfig {
    /// `q` actually used: the configured value or the least admissible one.
    pub fn q_eff(&self) -> u32 {
        self.q.unwrap_or_else(|| (2.0 * (self.p - 1.0) - 1.0).floor() as u32 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidParameter(m));
        if !(self.p > 5.0) {
            return bad(format!("p = {} must exceed 5", self.p));
        }
        if !(self.ds > 0.0 && self.ds <= 1e-2) {
            return bad(format!("Δs = {} outside (0, 1e-2]", self.ds));
        }
        if !(self.s0 > 0.0) {
            return bad("s0 must be positive".into());
        }
        if self.nr < 8 || self.nz < 8 || !(self.r_max > 0.0 && self.z_max > 0.0) {
            return bad("grid needs at least 8 cells per direction".into());
        }
        if (self.q_eff() as f64 + 1.0) / (self.p - 1.0) <= 2.0 {
            return bad(format!("q = {} violates (q+1)/(p-1) > 2", self.q_eff()));
        }
        if let Some(b) = self.b0 {
            if !(b > 0.0) {
                return bad("b0 must be positive".into());
            }
        }
        if self.n == 0 || self.k_weight == 0 {
            return bad("n and K must be at least 1".into());
        }
        Ok(())
    }

    fn b_initial(&self, c1: f64) -> f64 {
        self.b0.unwrap_or(1.0 / (c1 * self.s0))
    }
}

/// Radial factor of a tensor mode.
#[derive(Clone, Debug)]
pub enum Radial {
    /// `Λ_rΦ / ‖Λ_rΦ‖`.
    LambdaPhi { norm: f64 },
    /// Samples on a uniform grid from zero.
    Samples { h: f64, values: Vec<f64> },
}

/// `φ_{j,2M} = ψ_j(r) P_{2M}(z)` with both factors normalised.
#[derive(Clone, Debug)]
pub struct Mode {
    pub j: i32,
    pub m: usize,
    pub lambda_j: f64,
    pub radial: Radial,
}

impl Mode {
    fn radial_at(&self, profile: &Profile, r: f64) -> f64 {
        match &self.radial {
            Radial::LambdaPhi { norm } => profile.lambda_iterates_at(r, 1)[1] / norm,
            Radial::Samples { h, values } => {
                if r > *h * (values.len() - 1) as f64 {
                    0.0
                } else {
                    interp_cubic(values, *h, r)
                }
            }
        }
    }

    fn hermite_at(&self, z: f64) -> f64 {
        let n2 = hermite_norm_sq::<f64>(2 * self.m).unwrap_or(1.0);
        hermite_eval(2 * self.m, z).unwrap_or(0.0) / n2.sqrt()
    }

    pub fn label(&self) -> String {
        format!("a_{}_{}", self.j, self.m)
    }
}

/// Profile, approximate solution and unstable modes used by the flow.
#[derive(Clone, Debug)]
pub struct Library {
    pub corrector: Corrector,
    /// Modes `j = -1`, `M = 0, 1` (modulated by `λ` and `b`).
    pub scaling_modes: [Mode; 2],
    /// Modes `j ≤ -2`, carried by the coefficients `a_{j,M}`.
    pub extra_modes: Vec<Mode>,
}

impl Library {
    /// Modes from a computed spectrum; `j = -1` uses `Λ_rΦ` itself.
    pub fn new(corrector: Corrector, spectrum: &Spectrum) -> Result<Self> {
        let mut extra = Vec::new();
        let h = spectrum
            .grid
            .h()
            .ok_or_else(|| LabError::InvalidParameter("spectrum must live on a uniform grid".into()))?;
        for k in 0..spectrum.ell0.saturating_sub(1) {
            let j = k as i32 - spectrum.ell0 as i32;
            let lj = spectrum.eigenvalues[k];
            let m_max = spectrum.m_of(j).unwrap_or(0);
            if 2 * m_max > HERMITE_MAX_ORDER {
                return Err(LabError::UnsupportedOrder(format!(
                    "λ_{j} = {lj:.3} needs Hermite order {} > {HERMITE_MAX_ORDER}",
                    2 * m_max
                )));
            }
            let values = spectrum.eigenfunctions[k].values.clone();
            for m in 0..=m_max {
                extra.push(Mode { j, m, lambda_j: lj, radial: Radial::Samples { h, values: values.clone() } });
            }
        }
        Self::with_modes(corrector, extra)
    }

    /// Explicit `j ≤ -2` modes (used for constant profiles and tests).
    pub fn with_modes(corrector: Corrector, extra_modes: Vec<Mode>) -> Result<Self> {
        let profile = corrector.profile();
        let norm = lambda_phi_norm(profile)?;
        let base = |m| Mode { j: -1, m, lambda_j: -1.0, radial: Radial::LambdaPhi { norm } };
        Ok(Self { corrector, scaling_modes: [base(0), base(1)], extra_modes })
    }

    pub fn profile(&self) -> &Profile {
        self.corrector.profile()
    }

    pub fn c1(&self) -> f64 {
        self.corrector.c1()
    }

    /// `max_j M(j)` over all carried modes.
    pub fn max_m(&self) -> usize {
        self.extra_modes.iter().map(|m| m.m).max().unwrap_or(0).max(1)
    }

    fn modes(&self) -> impl Iterator<Item = &Mode> {
        self.scaling_modes.iter().chain(&self.extra_modes)
    }
}

fn lambda_phi_norm(profile: &Profile) -> Result<f64> {
    let g = RadialGrid::uniform(profile.grid.r_max(), profile.h())?;
    let l: Vec<f64> = g.nodes().iter().map(|&r| profile.lambda_iterates_at(r, 1)[1]).collect();
    let n = g.norm(&l)?;
    if !(n > 0.0) {
        return Err(LabError::DegenerateInput("Λ_rΦ vanishes".into()));
    }
    Ok(n)
}

/// Tensor grid with the quadrature used for all `ρ_Y` projections.
#[derive(Clone, Debug)]
pub struct SimGrid {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub hr: f64,
    pub hz: f64,
    /// `∫ f r² dr dz` over `z ∈ ℝ` without the Gaussian.
    quad: Vec<f64>,
    /// `quad · ρ_Y`.
    wrho: Vec<f64>,
    /// Rows `k < active` carry all non-negligible `ρ_Y` weight.
    active: usize,
}

impl SimGrid {
    pub fn new(r_max: f64, nr_cells: usize, z_max: f64, nz_cells: usize) -> Self {
        let hr = r_max / nr_cells as f64;
        let hz = z_max / nz_cells as f64;
        let r: Vec<f64> = (0..=nr_cells).map(|i| i as f64 * hr).collect();
        let z: Vec<f64> = (0..=nz_cells).map(|k| k as f64 * hz).collect();
        let wr: Vec<f64> = simpson_weights::<f64>(r.len()).iter().zip(&r).map(|(w, &x)| w * hr * x * x).collect();
        let wz: Vec<f64> =
            (0..z.len()).map(|k| if k == 0 || k + 1 == z.len() { hz } else { 2.0 * hz }).collect();
        let mut quad = Vec::with_capacity(r.len() * z.len());
        let mut wrho = Vec::with_capacity(r.len() * z.len());
        for (k, &zk) in z.iter().enumerate() {
            for (i, &ri) in r.iter().enumerate() {
                let q = wr[i] * wz[k];
                quad.push(q);
                wrho.push(q * (-(ri * ri + zk * zk) / 4.0).exp());
            }
        }
        let active = z.iter().take_while(|&&zk| zk * zk / 4.0 < 75.0).count().max(2).min(z.len());
        Self { r, z, hr, hz, quad, wrho, active }
    }

    pub fn nr(&self) -> usize {
        self.r.len()
    }

    pub fn nz(&self) -> usize {
        self.z.len()
    }

    pub fn len(&self) -> usize {
        self.r.len() * self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, k: usize) -> usize {
        k * self.r.len() + i
    }

    fn active_len(&self) -> usize {
        self.active * self.r.len()
    }

    /// `(f, g)_{L²_{ρ_Y}}`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let n = self.active_len();
        neumaier(self.wrho[..n].iter().zip(&f[..n]).zip(&g[..n]).map(|((w, a), b)| w * a * b))
    }

    pub fn norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).max(0.0).sqrt()
    }

    /// Sample `f(r, z)` on every node.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64 + Sync) -> Vec<f64> {
        let nr = self.nr();
        let mut out = vec![0.0; self.len()];
        out.par_chunks_mut(nr).enumerate().for_each(|(k, row)| {
            let z = self.z[k];
            for (i, o) in row.iter_mut().enumerate() {
                *o = f(self.r[i], z);
            }
        });
        out
    }
}

/// Compensated sum; projections of a small `ε` must not drown in roundoff.
fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0_f64, 0.0_f64);
    for x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

/// State of the modulated flow at one renormalised time.
#[derive(Clone, Debug, PartialEq)]
pub struct RenormState {
    pub s: f64,
    /// `U` on the grid (`r` fastest).
    pub u: Vec<f64>,
    pub log_lambda: f64,
    pub b: f64,
    /// `a_{j,M}` in the order of [`Library::extra_modes`].
    pub a: Vec<f64>,
    /// `m = λ_s/λ + 1/2` over the last two steps, used as predictors.
    pub m: f64,
    pub m_prev: f64,
    pub bs: f64,
}

impl RenormState {
    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }
}

/// Modulation rates at a state and their deviation from the formal laws.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ModulationRhs {
    /// `λ_s/λ`.
    pub lambda_rate: f64,
    pub bs: f64,
    pub a_s: Vec<f64>,
    /// `λ_s/λ + 1/2 − M(b)`.
    pub lambda_residual: f64,
    /// `b_s + b B(b)`.
    pub bs_residual: f64,
    /// `(a_{j,M})_s + (λ_j + M) a_{j,M}`.
    pub a_residual: Vec<f64>,
    pub determinant: f64,
}

/// Norms entering the bootstrap bounds.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct NormTable {
    pub eps_h2rho: f64,
    pub grad_eps_l2q2rho: f64,
    pub nuk_l2: f64,
    pub nuk_w1: f64,
    pub v_w1q: f64,
    pub eps_l2rho: f64,
    pub eps_h1rho: f64,
    pub v_linf: f64,
    /// `L^{2q+2}` mass of `v` in the excluded outer band.
    pub truncation: f64,
}

/// One logged step.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub s: f64,
    pub lambda: f64,
    pub log_lambda: f64,
    pub b: f64,
    pub bs_residual: f64,
    /// `a_{j,M}` before damping.
    pub a: Vec<f64>,
    pub norms: NormTable,
    /// Frozen-weight energy after the step and its change across the step.
    pub energy: f64,
    pub energy_delta: f64,
    pub verdict: u32,
    /// `max_l |(ε, φ_l)_{ρ_Y}|` and the same divided by `‖ε‖_{L²_{ρ_Y}}`.
    pub orth_defect: f64,
    pub orth_rel: f64,
    pub lambda_rate: f64,
    pub lyap_lhs: f64,
    pub lyap_rhs: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct RunSeries {
    pub mode_labels: Vec<String>,
    pub c1: f64,
    pub records: Vec<StepRecord>,
}

impl RunSeries {
    /// `s` strictly increasing and every record finite where it must be.
    pub fn is_consistent(&self) -> bool {
        self.records.windows(2).all(|w| w[1].s > w[0].s)
            && self.records.iter().all(|r| r.s.is_finite() && r.log_lambda.is_finite() && r.b.is_finite())
            && self.records.iter().all(|r| r.a.len() == self.mode_labels.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    OutOfBasin,
    Instability,
    SingularModulation,
    Other,
}

impl FailureKind {
    pub fn of(e: &LabError) -> Self {
        match e {
            LabError::OutOfBasin(_) | LabError::DegenerateDecomposition(_) => Self::OutOfBasin,
            LabError::Instability(_) => Self::Instability,
            LabError::SingularModulation(_) => Self::SingularModulation,
            _ => Self::Other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RunExit {
    Completed,
    LambdaExit { s: f64 },
    VerdictExit { s: f64, mask: u32 },
    Failed { kind: FailureKind, message: String },
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub series: RunSeries,
    pub exit: RunExit,
    pub final_state: Option<RenormState>,
}

/// Result of the static decomposition `u = μ^{-α}(Φ̃_b + Σ a φ + ε)(x/μ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub mu: f64,
    pub b: f64,
    pub a: Vec<f64>,
    /// `‖ε‖_{L²_{ρ_Y}}` and the largest orthogonality defect.
    pub eps_norm: f64,
    pub defect: f64,
    pub iterations: usize,
}

/// Bits of [`verdict`] violated by a norm table at time `s`.
#[allow(clippy::too_many_arguments)]
pub fn verdict_mask(norms: &NormTable, s: f64, lambda: f64, b: f64, a: &[f64], c1: f64, cfg: &SimConfig) -> u32 {
    let n = cfg.n as f64;
    let k = cfg.k_weight as f64;
    let q = cfg.q_eff() as f64;
    let mut mask = 0;
    if !(lambda > 0.0 && lambda < (-s / 4.0).exp()) {
        mask |= verdict::SCALING;
    }
    if !(b > 1.0 / (10.0 * c1 * s) && b < 10.0 / (c1 * s)) {
        mask |= verdict::B_LAW;
    }
    if a.iter().map(|x| x * x).sum::<f64>() > s.powf(-n) {
        mask |= verdict::UNSTABLE;
    }
    if !(norms.eps_h2rho < s.powf(-n / 2.0)) {
        mask |= verdict::EPS_H2;
    }
    if !(norms.grad_eps_l2q2rho < s.powf(-n / 2.0)) {
        mask |= verdict::GRAD_EPS;
    }
    if !(norms.nuk_l2 <= s.powf(-(k + 1.0))) {
        mask |= verdict::NU_K_L2;
    }
    if !(norms.nuk_w1 <= s.powf(-(2.0 * q + k + 1.0))) {
        mask |= verdict::NU_K_W1;
    }
    if !(norms.v_w1q < s.powf(-cfg.delta_q)) {
        mask |= verdict::SOBOLEV;
    }
    mask
}

/// Names of the set bits, comma separated.
pub fn verdict_names(mask: u32) -> String {
    let names: Vec<&str> = (0..8).filter(|b| mask & (1 << b) != 0).map(|b| verdict::NAMES[b]).collect();
    names.join(",")
}

/// Ratio `flux / cell mass` couplings of `ρ_θ^{-1}∇·(ρ_θ∇)`, `ρ_θ = e^{-θ|Y|²/2}`.
///
/// Gaussian ratios are formed from exponent differences so nothing
/// underflows at the far boundary.
#[derive(Clone, Debug)]
struct LineOps {
    r_lo: Vec<f64>,
    r_up: Vec<f64>,
    z_lo: Vec<f64>,
    z_up: Vec<f64>,
}

fn r_volume(i: usize, r: f64, h: f64) -> f64 {
    if i == 0 {
        h * h * h / 24.0
    } else {
        r * r * h + h * h * h / 12.0
    }
}

impl LineOps {
    fn new(grid: &SimGrid, theta: f64) -> Self {
        let (hr, hz) = (grid.hr, grid.hz);
        let (nr, nz) = (grid.nr(), grid.nz());
        let gauss = |a: f64, b: f64| (-0.5 * theta * (a * a - b * b)).exp();
        let mut r_lo = vec![0.0; nr];
        let mut r_up = vec![0.0; nr];
        for i in 0..nr {
            let r = grid.r[i];
            let vol = r_volume(i, r, hr);
            let (rp, rm) = (r + 0.5 * hr, r - 0.5 * hr);
            if i + 1 < nr {
                r_up[i] = rp * rp * gauss(rp, r) / (hr * vol);
            }
            if i > 0 {
                r_lo[i] = rm * rm * gauss(rm, r) / (hr * vol);
            }
        }
        let mut z_lo = vec![0.0; nz];
        let mut z_up = vec![0.0; nz];
        for k in 0..nz {
            let z = grid.z[k];
            let vol = if k == 0 { 0.5 * hz } else { hz };
            if k + 1 < nz {
                z_up[k] = gauss(z + 0.5 * hz, z) / (hz * vol);
            }
            if k > 0 {
                z_lo[k] = gauss(z - 0.5 * hz, z) / (hz * vol);
            }
        }
        Self { r_lo, r_up, z_lo, z_up }
    }

    /// `(L_r + L_z) u` at interior nodes; boundary nodes get zero.
    fn apply(&self, grid: &SimGrid, u: &[f64]) -> Vec<f64> {
        let (nr, nz) = (grid.nr(), grid.nz());
        let mut out = vec![0.0; u.len()];
        out.par_chunks_mut(nr).enumerate().for_each(|(k, row)| {
            if k + 1 == nz {
                return;
            }
            for (i, o) in row.iter_mut().enumerate().take(nr - 1) {
                let x = k * nr + i;
                let mut acc = self.r_up[i] * (u[x + 1] - u[x]) + self.z_up[k] * (u[x + nr] - u[x]);
                if i > 0 {
                    acc += self.r_lo[i] * (u[x - 1] - u[x]);
                }
                if k > 0 {
                    acc += self.z_lo[k] * (u[x - nr] - u[x]);
                }
                *o = acc;
            }
        });
        out
    }

    /// Solve `(I − Δs L_r)(I − Δs(L_z − mass)) u = f`; the outer rows of `f`
    /// are the Dirichlet data.
    fn solve(&self, grid: &SimGrid, f: &[f64], ds: f64, mass: f64) -> Vec<f64> {
        let (nr, nz) = (grid.nr(), grid.nz());
        let mut w = f.to_vec();
        let n = nr - 1;
        let diag: Vec<f64> = (0..n).map(|i| 1.0 + ds * (self.r_lo[i] + self.r_up[i])).collect();
        let sub: Vec<f64> = (1..n).map(|i| -ds * self.r_lo[i]).collect();
        let sup: Vec<f64> = (0..n - 1).map(|i| -ds * self.r_up[i]).collect();
        w.par_chunks_mut(nr).enumerate().for_each(|(k, row)| {
            if k + 1 == nz {
                return;
            }
            row[n - 1] += ds * self.r_up[n - 1] * row[n];
            let mut scratch = Vec::with_capacity(n);
            thomas(&sub, &diag, &sup, &mut row[..n], &mut scratch);
        });
        let mut t = vec![0.0; w.len()];
        t.par_chunks_mut(nz).enumerate().for_each(|(i, col)| {
            for (k, c) in col.iter_mut().enumerate() {
                *c = w[k * nr + i];
            }
        });
        let n = nz - 1;
        let diag: Vec<f64> = (0..n).map(|k| 1.0 + ds * (self.z_lo[k] + self.z_up[k] + mass)).collect();
        let sub: Vec<f64> = (1..n).map(|k| -ds * self.z_lo[k]).collect();
        let sup: Vec<f64> = (0..n - 1).map(|k| -ds * self.z_up[k]).collect();
        t.par_chunks_mut(nz).enumerate().for_each(|(i, col)| {
            if i + 1 == nr {
                return;
            }
            col[n - 1] += ds * self.z_up[n - 1] * col[n];
            let mut scratch = Vec::with_capacity(n);
            thomas(&sub, &diag, &sup, &mut col[..n], &mut scratch);
        });
        let mut out = vec![0.0; w.len()];
        out.par_chunks_mut(nr).enumerate().for_each(|(k, row)| {
            for (i, o) in row.iter_mut().enumerate() {
                *o = t[i * nz + k];
            }
        });
        out
    }
}

/// Discrete frozen-weight functional
/// `E_θ(U) = ∫ (½|∇U|² + (θα/2)U² − U^{p+1}/(p+1)) e^{-θ|Y|²/2}`
/// whose gradient is exactly the implicit operator of a step, so the
/// convex–concave splitting makes it decrease across every step.
struct EnergyWeights {
    mr: Vec<f64>,
    fr: Vec<f64>,
    mz: Vec<f64>,
    fz: Vec<f64>,
    mass: f64,
    p: f64,
}

impl EnergyWeights {
    fn new(grid: &SimGrid, theta: f64, al: f64, p: f64) -> Self {
        let (hr, hz) = (grid.hr, grid.hz);
        let g = |x: f64| (-0.5 * theta * x * x).exp();
        let mr = grid.r.iter().enumerate().map(|(i, &r)| r_volume(i, r, hr) * g(r)).collect();
        let fr = grid.r.iter().map(|&r| (r + 0.5 * hr).powi(2) * g(r + 0.5 * hr) / hr).collect();
        // Full line in z: even extension doubles every cell but the centre.
        let mz = grid.z.iter().enumerate().map(|(k, &z)| if k == 0 { hz } else { 2.0 * hz * g(z) }).collect();
        let fz = grid.z.iter().map(|&z| 2.0 * g(z + 0.5 * hz) / hz).collect();
        Self { mr, fr, mz, fz, mass: theta * al, p }
    }

    fn density(&self, u: f64) -> f64 {
        0.5 * self.mass * u * u - u.abs().powf(self.p + 1.0) / (self.p + 1.0)
    }

    /// `density(a) − density(b)` without cancellation.
    fn density_diff(&self, a: f64, b: f64) -> f64 {
        let e = self.p + 1.0;
        let quad = 0.5 * self.mass * (a - b) * (a + b);
        let pow = if a > 0.0 && b > 0.0 {
            b.powf(e) * (e * ((a - b) / b).ln_1p()).exp_m1()
        } else {
            a.abs().powf(e) - b.abs().powf(e)
        };
        quad - pow / e
    }

    /// `E(u)`, or `E(u) − E(prev)` formed term by term.
    fn eval(&self, grid: &SimGrid, u: &[f64], prev: Option<&[f64]>) -> f64 {
        let (nr, nz) = (grid.nr(), grid.nz());
        let rows: Vec<f64> = (0..nz)
            .into_par_iter()
            .map(|k| {
                let mut acc = 0.0;
                for i in 0..nr {
                    let x = k * nr + i;
                    let face = |y: usize, w: f64| -> f64 {
                        let d1 = u[y] - u[x];
                        match prev {
                            Some(v) => {
                                let d0 = v[y] - v[x];
                                0.5 * w * (d1 - d0) * (d1 + d0)
                            }
                            None => 0.5 * w * d1 * d1,
                        }
                    };
                    if i + 1 < nr && k + 1 < nz {
                        let pot = match prev {
                            Some(v) => self.density_diff(u[x], v[x]),
                            None => self.density(u[x]),
                        };
                        acc += self.mr[i] * self.mz[k] * pot;
                    }
                    if i + 1 < nr {
                        acc += face(x + 1, self.fr[i] * self.mz[k]);
                    }
                    if k + 1 < nz {
                        acc += face(x + nr, self.mr[i] * self.fz[k]);
                    }
                }
                acc
            })
            .collect();
        rows.iter().sum()
    }
}

/// Values entering one projection at a given `(μ, b)`.
struct Projection {
    g: Vec<f64>,
    /// `∂G/∂b` and `∂G/∂a_k` columns.
    jb: Vec<f64>,
    ja: Vec<Vec<f64>>,
    eps_sq: f64,
}

/// Everything one step produces besides the new state.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: RenormState,
    /// `a_{j,M}` found by the projection, before damping.
    pub a_raw: Vec<f64>,
    pub energy: f64,
    pub energy_delta: f64,
    pub orth_defect: f64,
    pub orth_rel: f64,
    pub passes: usize,
}

const MAX_PASSES: usize = 8;
const PASS_TOL: f64 = 1e-13;

/// Modulated flow on a fixed grid.
#[derive(Clone, Debug)]
pub struct Simulator {
    cfg: SimConfig,
    lib: Library,
    grid: SimGrid,
    al: f64,
    p: f64,
    /// Normalised modes sampled on the grid, scaling modes first.
    modes: Vec<Vec<f64>>,
    mode_norm: Vec<f64>,
    gram: Vec<Vec<f64>>,
    /// Diagnostics use `i < band.0`, `k < band.1`.
    band: (usize, usize),
}

impl Simulator {
    pub fn new(cfg: SimConfig, lib: Library) -> Result<Self> {
        cfg.validate()?;
        let p = lib.profile().p;
        if (p - cfg.p).abs() > 1e-12 {
            return Err(LabError::InvalidParameter(format!("config p = {} but library p = {p}", cfg.p)));
        }
        if (cfg.k_weight as usize) < 1 + lib.max_m() {
            return Err(LabError::InvalidParameter(format!(
                "K = {} must be at least 1 + max M(j) = {}",
                cfg.k_weight,
                1 + lib.max_m()
            )));
        }
        let grid = SimGrid::new(cfg.r_max, cfg.nr, cfg.z_max, cfg.nz);
        let profile = lib.profile();
        let mut modes = Vec::new();
        let mut mode_norm = Vec::new();
        for mode in lib.modes() {
            let mut v = grid.sample(|r, z| mode.radial_at(profile, r) * mode.hermite_at(z));
            let n = grid.norm(&v);
            if !(n > 0.0) {
                return Err(LabError::DegenerateInput(format!("mode {} vanishes on the grid", mode.label())));
            }
            v.iter_mut().for_each(|x| *x /= n);
            modes.push(v);
            mode_norm.push(n);
        }
        let gram = modes.iter().map(|f| modes.iter().map(|g| grid.inner(f, g)).collect()).collect();
        let band = (((grid.nr() - 1) as f64 * 0.9) as usize, ((grid.nz() - 1) as f64 * 0.9) as usize);
        Ok(Self { al: alpha(p), p, cfg, lib, grid, modes, mode_norm, gram, band })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn library(&self) -> &Library {
        &self.lib
    }

    pub fn grid(&self) -> &SimGrid {
        &self.grid
    }

    /// Sampled, normalised modes (scaling modes first).
    pub fn modes(&self) -> &[Vec<f64>] {
        &self.modes
    }

    pub fn mode_labels(&self) -> Vec<String> {
        self.lib.extra_modes.iter().map(Mode::label).collect()
    }

    fn n_extra(&self) -> usize {
        self.lib.extra_modes.len()
    }

    fn mode_eval(&self, l: usize, r: f64, z: f64) -> f64 {
        let mode = self.lib.modes().nth(l).expect("mode index in range");
        mode.radial_at(self.lib.profile(), r) * mode.hermite_at(z) / self.mode_norm[l]
    }

    /// `Φ̃_b(x/μ)` (and `∂_bΦ̃_b(x/μ)`) on rows `k < rows`.
    fn phi_rows(&self, b: f64, mu: f64, rows: usize, with_db: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let corr = &self.lib.corrector;
        let nr = self.grid.nr();
        let jets: Vec<(f64, f64)> = if corr.profile().is_constant() {
            (0..rows)
                .into_par_iter()
                .map(|k| corr.phi_tilde_jet(b, 0.0, self.grid.z[k] / mu).map(|j| (j.value, j.d_b)))
                .collect::<Result<Vec<_>>>()?
        } else {
            (0..rows * nr)
                .into_par_iter()
                .map(|x| {
                    let (r, z) = (self.grid.r[x % nr] / mu, self.grid.z[x / nr] / mu);
                    corr.phi_tilde_jet(b, r, z).map(|j| (j.value, j.d_b))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let stride = if corr.profile().is_constant() { nr } else { 1 };
        let val = (0..rows * nr).map(|x| jets[x / stride].0).collect();
        let db = if with_db { (0..rows * nr).map(|x| jets[x / stride].1).collect() } else { Vec::new() };
        Ok((val, db))
    }

    /// `μ^{-α}(Φ̃_b + Σ a_k φ_k)(x/μ)` on the whole grid.
    pub fn compose(&self, mu: f64, b: f64, a: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.n_extra() {
            return Err(LabError::ShapeMismatch(format!("{} mode coefficients for {} modes", a.len(), self.n_extra())));
        }
        let (mut u, _) = self.phi_rows(b, mu, self.grid.nz(), false)?;
        let nr = self.grid.nr();
        let scale = mu.powf(-self.al);
        u.par_iter_mut().enumerate().for_each(|(x, v)| {
            let (r, z) = (self.grid.r[x % nr] / mu, self.grid.z[x / nr] / mu);
            let modes: f64 = a.iter().enumerate().map(|(k, ak)| ak * self.mode_eval(2 + k, r, z)).sum();
            *v = scale * (*v + modes);
        });
        Ok(u)
    }

    /// Orthogonality system of the static decomposition at `(μ, b, a)`,
    /// integrated on the nodes `x/μ` so that `compose` is an exact fixed point.
    fn project_scaled(&self, u: &[f64], mu: f64, b: f64, a: &[f64]) -> Result<Projection> {
        let nr = self.grid.nr();
        let rows = self.grid.z.iter().take_while(|&&z| (z / mu).powi(2) / 4.0 < 75.0).count().max(2);
        let (phi, dphi) = self.phi_rows(b, mu, rows, true)?;
        let nm = self.modes.len();
        let ne = self.n_extra();
        let scale = mu.powf(self.al);
        let jac = mu.powi(-4);
        #[allow(clippy::type_complexity)]
        let parts: Vec<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>, f64)> = (0..rows)
            .into_par_iter()
            .map(|k| {
                let mut g = vec![0.0; nm];
                let mut jb = vec![0.0; nm];
                let mut ja = vec![vec![0.0; nm]; ne];
                let mut e2 = 0.0;
                let mut vals = vec![0.0; nm];
                for i in 0..nr {
                    let x = k * nr + i;
                    let (r, z) = (self.grid.r[i] / mu, self.grid.z[k] / mu);
                    let w = self.grid.quad[x] * jac * (-(r * r + z * z) / 4.0).exp();
                    if w == 0.0 {
                        continue;
                    }
                    for (l, v) in vals.iter_mut().enumerate() {
                        *v = self.mode_eval(l, r, z);
                    }
                    let e = scale * u[x] - phi[x] - a.iter().zip(&vals[2..]).map(|(ak, fk)| ak * fk).sum::<f64>();
                    e2 += w * e * e;
                    for l in 0..nm {
                        g[l] += w * e * vals[l];
                        jb[l] -= w * dphi[x] * vals[l];
                        for kk in 0..ne {
                            ja[kk][l] -= w * vals[2 + kk] * vals[l];
                        }
                    }
                }
                (g, jb, ja, e2)
            })
            .collect();
        let mut out = Projection { g: vec![0.0; nm], jb: vec![0.0; nm], ja: vec![vec![0.0; nm]; ne], eps_sq: 0.0 };
        for (g, jb, ja, e2) in parts {
            for l in 0..nm {
                out.g[l] += g[l];
                out.jb[l] += jb[l];
                for kk in 0..ne {
                    out.ja[kk][l] += ja[kk][l];
                }
            }
            out.eps_sq += e2;
        }
        Ok(out)
    }

    /// Static decomposition by Newton iteration on `(log μ, b, a)`.
    ///
    /// The initial scale is read off the axis amplitude; data farther than
    /// `basin_tol` (sup norm after rescaling) from `Φ̃_{b_guess}` are refused.
    pub fn decompose(&self, u: &[f64], b_guess: f64) -> Result<Decomposition> {
        if u.len() != self.grid.len() {
            return Err(LabError::ShapeMismatch(format!("field has {} values, grid {}", u.len(), self.grid.len())));
        }
        let corr = &self.lib.corrector;
        let phi0 = corr.eval_phi_tilde(b_guess, 0.0, 0.0)?;
        if !(u[0] > 0.0 && phi0 > 0.0) {
            return Err(LabError::OutOfBasin(format!("axis value {} is not positive", u[0])));
        }
        let mu0 = (phi0 / u[0]).powf(1.0 / self.al);
        let nr = self.grid.nr();
        let dist = (0..u.len())
            .into_par_iter()
            .map(|x| {
                let (r, z) = (self.grid.r[x % nr] / mu0, self.grid.z[x / nr] / mu0);
                if (r * r + z * z) / 4.0 > 25.0 {
                    return Ok(0.0);
                }
                Ok((mu0.powf(self.al) * u[x] - corr.eval_phi_tilde(b_guess, r, z)?).abs())
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        if dist > self.cfg.basin_tol {
            return Err(LabError::OutOfBasin(format!("‖u − Φ̃_b‖_∞ = {dist:.3e} exceeds {}", self.cfg.basin_tol)));
        }
        let ne = self.n_extra();
        let (mut lmu, mut b, mut a) = (mu0.ln(), b_guess, vec![0.0; ne]);
        let h = 1e-6;
        for it in 0..40 {
            let pr = self.project_scaled(u, lmu.exp(), b, &a)?;
            let gp = self.project_scaled(u, (lmu + h).exp(), b, &a)?.g;
            let gm = self.project_scaled(u, (lmu - h).exp(), b, &a)?.g;
            let nm = pr.g.len();
            let jac: Vec<Vec<f64>> = (0..nm)
                .map(|l| {
                    let mut row = vec![(gp[l] - gm[l]) / (2.0 * h), pr.jb[l]];
                    row.extend((0..ne).map(|k| pr.ja[k][l]));
                    row
                })
                .collect();
            let step = solve_dense(jac, pr.g.iter().map(|g| -g).collect())
                .map_err(|e| LabError::DegenerateDecomposition(format!("orthogonality Jacobian: {e}")))?;
            lmu += step[0];
            b += step[1];
            for k in 0..ne {
                a[k] += step[2 + k];
            }
            if !(lmu.is_finite() && b > 0.0 && b <= corr.b_cap) || (lmu - mu0.ln()).abs() > 2.0 {
                return Err(LabError::OutOfBasin(format!("decomposition Newton left the basin (b = {b:.3e})")));
            }
            let size = step[0].abs().max(step[1].abs() / b.max(1e-300)).max(step[2..].iter().fold(0.0_f64, |m, s| m.max(s.abs())));
            if size < 1e-11 {
                let fin = self.project_scaled(u, lmu.exp(), b, &a)?;
                return Ok(Decomposition {
                    mu: lmu.exp(),
                    b,
                    a,
                    eps_norm: fin.eps_sq.max(0.0).sqrt(),
                    defect: fin.g.iter().fold(0.0_f64, |m, g| m.max(g.abs())),
                    iterations: it + 1,
                });
            }
        }
        Err(LabError::OutOfBasin("decomposition Newton did not converge".into()))
    }

    /// `Λ_Y U = αU + r∂_rU + z∂_zU` by central differences.
    fn lambda_y(&self, u: &[f64]) -> Vec<f64> {
        let (nr, nz) = (self.grid.nr(), self.grid.nz());
        let (hr, hz) = (self.grid.hr, self.grid.hz);
        let mut out = vec![0.0; u.len()];
        out.par_chunks_mut(nr).enumerate().for_each(|(k, row)| {
            let z = self.grid.z[k];
            for (i, o) in row.iter_mut().enumerate() {
                let x = k * nr + i;
                let dr = if i == 0 {
                    0.0
                } else if i + 1 == nr {
                    (u[x] - u[x - 1]) / hr
                } else {
                    (u[x + 1] - u[x - 1]) / (2.0 * hr)
                };
                let dz = if k == 0 {
                    0.0
                } else if k + 1 == nz {
                    (u[x] - u[x - nr]) / hz
                } else {
                    (u[x + nr] - u[x - nr]) / (2.0 * hz)
                };
                *o = self.al * u[x] + self.grid.r[i] * dr + z * dz;
            }
        });
        out
    }

    fn power(&self, u: &[f64]) -> Vec<f64> {
        u.par_iter().map(|&v| v.abs().powf(self.p - 1.0) * v).collect()
    }

    /// Write `Φ̃_b` into the Dirichlet nodes of `f`.
    fn set_boundary(&self, f: &mut [f64], b: f64) -> Result<()> {
        let (nr, nz) = (self.grid.nr(), self.grid.nz());
        let corr = &self.lib.corrector;
        let rmax = self.grid.r[nr - 1];
        let zmax = self.grid.z[nz - 1];
        for k in 0..nz {
            f[k * nr + nr - 1] = corr.eval_phi_tilde(b, rmax, self.grid.z[k])?;
        }
        for i in 0..nr {
            f[(nz - 1) * nr + i] = corr.eval_phi_tilde(b, self.grid.r[i], zmax)?;
        }
        Ok(())
    }

    fn zero_boundary(&self, f: &mut [f64]) {
        let (nr, nz) = (self.grid.nr(), self.grid.nz());
        for k in 0..nz {
            f[k * nr + nr - 1] = 0.0;
        }
        f[(nz - 1) * nr..].iter_mut().for_each(|v| *v = 0.0);
    }

    /// Initial state `U = Φ̃_{b₀} + w` with `w` a random smooth field
    /// orthogonal to every mode, so the decomposition holds with `a = 0`.
    pub fn initial_state(&self) -> Result<RenormState> {
        let b0 = self.cfg.b_initial(self.lib.c1());
        let lambda0 = self.cfg.lambda0.unwrap_or((-self.cfg.s0 / 2.0).exp());
        let (mut u, _) = self.phi_rows(b0, 1.0, self.grid.nz(), false)?;
        if self.cfg.perturbation > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            let c: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut w = self.grid.sample(|r, z| {
                let (r2, z2) = (r * r, z * z);
                let poly: f64 = (0..9).map(|n| c[n] * r2.powi((n / 3) as i32) * z2.powi((n % 3) as i32)).sum();
                poly * (-(r2 + z2) / 4.0).exp()
            });
            let proj: Vec<f64> = self.modes.iter().map(|m| self.grid.inner(&w, m)).collect();
            let coef = solve_dense(self.gram.clone(), proj)?;
            for (cl, m) in coef.iter().zip(&self.modes) {
                w.iter_mut().zip(m).for_each(|(x, y)| *x -= cl * y);
            }
            let sup = w.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            if sup > 0.0 {
                let amp = self.cfg.perturbation / sup;
                u.iter_mut().zip(&w).for_each(|(x, y)| *x += amp * y);
            }
        }
        if !(u[0] > 0.0) {
            return Err(LabError::Instability("initial data not positive at the origin".into()));
        }
        let m0 = self.lib.corrector.law_m(b0);
        Ok(RenormState {
            s: self.cfg.s0,
            u,
            log_lambda: lambda0.ln(),
            b: b0,
            a: vec![0.0; self.n_extra()],
            m: m0,
            m_prev: m0,
            bs: -b0 * self.lib.corrector.law_b(b0),
        })
    }

    /// Newton on `(m, b, a)` for the orthogonality of
    /// `ε = X + (m − m₀)Y − Φ̃_b − Σ a φ` on the active rows.
    #[allow(clippy::type_complexity)]
    fn orthogonalize(&self, x: &[f64], y: &[f64], m0: f64, b0: f64, a0: &[f64]) -> Result<(f64, f64, Vec<f64>, Vec<f64>, f64)> {
        let n = self.grid.active_len();
        let rows = self.grid.active;
        let nm = self.modes.len();
        let ne = self.n_extra();
        let jm: Vec<f64> = self.modes.iter().map(|f| self.grid.inner(y, f)).collect();
        let (mut m, mut b, mut a) = (m0, b0, a0.to_vec());
        let mut last = f64::INFINITY;
        // Past convergence, keep polishing while the defect still drops.
        let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>, f64)> = None;
        for _ in 0..16 {
            let (phi, dphi) = self.phi_rows(b, 1.0, rows, true)?;
            let eps: Vec<f64> = (0..n)
                .map(|i| {
                    let modes: f64 = (0..ne).map(|k| a[k] * self.modes[2 + k][i]).sum();
                    x[i] + (m - m0) * y[i] - phi[i] - modes
                })
                .collect();
            let g: Vec<f64> = self.modes.iter().map(|f| self.grid.inner(&eps, f)).collect();
            if last < 1e-11 {
                let defect = g.iter().fold(0.0_f64, |s, v| s.max(v.abs()));
                match &best {
                    Some(prev) if defect >= 0.5 * prev.4 => return Ok(best.take().expect("set")),
                    _ => best = Some((m, b, a.clone(), eps, defect)),
                }
            }
            let jac: Vec<Vec<f64>> = (0..nm)
                .map(|l| {
                    let mut row = vec![jm[l], -self.grid.inner(&dphi, &self.modes[l])];
                    row.extend((0..ne).map(|k| -self.gram[2 + k][l]));
                    row
                })
                .collect();
            let step = solve_dense(jac, g.iter().map(|v| -v).collect())
                .map_err(|e| LabError::SingularModulation(format!("step orthogonality system: {e}")))?;
            m += step[0];
            b += step[1];
            for k in 0..ne {
                a[k] += step[2 + k];
            }
            if !(b > 0.0 && b <= self.lib.corrector.b_cap && m.is_finite()) {
                return Err(LabError::Instability(format!("modulation left its range (b = {b:.3e}, m = {m:.3e})")));
            }
            last = step[0].abs().max(step[1].abs() / b).max(step[2..].iter().fold(0.0_f64, |s, v| s.max(v.abs())));
        }
        best.ok_or_else(|| LabError::SingularModulation("step orthogonality Newton did not converge".into()))
    }

    /// One IMEX step followed by the orthogonality projection.
    pub fn step(&self, st: &RenormState) -> Result<StepOutput> {
        let ds = self.cfg.ds;
        let b_pred = st.b + ds * st.bs;
        if !(b_pred > 0.0 && b_pred <= self.lib.corrector.b_cap) {
            return Err(LabError::Instability(format!("predicted b = {b_pred:.3e} out of range")));
        }
        let pw = self.power(&st.u);
        let mut f: Vec<f64> = st.u.iter().zip(&pw).map(|(u, n)| u + ds * n).collect();
        self.set_boundary(&mut f, b_pred)?;
        let mut g: Vec<f64> = self.lambda_y(&st.u).into_iter().map(|v| ds * v).collect();
        self.zero_boundary(&mut g);

        let mut m_pred = 2.0 * st.m - st.m_prev;
        let mut passes = 0;
        loop {
            passes += 1;
            let theta = 0.5 - m_pred;
            let ops = LineOps::new(&self.grid, theta);
            let x = ops.solve(&self.grid, &f, ds, theta * self.al);
            let y = ops.solve(&self.grid, &g, ds, theta * self.al);
            let (m, b, a, eps, defect) = self.orthogonalize(&x, &y, m_pred, b_pred, &st.a)?;
            if (m - m_pred).abs() > PASS_TOL && passes < MAX_PASSES {
                m_pred = m;
                continue;
            }
            let mut u: Vec<f64> = x.iter().zip(&y).map(|(x, y)| x + (m - m_pred) * y).collect();
            if !(u[0] > 0.0) || u.iter().any(|v| !v.is_finite()) {
                return Err(LabError::Instability(format!("U lost positivity or finiteness at s = {:.4}", st.s + ds)));
            }
            let ew = EnergyWeights::new(&self.grid, theta, self.al, self.p);
            let energy_delta = ew.eval(&self.grid, &u, Some(&st.u));
            let energy = ew.eval(&self.grid, &u, None);
            let eps_norm = self.grid.norm(&eps);
            let a_raw = a.clone();
            let mut a_new = a;
            if self.cfg.mode_damping && !a_new.is_empty() {
                for (k, ak) in a_new.iter_mut().enumerate() {
                    let f = &self.modes[2 + k];
                    u.iter_mut().zip(f).for_each(|(v, w)| *v -= *ak * w);
                    *ak = 0.0;
                }
            }
            let state = RenormState {
                s: st.s + ds,
                u,
                log_lambda: st.log_lambda + ds * (m - 0.5),
                b,
                a: a_new,
                m,
                m_prev: st.m,
                bs: (b - st.b) / ds,
            };
            return Ok(StepOutput {
                state,
                a_raw,
                energy,
                energy_delta,
                orth_defect: defect,
                orth_rel: if eps_norm > 0.0 { defect / eps_norm } else { 0.0 },
                passes,
            });
        }
    }

    /// Rates from `d/ds (ε, φ_l)_{ρ_Y} = 0` with the flow's right side.
    pub fn modulation_rhs(&self, st: &RenormState) -> Result<ModulationRhs> {
        let rows = self.grid.active;
        let n = self.grid.active_len();
        let ops = LineOps::new(&self.grid, 0.5);
        let lu = ops.apply(&self.grid, &st.u);
        let f: Vec<f64> = (0..n).map(|i| lu[i] - 0.5 * self.al * st.u[i] + st.u[i].abs().powf(self.p - 1.0) * st.u[i]).collect();
        let lam = self.lambda_y(&st.u);
        let (_, dphi) = self.phi_rows(st.b, 1.0, rows, true)?;
        let ne = self.n_extra();
        let nm = self.modes.len();
        let jac: Vec<Vec<f64>> = (0..nm)
            .map(|l| {
                let fl = &self.modes[l];
                let mut row = vec![self.grid.inner(&lam, fl), -self.grid.inner(&dphi, fl)];
                row.extend((0..ne).map(|k| -self.gram[2 + k][l]));
                row
            })
            .collect();
        let rhs: Vec<f64> = self.modes.iter().map(|fl| -self.grid.inner(&f, fl)).collect();
        let det = determinant(&jac);
        let scale: f64 = jac.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).product();
        if !(det.abs() > 1e-12 * scale) {
            return Err(LabError::SingularModulation(format!("modulation determinant {det:.3e}")));
        }
        let sol = solve_dense(jac, rhs).map_err(|e| LabError::SingularModulation(e.to_string()))?;
        let corr = &self.lib.corrector;
        let (m, bs) = (sol[0], sol[1]);
        let a_s = sol[2..].to_vec();
        let a_residual = self
            .lib
            .extra_modes
            .iter()
            .zip(&a_s)
            .zip(&st.a)
            .map(|((mode, da), a)| da + (mode.lambda_j + mode.m as f64) * a)
            .collect();
        Ok(ModulationRhs {
            lambda_rate: m - 0.5,
            bs,
            a_s,
            lambda_residual: m - corr.law_m(st.b),
            bs_residual: bs + st.b * corr.law_b(st.b),
            a_residual,
            determinant: det,
        })
    }

    /// Norm table of a state; `prev_l2` is `‖ε‖_{L²_{ρ_Y}}` one step earlier.
    pub fn diagnostics(&self, st: &RenormState) -> Result<NormTable> {
        let (nr, nz) = (self.grid.nr(), self.grid.nz());
        let (ib, kb) = self.band;
        let (phi, _) = self.phi_rows(st.b, 1.0, nz, false)?;
        let v: Vec<f64> = st.u.iter().zip(&phi).map(|(u, f)| u - f).collect();
        let mut eps = v.clone();
        for (k, ak) in st.a.iter().enumerate() {
            eps.iter_mut().zip(&self.modes[2 + k]).for_each(|(e, f)| *e -= ak * f);
        }
        let q2 = 2 * self.cfg.q_eff() as i32 + 2;
        let kw = self.cfg.k_weight;
        let (hr, hz) = (self.grid.hr, self.grid.hz);
        let fd = |f: &[f64], i: usize, k: usize| -> [f64; 5] {
            let at = |ii: isize, kk: isize| f[kk.unsigned_abs() * nr + ii.unsigned_abs()];
            let (i, k) = (i as isize, k as isize);
            let c = at(i, k);
            [
                (at(i + 1, k) - at(i - 1, k)) / (2.0 * hr),
                (at(i, k + 1) - at(i, k - 1)) / (2.0 * hz),
                (at(i + 1, k) - 2.0 * c + at(i - 1, k)) / (hr * hr),
                (at(i, k + 1) - 2.0 * c + at(i, k - 1)) / (hz * hz),
                (at(i + 1, k + 1) - at(i + 1, k - 1) - at(i - 1, k + 1) + at(i - 1, k - 1)) / (4.0 * hr * hz),
            ]
        };
        // Per node: (wρ, quad·ν_K ρ_r, quad, ε², |∇ε|², |∇²ε|², |v|, |∇v|).
        let nodes: Vec<[f64; 8]> = (0..kb)
            .into_par_iter()
            .flat_map_iter(|k| {
                let fd = &fd;
                let (eps, v) = (&eps, &v);
                (0..ib).map(move |i| {
                    let x = k * nr + i;
                    let (r, z) = (self.grid.r[i], self.grid.z[k]);
                    let d = fd(eps, i, k);
                    let dv = fd(v, i, k);
                    let over_r = if i == 0 { d[2] } else { d[0] / r };
                    let hess = d[2] * d[2] + 2.0 * over_r * over_r + d[3] * d[3] + 2.0 * d[4] * d[4];
                    let nu = crate::weighted_spaces::nu_k(z, kw) * (-r * r / 4.0).exp();
                    [
                        self.grid.wrho[x],
                        self.grid.quad[x] * nu,
                        self.grid.quad[x],
                        eps[x] * eps[x],
                        d[0] * d[0] + d[1] * d[1],
                        hess,
                        v[x].abs(),
                        (dv[0] * dv[0] + dv[1] * dv[1]).sqrt(),
                    ]
                })
            })
            .collect();
        let sum = |f: &dyn Fn(&[f64; 8]) -> f64| nodes.iter().map(f).sum::<f64>();
        let l2 = sum(&|n| n[0] * n[3]);
        let h1 = l2 + sum(&|n| n[0] * n[4]);
        let h2 = h1 + sum(&|n| n[0] * n[5]);
        // High powers are scaled by the maximum to stay in range.
        let gmax = nodes.iter().fold(0.0_f64, |m, n| m.max(n[4].sqrt()));
        let powsum = |w: usize| -> f64 {
            if gmax == 0.0 {
                return 0.0;
            }
            sum(&|n| n[w] * (n[4].sqrt() / gmax).powi(q2))
        };
        let grad_l = if gmax > 0.0 { gmax * powsum(0).powf(1.0 / q2 as f64) } else { 0.0 };
        let nuk_w1 = if gmax > 0.0 { gmax.powi(q2) * powsum(1) } else { 0.0 };
        let vmax = nodes.iter().fold(0.0_f64, |m, n| m.max(n[6]).max(n[7]));
        let v_w1q = if vmax > 0.0 {
            vmax * sum(&|n| n[2] * ((n[6] / vmax).powi(q2) + (n[7] / vmax).powi(q2))).powf(1.0 / q2 as f64)
        } else {
            0.0
        };
        let tail: f64 = (0..nz)
            .flat_map(|k| (0..nr).map(move |i| (i, k)))
            .filter(|&(i, k)| i >= ib || k >= kb)
            .map(|(i, k)| {
                let x = k * nr + i;
                self.grid.quad[x] * v[x].abs().powi(q2)
            })
            .sum();
        Ok(NormTable {
            eps_h2rho: h2.max(0.0).sqrt(),
            grad_eps_l2q2rho: grad_l,
            nuk_l2: sum(&|n| n[1] * n[3]),
            nuk_w1,
            v_w1q,
            eps_l2rho: l2.max(0.0).sqrt(),
            eps_h1rho: h1.max(0.0).sqrt(),
            v_linf: nodes.iter().fold(0.0_f64, |m, n| m.max(n[6])),
            truncation: tail.powf(1.0 / q2 as f64),
        })
    }

    fn record(&self, st: &RenormState, norms: NormTable, a: Vec<f64>, rhs: &ModulationRhs) -> StepRecord {
        let lambda = st.lambda();
        let verdict = verdict_mask(&norms, st.s, lambda, st.b, &a, self.lib.c1(), &self.cfg);
        StepRecord {
            s: st.s,
            lambda,
            log_lambda: st.log_lambda,
            b: st.b,
            bs_residual: rhs.bs_residual,
            a,
            norms,
            verdict,
            lambda_rate: rhs.lambda_rate,
            ..Default::default()
        }
    }

    /// Run from the initial state until `steps`, `s_end`, or an exit condition.
    pub fn run(&self) -> RunOutcome {
        let mut series = RunSeries { mode_labels: self.mode_labels(), c1: self.lib.c1(), records: Vec::new() };
        let fail = |series: RunSeries, e: LabError, st: Option<RenormState>| RunOutcome {
            series,
            exit: RunExit::Failed { kind: FailureKind::of(&e), message: e.to_string() },
            final_state: st,
        };
        let mut st = match self.initial_state() {
            Ok(s) => s,
            Err(e) => return fail(series, e, None),
        };
        let first = self.diagnostics(&st).and_then(|n| Ok((n, self.modulation_rhs(&st)?)));
        match first {
            Ok((norms, rhs)) => {
                let mut rec = self.record(&st, norms, st.a.clone(), &rhs);
                rec.energy = EnergyWeights::new(&self.grid, 0.5 - st.m, self.al, self.p).eval(&self.grid, &st.u, None);
                series.records.push(rec);
            }
            Err(e) => return fail(series, e, Some(st)),
        }
        let mut bad = 0;
        for _ in 0..self.cfg.steps {
            if let Some(end) = self.cfg.s_end {
                if st.s >= end - 1e-12 {
                    break;
                }
            }
            let out = match self.step(&st) {
                Ok(o) => o,
                Err(e) => return fail(series, e, Some(st)),
            };
            let prev_l2 = series.records.last().map(|r| r.norms.eps_l2rho).unwrap_or(0.0);
            st = out.state;
            let (norms, rhs) = match self.diagnostics(&st).and_then(|n| Ok((n, self.modulation_rhs(&st)?))) {
                Ok(x) => x,
                Err(e) => return fail(series, e, Some(st)),
            };
            let mut rec = self.record(&st, norms, out.a_raw, &rhs);
            rec.energy = out.energy;
            rec.energy_delta = out.energy_delta;
            rec.orth_defect = out.orth_defect;
            rec.orth_rel = out.orth_rel;
            let nn = self.cfg.n as i32;
            let asq: f64 = rec.a.iter().map(|x| x * x).sum();
            rec.lyap_lhs = (rec.norms.eps_l2rho.powi(2) - prev_l2 * prev_l2) / self.cfg.ds
                + self.cfg.lyap_c * rec.norms.eps_h1rho.powi(2);
            rec.lyap_rhs =
                self.cfg.lyap_const * (st.b.powi(2 * nn + 2) + (rec.norms.v_linf.powi(2) + st.b * st.b) * asq);
            let mask = rec.verdict;
            series.records.push(rec);
            if self.cfg.lambda_exit > 0.0 && st.lambda() < self.cfg.lambda_exit {
                return RunOutcome { series, exit: RunExit::LambdaExit { s: st.s }, final_state: Some(st) };
            }
            bad = if mask != 0 { bad + 1 } else { 0 };
            if bad >= self.cfg.verdict_patience {
                return RunOutcome { series, exit: RunExit::VerdictExit { s: st.s, mask }, final_state: Some(st) };
            }
        }
        RunOutcome { series, exit: RunExit::Completed, final_state: Some(st) }
    }
}

/// Determinant by partial-pivot elimination.
fn determinant(a: &[Vec<f64>]) -> f64 {
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let n = m.len();
    let mut det = 1.0;
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap_or(c);
        if m[piv][c] == 0.0 {
            return 0.0;
        }
        if piv != c {
            m.swap(piv, c);
            det = -det;
        }
        det *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    det
}

/// Blow-up time and free-boundary fit from a run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhysicalReconstruction {
    /// Blow-up time measured from `t(s₀) = 0`.
    #[serde(rename = "T")]
    pub t_blowup: f64,
    pub c_star: f64,
    /// Relative RMS misfit of `1/√b = c*·√|log(T−t)|` over the window.
    pub fit_residual: f64,
    pub window: (f64, f64),
    /// Geometric tail `∫_{s_end}^∞ λ² ds`.
    #[serde(skip)]
    pub tail: f64,
    #[serde(skip)]
    pub s: Vec<f64>,
    #[serde(skip)]
    pub t: Vec<f64>,
    /// `T − t(s)`.
    #[serde(skip)]
    pub remaining: Vec<f64>,
    /// `1/√b(s)`.
    #[serde(skip)]
    pub inv_sqrt_b: Vec<f64>,
}

/// `T = ∫λ² ds` with exact quadrature of piecewise-exponential `λ²` and a
/// geometric tail, then a least-squares fit through the origin of `1/√b`
/// against `√|log(T−t)|` over the final half of the run.
pub fn reconstruct_physical(series: &RunSeries) -> Result<PhysicalReconstruction> {
    let recs = &series.records;
    if recs.len() < 4 {
        return Err(LabError::InsufficientDecay(format!("{} records are too few", recs.len())));
    }
    let s: Vec<f64> = recs.iter().map(|r| r.s).collect();
    let ll: Vec<f64> = recs.iter().map(|r| r.log_lambda).collect();
    let n = s.len();
    let drop = ll[0] - ll[n - 1];
    let span = s[n - 1] - s[0];
    if drop < 5.0 {
        let rate = drop / span;
        let msg = if rate > 0.0 {
            format!("λ dropped by e^-{drop:.3}; extend the run by about Δs = {:.1}", (5.0 - drop) / rate)
        } else {
            "λ does not decay".to_string()
        };
        return Err(LabError::InsufficientDecay(msg));
    }
    // Slope of log λ over the last tenth for the tail.
    let k0 = n - (n / 10).max(2);
    let rate = crate::corrector::least_squares_slope(&s[k0..], &ll[k0..]);
    if !(rate < 0.0) {
        return Err(LabError::InsufficientDecay("λ is not decaying at the end of the run".into()));
    }
    let l2 = |i: usize| (2.0 * ll[i]).exp();
    let tail = l2(n - 1) / (-2.0 * rate);
    let mut remaining = vec![0.0; n];
    remaining[n - 1] = tail;
    for i in (0..n - 1).rev() {
        let h = s[i + 1] - s[i];
        let d = 2.0 * (ll[i + 1] - ll[i]);
        let piece = if d.abs() < 1e-12 { h * l2(i) * (1.0 + 0.5 * d) } else { h * l2(i) * d.exp_m1() / d };
        remaining[i] = remaining[i + 1] + piece;
    }
    let t_blowup = remaining[0];
    let t: Vec<f64> = remaining.iter().map(|r| t_blowup - r).collect();
    let inv_sqrt_b: Vec<f64> = recs.iter().map(|r| 1.0 / r.b.sqrt()).collect();
    let from = n / 2;
    let xs: Vec<f64> = remaining[from..].iter().map(|r| r.ln().abs().sqrt()).collect();
    let ys = &inv_sqrt_b[from..];
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let c_star = sxy / sxx;
    let m = xs.len() as f64;
    let res = (xs.iter().zip(ys).map(|(x, y)| (y - c_star * x).powi(2)).sum::<f64>() / m).sqrt();
    let ynorm = (ys.iter().map(|y| y * y).sum::<f64>() / m).sqrt();
    Ok(PhysicalReconstruction {
        t_blowup,
        c_star,
        fit_residual: res / ynorm,
        window: (s[from], s[n - 1]),
        tail,
        s,
        t,
        remaining,
        inv_sqrt_b,
    })
}

/// Series following the leading-order laws exactly:
/// `λ = e^{-s/2}`, `b = 1/(c₁ s)`.
pub fn synthetic_series(c1: f64, s0: f64, s1: f64, ds: f64) -> RunSeries {
    let n = ((s1 - s0) / ds).round() as usize;
    let records = (0..=n)
        .map(|i| {
            let s = s0 + i as f64 * ds;
            StepRecord { s, lambda: (-s / 2.0).exp(), log_lambda: -s / 2.0, b: 1.0 / (c1 * s), lambda_rate: -0.5, ..Default::default() }
        })
        .collect();
    RunSeries { mode_labels: Vec::new(), c1, records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::{solve_hierarchy, CorrectorParams};
    use approx::assert_relative_eq;

    fn kappa_sim(cfg: SimConfig) -> Simulator {
        let k = Profile::kappa(7.0, 15.0, 0.01).unwrap();
        let c = solve_hierarchy(&k, None, &CorrectorParams::default()).unwrap();
        Simulator::new(cfg, Library::with_modes(c, Vec::new()).unwrap()).unwrap()
    }

    fn coarse() -> SimConfig {
        SimConfig { nr: 16, nz: 240, z_max: 60.0, ds: 7.5e-3, ..Default::default() }
    }

    #[test]
    fn unperturbed_run_tracks_the_approximate_solution() {
        let sim = kappa_sim(SimConfig { steps: 200, ..coarse() });
        let out = sim.run();
        assert_eq!(out.exit, RunExit::Completed);
        let recs = &out.series.records;
        assert!(out.series.is_consistent());
        // ε is the grid's truncation error of Φ̃_b, second order in hz (1.5e-5 here).
        for r in recs {
            assert!(r.norms.eps_l2rho < 3e-5, "s = {} ‖ε‖ = {:e}", r.s, r.norms.eps_l2rho);
            assert_eq!(r.verdict, 0);
        }
        // Energy never increases across a step.
        assert!(recs.iter().skip(1).all(|r| r.energy_delta <= 0.0));
        let last = recs.last().unwrap();
        let c1 = out.series.c1;
        assert_relative_eq!(last.b * c1 * last.s, 1.0, max_relative = 0.05);
    }

    #[test]
    fn modulation_rates_match_the_laws_on_exact_data() {
        let rel = |nz| {
            let sim = kappa_sim(SimConfig { nz, ..coarse() });
            let st = sim.initial_state().unwrap();
            let rhs = sim.modulation_rhs(&st).unwrap();
            assert_relative_eq!(rhs.bs, -sim.library().c1() * st.b * st.b, max_relative = 0.1);
            assert_relative_eq!(rhs.lambda_rate, -0.5 + st.b, max_relative = 1e-4);
            (rhs.bs_residual / (st.b * st.b)).abs()
        };
        // The residual of b_s against the law is discretisation error, second order in hz.
        let (coarse_res, fine_res) = (rel(120), rel(240));
        assert!(coarse_res / fine_res > 3.5, "{coarse_res:e} -> {fine_res:e}");
    }

    #[test]
    fn decompose_inverts_compose() {
        let sim = kappa_sim(coarse());
        for (mu, b) in [(1.0, 4e-3), (1.2, 1e-2), (0.9, 2e-3)] {
            let u = sim.compose(mu, b, &[]).unwrap();
            let d = sim.decompose(&u, 1.1 * b).unwrap();
            assert_relative_eq!(d.mu, mu, max_relative = 1e-9);
            assert_relative_eq!(d.b, b, max_relative = 1e-9);
            assert!(d.eps_norm < 1e-9);
        }
    }

    #[test]
    fn decompose_refuses_far_data() {
        let sim = kappa_sim(coarse());
        let mut u = sim.compose(1.0, 1e-2, &[]).unwrap();
        let nr = sim.grid().nr();
        for k in 0..sim.grid().nz() {
            u[k * nr + 3] += 0.5;
        }
        assert!(matches!(sim.decompose(&u, 1e-2), Err(LabError::OutOfBasin(_))));
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let cfg = SimConfig { steps: 10, perturbation: 1e-4, seed: 11, ..coarse() };
        let a = kappa_sim(cfg.clone()).run();
        let b = kappa_sim(cfg.clone()).run();
        assert_eq!(a.series, b.series);
        let c = kappa_sim(SimConfig { seed: 12, ..cfg }).run();
        assert_ne!(a.series.records.last().unwrap().norms, c.series.records.last().unwrap().norms);
    }

    #[test]
    fn verdict_flags_b_off_law() {
        let cfg = SimConfig::default();
        let (c1, s) = (14.0 / 3.0, 80.0);
        let lam = (-s / 2.0_f64).exp();
        let quiet = NormTable::default();
        assert_eq!(verdict_mask(&quiet, s, lam, 1.0 / (c1 * s), &[], c1, &cfg), 0);
        let mask = verdict_mask(&quiet, s, lam, 20.0 / (c1 * s), &[], c1, &cfg);
        assert_eq!(mask, verdict::B_LAW);
        assert_eq!(verdict_names(mask), "b_law");
        let loud = NormTable { eps_h2rho: 1.0, ..Default::default() };
        assert_eq!(verdict_mask(&loud, s, 1.0, 1.0 / (c1 * s), &[1.0], c1, &cfg), verdict::EPS_H2 | verdict::SCALING | verdict::UNSTABLE);
    }

    #[test]
    fn synthetic_free_boundary_constant() {
        let c1 = 14.0 / 3.0;
        let rec = reconstruct_physical(&synthetic_series(c1, 50.0, 400.0, 0.01)).unwrap();
        assert!((rec.c_star - c1.sqrt()).abs() < 1e-3, "c* = {}", rec.c_star);
        assert_relative_eq!(rec.t_blowup, (-50.0_f64).exp(), max_relative = 1e-6);
    }

    #[test]
    fn short_series_is_refused() {
        let short = synthetic_series(14.0 / 3.0, 50.0, 55.0, 0.01);
        assert!(matches!(reconstruct_physical(&short), Err(LabError::InsufficientDecay(_))));
    }

    #[test]
    fn default_q_satisfies_the_integrability_condition() {
        let cfg = SimConfig::default();
        assert_eq!(cfg.q_eff(), 12);
        assert!(cfg.validate().is_ok());
        assert!(SimConfig { q: Some(3), ..cfg }.validate().is_err());
    }

    #[test]
    fn failure_kinds() {
        assert_eq!(FailureKind::of(&LabError::OutOfBasin("x".into())), FailureKind::OutOfBasin);
        assert_eq!(FailureKind::of(&LabError::Instability("x".into())), FailureKind::Instability);
        assert_eq!(FailureKind::of(&LabError::Format("x".into())), FailureKind::Other);
    }
}
