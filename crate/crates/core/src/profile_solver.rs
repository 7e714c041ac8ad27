//! Radial self-similar profiles of `Φ'' + (2/r)Φ' - ½(αΦ + rΦ') + Φ^p = 0`,
//! `α = 2/(p-1)`, regular at the origin.
//!
//! Shooting on the axis value `a = Φ(0)`: trajectories below a decaying
//! profile cross zero, trajectories above it leave the `r^{-α}` regime and
//! grow. Sign changes of that classification are bisected, then the bracket
//! is polished by matching an outward solution to an inward one seeded with
//! the far-field series `Σ b_k r^{-α-2k}`.
//!
//! The stored profile keeps a local Taylor jet at every node, built from the
//! ODE itself, so values and derivatives are available at any radius to
//! near machine precision.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::ode::{Dopri, OdeOptions};
use crate::weighted_spaces::{GridFunction, RadialGrid};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileParams {
    pub p: f64,
    pub r_start: f64,
    pub r_shoot: f64,
    pub tol_bisect: f64,
    /// Growth is declared when `q(r) > θ q(r/2)`, `q = r^α Φ`.
    pub growth_threshold: f64,
    /// Classification checks only start at this radius.
    pub classify_from: f64,
    pub rtol: f64,
    pub atol: f64,
    pub grid_h: f64,
    /// Outer radius of the stored profile and of the inward matching solve.
    pub r_far: f64,
    pub match_radius: f64,
    pub scan_min: f64,
    pub scan_max: f64,
    pub scan_points: usize,
    pub jet_order: usize,
}

impl Default for ProfileParams {
    fn default() -> Self {
        Self {
            p: 7.0,
            r_start: 1e-4,
            r_shoot: 20.0,
            tol_bisect: 1e-12,
            growth_threshold: 2.0,
            classify_from: 2.0,
            rtol: 1e-12,
            atol: 1e-14,
            grid_h: 0.01,
            r_far: 30.0,
            match_radius: 4.0,
            scan_min: 0.5,
            scan_max: 3.0,
            scan_points: 26,
            jet_order: 14,
        }
    }
}

impl ProfileParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 5.0) {
            return Err(LabError::InvalidParameter(format!("p must exceed 5, got {}", self.p)));
        }
        if !(self.r_start > 0.0 && self.r_start < 1e-2) {
            return Err(LabError::InvalidParameter("r_start must lie in (0, 1e-2)".into()));
        }
        if !(self.r_shoot > self.classify_from && self.r_far >= self.r_shoot) {
            return Err(LabError::InvalidParameter("need classify_from < r_shoot <= r_far".into()));
        }
        if !(self.growth_threshold > 1.0) {
            return Err(LabError::InvalidParameter("growth threshold must exceed 1".into()));
        }
        if self.scan_points < 2 || !(self.scan_max > self.scan_min && self.scan_min > 0.0) {
            return Err(LabError::InvalidParameter("bad scan range".into()));
        }
        Ok(())
    }
}

pub fn alpha(p: f64) -> f64 {
    2.0 / (p - 1.0)
}

/// Constant self-similar solution `κ = (1/(p-1))^{1/(p-1)}`.
pub fn kappa(p: f64) -> f64 {
    (1.0 / (p - 1.0)).powf(1.0 / (p - 1.0))
}

/// Amplitude `L` of the singular solution `L r^{-α}`, `L^{p-1} = α(1-α)`.
pub fn singular_amplitude(p: f64) -> f64 {
    let a = alpha(p);
    (a * (1.0 - a)).powf(1.0 / (p - 1.0))
}

#[inline]
fn spow(x: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < 64.0 {
        x.powi(p as i32)
    } else {
        x.abs().powf(p - 1.0) * x
    }
}

/// Taylor coefficients of `x^p` from those of `x` (J.C.P. Miller recurrence).
pub fn power_series(x: &[f64], p: f64) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    if n == 0 {
        return out;
    }
    out[0] = spow(x[0], p);
    for k in 1..n {
        let mut acc = 0.0;
        for i in 1..=k {
            acc += (p * i as f64 - (k - i) as f64) * x[i] * out[k - i];
        }
        out[k] = acc / (k as f64 * x[0]);
    }
    out
}

/// Coefficients `a_k` of the regular axis expansion `Φ = Σ a_k r^{2k}`.
pub fn axis_series(a: f64, p: f64, order: usize) -> Vec<f64> {
    let al = alpha(p);
    let mut c = vec![a];
    for k in 0..order {
        let pw = power_series(&c, p);
        let next = (0.5 * (al + 2.0 * k as f64) * c[k] - pw[k]) / ((2 * k + 2) as f64 * (2 * k + 3) as f64);
        c.push(next);
    }
    c
}

/// Coefficients `b_k` of the far-field series `Φ ~ Σ b_k r^{-α-2k}`, `b_0 = c`.
pub fn farfield_series(c_inf: f64, p: f64, terms: usize) -> Vec<f64> {
    let al = alpha(p);
    let mut b = vec![c_inf];
    for k in 1..terms {
        let s = -al - 2.0 * (k - 1) as f64;
        let pw = power_series(&b, p);
        let next = -(s * (s + 1.0) * b[k - 1] + pw[k - 1]) / k as f64;
        b.push(next);
    }
    b
}

fn farfield_eval(b: &[f64], p: f64, r: f64) -> (f64, f64) {
    let al = alpha(p);
    let (mut v, mut d) = (0.0, 0.0);
    for (k, &bk) in b.iter().enumerate() {
        let s = -al - 2.0 * k as f64;
        let t = bk * r.powf(s);
        v += t;
        d += s * t / r;
    }
    (v, d)
}

/// Right-hand side of the profile ODE as a first-order system.
fn profile_rhs(p: f64) -> impl FnMut(f64, &[f64], &mut [f64]) {
    let al = alpha(p);
    move |r, y, dy| {
        dy[0] = y[1];
        dy[1] = -2.0 / r * y[1] + 0.5 * (al * y[0] + r * y[1]) - spow(y[0], p);
    }
}

fn axis_state(a: f64, p: f64, r: f64) -> [f64; 2] {
    let s = axis_series(a, p, 6);
    let (mut v, mut d) = (0.0, 0.0);
    for (k, &ck) in s.iter().enumerate() {
        v += ck * r.powi(2 * k as i32);
        if k > 0 {
            d += 2.0 * k as f64 * ck * r.powi(2 * k as i32 - 1);
        }
    }
    [v, d]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Classification {
    CrossedZero { r: f64 },
    PositiveGrowing { r: f64 },
    MatchedDecay,
    FixedPoint,
}

impl Classification {
    /// +1 above a decaying profile, -1 below, 0 when neither event occurred.
    pub fn side(&self) -> i32 {
        match self {
            Classification::CrossedZero { .. } => -1,
            Classification::PositiveGrowing { .. } => 1,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub a: f64,
    pub r: Vec<f64>,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub class: Classification,
}

impl Trajectory {
    /// `q(r) = r^α Φ(r)` along the stored samples.
    pub fn q(&self, p: f64) -> Vec<f64> {
        let al = alpha(p);
        self.r.iter().zip(&self.phi).map(|(&r, &f)| r.powf(al) * f).collect()
    }
}

fn ode_opts(params: &ProfileParams) -> OdeOptions<f64> {
    OdeOptions { rtol: params.rtol, atol: params.atol, h_init: 1e-5, h_max: 0.05, ..Default::default() }
}

/// Integrate from the axis with `Φ(0) = a` and classify the trajectory.
pub fn integrate_profile(a: f64, params: &ProfileParams) -> Result<Trajectory> {
    params.validate()?;
    if !(a > 0.0) || !a.is_finite() {
        return Err(LabError::InvalidParameter(format!("axis value must be positive, got {a}")));
    }
    let p = params.p;
    let al = alpha(p);
    let dr = params.grid_h;
    let n_out = (params.r_shoot / dr).round() as usize;
    if (a - kappa(p)).abs() <= 1e-12 * a {
        let r: Vec<f64> = (0..=n_out).map(|i| i as f64 * dr).collect();
        let k = kappa(p);
        return Ok(Trajectory {
            a,
            phi: vec![k; r.len()],
            dphi: vec![0.0; r.len()],
            r,
            class: Classification::FixedPoint,
        });
    }
    let y0 = axis_state(a, p, params.r_start);
    let mut ode = Dopri::new(profile_rhs(p), params.r_start, &y0, ode_opts(params));
    let mut tr = Trajectory { a, r: vec![0.0], phi: vec![a], dphi: vec![0.0], class: Classification::MatchedDecay };
    for i in 1..=n_out {
        let r = i as f64 * dr;
        ode.advance_to(r)?;
        let (f, df) = (ode.y[0], ode.y[1]);
        tr.r.push(r);
        tr.phi.push(f);
        tr.dphi.push(df);
        if f <= 0.0 {
            let (f0, r0) = (tr.phi[i - 1], tr.r[i - 1]);
            tr.class = Classification::CrossedZero { r: r0 + dr * f0 / (f0 - f) };
            break;
        }
        if r >= params.classify_from {
            let half = i / 2;
            let q_now = r.powf(al) * f;
            let q_half = tr.r[half].powf(al) * tr.phi[half];
            if q_now > params.growth_threshold * q_half {
                tr.class = Classification::PositiveGrowing { r };
                break;
            }
        }
        if !f.is_finite() {
            tr.class = Classification::PositiveGrowing { r };
            break;
        }
    }
    Ok(tr)
}

/// Bisect a bracket `[lo, hi]` whose ends classify on opposite sides.
pub fn bisect_profile(mut lo: f64, mut hi: f64, params: &ProfileParams) -> Result<f64> {
    let side_lo = integrate_profile(lo, params)?.class.side();
    let side_hi = integrate_profile(hi, params)?.class.side();
    if side_lo == 0 || side_hi == 0 || side_lo == side_hi {
        return Err(LabError::BisectionFailed(format!("no sign change on [{lo}, {hi}]")));
    }
    for _ in 0..200 {
        if (hi - lo).abs() <= params.tol_bisect * hi.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let side = integrate_profile(mid, params)?.class.side();
        if side == 0 {
            // A trajectory that neither crosses nor grows has matched decay.
            return Ok(mid);
        }
        if side == side_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fit `log Φ ≈ log c - e log r + d r^{-2}` on `[r0, r1]`; returns `(c, e)`.
pub fn fit_farfield(r: &[f64], phi: &[f64], window: (f64, f64)) -> Result<(f64, f64)> {
    let mut ata = vec![vec![0.0; 3]; 3];
    let mut atb = vec![0.0; 3];
    let mut count = 0;
    for (&ri, &fi) in r.iter().zip(phi) {
        if ri < window.0 || ri > window.1 || fi <= 0.0 {
            continue;
        }
        let row = [1.0, -ri.ln(), ri.powi(-2)];
        for a in 0..3 {
            for b in 0..3 {
                ata[a][b] += row[a] * row[b];
            }
            atb[a] += row[a] * fi.ln();
        }
        count += 1;
    }
    if count < 4 {
        return Err(LabError::DegenerateInput("far-field window holds too few positive samples".into()));
    }
    let x = crate::linalg::solve_dense(ata, atb)?;
    Ok((x[0].exp(), x[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Constant,
    Shooting,
}

/// A converged profile on a uniform grid with local Taylor jets.
#[derive(Clone, Debug)]
pub struct Profile {
    pub p: f64,
    pub kind: ProfileKind,
    pub a: f64,
    pub c_inf: Option<f64>,
    pub grid: RadialGrid<f64>,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    jets: Vec<Vec<f64>>,
    far: Vec<f64>,
}

impl Profile {
    /// The constant profile `κ` on a uniform grid.
    pub fn kappa(p: f64, r_max: f64, h: f64) -> Result<Self> {
        if !(p > 5.0) {
            return Err(LabError::InvalidParameter(format!("p must exceed 5, got {p}")));
        }
        let grid = RadialGrid::uniform(r_max, h)?;
        let k = kappa(p);
        let n = grid.len();
        Ok(Self {
            p,
            kind: ProfileKind::Constant,
            a: k,
            c_inf: None,
            grid,
            phi: vec![k; n],
            dphi: vec![0.0; n],
            jets: Vec::new(),
            far: Vec::new(),
        })
    }

    /// Rebuild a profile from stored samples, recomputing jets.
    #[allow(clippy::too_many_arguments)]
    pub fn from_samples(
        p: f64,
        kind: ProfileKind,
        a: f64,
        c_inf: Option<f64>,
        grid: RadialGrid<f64>,
        phi: Vec<f64>,
        dphi: Vec<f64>,
        jet_order: usize,
    ) -> Result<Self> {
        if kind == ProfileKind::Constant {
            return Self::kappa(p, grid.r_max(), grid.h().unwrap_or(0.01));
        }
        if !grid.is_uniform() || phi.len() != grid.len() || dphi.len() != grid.len() {
            return Err(LabError::ShapeMismatch("profile samples must match a uniform grid".into()));
        }
        let far = c_inf.map(|c| farfield_series(c, p, 5)).unwrap_or_default();
        let mut prof = Self { p, kind, a, c_inf, grid, phi, dphi, jets: Vec::new(), far };
        prof.build_jets(jet_order);
        Ok(prof)
    }

    pub fn alpha(&self) -> f64 {
        alpha(self.p)
    }

    pub fn is_constant(&self) -> bool {
        self.kind == ProfileKind::Constant
    }

    pub fn h(&self) -> f64 {
        self.grid.h().unwrap_or(0.01)
    }

    fn build_jets(&mut self, order: usize) {
        let p = self.p;
        let al = alpha(p);
        let h = self.h();
        let mut jets = Vec::with_capacity(self.phi.len());
        for (i, (&f, &df)) in self.phi.iter().zip(&self.dphi).enumerate() {
            if i == 0 {
                let s = axis_series(f, p, order / 2 + 1);
                let mut j = vec![0.0; order + 1];
                for (k, &ck) in s.iter().enumerate() {
                    if 2 * k <= order {
                        j[2 * k] = ck;
                    }
                }
                jets.push(j);
                continue;
            }
            jets.push(regular_jet(i as f64 * h, f, df, al, p, order));
        }
        self.jets = jets;
    }

    /// `Φ^{(k)}(r)` for `k = 0..=kmax`.
    pub fn derivs(&self, r: f64, kmax: usize) -> Vec<f64> {
        let mut out = vec![0.0; kmax + 1];
        if self.is_constant() {
            out[0] = self.a;
            return out;
        }
        let h = self.h();
        let n = self.phi.len();
        if r > self.grid.r_max() + 0.5 * h {
            let al = alpha(self.p);
            for (k, &bk) in self.far.iter().enumerate() {
                let s = -al - 2.0 * k as f64;
                let mut fall = 1.0;
                for (d, o) in out.iter_mut().enumerate() {
                    *o += bk * fall * r.powf(s - d as f64);
                    fall *= s - d as f64;
                }
            }
            return out;
        }
        let i = ((r.abs() / h).round() as usize).min(n - 1);
        let delta = r.abs() - i as f64 * h;
        let jet = &self.jets[i];
        let m = jet.len();
        for (d, o) in out.iter_mut().enumerate() {
            if d >= m {
                break;
            }
            let mut acc = 0.0;
            for k in (d..m).rev() {
                acc = acc * delta + jet[k] * falling(k, d);
            }
            *o = acc;
        }
        out
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.derivs(r, 0)[0]
    }

    /// `(Φ, Φ', Φ'')` at `r`.
    pub fn eval3(&self, r: f64) -> (f64, f64, f64) {
        let d = self.derivs(r, 2);
        (d[0], d[1], d[2])
    }

    /// `Λ^m Φ(r)` for `m = 0..=m_max`, `Λ = α + r∂_r`.
    pub fn lambda_iterates_at(&self, r: f64, m_max: usize) -> Vec<f64> {
        let al = alpha(self.p);
        if self.is_constant() {
            return (0..=m_max).map(|m| al.powi(m as i32) * self.a).collect();
        }
        let d = self.derivs(r, m_max);
        let coef = euler_coefficients(al, m_max);
        coef.iter()
            .map(|row| row.iter().enumerate().map(|(k, &c)| c * r.powi(k as i32) * d[k]).sum())
            .collect()
    }

    /// Discrete ODE residual in units of `Φ''`.
    ///
    /// Each node carries a local solution of the ODE through its own
    /// `(Φ, Φ')`; the residual compares neighbours' local solutions with the
    /// stored value, `|P_{i+1}(r_i) + P_{i-1}(r_i) - 2Φ_i| / h^2`.
    pub fn ode_residual(&self) -> f64 {
        if self.is_constant() {
            let k = self.a;
            return (0.5 * alpha(self.p) * k - spow(k, self.p)).abs();
        }
        let h = self.h();
        let mut worst: f64 = 0.0;
        for i in 1..self.phi.len() - 1 {
            let from_right = eval_jet(&self.jets[i + 1], -h);
            let from_left = eval_jet(&self.jets[i - 1], h);
            worst = worst.max((from_right + from_left - 2.0 * self.phi[i]).abs() / (h * h));
        }
        worst
    }

    /// Grid functions `Λ^m Φ` on the profile grid.
    pub fn lambda_iterates(&self, m_max: usize) -> Vec<GridFunction<f64>> {
        let mut out = vec![Vec::with_capacity(self.phi.len()); m_max + 1];
        for &r in self.grid.nodes() {
            for (m, v) in self.lambda_iterates_at(r, m_max).into_iter().enumerate() {
                out[m].push(v);
            }
        }
        out.into_iter().map(GridFunction::new).collect()
    }

    /// Decay exponent `e` in `Φ ≈ c r^{-e}` fitted on `window`.
    pub fn tail_exponent(&self, window: (f64, f64)) -> Result<f64> {
        if self.is_constant() {
            return Ok(0.0);
        }
        fit_farfield(self.grid.nodes(), &self.phi, window).map(|(_, e)| e)
    }

    /// Positivity and residual invariants for a decaying profile.
    pub fn validate(&self, residual_tol: f64) -> Result<()> {
        if self.phi.iter().any(|&f| !(f > 0.0)) {
            return Err(LabError::AccuracyRefusal("profile is not positive on its grid".into()));
        }
        let res = self.ode_residual();
        if !(res < residual_tol) {
            return Err(LabError::AccuracyRefusal(format!("ODE residual {res:.3e} exceeds {residual_tol:.1e}")));
        }
        Ok(())
    }
}

fn falling(k: usize, d: usize) -> f64 {
    ((k - d + 1)..=k).map(|x| x as f64).product()
}

fn eval_jet(jet: &[f64], delta: f64) -> f64 {
    jet.iter().rev().fold(0.0, |acc, &c| acc * delta + c)
}

/// `c[m][k]` with `Λ^m f = Σ_k c[m][k] r^k f^{(k)}`.
pub fn euler_coefficients(al: f64, m_max: usize) -> Vec<Vec<f64>> {
    let mut rows = vec![vec![1.0]];
    for m in 0..m_max {
        let prev = &rows[m];
        let mut next = vec![0.0; prev.len() + 1];
        for (k, &c) in prev.iter().enumerate() {
            next[k] += (al + k as f64) * c;
            next[k + 1] += c;
        }
        rows.push(next);
    }
    rows
}

/// Taylor coefficients of the solution through `(r0, f, df)`, `r0 > 0`.
///
/// From `rΦ'' + 2Φ' - ½αrΦ - ½r^2Φ' + rΦ^p = 0` expanded in `δ = r - r0`.
fn regular_jet(r0: f64, f: f64, df: f64, al: f64, p: f64, order: usize) -> Vec<f64> {
    let mut c = vec![0.0; order + 1];
    c[0] = f;
    if order >= 1 {
        c[1] = df;
    }
    let at = |v: &[f64], i: isize| if i < 0 { 0.0 } else { v[i as usize] };
    for k in 0..order.saturating_sub(1) {
        let pw = power_series(&c[..=k], p);
        let ki = k as isize;
        let kf = k as f64;
        let known = (kf + 1.0) * kf * c[k + 1] + 2.0 * (kf + 1.0) * c[k + 1]
            - 0.5 * al * (r0 * c[k] + at(&c, ki - 1))
            - 0.5 * (r0 * r0 * (kf + 1.0) * c[k + 1] + 2.0 * r0 * kf * c[k] + (kf - 1.0) * at(&c, ki - 1))
            + r0 * pw[k]
            + if k >= 1 { pw[k - 1] } else { 0.0 };
        c[k + 2] = -known / (r0 * (kf + 2.0) * (kf + 1.0));
    }
    c
}

/// Integrate the profile ODE from `r0` to each radius in `targets` (monotone), collecting `(Φ, Φ')`.
fn sweep(p: f64, r0: f64, y0: [f64; 2], targets: &[f64], opts: OdeOptions<f64>) -> Result<Vec<[f64; 2]>> {
    let mut ode = Dopri::new(profile_rhs(p), r0, &y0, opts);
    let mut out = Vec::with_capacity(targets.len());
    for &t in targets {
        ode.advance_to(t)?;
        out.push([ode.y[0], ode.y[1]]);
    }
    Ok(out)
}

struct Matching<'a> {
    params: &'a ProfileParams,
}

impl Matching<'_> {
    fn mismatch(&self, a: f64, c: f64) -> Result<[f64; 2]> {
        let p = self.params.p;
        let rm = self.params.match_radius;
        let opts = ode_opts(self.params);
        let out = sweep(p, self.params.r_start, axis_state(a, p, self.params.r_start), &[rm], opts)?[0];
        let (v, d) = farfield_eval(&farfield_series(c, p, 5), p, self.params.r_far);
        let inn = sweep(p, self.params.r_far, [v, d], &[rm], opts)?[0];
        Ok([out[0] - inn[0], out[1] - inn[1]])
    }

    /// Newton iteration in `(a, c)` with finite-difference Jacobian.
    fn solve(&self, mut a: f64, mut c: f64) -> Result<(f64, f64)> {
        for _ in 0..30 {
            let f = self.mismatch(a, c)?;
            if f[0].abs().max(f[1].abs()) < 1e-13 {
                return Ok((a, c));
            }
            let (ea, ec) = (1e-7 * a, 1e-7 * c.abs().max(1e-3));
            let fa = self.mismatch(a + ea, c)?;
            let fc = self.mismatch(a, c + ec)?;
            let j = [[(fa[0] - f[0]) / ea, (fc[0] - f[0]) / ec], [(fa[1] - f[1]) / ea, (fc[1] - f[1]) / ec]];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det == 0.0 || !det.is_finite() {
                return Err(LabError::Accuracy("singular matching Jacobian".into()));
            }
            let da = (f[0] * j[1][1] - f[1] * j[0][1]) / det;
            let dc = (j[0][0] * f[1] - j[1][0] * f[0]) / det;
            a -= da;
            c -= dc;
            if da.abs() < 1e-15 * a && dc.abs() < 1e-15 * c.abs() {
                return Ok((a, c));
            }
        }
        let f = self.mismatch(a, c)?;
        if f[0].abs().max(f[1].abs()) < 1e-10 {
            Ok((a, c))
        } else {
            Err(LabError::Accuracy(format!("profile matching stalled at mismatch {:.2e}", f[0].abs().max(f[1].abs()))))
        }
    }
}

/// Polish a bisected axis value and assemble the stored profile.
pub fn build_profile(a_guess: f64, params: &ProfileParams) -> Result<Profile> {
    params.validate()?;
    let p = params.p;
    let tr = integrate_profile(a_guess, params)?;
    let (c_guess, _) = fit_farfield(&tr.r, &tr.phi, (0.5 * params.classify_from.max(2.0), params.match_radius.max(4.0)))
        .or_else(|_| fit_farfield(&tr.r, &tr.phi, (1.0, params.r_shoot)))?;
    let (a, c) = Matching { params }.solve(a_guess, c_guess)?;

    let grid = RadialGrid::uniform(params.r_far, params.grid_h)?;
    let h = grid.h().unwrap_or(params.grid_h);
    let rm = params.match_radius;
    let split = (rm / h).round() as usize;
    let nodes = grid.nodes().to_vec();
    let opts = ode_opts(params);
    let outward = sweep(p, params.r_start, axis_state(a, p, params.r_start), &nodes[1..=split], opts)?;
    let (v, d) = farfield_eval(&farfield_series(c, p, 5), p, params.r_far);
    let inner_targets: Vec<f64> = nodes[split..].iter().rev().copied().collect();
    let mut inward = sweep(p, params.r_far, [v, d], &inner_targets, opts)?;
    inward.reverse();

    let mut phi = Vec::with_capacity(nodes.len());
    let mut dphi = Vec::with_capacity(nodes.len());
    phi.push(a);
    dphi.push(0.0);
    for s in &outward[..split - 1] {
        phi.push(s[0]);
        dphi.push(s[1]);
    }
    for s in &inward {
        phi.push(s[0]);
        dphi.push(s[1]);
    }
    Profile::from_samples(p, ProfileKind::Shooting, a, Some(c), grid, phi, dphi, params.jet_order)
}

/// Scan, bisect and polish every decaying profile in the scan range, sorted by `a`.
pub fn find_profiles(params: &ProfileParams) -> Result<Vec<Profile>> {
    params.validate()?;
    let n = params.scan_points;
    let scan: Vec<f64> =
        (0..n).map(|i| params.scan_min + (params.scan_max - params.scan_min) * i as f64 / (n - 1) as f64).collect();
    let mut sides = Vec::with_capacity(n);
    for &a in &scan {
        sides.push(integrate_profile(a, params)?.class.side());
    }
    let mut out = Vec::new();
    for i in 0..n - 1 {
        if sides[i] != 0 && sides[i + 1] != 0 && sides[i] != sides[i + 1] {
            let a_star = bisect_profile(scan[i], scan[i + 1], params)?;
            // The constant solution also separates the two classes; it is not a decaying profile.
            if (a_star - kappa(params.p)).abs() < 1e-6 * a_star {
                continue;
            }
            let Ok(prof) = build_profile(a_star, params) else { continue };
            let tail_ok = prof
                .tail_exponent((0.5 * params.r_shoot, params.r_shoot))
                .map(|e| (e / alpha(params.p) - 1.0).abs() < 0.02)
                .unwrap_or(false);
            if tail_ok && prof.validate(1e-8).is_ok() {
                out.push(prof);
            }
        }
    }
    if out.is_empty() {
        return Err(LabError::NonDecaying(format!(
            "no decaying profile for a in [{}, {}]",
            params.scan_min, params.scan_max
        )));
    }
    out.sort_by(|x, y| x.a.partial_cmp(&y.a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn axis_series_matches_taylor_data() {
        let (a, p) = (1.7, 7.0);
        let s = axis_series(a, p, 3);
        assert_relative_eq!(s[1], (a / (p - 1.0) - a.powf(p)) / 6.0, max_relative = 1e-14);
    }

    #[test]
    fn miller_recurrence_reproduces_square() {
        let x = [1.0, 2.0, 3.0];
        let sq = power_series(&x, 2.0);
        assert_relative_eq!(sq[1], 4.0);
        assert_relative_eq!(sq[2], 10.0);
    }

    #[test]
    fn euler_coefficients_second_iterate() {
        // Λ^2 = α^2 + (2α+1) r∂ + r^2 ∂^2
        let c = euler_coefficients(0.5, 2);
        assert_relative_eq!(c[2][0], 0.25);
        assert_relative_eq!(c[2][1], 2.0);
        assert_relative_eq!(c[2][2], 1.0);
    }

    #[test]
    fn singular_solution_amplitude() {
        let l = singular_amplitude(7.0);
        let al = alpha(7.0);
        assert_relative_eq!(l.powi(6), al * (1.0 - al), max_relative = 1e-14);
    }

    #[test]
    fn kappa_trajectory_is_fixed() {
        let params = ProfileParams::default();
        let tr = integrate_profile(kappa(7.0), &params).unwrap();
        assert_eq!(tr.class, Classification::FixedPoint);
        assert!(tr.phi.iter().all(|&f| (f - kappa(7.0)).abs() < 1e-10));
    }

    #[test]
    fn large_axis_value_crosses_zero() {
        let tr = integrate_profile(10.0, &ProfileParams::default()).unwrap();
        assert!(matches!(tr.class, Classification::CrossedZero { r } if r < 20.0));
    }

    #[test]
    fn p_at_most_five_is_rejected() {
        let params = ProfileParams { p: 5.0, ..Default::default() };
        assert!(matches!(integrate_profile(1.0, &params), Err(LabError::InvalidParameter(_))));
    }

    #[test]
    fn regular_jet_satisfies_ode_locally() {
        let (r0, f, df, p) = (1.3, 0.6, -0.2, 7.0);
        let al = alpha(p);
        let j = regular_jet(r0, f, df, al, p, 10);
        let rhs = -2.0 / r0 * df + 0.5 * (al * f + r0 * df) - f.powi(7);
        assert_relative_eq!(2.0 * j[2], rhs, max_relative = 1e-13);
        // Compare a short DP54 step with the jet.
        let mut ode = Dopri::new(profile_rhs(p), r0, &[f, df], OdeOptions::default());
        ode.advance_to(r0 + 0.01).unwrap();
        assert_relative_eq!(eval_jet(&j, 0.01), ode.y[0], max_relative = 1e-12);
    }
}
