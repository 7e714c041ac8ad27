//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned.
//!
//! The simulation criterion runs 2·10⁴ steps and dominates the wall time
//! (a few minutes in an optimised build).

use std::time::{Duration, Instant};

use blowup_lab::corrector::{c1_direct, residual_order, solve_hierarchy, CorrectorParams};
use blowup_lab::elliptic_inverter::{Inverter, InverterParams};
use blowup_lab::profile_solver::{find_profiles, Profile, ProfileParams};
use blowup_lab::simulator::{reconstruct_physical, synthetic_series, Library, RunExit, SimConfig, Simulator};
use blowup_lab::spectral::{alignment_with_lambda_phi, compute_spectrum, SpectralParams};
use blowup_lab::verify;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail }
    }
}

fn within_time(o: Outcome, took: Duration, budget: Duration) -> Outcome {
    let ok = took <= budget;
    Outcome::new(o.passed && ok, format!("{}; {:.1}s (budget {}s)", o.detail, took.as_secs_f64(), budget.as_secs()))
}

fn criterion(label: &str, budget_s: u64, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = within_time(f(), t.elapsed(), Duration::from_secs(budget_s));
    println!("{} {label}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    o.passed
}

const P: f64 = 7.0;

fn kappa() -> Profile {
    Profile::kappa(P, 30.0, 0.01).expect("constant profile")
}

fn shooting() -> Option<Profile> {
    find_profiles(&ProfileParams { p: P, ..Default::default() }).ok().and_then(|v| v.into_iter().next())
}

fn kappa_oracle() -> Outcome {
    let k = kappa();
    let sp = match compute_spectrum(&k, &SpectralParams::default()) {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, format!("spectrum: {e}")),
    };
    let expected = [-1.0, 0.0, 1.0, 2.0];
    let eig_err = expected.iter().zip(&sp.eigenvalues).map(|(e, l)| (e - l).abs()).fold(0.0_f64, f64::max);
    let c1_target = 14.0 / 3.0;
    let corr = solve_hierarchy(&k, None, &CorrectorParams::default());
    let direct = c1_direct(&k, 15.0, 0.0025);
    match (corr, direct) {
        (Ok(c), Ok(d)) => {
            let (e1, e2, e3) = ((c.c1() - c1_target).abs(), (d - c1_target).abs(), (c.d1() - 1.0).abs());
            Outcome::new(
                eig_err < 1e-3 && e1 < 1e-5 && e2 < 1e-5 && e3 < 1e-5,
                format!("eigenvalue error {eig_err:.2e}; c1 hierarchy {:.10} direct {d:.10}; d1 {:.10}", c.c1(), c.d1()),
            )
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, format!("corrector: {e}")),
    }
}

fn shooting_profile(prof: Option<&Profile>) -> Outcome {
    let Some(prof) = prof else { return Outcome::new(false, "no decaying profile found".into()) };
    let residual = prof.ode_residual();
    let r_max = prof.grid.r_max();
    let exponent = prof.tail_exponent((0.5 * r_max, r_max)).unwrap_or(f64::NAN);
    let exp_err = (exponent * 3.0 - 1.0).abs();
    let sp = match compute_spectrum(prof, &SpectralParams::default()) {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, format!("spectrum: {e}")),
    };
    let lm1 = sp.lambda(-1).unwrap_or(f64::NAN);
    let cos = alignment_with_lambda_phi(&sp, prof).unwrap_or(f64::NAN);
    Outcome::new(
        residual < 1e-8 && exp_err < 0.02 && (lm1 + 1.0).abs() < 5e-3 && cos > 1.0 - 1e-4,
        format!(
            "a = {:.10}; residual {residual:.2e}; tail exponent {exponent:.6}; λ_-1 = {lm1:.6}; cos = {:.8}",
            prof.a, cos
        ),
    )
}

fn reconnection(prof: Option<&Profile>) -> Outcome {
    let Some(prof) = prof else { return Outcome::new(false, "no decaying profile found".into()) };
    let bs = [1e-3, 1e-2, 1e-1];
    let s = verify::reconnection(prof, &bs, 1e-6);
    let k = verify::reconnection(&kappa(), &bs, 1e-8);
    Outcome::new(s.passed && k.passed, format!("profile: {}; constant: {}", s.detail, k.detail))
}

fn inverter_cross_check(prof: Option<&Profile>) -> Outcome {
    let Some(prof) = prof else { return Outcome::new(false, "no decaying profile found".into()) };
    let inv = match Inverter::new(prof, InverterParams { j_max: 6, ..Default::default() }) {
        Ok(i) => i,
        Err(e) => return Outcome::new(false, format!("inverter: {e}")),
    };
    let w = verify::wronskian(prof, &inv, 1e-6);
    let b = verify::banded_vs_voc(prof, &inv, 20, 2024, 1e-5);
    Outcome::new(w.passed && b.passed, format!("{}; {}", w.detail, b.detail))
}

fn residual_orders() -> Outcome {
    let k = kappa();
    let bs = [1e-2, 10f64.powf(-2.5), 1e-3];
    let mut ok = true;
    let mut parts = Vec::new();
    for n in 1..=3 {
        let fit = solve_hierarchy(&k, None, &CorrectorParams { n, ..Default::default() })
            .and_then(|c| residual_order(&c, &bs, 1.0, 201));
        match fit {
            Ok(f) => {
                let meets = f.meets(n as f64 + 0.5);
                ok &= meets;
                let tag = if f.exact() { " (roundoff)" } else { "" };
                parts.push(format!("n={n} slope {:.3}{tag}", f.slope));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("n={n} error {e}"));
            }
        }
    }
    Outcome::new(ok, parts.join(", "))
}

/// The constant-profile run shared by the simulation and free-boundary criteria.
fn simulate_kappa() -> Result<blowup_lab::simulator::RunOutcome, String> {
    let k = Profile::kappa(P, 15.0, 0.01).map_err(|e| e.to_string())?;
    let corr = solve_hierarchy(&k, None, &CorrectorParams::default()).map_err(|e| e.to_string())?;
    let lib = Library::with_modes(corr, Vec::new()).map_err(|e| e.to_string())?;
    // The constant profile is r-independent, so a coarse radial grid suffices.
    let cfg = SimConfig { nr: 16, nz: 600, ds: 7.5e-3, steps: 20_000, s0: 50.0, mode_damping: true, ..Default::default() };
    let sim = Simulator::new(cfg, lib).map_err(|e| e.to_string())?;
    Ok(sim.run())
}

fn simulation(run: &Result<blowup_lab::simulator::RunOutcome, String>) -> Outcome {
    let out = match run {
        Ok(o) => o,
        Err(e) => return Outcome::new(false, format!("setup: {e}")),
    };
    let recs = &out.series.records;
    let c1 = out.series.c1;
    let completed = out.exit == RunExit::Completed;
    let last_s = recs.last().map(|r| r.s).unwrap_or(0.0);
    let window: Vec<_> = recs.iter().filter(|r| (100.0..=200.0).contains(&r.s)).collect();
    let (lo, hi) = window
        .iter()
        .map(|r| r.b * c1 * r.s)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let b_ok = !window.is_empty() && last_s >= 200.0 - 1e-6 && lo >= 0.8 && hi <= 1.25;
    // λ e^{s/2} relative to its initial value stays within [s^{-1}, s].
    let r0 = recs.first().map(|r| r.log_lambda + r.s / 2.0).unwrap_or(0.0);
    let band_ok = recs.iter().all(|r| (r.log_lambda + r.s / 2.0 - r0).abs() <= r.s.ln());
    let drift = recs.last().map(|r| (r.log_lambda + r.s / 2.0 - r0) / (r.s / recs[0].s).ln()).unwrap_or(f64::NAN);
    let max_de = recs.iter().skip(1).map(|r| r.energy_delta).fold(f64::NEG_INFINITY, f64::max);
    let energy_ok = max_de <= 0.0;
    let orth = recs.iter().skip(1).map(|r| r.orth_rel).fold(0.0_f64, f64::max);
    let orth_ok = orth < 1e-8;
    Outcome::new(
        completed && b_ok && band_ok && energy_ok && orth_ok,
        format!(
            "exit {:?} at s = {last_s:.2}; b·c1·s in [{lo:.4}, {hi:.4}]; λe^(s/2) exponent {drift:.4} (band C = 1, {}); \
             max ΔE {max_de:.2e}; max relative orthogonality defect {orth:.2e}",
            out.exit,
            if band_ok { "inside" } else { "outside" }
        ),
    )
}

fn free_boundary(run: &Result<blowup_lab::simulator::RunOutcome, String>) -> Outcome {
    let c1: f64 = 14.0 / 3.0;
    let target = c1.sqrt();
    let synth = reconstruct_physical(&synthetic_series(c1, 50.0, 400.0, 0.01));
    let sim = run.as_ref().map_err(|e| e.clone()).and_then(|o| reconstruct_physical(&o.series).map_err(|e| e.to_string()));
    match (synth, sim) {
        (Ok(a), Ok(b)) => {
            let (e1, e2) = ((a.c_star - target).abs(), (b.c_star / target - 1.0).abs());
            Outcome::new(
                e1 < 1e-3 && e2 < 0.2,
                format!("√c1 = {target:.6}; synthetic c* = {:.6}; simulated c* = {:.6} ({:.1}% off)", a.c_star, b.c_star, 100.0 * e2),
            )
        }
        (Err(e), _) => Outcome::new(false, format!("synthetic: {e}")),
        (_, Err(e)) => Outcome::new(false, format!("simulated: {e}")),
    }
}

fn property_suites() -> Outcome {
    let checks = [
        verify::hermite(30, 1e-8),
        verify::coercivity(100, 4, 99),
        verify::decompose_round_trip(&Profile::kappa(P, 15.0, 0.01).expect("constant profile"), &[(1.0, 1e-2), (1.2, 3e-3), (0.85, 2e-2), (1.05, 1e-3)], 1e-8),
        verify::nondegeneracy_logic(),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let detail = checks.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>().join("; ");
    Outcome::new(failed.is_empty(), detail)
}

fn main() {
    let t = Instant::now();
    let mut ok = true;
    ok &= criterion("[1] constant-profile oracle", 60, kappa_oracle);
    let t_shoot = Instant::now();
    let prof = shooting();
    let shoot_build = t_shoot.elapsed();
    ok &= criterion("[2] shooting profile", 300, || {
        let o = shooting_profile(prof.as_ref());
        Outcome::new(o.passed, format!("{} (search {:.1}s)", o.detail, shoot_build.as_secs_f64()))
    });
    ok &= criterion("[3] reconnection residual", 300, || reconnection(prof.as_ref()));
    ok &= criterion("[4] inverter cross-check", 120, || inverter_cross_check(prof.as_ref()));
    ok &= criterion("[5] corrector residual order", 300, residual_orders);
    let t_sim = Instant::now();
    let run = simulate_kappa();
    let sim_time = t_sim.elapsed();
    ok &= {
        let o = within_time(simulation(&run), sim_time, Duration::from_secs(1800));
        println!("{} [6] constant-profile simulation: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        o.passed
    };
    ok &= criterion("[7] free boundary", 60, || free_boundary(&run));
    ok &= criterion("[8] property suites", 300, property_suites);
    println!("acceptance: {} in {:.1}s", if ok { "all criteria pass" } else { "FAILURES" }, t.elapsed().as_secs_f64());
    if !ok {
        std::process::exit(1);
    }
}
