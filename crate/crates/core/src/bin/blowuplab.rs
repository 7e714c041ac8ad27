//! `blowuplab`: batch driver for profiles, spectra, correctors, runs and checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blowup_lab::config::{Config, ProfileChoice};
use blowup_lab::corrector::{residual_order, solve_hierarchy, CorrectorParams};
use blowup_lab::elliptic_inverter::Inverter;
use blowup_lab::error::LabError;
use blowup_lab::io::{self, CorrectorDoc, ReconstructionDoc, SpectrumDoc, WriteOptions};
use blowup_lab::profile_solver::{find_profiles, integrate_profile, Profile};
use blowup_lab::simulator::{reconstruct_physical, verdict_names, FailureKind, Library, RunExit, Simulator};
use blowup_lab::spectral::{check_nondegeneracy, compute_spectrum};
use blowup_lab::verify;

const EXIT_OTHER: u8 = 1;
const EXIT_BASIN: u8 = 2;
const EXIT_INSTABILITY: u8 = 3;
const EXIT_VERDICT: u8 = 4;
const EXIT_NO_PROFILE: u8 = 5;
const EXIT_MISSING_INPUT: u8 = 6;
const EXIT_CHECKS_FAILED: u8 = 7;
const EXIT_CONFIG: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "blowuplab", version, about = "Self-similar blow-up laboratory")]
struct Cli {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
    /// Print every configuration key with its default and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Find decaying profiles (or the constant one) and write them.
    Profile,
    /// Spectrum of the radial linearised operator and the nondegeneracy verdict.
    Spectrum,
    /// Corrector hierarchy, modulation laws and residual orders.
    Corrector,
    /// Renormalised flow with modulation; writes the run log.
    Simulate,
    /// Run the property suite and print a pass/fail matrix.
    Verify,
    /// Blow-up time and free-boundary fit from an existing run log.
    Reconstruct,
}

/// Failure carrying its exit code.
struct Fail {
    code: u8,
    msg: String,
}

impl From<LabError> for Fail {
    fn from(e: LabError) -> Self {
        let code = match &e {
            LabError::Config { .. } => EXIT_CONFIG,
            LabError::NonDecaying(_) => EXIT_NO_PROFILE,
            LabError::OutOfBasin(_) | LabError::DegenerateDecomposition(_) => EXIT_BASIN,
            LabError::Instability(_) | LabError::SingularModulation(_) => EXIT_INSTABILITY,
            _ => EXIT_OTHER,
        };
        Fail { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Fail>;

struct Ctx {
    cfg: Config,
    out: PathBuf,
    opts: WriteOptions,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Upstream artifact that must already exist.
    fn input(&self, name: &str, producer: &str) -> Result<PathBuf, Fail> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Fail { code: EXIT_MISSING_INPUT, msg: format!("{} not found; run `blowuplab {producer}` first", p.display()) })
        }
    }

    fn load_profile(&self) -> Result<Profile, Fail> {
        let path = self.input("profile.csv", "profile")?;
        Ok(io::read_profile(&path, self.cfg.profile.jet_order)?)
    }
}

fn init_threads() -> Result<(), Fail> {
    let Ok(raw) = std::env::var("BLOWUPLAB_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail { code: EXIT_CONFIG, msg: format!("BLOWUPLAB_THREADS must be a positive integer, got '{raw}'") })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Fail { code: EXIT_OTHER, msg: format!("thread pool: {e}") })
}

fn build_ctx(cli: &Cli) -> Result<Ctx, Fail> {
    let mut cfg = match &cli.config {
        Some(p) if !p.is_file() => {
            return Err(Fail { code: EXIT_CONFIG, msg: format!("config file {} not found", p.display()) })
        }
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(out) = &cli.out {
        cfg.global.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.global.seed = seed;
    }
    cfg.propagate();
    let out = cfg.global.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(LabError::from)?;
    let opts = WriteOptions { timestamp: cfg.global.timestamp };
    Ok(Ctx { cfg, out, opts, quiet: cli.quiet })
}

fn kappa_profile(cfg: &Config) -> Result<Profile, LabError> {
    Profile::kappa(cfg.global.p, cfg.profile.r_far, cfg.profile.grid_h)
}

/// Classification of every scan point, for the no-profile diagnostic.
fn scan_log(cfg: &Config) -> String {
    let pp = &cfg.profile;
    let n = pp.scan_points.max(2);
    let mut out = format!("# scan of Φ(0) = a on [{}, {}], p = {}\n", pp.scan_min, pp.scan_max, pp.p);
    for i in 0..n {
        let a = pp.scan_min + (pp.scan_max - pp.scan_min) * i as f64 / (n - 1) as f64;
        let line = match integrate_profile(a, pp) {
            Ok(t) => format!("a = {a:.6}  {:?}\n", t.class),
            Err(e) => format!("a = {a:.6}  error: {e}\n"),
        };
        out.push_str(&line);
    }
    out
}

fn profile_report(p: &Profile) -> String {
    let r_max = p.grid.r_max();
    let exponent = p.tail_exponent((0.5 * r_max, r_max)).unwrap_or(f64::NAN);
    let c_inf = p.c_inf.map(|c| format!("{c:.12}")).unwrap_or_else(|| "none".into());
    format!(
        "p = {}\nkind = {:?}\na = {:.12}\nc_inf = {c_inf}\ntail exponent = {exponent:.6} (2/(p-1) = {:.6})\node residual = {:.3e}\n",
        p.p,
        p.kind,
        p.a,
        p.alpha(),
        p.ode_residual()
    )
}

fn cmd_profile(ctx: &Ctx) -> CmdResult {
    let cfg = &ctx.cfg;
    let chosen = match cfg.global.profile_kind {
        ProfileChoice::Kappa => kappa_profile(cfg)?,
        ProfileChoice::Shooting => {
            let found = match find_profiles(&cfg.profile) {
                Ok(f) => f,
                Err(e @ LabError::NonDecaying(_)) => {
                    let log = scan_log(cfg);
                    std::fs::write(ctx.path("scan_log.txt"), &log).map_err(LabError::from)?;
                    eprint!("{log}");
                    return Err(e.into());
                }
                Err(e) => return Err(e.into()),
            };
            for (i, p) in found.iter().enumerate() {
                io::write_profile(&ctx.path(&format!("profile_{i}.csv")), p, ctx.opts)?;
                ctx.say(format!("profile {i}: a = {:.10}", p.a));
            }
            let idx = cfg.global.profile_index;
            found.into_iter().nth(idx).ok_or_else(|| Fail {
                code: EXIT_NO_PROFILE,
                msg: format!("profile_index = {idx} but fewer decaying profiles were found"),
            })?
        }
    };
    io::write_profile(&ctx.path("profile.csv"), &chosen, ctx.opts)?;
    let report = profile_report(&chosen);
    std::fs::write(ctx.path("report.txt"), &report).map_err(LabError::from)?;
    ctx.say(report.trim_end());
    Ok(())
}

fn cmd_spectrum(ctx: &Ctx) -> CmdResult {
    let profile = ctx.load_profile()?;
    let sp = compute_spectrum(&profile, &ctx.cfg.spectrum)?;
    let verdict = check_nondegeneracy(&sp, &profile, ctx.cfg.spectrum.nondegeneracy_tol)?;
    ctx.say(format!("ℓ₀ = {}, eigenvalues {:?}", sp.ell0, sp.eigenvalues));
    ctx.say(format!("nondegenerate = {}", verdict.nondegenerate));
    io::write_spectrum_json(&ctx.path("spectrum.json"), &SpectrumDoc::new(&sp, profile.a, verdict, ctx.opts))?;
    io::eigenfunction_table(&sp).write(&ctx.path("eigenfunctions.csv"), ctx.opts)?;
    Ok(())
}

fn inverter_for(ctx: &Ctx, profile: &Profile) -> Result<Option<Inverter>, LabError> {
    if profile.is_constant() {
        return Ok(None);
    }
    Inverter::new(profile, ctx.cfg.inverter.clone()).map(Some)
}

fn cmd_corrector(ctx: &Ctx) -> CmdResult {
    let profile = ctx.load_profile()?;
    let inv = inverter_for(ctx, &profile)?;
    let params = &ctx.cfg.corrector;
    let corr = solve_hierarchy(&profile, inv.as_ref(), params)?;
    ctx.say(format!("c = {:?}\nd = {:?}", corr.c, corr.d));
    io::write_corrector_json(&ctx.path("corrector.json"), &CorrectorDoc::new(&corr, ctx.opts))?;
    io::corrector_table(&corr).write(&ctx.path("corrector_v.csv"), ctx.opts)?;
    let bs = [1e-2, 10f64.powf(-2.5), 1e-3];
    let mut fits = Vec::with_capacity(params.n);
    for n in 1..=params.n {
        let c = if n == params.n {
            corr.clone()
        } else {
            solve_hierarchy(&profile, inv.as_ref(), &CorrectorParams { n, ..params.clone() })?
        };
        let fit = residual_order(&c, &bs, 1.0, 41)?;
        ctx.say(format!("n = {n}: residual slope {:.3}{}", fit.slope, if fit.exact() { " (exact)" } else { "" }));
        fits.push(fit);
    }
    io::residual_order_table(&fits).write(&ctx.path("residual_order.csv"), ctx.opts)?;
    Ok(())
}

fn write_reconstruction(ctx: &Ctx, series: &blowup_lab::simulator::RunSeries) -> Result<(), LabError> {
    let rec = reconstruct_physical(series)?;
    ctx.say(format!("T = {:.6e}, c* = {:.6} (fit residual {:.2e})", rec.t_blowup, rec.c_star, rec.fit_residual));
    io::write_reconstruction_json(&ctx.path("reconstruction.json"), &ReconstructionDoc::new(&rec, ctx.opts))?;
    io::free_boundary_table(&rec).write(&ctx.path("free_boundary.csv"), ctx.opts)
}

fn cmd_simulate(ctx: &Ctx) -> CmdResult {
    let profile = ctx.load_profile()?;
    let inv = inverter_for(ctx, &profile)?;
    let sim_cfg = ctx.cfg.simulate.clone();
    let corr = solve_hierarchy(&profile, inv.as_ref(), &CorrectorParams { n: sim_cfg.n, ..ctx.cfg.corrector.clone() })?;
    let sp = compute_spectrum(&profile, &ctx.cfg.spectrum)?;
    let sim = Simulator::new(sim_cfg, Library::new(corr, &sp)?)?;
    ctx.say(format!("simulating {} steps on {}x{} nodes", sim.config().steps, sim.grid().nr(), sim.grid().nz()));
    let outcome = sim.run();
    io::write_run_csv(&ctx.path("run.csv"), &outcome.series, ctx.opts)?;
    ctx.say(format!("{} records written", outcome.series.records.len()));
    match write_reconstruction(ctx, &outcome.series) {
        Ok(()) => {}
        Err(LabError::InsufficientDecay(m)) => ctx.say(format!("no reconstruction: {m}")),
        Err(e) => return Err(e.into()),
    }
    match outcome.exit {
        RunExit::Completed | RunExit::LambdaExit { .. } => Ok(()),
        RunExit::VerdictExit { s, mask } => {
            Err(Fail { code: EXIT_VERDICT, msg: format!("verdict failed at s = {s:.4}: {}", verdict_names(mask)) })
        }
        RunExit::Failed { kind, message } => {
            let code = match kind {
                FailureKind::OutOfBasin => EXIT_BASIN,
                FailureKind::Instability | FailureKind::SingularModulation => EXIT_INSTABILITY,
                FailureKind::Other => EXIT_OTHER,
            };
            Err(Fail { code, msg: message })
        }
    }
}

fn cmd_reconstruct(ctx: &Ctx) -> CmdResult {
    let path = ctx.input("run.csv", "simulate")?;
    let series = io::read_run_csv(&path)?;
    Ok(write_reconstruction(ctx, &series)?)
}

fn cmd_verify(ctx: &Ctx) -> CmdResult {
    let path = ctx.path("profile.csv");
    let profile = if path.is_file() {
        io::read_profile(&path, ctx.cfg.profile.jet_order)?
    } else {
        ctx.say("no profile.csv; building the configured profile");
        match ctx.cfg.global.profile_kind {
            ProfileChoice::Kappa => kappa_profile(&ctx.cfg)?,
            ProfileChoice::Shooting => {
                find_profiles(&ctx.cfg.profile)?.into_iter().nth(ctx.cfg.global.profile_index).ok_or_else(|| Fail {
                    code: EXIT_NO_PROFILE,
                    msg: "profile_index exceeds the number of decaying profiles".into(),
                })?
            }
        }
    };
    let inv = Inverter::new(&profile, ctx.cfg.inverter.clone())?;
    let checks = verify::suite(&profile, &inv, ctx.cfg.global.seed);
    print!("{}", verify::matrix(&checks));
    if verify::all_passed(&checks) {
        Ok(())
    } else {
        let n = checks.iter().filter(|c| !c.passed).count();
        Err(Fail { code: EXIT_CHECKS_FAILED, msg: format!("{n} check(s) failed") })
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    if cli.print_defaults {
        print!("{}", Config::documented_defaults()?);
        return Ok(());
    }
    let Some(cmd) = cli.command else {
        return Err(Fail { code: EXIT_CONFIG, msg: "no subcommand given; see --help".into() });
    };
    init_threads()?;
    let ctx = build_ctx(cli)?;
    match cmd {
        Command::Profile => cmd_profile(&ctx),
        Command::Spectrum => cmd_spectrum(&ctx),
        Command::Corrector => cmd_corrector(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Verify => cmd_verify(&ctx),
        Command::Reconstruct => cmd_reconstruct(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("blowuplab: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
