//! Versioned on-disk formats.
//!
//! Tables are CSV preceded by `# key=value` metadata lines, the first of
//! which is always `# format_version=N`. Documents are JSON objects that carry
//! the same `format_version` field. A `generated_unix` stamp is written only
//! on request so that reruns can be byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corrector::{Corrector, CorrectorMeta, ResidualOrderFit};
use crate::error::{LabError, Result};
use crate::profile_solver::{Profile, ProfileKind};
use crate::simulator::{NormTable, PhysicalReconstruction, RunSeries, StepRecord};
use crate::spectral::{NondegeneracyVerdict, Spectrum};
use crate::weighted_spaces::RadialGrid;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WriteOptions {
    /// Emit a `generated_unix` stamp.
    pub timestamp: bool,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| LabError::Format(format!("{what}: cannot parse '{s}' as a number")))
}

/// A numeric table with its metadata block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { meta: Vec::new(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn meta_f64(&self, key: &str) -> Result<f64> {
        let v = self.meta(key).ok_or_else(|| LabError::Format(format!("missing metadata '{key}'")))?;
        parse_f64(v, key)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| LabError::Format(format!("missing column '{name}'")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column_index(name)?;
        self.rows.iter().map(|r| parse_f64(&r[c], name)).collect()
    }

    pub fn write(&self, path: &Path, opts: WriteOptions) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# format_version={FORMAT_VERSION}")?;
        if opts.timestamp {
            writeln!(out, "# generated_unix={}", now_unix())?;
        }
        for (k, v) in &self.meta {
            writeln!(out, "# {k}={v}")?;
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header)?;
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut meta = Vec::new();
        let mut line = String::new();
        let mut first = true;
        let mut body = String::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            let Some(rest) = line.strip_prefix('#') else {
                body.push_str(&line);
                break;
            };
            let (k, v) = rest
                .trim()
                .split_once('=')
                .ok_or_else(|| LabError::Format(format!("bad metadata line '{}'", line.trim())))?;
            if first {
                if k != "format_version" {
                    return Err(LabError::Format("first line must be '# format_version=N'".into()));
                }
                if v.trim() != FORMAT_VERSION.to_string() {
                    return Err(LabError::Format(format!("unsupported format_version {v}")));
                }
                first = false;
                continue;
            }
            if k != "generated_unix" {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        if first {
            return Err(LabError::Format("missing format_version".into()));
        }
        let mut rest = String::new();
        std::io::Read::read_to_string(&mut reader, &mut rest)?;
        body.push_str(&rest);
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let header = r.headers()?.iter().map(str::to_string).collect::<Vec<_>>();
        let rows = r
            .records()
            .map(|rec| rec.map(|x| x.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Self { meta, header, rows })
    }
}

/// JSON with a `format_version` check.
fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, doc)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let v: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    match v.get("format_version").and_then(|x| x.as_u64()) {
        Some(n) if n == FORMAT_VERSION as u64 => Ok(serde_json::from_value(v)?),
        Some(n) => Err(LabError::Format(format!("unsupported format_version {n}"))),
        None => Err(LabError::Format("missing format_version".into())),
    }
}

fn stamp(opts: WriteOptions) -> Option<u64> {
    opts.timestamp.then(now_unix)
}

// ---- profiles ----

pub fn profile_table(profile: &Profile) -> Table {
    let mut t = Table::new(&["r", "phi", "dphi"]);
    let kind = match profile.kind {
        ProfileKind::Constant => "constant",
        ProfileKind::Shooting => "shooting",
    };
    let h = profile.h();
    let exponent = profile.tail_exponent((0.5 * profile.grid.r_max(), profile.grid.r_max())).unwrap_or(f64::NAN);
    t.meta = vec![
        ("p".into(), fmt_f64(profile.p)),
        ("kind".into(), kind.into()),
        ("a".into(), fmt_f64(profile.a)),
        ("c_inf".into(), profile.c_inf.map(fmt_f64).unwrap_or_else(|| "none".into())),
        ("exponent".into(), fmt_f64(exponent)),
        ("h".into(), fmt_f64(h)),
        ("r_max".into(), fmt_f64(profile.grid.r_max())),
    ];
    for (i, &r) in profile.grid.nodes().iter().enumerate() {
        t.rows.push(vec![fmt_f64(r), fmt_f64(profile.phi[i]), fmt_f64(profile.dphi[i])]);
    }
    t
}

pub fn write_profile(path: &Path, profile: &Profile, opts: WriteOptions) -> Result<()> {
    profile_table(profile).write(path, opts)
}

/// Rebuild a profile; jets are recomputed to `jet_order`.
pub fn read_profile(path: &Path, jet_order: usize) -> Result<Profile> {
    let t = Table::read(path)?;
    let p = t.meta_f64("p")?;
    let a = t.meta_f64("a")?;
    let kind = match t.meta("kind") {
        Some("constant") => ProfileKind::Constant,
        Some("shooting") => ProfileKind::Shooting,
        other => return Err(LabError::Format(format!("unknown profile kind {other:?}"))),
    };
    let c_inf = match t.meta("c_inf") {
        Some("none") | None => None,
        Some(v) => Some(parse_f64(v, "c_inf")?),
    };
    let grid = RadialGrid::uniform(t.meta_f64("r_max")?, t.meta_f64("h")?)?;
    let (phi, dphi) = (t.column("phi")?, t.column("dphi")?);
    if phi.len() != grid.len() {
        return Err(LabError::Format(format!("{} samples for a grid of {}", phi.len(), grid.len())));
    }
    Profile::from_samples(p, kind, a, c_inf, grid, phi, dphi, jet_order)
}

// ---- spectrum ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModeCount {
    pub j: i32,
    #[serde(rename = "M")]
    pub m: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumDoc {
    pub format_version: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generated_unix: Option<u64>,
    pub p: f64,
    pub a: f64,
    pub ell0: usize,
    pub eigenvalues: Vec<f64>,
    #[serde(rename = "M_of_j")]
    pub m_of_j: Vec<ModeCount>,
    pub nondegeneracy_verdict: NondegeneracyVerdict,
}

impl SpectrumDoc {
    pub fn new(spectrum: &Spectrum, a: f64, verdict: NondegeneracyVerdict, opts: WriteOptions) -> Self {
        let m_of_j = (1..=spectrum.ell0 as i32)
            .map(|k| -k)
            .rev()
            .filter_map(|j| spectrum.m_of(j).map(|m| ModeCount { j, m }))
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            generated_unix: stamp(opts),
            p: spectrum.p,
            a,
            ell0: spectrum.ell0,
            eigenvalues: spectrum.eigenvalues.clone(),
            m_of_j,
            nondegeneracy_verdict: verdict,
        }
    }
}

pub fn write_spectrum_json(path: &Path, doc: &SpectrumDoc) -> Result<()> {
    write_json(path, doc)
}

pub fn read_spectrum_json(path: &Path) -> Result<SpectrumDoc> {
    read_json(path)
}

/// Eigenfunctions `ψ_j` in the columnar profile layout.
pub fn eigenfunction_table(spectrum: &Spectrum) -> Table {
    let labels: Vec<String> =
        (0..spectrum.eigenfunctions.len()).map(|k| format!("psi_{}", k as i32 - spectrum.ell0 as i32)).collect();
    let mut header = vec!["r".to_string()];
    header.extend(labels);
    let mut t = Table { header, ..Default::default() };
    t.meta.push(("p".into(), fmt_f64(spectrum.p)));
    for (i, &r) in spectrum.grid.nodes().iter().enumerate() {
        let mut row = vec![fmt_f64(r)];
        row.extend(spectrum.eigenfunctions.iter().map(|f| fmt_f64(f.values[i])));
        t.rows.push(row);
    }
    t
}

// ---- corrector ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorrectorDoc {
    pub format_version: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generated_unix: Option<u64>,
    #[serde(flatten)]
    pub meta: CorrectorMeta,
}

impl CorrectorDoc {
    pub fn new(corr: &Corrector, opts: WriteOptions) -> Self {
        Self { format_version: FORMAT_VERSION, generated_unix: stamp(opts), meta: corr.meta() }
    }
}

pub fn write_corrector_json(path: &Path, doc: &CorrectorDoc) -> Result<()> {
    write_json(path, doc)
}

pub fn read_corrector_json(path: &Path) -> Result<CorrectorDoc> {
    read_json(path)
}

/// `V_{i,j}(r)` for `1 ≤ i ≤ n`, `0 ≤ j ≤ n`.
pub fn corrector_table(corr: &Corrector) -> Table {
    let mut header = vec!["r".to_string()];
    let mut cols = Vec::new();
    for i in 1..=corr.n {
        for j in 0..=corr.n {
            header.push(format!("V_{i}_{j}"));
            cols.push(corr.v.get(i, j).map(<[f64]>::to_vec).unwrap_or_default());
        }
    }
    let mut t = Table { header, ..Default::default() };
    t.meta.push(("n".into(), corr.n.to_string()));
    for (k, &r) in corr.r.iter().enumerate() {
        let mut row = vec![fmt_f64(r)];
        row.extend(cols.iter().map(|c| fmt_f64(c.get(k).copied().unwrap_or(0.0))));
        t.rows.push(row);
    }
    t
}

/// Residual-order measurements, one row per `(n, b)`.
pub fn residual_order_table(fits: &[ResidualOrderFit]) -> Table {
    let mut t = Table::new(&["n", "b", "norm", "floor", "slope"]);
    for f in fits {
        for k in 0..f.b.len() {
            t.rows.push(vec![f.n.to_string(), fmt_f64(f.b[k]), fmt_f64(f.norms[k]), fmt_f64(f.floor[k]), fmt_f64(f.slope)]);
        }
    }
    t
}

// ---- run log ----

/// Leading columns of the run log; mode columns follow `bs_residual`.
pub const RUN_HEAD: [&str; 4] = ["s", "lambda", "b", "bs_residual"];
pub const RUN_NORMS: [&str; 7] = ["eps_h2rho", "grad_eps_l2q2rho", "nuK_l2", "nuK_w1", "v_w1q", "energy", "verdict"];
/// Trailing columns beyond the fixed header.
pub const RUN_EXTRA: [&str; 11] = [
    "log_lambda",
    "energy_delta",
    "orth_defect",
    "orth_rel",
    "lambda_rate",
    "lyap_lhs",
    "lyap_rhs",
    "eps_l2rho",
    "eps_h1rho",
    "v_linf",
    "truncation",
];

pub fn run_table(series: &RunSeries) -> Table {
    let mut header: Vec<String> = RUN_HEAD.iter().map(|s| s.to_string()).collect();
    header.extend(series.mode_labels.iter().cloned());
    header.extend(RUN_NORMS.iter().chain(&RUN_EXTRA).map(|s| s.to_string()));
    let mut t = Table { header, ..Default::default() };
    t.meta.push(("c1".into(), fmt_f64(series.c1)));
    for r in &series.records {
        let n = &r.norms;
        let mut row: Vec<String> = [r.s, r.lambda, r.b, r.bs_residual].iter().map(|&x| fmt_f64(x)).collect();
        row.extend(r.a.iter().map(|&x| fmt_f64(x)));
        row.extend([n.eps_h2rho, n.grad_eps_l2q2rho, n.nuk_l2, n.nuk_w1, n.v_w1q, r.energy].iter().map(|&x| fmt_f64(x)));
        row.push(r.verdict.to_string());
        row.extend(
            [
                r.log_lambda,
                r.energy_delta,
                r.orth_defect,
                r.orth_rel,
                r.lambda_rate,
                r.lyap_lhs,
                r.lyap_rhs,
                n.eps_l2rho,
                n.eps_h1rho,
                n.v_linf,
                n.truncation,
            ]
            .iter()
            .map(|&x| fmt_f64(x)),
        );
        t.rows.push(row);
    }
    t
}

pub fn write_run_csv(path: &Path, series: &RunSeries, opts: WriteOptions) -> Result<()> {
    run_table(series).write(path, opts)
}

/// Parse a run log; trailing columns are optional.
pub fn run_from_table(t: &Table) -> Result<RunSeries> {
    let fixed: Vec<&str> = RUN_HEAD.iter().chain(&RUN_NORMS).copied().collect();
    for name in &fixed {
        t.column_index(name)?;
    }
    let first_norm = t.column_index(RUN_NORMS[0])?;
    let mode_labels: Vec<String> = t.header[RUN_HEAD.len()..first_norm].to_vec();
    let col = |name: &str| -> Result<Vec<f64>> { t.column(name) };
    let opt = |name: &str| -> Result<Vec<f64>> {
        if t.header.iter().any(|h| h == name) {
            t.column(name)
        } else {
            Ok(vec![0.0; t.rows.len()])
        }
    };
    let s = col("s")?;
    let lambda = col("lambda")?;
    let b = col("b")?;
    let bsr = col("bs_residual")?;
    let modes: Vec<Vec<f64>> = mode_labels.iter().map(|m| col(m)).collect::<Result<_>>()?;
    let norms: Vec<Vec<f64>> = RUN_NORMS[..6].iter().map(|m| col(m)).collect::<Result<_>>()?;
    let vc = t.column_index("verdict")?;
    let extra: Vec<Vec<f64>> = RUN_EXTRA.iter().map(|m| opt(m)).collect::<Result<_>>()?;
    let has_log = t.header.iter().any(|h| h == "log_lambda");
    let mut records = Vec::with_capacity(t.rows.len());
    for (i, row) in t.rows.iter().enumerate() {
        let verdict = row[vc].trim().parse().map_err(|_| LabError::Format(format!("bad verdict '{}'", row[vc])))?;
        records.push(StepRecord {
            s: s[i],
            lambda: lambda[i],
            log_lambda: if has_log { extra[0][i] } else { lambda[i].ln() },
            b: b[i],
            bs_residual: bsr[i],
            a: modes.iter().map(|m| m[i]).collect(),
            norms: NormTable {
                eps_h2rho: norms[0][i],
                grad_eps_l2q2rho: norms[1][i],
                nuk_l2: norms[2][i],
                nuk_w1: norms[3][i],
                v_w1q: norms[4][i],
                eps_l2rho: extra[7][i],
                eps_h1rho: extra[8][i],
                v_linf: extra[9][i],
                truncation: extra[10][i],
            },
            energy: norms[5][i],
            energy_delta: extra[1][i],
            verdict,
            orth_defect: extra[2][i],
            orth_rel: extra[3][i],
            lambda_rate: extra[4][i],
            lyap_lhs: extra[5][i],
            lyap_rhs: extra[6][i],
        });
    }
    let c1 = t.meta_f64("c1")?;
    Ok(RunSeries { mode_labels, c1, records })
}

pub fn read_run_csv(path: &Path) -> Result<RunSeries> {
    run_from_table(&Table::read(path)?)
}

// ---- reconstruction ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReconstructionDoc {
    pub format_version: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generated_unix: Option<u64>,
    #[serde(rename = "T")]
    pub t_blowup: f64,
    pub c_star: f64,
    pub fit_residual: f64,
    pub window: [f64; 2],
}

impl ReconstructionDoc {
    pub fn new(rec: &PhysicalReconstruction, opts: WriteOptions) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            generated_unix: stamp(opts),
            t_blowup: rec.t_blowup,
            c_star: rec.c_star,
            fit_residual: rec.fit_residual,
            window: [rec.window.0, rec.window.1],
        }
    }
}

pub fn write_reconstruction_json(path: &Path, doc: &ReconstructionDoc) -> Result<()> {
    write_json(path, doc)
}

pub fn read_reconstruction_json(path: &Path) -> Result<ReconstructionDoc> {
    read_json(path)
}

/// `1/√b` against `√|log(T−t)|` for the free-boundary figure.
pub fn free_boundary_table(rec: &PhysicalReconstruction) -> Table {
    let mut t = Table::new(&["s", "t", "T_minus_t", "sqrt_abs_log", "inv_sqrt_b"]);
    t.meta.push(("c_star".into(), fmt_f64(rec.c_star)));
    for i in 0..rec.s.len() {
        t.rows.push(vec![
            fmt_f64(rec.s[i]),
            fmt_f64(rec.t[i]),
            fmt_f64(rec.remaining[i]),
            fmt_f64(rec.remaining[i].ln().abs().sqrt()),
            fmt_f64(rec.inv_sqrt_b[i]),
        ]);
    }
    t
}
