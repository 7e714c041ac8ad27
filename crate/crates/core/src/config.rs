//! Plain-text `key = value` configuration.
//!
//! Keys before the first `[section]` header are global. Every section maps
//! onto one parameter struct; a key that struct does not have is rejected
//! with its line number. `#` starts a comment. `none` clears an optional key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corrector::CorrectorParams;
use crate::elliptic_inverter::InverterParams;
use crate::error::{LabError, Result};
use crate::profile_solver::ProfileParams;
use crate::simulator::SimConfig;
use crate::spectral::SpectralParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileChoice {
    Kappa,
    Shooting,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Global {
    pub p: f64,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Profile used downstream of `profile`.
    pub profile_kind: ProfileChoice,
    /// Which decaying profile (sorted by axis value) when several are found.
    pub profile_index: usize,
    /// Write `generated_unix` stamps into output files.
    pub timestamp: bool,
}

impl Default for Global {
    fn default() -> Self {
        Self {
            p: 7.0,
            out_dir: PathBuf::from("out"),
            seed: 0,
            profile_kind: ProfileChoice::Shooting,
            profile_index: 0,
            timestamp: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Config {
    pub global: Global,
    pub profile: ProfileParams,
    pub spectrum: SpectralParams,
    pub inverter: InverterParams,
    pub corrector: CorrectorParams,
    pub simulate: SimConfig,
}

const SECTIONS: [&str; 6] = ["global", "profile", "spectrum", "inverter", "corrector", "simulate"];

/// Keys owned by the global section and never set per section.
const SHARED: [&str; 2] = ["p", "seed"];

fn scalar(raw: &str) -> Value {
    let v = raw.trim();
    if v == "none" {
        return Value::Null;
    }
    if let Ok(b) = v.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(i) = v.parse::<u64>() {
        return Value::from(i);
    }
    if let Ok(i) = v.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(x) = v.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(x) {
            return Value::Number(n);
        }
    }
    Value::String(v.trim_matches('"').to_string())
}

/// Apply `(line, key, value)` assignments to a default struct one at a time,
/// so a type error is reported on the line that caused it.
fn apply<T>(section: &str, base: &T, entries: &[(usize, String, String)]) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut map: Map<String, Value> = match serde_json::to_value(base)? {
        Value::Object(m) => m,
        _ => unreachable!("parameter structs serialize to objects"),
    };
    for (line, key, raw) in entries {
        let shared = section != "global" && SHARED.contains(&key.as_str());
        if shared || !map.contains_key(key) {
            let hint = if shared { " (set it in the global section)" } else { "" };
            return Err(LabError::Config { line: *line, msg: format!("unknown key '{key}' in [{section}]{hint}") });
        }
        let old = map.insert(key.clone(), scalar(raw));
        if let Err(e) = serde_json::from_value::<T>(Value::Object(map.clone())) {
            map.insert(key.clone(), old.unwrap_or(Value::Null));
            return Err(LabError::Config { line: *line, msg: format!("bad value for '{key}': {e}") });
        }
    }
    Ok(serde_json::from_value(Value::Object(map))?)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Vec<(usize, String, String)>> = vec![Vec::new(); SECTIONS.len()];
        let mut current = 0;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| LabError::Config { line, msg: format!("malformed section header '{body}'") })?
                    .trim();
                current = SECTIONS
                    .iter()
                    .position(|s| *s == name)
                    .ok_or_else(|| LabError::Config { line, msg: format!("unknown section [{name}]") })?;
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| LabError::Config { line, msg: format!("expected 'key = value', got '{body}'") })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(LabError::Config { line, msg: "empty key".into() });
            }
            if let Some((prev, _, _)) = entries[current].iter().find(|(_, key, _)| key == k) {
                return Err(LabError::Config { line, msg: format!("'{k}' already set on line {prev}") });
            }
            entries[current].push((line, k.to_string(), v.trim().to_string()));
        }
        let d = Self::default();
        let mut cfg = Self {
            global: apply("global", &d.global, &entries[0])?,
            profile: apply("profile", &d.profile, &entries[1])?,
            spectrum: apply("spectrum", &d.spectrum, &entries[2])?,
            inverter: apply("inverter", &d.inverter, &entries[3])?,
            corrector: apply("corrector", &d.corrector, &entries[4])?,
            simulate: apply("simulate", &d.simulate, &entries[5])?,
        };
        cfg.propagate();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Copy the shared global keys into every section.
    pub fn propagate(&mut self) {
        self.profile.p = self.global.p;
        self.simulate.p = self.global.p;
        self.simulate.seed = self.global.seed;
    }

    /// Every key with its default, in the file syntax.
    pub fn documented_defaults() -> Result<String> {
        let d = Self::default();
        let mut out = String::from("# blowuplab configuration; every key below shows its default.\n");
        let sections: [(&str, Value); 6] = [
            ("global", serde_json::to_value(&d.global)?),
            ("profile", serde_json::to_value(&d.profile)?),
            ("spectrum", serde_json::to_value(&d.spectrum)?),
            ("inverter", serde_json::to_value(&d.inverter)?),
            ("corrector", serde_json::to_value(&d.corrector)?),
            ("simulate", serde_json::to_value(&d.simulate)?),
        ];
        for (name, v) in sections {
            if name != "global" {
                out.push_str(&format!("\n[{name}]\n"));
            }
            if let Value::Object(m) = v {
                for (k, v) in m {
                    if name != "global" && SHARED.contains(&k.as_str()) {
                        continue;
                    }
                    let shown = match v {
                        Value::Null => "none".to_string(),
                        Value::String(s) => s,
                        other => other.to_string(),
                    };
                    out.push_str(&format!("{k} = {shown}\n"));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c.simulate, SimConfig::default());
        assert_eq!(c.global.p, 7.0);
    }

    #[test]
    fn sections_and_comments() {
        let c = Config::parse("p = 8 # exponent\nseed=3\n[simulate]\nnr = 32\nb0 = 1e-3\n").unwrap();
        assert_eq!(c.simulate.nr, 32);
        assert_eq!(c.simulate.b0, Some(1e-3));
        assert_eq!(c.simulate.p, 8.0);
        assert_eq!(c.profile.p, 8.0);
        assert_eq!(c.simulate.seed, 3);
    }

    #[test]
    fn unknown_key_reports_line() {
        match Config::parse("p = 7\n\n[simulate]\nbogus = 1\n") {
            Err(LabError::Config { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shared_key_in_section_rejected() {
        assert!(matches!(Config::parse("[profile]\np = 9\n"), Err(LabError::Config { line: 2, .. })));
    }

    #[test]
    fn type_error_reports_line() {
        assert!(matches!(Config::parse("[simulate]\nnr = 1.5\n"), Err(LabError::Config { line: 2, .. })));
        assert!(matches!(Config::parse("[nowhere]\n"), Err(LabError::Config { line: 1, .. })));
        assert!(matches!(Config::parse("garbage\n"), Err(LabError::Config { line: 1, .. })));
    }

    #[test]
    fn documented_defaults_parse_back() {
        let text = Config::documented_defaults().unwrap();
        let c = Config::parse(&text).unwrap();
        assert_eq!(c.simulate, SimConfig::default());
        assert_eq!(c.global.out_dir, PathBuf::from("out"));
    }
}
