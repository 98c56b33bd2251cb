//! Run configuration: defaults at the standard operating point, overridden
//! first by the config file (flat `key = value` text with bracketed section
//! headers), then by command-line flags. Unknown sections or keys are
//! rejected, as are values violating their owning type's invariants.

use std::collections::BTreeMap;
use std::path::PathBuf;

use glioma_core::adjoint::HessianMode;
use glioma_core::anatomy::TensorMode;
use glioma_core::error::{Error, Result};

use crate::Cli;

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Grid dims; None keeps the case preset's default.
    pub grid: Option<Vec<usize>>,
    pub nt: usize,
    pub rho: f64,
    pub kg: f64,
    pub kw: f64,
    /// Anisotropy scale: the simulation value for forward runs and the
    /// target truth for inversion runs.
    pub kf: f64,
    pub penalty_eps: f64,
    pub mode: Option<TensorMode>,
    pub beta: f64,
    /// Regularization sweep for the L-curve.
    pub betas: Vec<f64>,
    pub hessian: HessianMode,
    pub seed: u64,
    pub cd: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub case: u8,
    pub out: PathBuf,
    pub jobs: usize,
    pub dry_run: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: None,
            nt: 10,
            rho: 2.0,
            kg: 0.02,
            kw: 0.1,
            kf: 0.1,
            penalty_eps: 1e-3,
            mode: None,
            beta: 0.01,
            betas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            hessian: HessianMode::GaussNewton,
            seed: 42,
            cd: None,
            eta: None,
            case: 2,
            out: PathBuf::from("out"),
            jobs: 1,
            dry_run: false,
        }
    }
}

const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("domain", &["grid", "nt"]),
    ("model", &["rho", "kg", "kw", "kf", "penalty_eps", "mode"]),
    ("inversion", &["beta", "betas", "hessian", "seed", "cd", "eta"]),
    ("experiment", &["case"]),
    ("output", &["out", "jobs"]),
];

/// Parse the flat config text into section -> key -> raw value.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_lowercase();
            if !KNOWN_KEYS.iter().any(|(s, _)| *s == name) {
                return Err(Error::InvalidParam(format!(
                    "config line {}: unknown section [{name}]",
                    lineno + 1
                )));
            }
            current = name;
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidParam(format!(
                "config line {}: expected `key = value`",
                lineno + 1
            )));
        };
        if current.is_empty() {
            return Err(Error::InvalidParam(format!(
                "config line {}: key before any [section]",
                lineno + 1
            )));
        }
        let key = key.trim().to_lowercase();
        let allowed = KNOWN_KEYS
            .iter()
            .find(|(s, _)| *s == current)
            .map(|(_, k)| *k)
            .unwrap_or(&[]);
        if !allowed.contains(&key.as_str()) {
            return Err(Error::InvalidParam(format!(
                "config line {}: unknown key `{key}` in section [{current}]",
                lineno + 1
            )));
        }
        sections
            .entry(current.clone())
            .or_default()
            .insert(key, value.trim().to_string());
    }
    Ok(sections)
}

fn parse_f64(field: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::InvalidParam(format!("{field}: cannot parse `{v}` as a number")))
}

fn parse_usize(field: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::InvalidParam(format!("{field}: cannot parse `{v}` as an integer")))
}

pub fn parse_f64_list(field: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| parse_f64(field, s.trim()))
        .collect::<Result<Vec<_>>>()
}

pub fn parse_usize_list(field: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_usize(field, s.trim()))
        .collect::<Result<Vec<_>>>()
}

pub fn parse_mode(v: &str) -> Result<TensorMode> {
    match v.to_lowercase().as_str() {
        "full_fa" => Ok(TensorMode::FullFa),
        "principal" => Ok(TensorMode::Principal),
        other => Err(Error::InvalidParam(format!(
            "mode: `{other}` (expected full_fa or principal)"
        ))),
    }
}

pub fn parse_hessian(v: &str) -> Result<HessianMode> {
    match v.to_lowercase().as_str() {
        "gn" => Ok(HessianMode::GaussNewton),
        "full" => Ok(HessianMode::Full),
        other => Err(Error::InvalidParam(format!(
            "hessian: `{other}` (expected gn or full)"
        ))),
    }
}

impl RunConfig {
    /// Defaults, then config file, then command-line flags.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &cli.config {
            let text = std::fs::read_to_string(path)?;
            let sections = parse_config_text(&text)?;
            cfg.apply_file(&sections)?;
        }
        cfg.apply_flags(cli)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_file(&mut self, s: &BTreeMap<String, BTreeMap<String, String>>) -> Result<()> {
        let get = |sec: &str, key: &str| s.get(sec).and_then(|m| m.get(key));
        if let Some(v) = get("domain", "grid") {
            self.grid = Some(parse_usize_list("grid", v)?);
        }
        if let Some(v) = get("domain", "nt") {
            self.nt = parse_usize("nt", v)?;
        }
        if let Some(v) = get("model", "rho") {
            self.rho = parse_f64("rho", v)?;
        }
        if let Some(v) = get("model", "kg") {
            self.kg = parse_f64("kg", v)?;
        }
        if let Some(v) = get("model", "kw") {
            self.kw = parse_f64("kw", v)?;
        }
        if let Some(v) = get("model", "kf") {
            self.kf = parse_f64("kf", v)?;
        }
        if let Some(v) = get("model", "penalty_eps") {
            self.penalty_eps = parse_f64("penalty_eps", v)?;
        }
        if let Some(v) = get("model", "mode") {
            self.mode = Some(parse_mode(v)?);
        }
        if let Some(v) = get("inversion", "beta") {
            self.beta = parse_f64("beta", v)?;
        }
        if let Some(v) = get("inversion", "betas") {
            self.betas = parse_f64_list("betas", v)?;
        }
        if let Some(v) = get("inversion", "hessian") {
            self.hessian = parse_hessian(v)?;
        }
        if let Some(v) = get("inversion", "seed") {
            self.seed = v
                .parse::<u64>()
                .map_err(|_| Error::InvalidParam(format!("seed: cannot parse `{v}`")))?;
        }
        if let Some(v) = get("inversion", "cd") {
            self.cd = Some(parse_f64_list("cd", v)?);
        }
        if let Some(v) = get("inversion", "eta") {
            self.eta = Some(parse_f64_list("eta", v)?);
        }
        if let Some(v) = get("experiment", "case") {
            self.case = v
                .parse::<u8>()
                .map_err(|_| Error::InvalidParam(format!("case: cannot parse `{v}`")))?;
        }
        if let Some(v) = get("output", "out") {
            self.out = PathBuf::from(v);
        }
        if let Some(v) = get("output", "jobs") {
            self.jobs = parse_usize("jobs", v)?;
        }
        Ok(())
    }

    fn apply_flags(&mut self, cli: &Cli) -> Result<()> {
        if let Some(v) = &cli.grid {
            self.grid = Some(parse_usize_list("grid", v)?);
        }
        if let Some(v) = cli.nt {
            self.nt = v;
        }
        if let Some(v) = cli.rho {
            self.rho = v;
        }
        if let Some(v) = cli.kf {
            self.kf = v;
        }
        if let Some(v) = &cli.cd {
            self.cd = Some(parse_f64_list("cd", v)?);
        }
        if let Some(v) = &cli.eta {
            self.eta = Some(parse_f64_list("eta", v)?);
        }
        if let Some(v) = cli.beta {
            self.beta = v;
        }
        if let Some(v) = cli.seed {
            self.seed = v;
        }
        if let Some(v) = cli.case {
            self.case = v;
        }
        if let Some(v) = &cli.mode {
            self.mode = Some(parse_mode(v)?);
        }
        if let Some(v) = &cli.hessian {
            self.hessian = parse_hessian(v)?;
        }
        if let Some(v) = &cli.out {
            self.out = v.clone();
        }
        if let Some(v) = cli.jobs {
            self.jobs = v;
        }
        self.dry_run = cli.dry_run;
        Ok(())
    }

    /// Field-level invariants, checked before any compute.
    pub fn validate(&self) -> Result<()> {
        if let Some(grid) = &self.grid {
            if !(2..=3).contains(&grid.len()) {
                return Err(Error::InvalidParam(format!(
                    "grid: {} axes (expected 2 or 3)",
                    grid.len()
                )));
            }
            for &n in grid {
                if n < 4 || n % 2 != 0 {
                    return Err(Error::InvalidParam(format!(
                        "grid: axis size {n} must be even and >= 4"
                    )));
                }
            }
        }
        if self.nt < 1 {
            return Err(Error::InvalidParam("nt: must be >= 1".into()));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::InvalidParam(format!("rho: {} must be >= 0", self.rho)));
        }
        if !(self.kg > 0.0) || self.kw < self.kg {
            return Err(Error::InvalidParam(format!(
                "kg/kw: need kw >= kg > 0, got kg={}, kw={}",
                self.kg, self.kw
            )));
        }
        if self.kf < 0.0 {
            return Err(Error::InvalidParam(format!("kf: {} must be >= 0", self.kf)));
        }
        if !(self.penalty_eps > 0.0 && self.penalty_eps <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "penalty_eps: {} must be in (0, 1]",
                self.penalty_eps
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParam(format!("beta: {} must be > 0", self.beta)));
        }
        if !(1..=4).contains(&self.case) {
            return Err(Error::InvalidParam(format!("case: {} must be 1..=4", self.case)));
        }
        if let Some(cd) = &self.cd {
            if cd.iter().any(|&v| !(0.0..1.0).contains(&v)) {
                return Err(Error::InvalidParam("cd: thresholds must be in [0, 1)".into()));
            }
        }
        if let Some(eta) = &self.eta {
            if eta.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidParam("eta: noise levels must be >= 0".into()));
            }
        }
        if self.jobs < 1 {
            return Err(Error::InvalidParam("jobs: must be >= 1".into()));
        }
        Ok(())
    }

    /// Resolved parameter listing for --dry-run.
    pub fn print_resolved(&self) {
        println!("[domain]");
        match &self.grid {
            Some(g) => println!(
                "grid = {}",
                g.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
            ),
            None => println!("grid = (case preset default)"),
        }
        println!("nt = {}", self.nt);
        println!("[model]");
        println!("rho = {}", self.rho);
        println!("kg = {}", self.kg);
        println!("kw = {}", self.kw);
        println!("kf = {}", self.kf);
        println!("penalty_eps = {}", self.penalty_eps);
        println!(
            "mode = {}",
            match self.mode {
                Some(TensorMode::FullFa) => "full_fa",
                Some(TensorMode::Principal) => "principal",
                None => "(case preset default)",
            }
        );
        println!("[inversion]");
        println!("beta = {}", self.beta);
        println!(
            "betas = {}",
            self.betas.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",")
        );
        println!(
            "hessian = {}",
            match self.hessian {
                HessianMode::GaussNewton => "gn",
                HessianMode::Full => "full",
            }
        );
        println!("seed = {}", self.seed);
        match &self.cd {
            Some(v) => println!(
                "cd = {}",
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            ),
            None => println!("cd = (case preset default)"),
        }
        match &self.eta {
            Some(v) => println!(
                "eta = {}",
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            ),
            None => println!("eta = (case preset default)"),
        }
        println!("[experiment]");
        println!("case = {}", self.case);
        println!("[output]");
        println!("out = {}", self.out.display());
        println!("jobs = {}", self.jobs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let ok = "# comment\n[domain]\ngrid = 32,32\nnt = 5\n[model]\nrho = 1.5\n";
        let s = parse_config_text(ok).unwrap();
        assert_eq!(s["domain"]["grid"], "32,32");
        assert_eq!(s["model"]["rho"], "1.5");
        assert!(parse_config_text("[domain]\nbogus = 1\n").is_err());
        assert!(parse_config_text("[nosuch]\ngrid = 1\n").is_err());
        assert!(parse_config_text("grid = 1\n").is_err());
        assert!(parse_config_text("[domain]\nnot a kv line\n").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = RunConfig {
            rho: -1.0,
            ..RunConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("rho"), "{err}");
        cfg.rho = 2.0;
        cfg.case = 7;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("case"), "{err}");
    }
}
