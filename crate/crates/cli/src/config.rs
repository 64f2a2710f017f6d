//! Line-oriented `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! [model]
//! potential = lj c=0.04
//! dim = 1
//! side = 10
//! boundary = free
//! z = 0.5
//! ```
//!
//! Sections are `[model]` (required), `[sampler]`, `[dynamics]`, `[verify]`
//! and `[output]`. Everything after `#` on a line is ignored. Omitted keys
//! take the defaults of [`ExperimentConfig::default`].

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use tagdyn_core::calculus::SignConvention;
use tagdyn_core::dynamics::System;
use tagdyn_core::geometry::BoundaryMode;
use tagdyn_core::gibbs::Thinning;
use tagdyn_core::potentials::PairPotential;

/// One problem found while parsing, with its 1-based line number.
///
/// Line 0 refers to the file as a whole (for example a missing section).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "line {}: {}: {}", self.line, k, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub potential: PairPotential,
    pub dim: usize,
    pub side: f64,
    pub boundary: BoundaryMode,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub p_move: f64,
    pub displacement: f64,
    pub burn_in: usize,
    pub thinning: Thinning,
    pub count: usize,
    pub chains: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub system: System,
    pub dt: f64,
    pub steps: usize,
    pub stride: usize,
    pub rejection_radius: Option<f64>,
    /// Initial tagged position for the coupled system; the origin if absent.
    pub xi: Option<Vec<f64>>,
    pub seed: u64,
}

/// Which sign to use for the single-particle term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignChoice {
    /// Decide per seed with `resolve_sign_conventions`.
    Auto,
    Fixed(SignConvention),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Identity {
    Ibp,
    IbpTranslation,
    Dirichlet(System),
    Symmetry(System),
    Invariance(System),
    Martingale(System),
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Identity::Ibp => f.write_str("ibp"),
            Identity::IbpTranslation => f.write_str("ibp_translation"),
            Identity::Dirichlet(s) => write!(f, "dirichlet_{s}"),
            Identity::Symmetry(s) => write!(f, "symmetry_{s}"),
            Identity::Invariance(s) => write!(f, "invariance_{s}"),
            Identity::Martingale(s) => write!(f, "martingale_{s}"),
        }
    }
}

impl FromStr for Identity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ibp" => return Ok(Identity::Ibp),
            "ibp_translation" => return Ok(Identity::IbpTranslation),
            _ => {}
        }
        let (kind, sys) = s.rsplit_once('_').ok_or_else(|| format!("unknown identity '{s}'"))?;
        let system: System = sys.parse().map_err(|_| format!("unknown system in identity '{s}'"))?;
        let id = match kind {
            "dirichlet" => Identity::Dirichlet(system),
            "symmetry" => Identity::Symmetry(system),
            "invariance" => Identity::Invariance(system),
            "martingale" => Identity::Martingale(system),
            _ => return Err(format!("unknown identity '{s}'")),
        };
        match id {
            Identity::Dirichlet(System::Gsd) | Identity::Symmetry(System::Gsd) => {
                Err(format!("'{s}': forms are defined for gsdad, env and coup"))
            }
            _ => Ok(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub identities: Vec<Identity>,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub paths: usize,
    /// Final time of the invariance tests.
    pub time: f64,
    pub checkpoints: Vec<f64>,
    pub sign: SignChoice,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub dynamics: DynamicsConfig,
    pub verify: VerifyConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                potential: PairPotential::lennard_jones(0.04).expect("valid default"),
                dim: 1,
                side: 10.0,
                boundary: BoundaryMode::Free,
                z: 0.5,
            },
            sampler: SamplerConfig {
                p_move: 0.3,
                displacement: 0.5,
                burn_in: 5000,
                thinning: Thinning::Auto,
                count: 1000,
                chains: 1,
                seed: 1,
            },
            dynamics: DynamicsConfig {
                system: System::Gsdad,
                dt: 1e-4,
                steps: 1000,
                stride: 10,
                rejection_radius: None,
                xi: None,
                seed: 1,
            },
            verify: VerifyConfig {
                identities: vec![
                    Identity::Ibp,
                    Identity::IbpTranslation,
                    Identity::Dirichlet(System::Gsdad),
                    Identity::Dirichlet(System::Env),
                    Identity::Dirichlet(System::Coup),
                ],
                samples: 2000,
                seeds: vec![1],
                paths: 200,
                time: 0.01,
                checkpoints: vec![0.01],
                sign: SignChoice::Auto,
            },
            output: OutputConfig { dir: None, prefix: "tagdyn".into() },
        }
    }
}

const SECTIONS: [&str; 5] = ["model", "sampler", "dynamics", "verify", "output"];

struct Entry {
    line: usize,
    key: String,
    value: String,
}

struct Parser {
    errors: Vec<ConfigError>,
}

impl Parser {
    fn err(&mut self, line: usize, key: Option<&str>, message: impl Into<String>) {
        self.errors.push(ConfigError { line, key: key.map(str::to_string), message: message.into() });
    }

    fn parse<T: FromStr>(&mut self, e: &Entry, what: &str) -> Option<T> {
        match e.value.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.err(e.line, Some(&e.key), format!("expected {what}, got '{}'", e.value));
                None
            }
        }
    }

    fn real(&mut self, e: &Entry, ok: impl Fn(f64) -> bool, range: &str) -> Option<f64> {
        let v: f64 = self.parse(e, "a number")?;
        if v.is_finite() && ok(v) {
            Some(v)
        } else {
            self.err(e.line, Some(&e.key), format!("{v} is out of range ({range})"));
            None
        }
    }

    fn int(&mut self, e: &Entry, min: usize, max: usize) -> Option<usize> {
        let v: usize = self.parse(e, "a nonnegative integer")?;
        if (min..=max).contains(&v) {
            Some(v)
        } else {
            self.err(e.line, Some(&e.key), format!("{v} is out of range ({min}..={max})"));
            None
        }
    }

    fn list<T: FromStr>(&mut self, e: &Entry, what: &str) -> Option<Vec<T>> {
        let mut out = Vec::new();
        for item in e.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.parse() {
                Ok(v) => out.push(v),
                Err(_) => {
                    self.err(e.line, Some(&e.key), format!("expected a list of {what}, bad item '{item}'"));
                    return None;
                }
            }
        }
        if out.is_empty() {
            self.err(e.line, Some(&e.key), "list must not be empty");
            return None;
        }
        Some(out)
    }

    fn unknown(&mut self, e: &Entry, section: &str) {
        self.err(e.line, Some(&e.key), format!("unknown key in [{section}]"));
    }
}

/// Parses and validates a configuration, returning every error found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let mut p = Parser { errors: Vec::new() };
    let mut sections: BTreeMap<&str, Vec<Entry>> = BTreeMap::new();
    let mut current: Option<&str> = None;
    let mut seen_header = false;
    let mut key_lines: BTreeMap<(String, String), usize> = BTreeMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            seen_header = true;
            match SECTIONS.iter().find(|s| **s == name) {
                Some(s) if sections.contains_key(s) => {
                    p.err(line, None, format!("section [{name}] appears twice"));
                    current = Some(s);
                }
                Some(s) => {
                    sections.insert(s, Vec::new());
                    current = Some(s);
                }
                None => {
                    p.err(line, None, format!("unknown section [{name}]"));
                    current = None;
                }
            }
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            p.err(line, None, format!("expected 'key = value', got '{body}'"));
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        let Some(sec) = current else {
            if !seen_header {
                p.err(line, Some(k), "key outside of any section");
            }
            continue;
        };
        if let Some(first) = key_lines.insert((sec.to_string(), k.to_string()), line) {
            p.err(line, Some(k), format!("duplicate key (first set on line {first})"));
            continue;
        }
        sections.get_mut(sec).expect("section registered").push(Entry { line, key: k.into(), value: v.into() });
    }
    if !sections.contains_key("model") {
        p.err(0, None, "missing section [model]");
    }

    let mut c = ExperimentConfig::default();
    let line_of = |sec: &str, key: &str| key_lines.get(&(sec.to_string(), key.to_string())).copied().unwrap_or(0);

    for e in sections.get("model").into_iter().flatten() {
        let m = &mut c.model;
        match e.key.as_str() {
            "potential" => match PairPotential::from_descriptor(&e.value) {
                Ok(pot) => m.potential = pot,
                Err(err) => p.err(e.line, Some(&e.key), err.to_string()),
            },
            "dim" => m.dim = p.int(e, 1, 3).unwrap_or(m.dim),
            "side" => m.side = p.real(e, |v| v > 0.0, "> 0").unwrap_or(m.side),
            "boundary" => match e.value.as_str() {
                "free" => m.boundary = BoundaryMode::Free,
                "periodic" => m.boundary = BoundaryMode::Periodic,
                other => p.err(e.line, Some(&e.key), format!("expected free or periodic, got '{other}'")),
            },
            "z" => m.z = p.real(e, |v| v > 0.0, "> 0").unwrap_or(m.z),
            _ => p.unknown(e, "model"),
        }
    }
    for e in sections.get("sampler").into_iter().flatten() {
        let s = &mut c.sampler;
        match e.key.as_str() {
            "p_move" => s.p_move = p.real(e, |v| (0.0..1.0).contains(&v), "0 <= p < 1").unwrap_or(s.p_move),
            "displacement" => s.displacement = p.real(e, |v| v > 0.0, "> 0").unwrap_or(s.displacement),
            "burn_in" => s.burn_in = p.int(e, 0, usize::MAX).unwrap_or(s.burn_in),
            "thinning" => {
                if e.value == "auto" {
                    s.thinning = Thinning::Auto;
                } else if let Some(k) = p.int(e, 1, usize::MAX) {
                    s.thinning = Thinning::Fixed(k);
                }
            }
            "count" => s.count = p.int(e, 1, usize::MAX).unwrap_or(s.count),
            "chains" => s.chains = p.int(e, 1, 256).unwrap_or(s.chains),
            "seed" => s.seed = p.parse(e, "an unsigned integer").unwrap_or(s.seed),
            _ => p.unknown(e, "sampler"),
        }
    }
    for e in sections.get("dynamics").into_iter().flatten() {
        let d = &mut c.dynamics;
        match e.key.as_str() {
            "system" => d.system = p.parse(e, "gsd, gsdad, env or coup").unwrap_or(d.system),
            "dt" => d.dt = p.real(e, |v| v >= 0.0, ">= 0").unwrap_or(d.dt),
            "steps" => d.steps = p.int(e, 0, usize::MAX).unwrap_or(d.steps),
            "stride" => d.stride = p.int(e, 1, usize::MAX).unwrap_or(d.stride),
            "rejection_radius" => {
                if let Some(r) = p.real(e, |v| v >= 0.0, ">= 0") {
                    d.rejection_radius = Some(r);
                }
            }
            "xi" => {
                if let Some(v) = p.list::<f64>(e, "numbers") {
                    if v.iter().all(|x| x.is_finite()) {
                        d.xi = Some(v);
                    } else {
                        p.err(e.line, Some(&e.key), "coordinates must be finite");
                    }
                }
            }
            "seed" => d.seed = p.parse(e, "an unsigned integer").unwrap_or(d.seed),
            _ => p.unknown(e, "dynamics"),
        }
    }
    for e in sections.get("verify").into_iter().flatten() {
        let v = &mut c.verify;
        match e.key.as_str() {
            "identities" => {
                let mut ids = Vec::new();
                let mut ok = true;
                for item in e.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match item.parse::<Identity>() {
                        Ok(id) => ids.push(id),
                        Err(msg) => {
                            p.err(e.line, Some(&e.key), msg);
                            ok = false;
                        }
                    }
                }
                if ids.is_empty() && ok {
                    p.err(e.line, Some(&e.key), "list must not be empty");
                } else if ok {
                    v.identities = ids;
                }
            }
            "samples" => v.samples = p.int(e, tagdyn_core::verify::MIN_SAMPLES, usize::MAX).unwrap_or(v.samples),
            "seeds" => v.seeds = p.list(e, "unsigned integers").unwrap_or_else(|| v.seeds.clone()),
            "paths" => v.paths = p.int(e, 1, usize::MAX).unwrap_or(v.paths),
            "time" => v.time = p.real(e, |t| t >= 0.0, ">= 0").unwrap_or(v.time),
            "checkpoints" => {
                if let Some(ts) = p.list::<f64>(e, "numbers") {
                    if ts.iter().all(|t| t.is_finite() && *t >= 0.0) {
                        v.checkpoints = ts;
                    } else {
                        p.err(e.line, Some(&e.key), "checkpoints must be finite and >= 0");
                    }
                }
            }
            "sign" => match e.value.as_str() {
                "auto" => v.sign = SignChoice::Auto,
                "+1" | "plus" => v.sign = SignChoice::Fixed(SignConvention::Plus),
                "-1" | "minus" => v.sign = SignChoice::Fixed(SignConvention::Minus),
                other => p.err(e.line, Some(&e.key), format!("expected auto, +1 or -1, got '{other}'")),
            },
            _ => p.unknown(e, "verify"),
        }
    }
    for e in sections.get("output").into_iter().flatten() {
        let o = &mut c.output;
        match e.key.as_str() {
            "dir" => o.dir = Some(PathBuf::from(&e.value)),
            "prefix" => {
                if !e.value.is_empty() && e.value.chars().all(|ch| ch.is_ascii_alphanumeric() || "-_.".contains(ch)) {
                    o.prefix = e.value.clone();
                } else {
                    p.err(e.line, Some(&e.key), "prefix must be nonempty and use only [A-Za-z0-9._-]");
                }
            }
            _ => p.unknown(e, "output"),
        }
    }

    if let Some(xi) = &c.dynamics.xi {
        if xi.len() != c.model.dim {
            p.err(line_of("dynamics", "xi"), Some("xi"), format!("expected {} coordinates, got {}", c.model.dim, xi.len()));
        }
    }
    if let Some(r) = c.dynamics.rejection_radius {
        let r_distinct = 1e-9 * c.model.side;
        if r < r_distinct {
            p.err(line_of("dynamics", "rejection_radius"), Some("rejection_radius"), format!("must be at least {r_distinct}"));
        }
    }
    if p.errors.is_empty() {
        Ok(c)
    } else {
        p.errors.sort_by_key(|e| e.line);
        Err(p.errors)
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Canonical text form; `parse_config(&emit(c)) == Ok(c)`.
pub fn emit(c: &ExperimentConfig) -> String {
    let mut s = String::new();
    let m = &c.model;
    let boundary = match m.boundary {
        BoundaryMode::Free => "free",
        BoundaryMode::Periodic => "periodic",
    };
    let _ = writeln!(s, "[model]\npotential = {}\ndim = {}\nside = {}\nboundary = {boundary}\nz = {}", m.potential, m.dim, m.side, m.z);
    let sm = &c.sampler;
    let thinning = match sm.thinning {
        Thinning::Auto => "auto".to_string(),
        Thinning::Fixed(k) => k.to_string(),
    };
    let _ = writeln!(
        s,
        "\n[sampler]\np_move = {}\ndisplacement = {}\nburn_in = {}\nthinning = {thinning}\ncount = {}\nchains = {}\nseed = {}",
        sm.p_move, sm.displacement, sm.burn_in, sm.count, sm.chains, sm.seed
    );
    let d = &c.dynamics;
    let _ = writeln!(s, "\n[dynamics]\nsystem = {}\ndt = {}\nsteps = {}\nstride = {}", d.system, d.dt, d.steps, d.stride);
    if let Some(r) = d.rejection_radius {
        let _ = writeln!(s, "rejection_radius = {r}");
    }
    if let Some(xi) = &d.xi {
        let _ = writeln!(s, "xi = {}", join(xi));
    }
    let _ = writeln!(s, "seed = {}", d.seed);
    let v = &c.verify;
    let sign = match v.sign {
        SignChoice::Auto => "auto",
        SignChoice::Fixed(SignConvention::Plus) => "+1",
        SignChoice::Fixed(SignConvention::Minus) => "-1",
    };
    let _ = writeln!(
        s,
        "\n[verify]\nidentities = {}\nsamples = {}\nseeds = {}\npaths = {}\ntime = {}\ncheckpoints = {}\nsign = {sign}",
        join(&v.identities),
        v.samples,
        join(&v.seeds),
        v.paths,
        v.time,
        join(&v.checkpoints)
    );
    let _ = writeln!(s, "\n[output]");
    if let Some(dir) = &c.output.dir {
        let _ = writeln!(s, "dir = {}", dir.display());
    }
    let _ = writeln!(s, "prefix = {}", c.output.prefix);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("[model]\n").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn negative_activity_names_the_key() {
        let errs = parse_config("[model]\nz = -1\n").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].line, 2);
        assert_eq!(errs[0].key.as_deref(), Some("z"));
        assert!(errs[0].to_string().contains("z"));
    }

    #[test]
    fn all_errors_are_reported() {
        let text = "[sampler]\ncount = 0\nbogus = 1\n[nope]\n[dynamics]\nsystem = walk\ndt = -1\n";
        let errs = parse_config(text).unwrap_err();
        let lines: Vec<usize> = errs.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![0, 2, 3, 4, 6, 7]);
        assert!(errs[0].message.contains("[model]"));
    }

    #[test]
    fn duplicates_and_malformed_lines() {
        let errs = parse_config("[model]\nz = 1\nz = 2\nnot a pair\n").unwrap_err();
        assert_eq!(errs.len(), 2);
        assert!(errs[0].message.contains("line 2"));
    }

    #[test]
    fn cross_field_checks() {
        let errs = parse_config("[model]\ndim = 2\n[dynamics]\nxi = 1\n").unwrap_err();
        assert_eq!(errs[0].line, 4);
        let errs = parse_config("[model]\n[dynamics]\nrejection_radius = 0\n").unwrap_err();
        assert_eq!(errs[0].key.as_deref(), Some("rejection_radius"));
    }

    #[test]
    fn identities_parse_and_print() {
        for s in ["ibp", "ibp_translation", "dirichlet_coup", "symmetry_env", "invariance_gsd", "martingale_coup"] {
            assert_eq!(s.parse::<Identity>().unwrap().to_string(), s);
        }
        assert!("dirichlet_gsd".parse::<Identity>().is_err());
        assert!("energy_env".parse::<Identity>().is_err());
    }

    #[test]
    fn emit_round_trips() {
        let text = "\
# desk run
[model]
potential = lj c=0.04 cutoff=2.5
dim = 2
side = 8
boundary = periodic   # torus
z = 0.25
[sampler]
thinning = 7
seed = 99
[dynamics]
system = coup
xi = 0.5, -0.25
rejection_radius = 0.1
[verify]
identities = ibp, martingale_coup
seeds = 1, 2, 3
checkpoints = 0, 0.01, 0.05
sign = -1
[output]
dir = runs/a
prefix = desk
";
        let c = parse_config(text).unwrap();
        assert_eq!(c.dynamics.xi, Some(vec![0.5, -0.25]));
        assert_eq!(c.verify.seeds, vec![1, 2, 3]);
        let once = emit(&c);
        assert_eq!(parse_config(&once).unwrap(), c);
        assert_eq!(emit(&parse_config(&once).unwrap()), once);
        let d = emit(&ExperimentConfig::default());
        assert_eq!(emit(&parse_config(&d).unwrap()), d);
    }
}
