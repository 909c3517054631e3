//! Flat `key = value` run configuration with `[section]` headers.
//!
//! ```text
//! [scenario]
//! name = tc1
//!
//! [geometry]
//! nh = 16
//! nt = 16
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use mftc_core::admm::SolverConfig;
use mftc_core::cases::BUILT_IN;
use mftc_core::geometry::{GeometryKind, Rect};
use mftc_core::krylov::KrylovConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("[{section}] {message}")]
    Section { section: &'static str, message: String },
    #[error("[{section}] {key}: {message}")]
    Field {
        section: &'static str,
        key: &'static str,
        message: String,
    },
}

fn field(section: &'static str, key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        section,
        key,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    BuiltIn(String),
    /// gridded initial density and terminal cost, one CSV matrix each
    Files { m0: PathBuf, ut: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSection {
    pub source: ScenarioSource,
    /// rescale the initial density to unit mass
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySection {
    pub kind: Option<GeometryKind>,
    pub nh: usize,
    pub nt: usize,
    pub horizon: Option<f64>,
    pub obstacles: Option<Vec<Rect>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSection {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub ell_coeff: Option<f64>,
    pub ell_exponent: Option<f64>,
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// times at which density and potential are written
    pub snapshots: Vec<f64>,
    /// write wall-clock seconds into the history (breaks byte-identical output)
    pub timings: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    pub geometry: GeometrySection,
    pub cost: CostSection,
    pub solver: SolverConfig,
    /// worker threads, 0 for the rayon default
    pub threads: usize,
    pub output: OutputSection,
}

impl RunConfig {
    /// Configuration of a built-in scenario on an `nh` x `nh` x `nt` grid,
    /// everything else at its default.
    pub fn built_in(name: &str, nh: usize, nt: usize) -> Self {
        RunConfig {
            scenario: ScenarioSection {
                source: ScenarioSource::BuiltIn(name.into()),
                normalize: true,
            },
            geometry: GeometrySection {
                kind: None,
                nh,
                nt,
                horizon: None,
                obstacles: None,
            },
            cost: CostSection {
                alpha: None,
                beta: None,
                ell_coeff: None,
                ell_exponent: None,
                nu: None,
            },
            solver: SolverConfig::default(),
            threads: 0,
            output: OutputSection {
                dir: None,
                snapshots: default_snapshots(),
                timings: false,
            },
        }
    }
}

pub fn default_snapshots() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

const SECTIONS: [&str; 5] = ["scenario", "geometry", "cost", "solver", "output"];

#[derive(Default)]
struct Raw {
    /// (section, key) -> (value, line)
    entries: Vec<(String, String, String, usize)>,
}

impl Raw {
    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        let pos = self.entries.iter().position(|(s, k, _, _)| s == section && k == key)?;
        let (_, _, v, line) = self.entries.remove(pos);
        Some((v, line))
    }
}

fn lex(text: &str) -> Result<Raw, ConfigError> {
    let mut raw = Raw::default();
    let mut section: Option<String> = None;
    let mut seen = HashSet::new();
    for (idx, full) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| ConfigError::Line { line, message };
        let content = full.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("malformed section header '{content}'")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(err(format!(
                    "unknown section [{name}] (expected one of {})",
                    SECTIONS.join(", ")
                )));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected 'key = value', found '{content}'")))?;
        let sec = section
            .clone()
            .ok_or_else(|| err("key outside of any section".to_string()))?;
        let key = key.trim().to_string();
        if !seen.insert((sec.clone(), key.clone())) {
            return Err(err(format!("duplicate key '{key}' in [{sec}]")));
        }
        raw.entries.push((sec, key, value.trim().to_string(), line));
    }
    Ok(raw)
}

fn line_err(line: usize, key: &str, message: impl std::fmt::Display) -> ConfigError {
    ConfigError::Line {
        line,
        message: format!("{key}: {message}"),
    }
}

fn parse_f64(section: &str, key: &str, raw: &mut Raw) -> Result<Option<f64>, ConfigError> {
    let Some((v, line)) = raw.take(section, key) else {
        return Ok(None);
    };
    let x: f64 = v.parse().map_err(|_| line_err(line, key, format!("'{v}' is not a number")))?;
    if !x.is_finite() {
        return Err(line_err(line, key, "must be finite"));
    }
    Ok(Some(x))
}

fn parse_usize(section: &str, key: &str, raw: &mut Raw) -> Result<Option<usize>, ConfigError> {
    let Some((v, line)) = raw.take(section, key) else {
        return Ok(None);
    };
    v.parse()
        .map(Some)
        .map_err(|_| line_err(line, key, format!("'{v}' is not a nonnegative integer")))
}

fn parse_bool(section: &str, key: &str, raw: &mut Raw) -> Result<Option<bool>, ConfigError> {
    let Some((v, line)) = raw.take(section, key) else {
        return Ok(None);
    };
    match v.as_str() {
        "true" => Ok(Some(true)),
        "false" => Ok(Some(false)),
        _ => Err(line_err(line, key, format!("'{v}' is not true or false"))),
    }
}

fn parse_obstacles(v: &str, line: usize) -> Result<Vec<Rect>, ConfigError> {
    let mut out = Vec::new();
    for part in v.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let nums: Vec<f64> = part
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| line_err(line, "obstacles", format!("'{part}' is not a list of numbers")))?;
        if nums.len() != 4 {
            return Err(line_err(
                line,
                "obstacles",
                format!("'{part}' must have four numbers x1min,x1max,x2min,x2max"),
            ));
        }
        out.push(Rect::new(nums[0], nums[1], nums[2], nums[3]));
    }
    Ok(out)
}

fn require<T>(value: Option<T>, section: &'static str, key: &'static str) -> Result<T, ConfigError> {
    value.ok_or_else(|| field(section, key, "missing required key"))
}

/// Parses and validates a configuration. Unknown keys are errors.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut raw = lex(text)?;
    let defaults = SolverConfig::default();
    let kdefaults = KrylovConfig::default();

    let name = raw.take("scenario", "name").map(|(v, _)| v);
    let m0 = raw.take("scenario", "m0_file").map(|(v, _)| PathBuf::from(v));
    let ut = raw.take("scenario", "ut_file").map(|(v, _)| PathBuf::from(v));
    let source = match (name.as_deref(), m0, ut) {
        (Some("custom"), Some(m0), Some(ut)) => ScenarioSource::Files { m0, ut },
        (Some("custom"), _, _) => {
            return Err(field("scenario", "name", "custom scenarios need both m0_file and ut_file"))
        }
        (Some(n), None, None) => {
            if !BUILT_IN.contains(&n) {
                return Err(field(
                    "scenario",
                    "name",
                    format!("unknown scenario '{n}' (built-in: {}, or custom)", BUILT_IN.join(", ")),
                ));
            }
            ScenarioSource::BuiltIn(n.to_string())
        }
        (Some(_), _, _) => {
            return Err(field(
                "scenario",
                "m0_file",
                "gridded input files are only accepted with name = custom",
            ))
        }
        (None, _, _) => return Err(field("scenario", "name", "missing required key")),
    };
    let normalize = parse_bool("scenario", "normalize", &mut raw)?.unwrap_or(true);

    let kind = match raw.take("geometry", "kind") {
        None => None,
        Some((v, line)) => Some(match v.as_str() {
            "periodic" => GeometryKind::Periodic,
            "box" => GeometryKind::Box,
            _ => return Err(line_err(line, "kind", format!("'{v}' is not periodic or box"))),
        }),
    };
    let nh = require(parse_usize("geometry", "nh", &mut raw)?, "geometry", "nh")?;
    let nt = require(parse_usize("geometry", "nt", &mut raw)?, "geometry", "nt")?;
    let horizon = parse_f64("geometry", "t", &mut raw)?;
    let obstacles = match raw.take("geometry", "obstacles") {
        None => None,
        Some((v, line)) => Some(parse_obstacles(&v, line)?),
    };

    let cost = CostSection {
        alpha: parse_f64("cost", "alpha", &mut raw)?,
        beta: parse_f64("cost", "beta", &mut raw)?,
        ell_coeff: parse_f64("cost", "ell_coeff", &mut raw)?,
        ell_exponent: parse_f64("cost", "ell_exponent", &mut raw)?,
        nu: parse_f64("cost", "nu", &mut raw)?,
    };

    let krylov = KrylovConfig {
        rel_tol: parse_f64("solver", "krylov_rel_tol", &mut raw)?.unwrap_or(kdefaults.rel_tol),
        abs_tol: parse_f64("solver", "krylov_abs_tol", &mut raw)?.unwrap_or(kdefaults.abs_tol),
        max_iters: parse_usize("solver", "krylov_max_iters", &mut raw)?.or(kdefaults.max_iters),
        jacobi: parse_bool("solver", "jacobi", &mut raw)?.unwrap_or(kdefaults.jacobi),
    };
    let solver = SolverConfig {
        r: parse_f64("solver", "r", &mut raw)?.unwrap_or(defaults.r),
        max_iters: parse_usize("solver", "max_iters", &mut raw)?.unwrap_or(defaults.max_iters),
        stop_hjb: parse_f64("solver", "stop_hjb", &mut raw)?.unwrap_or(defaults.stop_hjb),
        stop_gap: parse_f64("solver", "stop_gap", &mut raw)?.unwrap_or(defaults.stop_gap),
        stop_dphi: parse_f64("solver", "stop_dphi", &mut raw)?.unwrap_or(defaults.stop_dphi),
        stop_dm: parse_f64("solver", "stop_dm", &mut raw)?.unwrap_or(defaults.stop_dm),
        krylov,
        record_every: parse_usize("output", "record_every", &mut raw)?.unwrap_or(defaults.record_every),
    };
    let threads = parse_usize("solver", "threads", &mut raw)?.unwrap_or(0);

    let dir = raw.take("output", "dir").map(|(v, _)| PathBuf::from(v));
    let snapshots = match raw.take("output", "snapshots") {
        None => default_snapshots(),
        Some((v, line)) => v
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| line_err(line, "snapshots", format!("'{t}' is not a number")))
            })
            .collect::<Result<_, _>>()?,
    };
    let timings = parse_bool("output", "timings", &mut raw)?.unwrap_or(false);

    if let Some((sec, key, _, line)) = raw.entries.first() {
        return Err(ConfigError::Line {
            line: *line,
            message: format!("unknown key '{key}' in [{sec}]"),
        });
    }

    let config = RunConfig {
        scenario: ScenarioSection { source, normalize },
        geometry: GeometrySection {
            kind,
            nh,
            nt,
            horizon,
            obstacles,
        },
        cost,
        solver,
        threads,
        output: OutputSection {
            dir,
            snapshots,
            timings,
        },
    };
    validate(&config)?;
    Ok(config)
}

/// Range and consistency checks that do not need the scenario data.
pub fn validate(c: &RunConfig) -> Result<(), ConfigError> {
    let g = &c.geometry;
    if g.nh < 2 {
        return Err(field("geometry", "nh", format!("must be at least 2, got {}", g.nh)));
    }
    if g.nt < 2 {
        return Err(field("geometry", "nt", format!("must be at least 2, got {}", g.nt)));
    }
    if let Some(t) = g.horizon {
        if !(t > 0.0) {
            return Err(field("geometry", "t", format!("must be positive, got {t}")));
        }
    }
    let scenario_kind = match &c.scenario.source {
        ScenarioSource::BuiltIn(n) if n == "tc1" || n == "tc2-periodic" => Some(GeometryKind::Periodic),
        ScenarioSource::BuiltIn(_) => Some(GeometryKind::Box),
        ScenarioSource::Files { .. } => None,
    };
    let kind = g.kind.or(scenario_kind).unwrap_or(GeometryKind::Box);
    if let ScenarioSource::BuiltIn(n) = &c.scenario.source {
        if n.starts_with("tc2") && g.kind.is_some_and(|k| Some(k) != scenario_kind) {
            return Err(field(
                "geometry",
                "kind",
                format!("{n} fixes its boundary condition; pick the matching tc2 variant instead"),
            ));
        }
    }
    if kind == GeometryKind::Periodic && g.obstacles.as_ref().is_some_and(|o| !o.is_empty()) {
        return Err(field("geometry", "obstacles", "obstacles need kind = box"));
    }
    let cost = &c.cost;
    if let Some(a) = cost.alpha {
        if !(0.0..1.0).contains(&a) {
            return Err(field("cost", "alpha", format!("must lie in [0, 1), got {a}")));
        }
    }
    if let Some(b) = cost.beta {
        if !(b > 1.0 && b <= 2.0) {
            return Err(field("cost", "beta", format!("must lie in (1, 2], got {b}")));
        }
    }
    if let Some(l) = cost.ell_coeff {
        if !(l > 0.0) {
            return Err(field("cost", "ell_coeff", format!("must be positive, got {l}")));
        }
    }
    if let Some(q) = cost.ell_exponent {
        if !(q > 1.0) {
            return Err(field("cost", "ell_exponent", format!("must exceed 1, got {q}")));
        }
    }
    if let Some(nu) = cost.nu {
        if nu != 0.0 {
            return Err(field("cost", "nu", format!("only the deterministic case nu = 0 is supported, got {nu}")));
        }
    }
    c.solver.validate().map_err(|e| ConfigError::Section {
        section: "solver",
        message: e.to_string(),
    })?;
    let horizon = g.horizon.unwrap_or(1.0);
    if let Some(t) = c.output.snapshots.iter().find(|t| !(0.0..=horizon).contains(*t)) {
        return Err(field("output", "snapshots", format!("time {t} lies outside [0, {horizon}]")));
    }
    Ok(())
}

/// Writes a configuration back in the format [`parse_config`] reads.
pub fn render(c: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[scenario]");
    match &c.scenario.source {
        ScenarioSource::BuiltIn(n) => {
            let _ = writeln!(s, "name = {n}");
        }
        ScenarioSource::Files { m0, ut } => {
            let _ = writeln!(s, "name = custom");
            let _ = writeln!(s, "m0_file = {}", m0.display());
            let _ = writeln!(s, "ut_file = {}", ut.display());
        }
    }
    let _ = writeln!(s, "normalize = {}", c.scenario.normalize);

    let g = &c.geometry;
    let _ = writeln!(s, "\n[geometry]");
    if let Some(k) = g.kind {
        let _ = writeln!(
            s,
            "kind = {}",
            match k {
                GeometryKind::Periodic => "periodic",
                GeometryKind::Box => "box",
            }
        );
    }
    let _ = writeln!(s, "nh = {}\nnt = {}", g.nh, g.nt);
    if let Some(t) = g.horizon {
        let _ = writeln!(s, "t = {t:?}");
    }
    if let Some(obs) = &g.obstacles {
        let list: Vec<String> = obs
            .iter()
            .map(|r| format!("{:?},{:?},{:?},{:?}", r.x1min, r.x1max, r.x2min, r.x2max))
            .collect();
        let _ = writeln!(s, "obstacles = {}", list.join("; "));
    }

    let _ = writeln!(s, "\n[cost]");
    for (key, v) in [
        ("alpha", c.cost.alpha),
        ("beta", c.cost.beta),
        ("ell_coeff", c.cost.ell_coeff),
        ("ell_exponent", c.cost.ell_exponent),
        ("nu", c.cost.nu),
    ] {
        if let Some(v) = v {
            let _ = writeln!(s, "{key} = {v:?}");
        }
    }

    let sv = &c.solver;
    let _ = writeln!(s, "\n[solver]");
    let _ = writeln!(s, "r = {:?}\nmax_iters = {}", sv.r, sv.max_iters);
    let _ = writeln!(
        s,
        "stop_hjb = {:?}\nstop_gap = {:?}\nstop_dphi = {:?}\nstop_dm = {:?}",
        sv.stop_hjb, sv.stop_gap, sv.stop_dphi, sv.stop_dm
    );
    let _ = writeln!(
        s,
        "krylov_rel_tol = {:?}\nkrylov_abs_tol = {:?}",
        sv.krylov.rel_tol, sv.krylov.abs_tol
    );
    if let Some(k) = sv.krylov.max_iters {
        let _ = writeln!(s, "krylov_max_iters = {k}");
    }
    let _ = writeln!(s, "jacobi = {}\nthreads = {}", sv.krylov.jacobi, c.threads);

    let _ = writeln!(s, "\n[output]");
    if let Some(d) = &c.output.dir {
        let _ = writeln!(s, "dir = {}", d.display());
    }
    let times: Vec<String> = c.output.snapshots.iter().map(|t| format!("{t:?}")).collect();
    let _ = writeln!(s, "snapshots = {}", times.join(", "));
    let _ = writeln!(s, "record_every = {}", sv.record_every);
    let _ = writeln!(s, "timings = {}", c.output.timings);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[scenario]\nname = tc1\n\n[geometry]\nnh = 16\nnt = 16\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.solver.r, 1.0);
        assert_eq!(c.solver.record_every, 10);
        assert_eq!(c.output.snapshots, default_snapshots());
        assert_eq!(c, RunConfig::built_in("tc1", 16, 16));
    }

    #[test]
    fn range_errors() {
        let e = parse_config(&format!("{MINIMAL}[cost]\nalpha = 1.2\n")).unwrap_err();
        assert!(e.to_string().contains("alpha"), "{e}");
        assert!(parse_config(&format!("{MINIMAL}[cost]\nbeta = 2.5\n")).is_err());
        assert!(parse_config(&format!("{MINIMAL}[cost]\nnu = 0.1\n")).is_err());
        assert!(parse_config(&format!("{MINIMAL}[solver]\nr = -1\n")).is_err());
        assert!(parse_config(&format!("{MINIMAL}[output]\nsnapshots = 0, 1.5\n")).is_err());
    }

    #[test]
    fn periodic_with_obstacles_is_rejected() {
        let e = parse_config(&format!("{MINIMAL}obstacles = 0.25,0.5,0.25,0.5\n")).unwrap_err();
        assert!(e.to_string().contains("obstacles"), "{e}");
        let text = "[scenario]\nname = tc3\n[geometry]\nkind = periodic\nnh = 10\nnt = 4\nobstacles = 0.4,0.6,0.4,0.6\n";
        assert!(parse_config(text).is_err());
    }

    #[test]
    fn conflicting_boundary_condition() {
        let text = "[scenario]\nname = tc2-box\n[geometry]\nkind = periodic\nnh = 10\nnt = 4\n";
        assert!(parse_config(text).is_err());
    }

    #[test]
    fn unknown_and_duplicate_keys_report_their_line() {
        let e = parse_config(&format!("{MINIMAL}colour = red\n")).unwrap_err();
        assert_eq!(
            e,
            ConfigError::Line {
                line: 7,
                message: "unknown key 'colour' in [geometry]".into()
            }
        );
        let e = parse_config(&format!("{MINIMAL}nh = 8\n")).unwrap_err();
        assert!(matches!(e, ConfigError::Line { line: 7, .. }));
        let e = parse_config("[scenario]\nname = tc1\n[plot]\n").unwrap_err();
        assert!(matches!(e, ConfigError::Line { line: 3, .. }));
        let e = parse_config("[geometry]\nnh = 4\nnt = 4\n").unwrap_err();
        assert!(e.to_string().contains("name"));
        let e = parse_config("[scenario]\nname = tc1\n[geometry]\nnh = 4\nnt = x\n").unwrap_err();
        assert!(matches!(e, ConfigError::Line { line: 5, .. }));
    }

    #[test]
    fn custom_scenario_needs_both_files() {
        let text = "[scenario]\nname = custom\nm0_file = m0.csv\n[geometry]\nnh = 4\nnt = 4\n";
        assert!(parse_config(text).is_err());
        let text = "[scenario]\nname = custom\nm0_file = m0.csv\nut_file = ut.csv\n[geometry]\nkind = periodic\nnh = 4\nnt = 4\n";
        let c = parse_config(text).unwrap();
        assert_eq!(
            c.scenario.source,
            ScenarioSource::Files {
                m0: "m0.csv".into(),
                ut: "ut.csv".into()
            }
        );
    }

    #[test]
    fn comments_and_full_render() {
        let text = "# run\n[scenario]\nname = tc2-obstacle # corner to corner\n[geometry]\nnh = 10\nnt = 5\nobstacles = 0.4,0.6,0.4,0.6; 0.1,0.2,0.7,0.8\n[output]\ndir = results\nsnapshots = 0.5\ntimings = true\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.geometry.obstacles.as_ref().unwrap().len(), 2);
        assert_eq!(parse_config(&render(&c)).unwrap(), c);
    }
}
