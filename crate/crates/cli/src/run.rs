//! Turning a [`RunConfig`] into a solver run and its output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mftc_core::admm::{solve, Problem, RunReport, StopReason};
use mftc_core::cases::{by_name, test_case_3, InitialDensity, Scenario, TerminalCost};
use mftc_core::geometry::{Geometry, GeometryKind};
use mftc_core::model::CostModel;
use mftc_core::operators::ScalarField;

use crate::config::{RunConfig, ScenarioSource};

pub const OUT_DIR_ENV: &str = "MFTC_OUT_DIR";

/// Output directory: command line, then config, then environment, then `./out`.
pub fn output_dir(cli: Option<&Path>, config: &RunConfig, env: Option<&str>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| config.output.dir.clone())
        .or_else(|| env.filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Reads a CSV matrix of numbers, one grid row per line.
pub fn read_matrix(path: &Path) -> Result<(usize, Vec<f64>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = 0;
    let mut cols = None;
    let mut values = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{} line {}: not a list of numbers", path.display(), idx + 1))?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => bail!(
                "{} line {}: expected {c} columns, found {}",
                path.display(),
                idx + 1,
                row.len()
            ),
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows == 0 || rows != cols {
        bail!("{}: expected a square matrix, found {rows} x {cols}", path.display());
    }
    Ok((rows, values))
}

/// Builds the scenario described by the configuration. Relative input paths
/// are resolved against `base`.
pub fn build_scenario(config: &RunConfig, base: &Path) -> Result<Scenario> {
    let g = &config.geometry;
    let c = &config.cost;
    let mut scenario = match &config.scenario.source {
        ScenarioSource::BuiltIn(name) if name == "tc3" => test_case_3(
            c.alpha.unwrap_or(0.3),
            c.ell_coeff.unwrap_or(0.01),
            g.kind.unwrap_or(GeometryKind::Box),
        )?,
        ScenarioSource::BuiltIn(name) => by_name(name)?,
        ScenarioSource::Files { m0, ut } => {
            let kind = g.kind.unwrap_or(GeometryKind::Box);
            let side = match kind {
                GeometryKind::Periodic => g.nh,
                GeometryKind::Box => g.nh + 1,
            };
            let (m0_side, m0_values) = read_matrix(&base.join(m0))?;
            let (ut_side, ut_values) = read_matrix(&base.join(ut))?;
            for (what, s) in [("m0_file", m0_side), ("ut_file", ut_side)] {
                if s != side {
                    bail!("{what}: expected a {side} x {side} matrix for nh = {}, found {s} x {s}", g.nh);
                }
            }
            if let Some(bad) = m0_values.iter().find(|v| **v < 0.0) {
                bail!("m0_file: densities must be nonnegative, found {bad}");
            }
            Scenario {
                name: "custom".into(),
                kind,
                obstacles: Vec::new(),
                horizon: 1.0,
                cost: CostModel::linear(0.5, 2.0, 1.0)?,
                m0: InitialDensity::Grid {
                    nh: g.nh,
                    values: m0_values,
                },
                terminal: TerminalCost::Grid {
                    nh: g.nh,
                    values: ut_values,
                },
                normalize: config.scenario.normalize,
            }
        }
    };
    scenario.normalize = config.scenario.normalize;
    if let Some(kind) = g.kind {
        scenario.kind = kind;
    }
    if let Some(t) = g.horizon {
        scenario.horizon = t;
    }
    if let Some(obs) = &g.obstacles {
        scenario.obstacles = obs.clone();
    }
    if let Some(a) = c.alpha {
        scenario.cost.alpha = a;
    }
    if let Some(b) = c.beta {
        scenario.cost.beta = b;
    }
    if let Some(l) = c.ell_coeff {
        scenario.cost.ell_coeff = l;
    }
    if let Some(q) = c.ell_exponent {
        scenario.cost.ell_exponent = q;
    }
    if let Some(nu) = c.nu {
        scenario.cost.nu = nu;
    }
    scenario.cost.validate()?;
    Ok(scenario)
}

pub fn build_problem(config: &RunConfig, base: &Path) -> Result<(Scenario, Problem)> {
    let scenario = build_scenario(config, base)?;
    let problem = Problem::from_scenario(&scenario, config.geometry.nh, config.geometry.nt)?;
    Ok((scenario, problem))
}

/// A requested snapshot time and the grid slice it was moved to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub requested: f64,
    pub slice: usize,
    pub time: f64,
}

/// Moves each requested time to the nearest time-grid point; repeated
/// slices are kept once.
pub fn snap_times(geom: &Geometry, times: &[f64]) -> Vec<Snapshot> {
    let dt = geom.dt();
    let mut out: Vec<Snapshot> = Vec::new();
    for &t in times {
        let slice = ((t / dt).round() as usize).min(geom.nt());
        if out.iter().any(|s| s.slice == slice) {
            continue;
        }
        out.push(Snapshot {
            requested: t,
            slice,
            time: slice as f64 * dt,
        });
    }
    out
}

pub fn snapshot_file_name(time: f64) -> String {
    format!("m_t{time:.3}.csv")
}

fn snapshot_csv(geom: &Geometry, m: &ScalarField, phi: &ScalarField, slice: usize) -> String {
    let mut s = String::from("i,j,x1,x2,m,phi\n");
    for node in 0..geom.n_nodes() {
        let (i, j) = geom.coords(node);
        let (x1, x2) = geom.position(node);
        let _ = writeln!(
            s,
            "{i},{j},{x1:.6},{x2:.6},{:.12e},{:.12e}",
            m.get(slice, node),
            phi.get(slice, node)
        );
    }
    s
}

fn history_csv(report: &RunReport, timings: bool) -> String {
    let mut s = String::from("iter,hjb_l2,hjb_weighted,gap,dphi,dm,mass_min,mass_max,seconds\n");
    for r in &report.history {
        let seconds = if timings { r.seconds } else { 0.0 };
        let _ = writeln!(
            s,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.12e},{:.12e},{seconds:.3}",
            r.iter, r.hjb_l2, r.hjb_weighted, r.gap, r.dphi, r.dm, r.mass_min, r.mass_max
        );
    }
    s
}

fn stop_text(stop: StopReason) -> &'static str {
    match stop {
        StopReason::HjbResidual => "converged (m-weighted HJB residual below threshold)",
        StopReason::Increments => "converged (gap and increments below thresholds)",
        StopReason::Budget => "iteration budget exhausted",
    }
}

fn summary(config: &RunConfig, scenario: &Scenario, problem: &Problem, report: &RunReport, snaps: &[Snapshot]) -> String {
    let g = &problem.geom;
    let c = &problem.cost;
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", scenario.name);
    let _ = writeln!(
        s,
        "geometry: {}, nh = {}, nt = {}, T = {}, obstacles = {}",
        match g.kind() {
            GeometryKind::Periodic => "periodic",
            GeometryKind::Box => "box",
        },
        g.nh(),
        g.nt(),
        g.horizon(),
        g.obstacles().len()
    );
    let _ = writeln!(
        s,
        "cost: alpha = {}, beta = {}, ell = {} m^{}",
        c.alpha,
        c.beta,
        c.ell_coeff,
        c.ell_exponent - 1.0
    );
    let _ = writeln!(s, "penalty r = {}", config.solver.r);
    let _ = writeln!(s, "stop: {}", stop_text(report.stop));
    let _ = writeln!(s, "iterations: {}", report.iterations);
    let _ = writeln!(s, "krylov iterations: {}", report.krylov_iterations);
    let last = &report.last;
    let _ = writeln!(s, "hjb residual: {:.6e}", last.hjb_l2);
    let _ = writeln!(s, "hjb residual (m-weighted): {:.6e}", last.hjb_weighted);
    let _ = writeln!(s, "kolmogorov residual: {:.6e}", last.kolmogorov_l2);
    let _ = writeln!(s, "gap: {:.6e}", last.gap);
    let (lo, hi) = last
        .mass_by_slice
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let _ = writeln!(s, "mass range over slices: [{lo:.12}, {hi:.12}]");
    for snap in snaps {
        let note = if (snap.time - snap.requested).abs() > 1e-12 {
            format!(" (requested t = {}, snapped to the time grid)", snap.requested)
        } else {
            String::new()
        };
        let _ = writeln!(s, "snapshot: {} at t = {:.6}{note}", snapshot_file_name(snap.time), snap.time);
    }
    s
}

/// What a finished run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub stop: StopReason,
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    /// Process exit status: 0 on convergence, 2 when the budget ran out.
    pub fn exit_code(&self) -> i32 {
        if self.stop.converged() {
            0
        } else {
            2
        }
    }
}

/// Solves and writes `history.csv`, one snapshot CSV per requested time and
/// `summary.txt` into `dir`.
pub fn run(config: &RunConfig, base: &Path, dir: &Path) -> Result<RunOutcome> {
    let (scenario, problem) = build_problem(config, base)?;
    let report = if config.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .context("building the thread pool")?;
        pool.install(|| solve(&problem, &config.solver))?
    } else {
        solve(&problem, &config.solver)?
    };

    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    let mut write = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        files.push(path);
        Ok(())
    };

    write("history.csv", history_csv(&report, config.output.timings))?;
    let g = &problem.geom;
    let m = report.state.density(&problem)?;
    let snaps = snap_times(g, &config.output.snapshots);
    for snap in &snaps {
        write(
            &snapshot_file_name(snap.time),
            snapshot_csv(g, &m, &report.state.phi, snap.slice),
        )?;
    }
    write("summary.txt", summary(config, &scenario, &problem, &report, &snaps))?;
    Ok(RunOutcome {
        stop: report.stop,
        dir: dir.to_path_buf(),
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dir_precedence() {
        let mut c = RunConfig::built_in("tc1", 4, 4);
        assert_eq!(output_dir(None, &c, None), PathBuf::from("out"));
        assert_eq!(output_dir(None, &c, Some("env")), PathBuf::from("env"));
        c.output.dir = Some("cfg".into());
        assert_eq!(output_dir(None, &c, Some("env")), PathBuf::from("cfg"));
        assert_eq!(output_dir(Some(Path::new("cli")), &c, Some("env")), PathBuf::from("cli"));
    }

    #[test]
    fn snapping() {
        let g = Geometry::periodic(4, 8, 1.0).unwrap();
        let snaps = snap_times(&g, &[0.0, 0.3, 0.25, 1.0]);
        assert_eq!(snaps.len(), 3);
        assert_eq!(snaps[1].slice, 2);
        assert_eq!(snaps[1].time, 0.25);
        assert_eq!(snaps[1].requested, 0.3);
        assert_eq!(snapshot_file_name(snaps[2].time), "m_t1.000.csv");
    }

    #[test]
    fn overrides_reach_the_scenario() {
        let mut c = RunConfig::built_in("tc3", 8, 4);
        c.cost.alpha = Some(0.1);
        c.cost.ell_coeff = Some(0.5);
        c.geometry.horizon = Some(2.0);
        let s = build_scenario(&c, Path::new(".")).unwrap();
        assert_eq!(s.cost.alpha, 0.1);
        assert_eq!(s.cost.ell_coeff, 0.5);
        assert_eq!(s.horizon, 2.0);
        assert_eq!(s.kind, GeometryKind::Box);
    }
}
