//! Alternating direction method of multipliers on the augmented Lagrangian
//!
//! ```text
//! L_r(φ, q, σ) = F_h(φ) + G_h(q) - <σ, Λφ - q> + r/2 |Λφ - q|²
//! ```
//!
//! Each iteration minimizes in `φ` (a linear solve), then in `q` (node-wise
//! proximal problems), then takes the explicit dual step
//! `σ ← σ - r (Λφ - q)`.

use std::time::Instant;

use rayon::prelude::*;

use crate::cases::Scenario;
use crate::diagnostics::{density_field, residuals, ResidualSet};
use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::krylov::{bicgstab_solve, step1_operator, step1_rhs, unknown_slices, KrylovConfig};
use crate::model::CostModel;
use crate::operators::{lambda_apply, norm, ScalarField, Stacked5Field};
use crate::pointwise::{solve_node, Branch, NodeProxInput};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub r: f64,
    pub max_iters: usize,
    /// stop once the m-weighted HJB residual is below this value
    pub stop_hjb: f64,
    /// stop once the gap and both increments are below their thresholds
    pub stop_gap: f64,
    pub stop_dphi: f64,
    pub stop_dm: f64,
    pub krylov: KrylovConfig,
    pub record_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            r: 1.0,
            max_iters: 1000,
            stop_hjb: 1e-6,
            stop_gap: 1e-8,
            stop_dphi: 1e-8,
            stop_dm: 1e-8,
            krylov: KrylovConfig::default(),
            record_every: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidParameter(format!("r must be positive, got {}", self.r)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("the iteration budget must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter("record_every must be at least 1".into()));
        }
        for (name, v) in [
            ("stop_hjb", self.stop_hjb),
            ("stop_gap", self.stop_gap),
            ("stop_dphi", self.stop_dphi),
            ("stop_dm", self.stop_dm),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        self.krylov.validate()
    }
}

/// Grid, cost and boundary data of one discrete problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub geom: Geometry,
    pub cost: CostModel,
    /// cell averages of the initial density
    pub m0: Vec<f64>,
    /// terminal cost at the nodes
    pub terminal: Vec<f64>,
}

impl Problem {
    pub fn new(geom: Geometry, cost: CostModel, m0: Vec<f64>, terminal: Vec<f64>) -> Result<Self> {
        cost.validate()?;
        let nodes = geom.n_nodes();
        for len in [m0.len(), terminal.len()] {
            if len != nodes {
                return Err(Error::ShapeMismatch {
                    expected: nodes,
                    got: len,
                });
            }
        }
        if let Some(bad) = m0.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "initial density must be finite and nonnegative, found {bad}"
            )));
        }
        if let Some(field) = &cost.coeff_field {
            if field.len() != nodes {
                return Err(Error::ShapeMismatch {
                    expected: nodes,
                    got: field.len(),
                });
            }
        }
        Ok(Problem {
            geom,
            cost,
            m0,
            terminal,
        })
    }

    pub fn from_scenario(scenario: &Scenario, nh: usize, nt: usize) -> Result<Self> {
        let geom = scenario.geometry(nh, nt)?;
        let m0 = scenario.sample_m0(&geom)?;
        let terminal = scenario.sample_terminal(&geom)?;
        Problem::new(geom, scenario.cost.clone(), m0, terminal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub phi: ScalarField,
    pub q: Stacked5Field,
    pub sigma: Stacked5Field,
    pub k: usize,
}

impl AdmmState {
    /// Densities `m^0 .. m^{NT}` carried by the dual variable.
    pub fn density(&self, problem: &Problem) -> Result<ScalarField> {
        density_field(&problem.geom, &self.sigma, &problem.m0)
    }
}

/// `φ` and `m` constant in time (equal to `u_T` and `m~0`), zero fluxes,
/// and `q = Λφ`, so the gap starts at zero.
pub fn initialize(problem: &Problem) -> Result<AdmmState> {
    let g = &problem.geom;
    let phi = ScalarField::constant_in_time(g.nt() + 1, &problem.terminal);
    let q = lambda_apply(g, &phi)?;
    let sigma = Stacked5Field::from_fn(g, |_, p| [problem.m0[p], 0.0, 0.0, 0.0, 0.0]);
    Ok(AdmmState { phi, q, sigma, k: 0 })
}

/// Potential update: solves the linear system of the `φ` minimization,
/// warm-started from the current `φ`. Returns the new `φ` and the number of
/// Krylov iterations.
pub fn step1(problem: &Problem, state: &AdmmState, config: &SolverConfig) -> Result<(ScalarField, usize)> {
    let g = &problem.geom;
    let op = step1_operator(g, config.r);
    let b = step1_rhs(g, config.r, &state.sigma, &state.q, &problem.m0, &problem.terminal)?;
    let sol = bicgstab_solve(&op, &b, unknown_slices(&state.phi), &config.krylov)?;
    let mut data = sol.x;
    data.extend_from_slice(&problem.terminal);
    let phi = ScalarField::from_vec(g.nt() + 1, g.n_nodes(), data)?;
    Ok((phi, sol.iterations))
}

/// Result of the node-wise step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTwo {
    pub q: Stacked5Field,
    /// maximizers of the node problems, equal to `σ - r(Λφ - q)`
    pub sigma: Stacked5Field,
    pub interior_roots: usize,
}

/// `q` update: solves the proximal problem at every space-time node.
pub fn step2(problem: &Problem, lam_phi: &Stacked5Field, sigma: &Stacked5Field, r: f64) -> Result<StepTwo> {
    let g = &problem.geom;
    let nodes = g.n_nodes();
    let outputs: Vec<_> = sigma
        .as_slice()
        .par_iter()
        .zip(lam_phi.as_slice())
        .enumerate()
        .map(|(idx, (s, l))| {
            let p = idx % nodes;
            let input = NodeProxInput {
                sigma: *s,
                lam_phi: *l,
                r,
                cost: problem.cost.local(p),
                mask: g.mask(p),
            };
            solve_node(&input).map_err(|e| {
                let (i, j) = g.coords(p);
                Error::Node {
                    i,
                    j,
                    n: idx / nodes + 1,
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<_>>()?;
    let interior_roots = outputs.iter().filter(|o| o.branch == Branch::InteriorRoot).count();
    let q = Stacked5Field::from_vec(g.nt(), nodes, outputs.iter().map(|o| o.q).collect())?;
    let sigma = Stacked5Field::from_vec(g.nt(), nodes, outputs.iter().map(|o| o.sigma).collect())?;
    Ok(StepTwo {
        q,
        sigma,
        interior_roots,
    })
}

/// The dual update `σ - r(Λφ - q)` evaluated literally.
pub fn dual_update(sigma: &Stacked5Field, lam_phi: &Stacked5Field, q: &Stacked5Field, r: f64) -> Result<Stacked5Field> {
    sigma.axpy(-r, &lam_phi.sub(q)?)
}

/// Dual step. The node solver returns `q` as `(σ' - σ)/r + Λφ`, so the dual
/// update equals its maximizer `σ'`; that value is taken directly, which keeps
/// `σ` exactly inside the cone instead of within rounding of it.
pub fn step3(two: &StepTwo) -> Stacked5Field {
    two.sigma.clone()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub iter: usize,
    pub hjb_l2: f64,
    pub hjb_weighted: f64,
    pub gap: f64,
    pub dphi: f64,
    pub dm: f64,
    pub mass_min: f64,
    pub mass_max: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopReason {
    /// the m-weighted HJB residual fell below its threshold
    HjbResidual,
    /// the gap and both increments fell below their thresholds
    Increments,
    /// the iteration budget was used up
    Budget,
}

impl StopReason {
    pub fn converged(self) -> bool {
        !matches!(self, StopReason::Budget)
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub history: Vec<Record>,
    pub state: AdmmState,
    pub stop: StopReason,
    pub iterations: usize,
    pub krylov_iterations: usize,
    pub last: ResidualSet,
}

/// What an observer sees at each recorded iteration.
pub struct IterationView<'a> {
    pub record: &'a Record,
    pub state: &'a AdmmState,
    pub residuals: &'a ResidualSet,
}

pub fn solve(problem: &Problem, config: &SolverConfig) -> Result<RunReport> {
    solve_with_observer(problem, config, |_| {})
}

/// [`solve`], calling `observer` at every recorded iteration.
pub fn solve_with_observer(
    problem: &Problem,
    config: &SolverConfig,
    mut observer: impl FnMut(&IterationView<'_>),
) -> Result<RunReport> {
    config.validate()?;
    let g = &problem.geom;
    let start = Instant::now();
    let mut state = initialize(problem)?;
    let mut history = Vec::new();
    let mut krylov_total = 0;

    loop {
        let k = state.k + 1;
        let wrap = |e: Error| Error::Iteration {
            iteration: k,
            source: Box::new(e),
        };
        let (phi, kiters) = step1(problem, &state, config).map_err(wrap)?;
        krylov_total += kiters;
        let lam_phi = lambda_apply(g, &phi).map_err(wrap)?;
        let two = step2(problem, &lam_phi, &state.sigma, config.r).map_err(wrap)?;
        let sigma = step3(&two);

        let dphi = norm(g, &phi.sub(&state.phi)?);
        let dm = norm(g, &sigma.channel(0).sub(&state.sigma.channel(0))?);
        state = AdmmState {
            phi,
            q: two.q,
            sigma,
            k,
        };
        let res = residuals(g, &state.phi, &state.q, &state.sigma, &problem.m0, &problem.cost).map_err(wrap)?;

        let stop = if res.hjb_weighted <= config.stop_hjb {
            Some(StopReason::HjbResidual)
        } else if res.gap <= config.stop_gap && dphi <= config.stop_dphi && dm <= config.stop_dm {
            Some(StopReason::Increments)
        } else if k >= config.max_iters {
            Some(StopReason::Budget)
        } else {
            None
        };

        if k == 1 || k % config.record_every == 0 || stop.is_some() {
            let (mass_min, mass_max) = res
                .mass_by_slice
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
            let record = Record {
                iter: k,
                hjb_l2: res.hjb_l2,
                hjb_weighted: res.hjb_weighted,
                gap: res.gap,
                dphi,
                dm,
                mass_min,
                mass_max,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "iter {k}: hjb {:.3e} (weighted {:.3e}), gap {:.3e}, dphi {:.3e}, dm {:.3e}, krylov {kiters}",
                record.hjb_l2,
                record.hjb_weighted,
                record.gap,
                dphi,
                dm
            );
            observer(&IterationView {
                record: &record,
                state: &state,
                residuals: &res,
            });
            history.push(record);
        }

        if let Some(stop) = stop {
            return Ok(RunReport {
                history,
                state,
                stop,
                iterations: k,
                krylov_iterations: krylov_total,
                last: res,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::test_case_1;
    use crate::diagnostics::dual_feasible;
    use crate::geometry::Rect;
    use crate::operators::{inner, inner5};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_problem(geom: Geometry, rng: &mut ChaCha8Rng) -> Problem {
        let nodes = geom.n_nodes();
        let m0: Vec<f64> = (0..nodes).map(|_| rng.gen_range(0.0..2.0)).collect();
        let ut: Vec<f64> = (0..nodes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Problem::new(geom, CostModel::linear(0.5, 2.0, 1.0).unwrap(), m0, ut).unwrap()
    }

    fn random_state(problem: &Problem, rng: &mut ChaCha8Rng) -> AdmmState {
        let g = &problem.geom;
        let mut phi = ScalarField::from_fn(g, |_, _| rng.gen_range(-1.0..1.0));
        phi.slice_mut(g.nt()).copy_from_slice(&problem.terminal);
        let q = Stacked5Field::from_fn(g, |_, _| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
        let sigma = Stacked5Field::from_fn(g, |_, _| {
            [
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..1.0),
                -rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                -rng.gen_range(0.0..1.0),
            ]
        });
        AdmmState { phi, q, sigma, k: 3 }
    }

    #[test]
    fn initialization() {
        let sc = test_case_1();
        let p = Problem::from_scenario(&sc, 16, 16).unwrap();
        let s = initialize(&p).unwrap();
        let g = &p.geom;
        let center = g.node_index(8, 8).unwrap();
        assert_eq!(s.phi.get(0, center), 1.0);
        assert_eq!(s.sigma.at(5, center)[0], p.m0[center]);
        let gap = norm5_gap(g, &s);
        assert_eq!(gap, 0.0);
        let m = s.density(&p).unwrap();
        for n in 0..=g.nt() {
            assert!((crate::diagnostics::mass(g, &m, n) - 1.0).abs() < 1e-12);
        }
    }

    fn norm5_gap(g: &Geometry, s: &AdmmState) -> f64 {
        crate::operators::norm5(g, &lambda_apply(g, &s.phi).unwrap().sub(&s.q).unwrap())
    }

    /// Objective of the potential update.
    fn step1_objective(p: &Problem, s: &AdmmState, phi: &ScalarField, r: f64) -> f64 {
        let g = &p.geom;
        let lam = lambda_apply(g, phi).unwrap();
        let gap = lam.sub(&s.q).unwrap();
        let source: f64 = p.m0.iter().zip(phi.slice(0)).map(|(a, b)| a * b).sum::<f64>() * g.h() * g.h();
        -source - inner5(g, &s.sigma, &lam).unwrap() + 0.5 * r * inner5(g, &gap, &gap).unwrap()
    }

    #[test]
    fn step1_minimizes_its_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for geom in [
            Geometry::periodic(6, 4, 1.0).unwrap(),
            Geometry::unit_box(6, 4, 1.0, vec![Rect::square(1.0 / 3.0, 2.0 / 3.0)]).unwrap(),
        ] {
            let p = small_problem(geom, &mut rng);
            let s = random_state(&p, &mut rng);
            let config = SolverConfig {
                krylov: KrylovConfig {
                    rel_tol: 1e-12,
                    ..KrylovConfig::default()
                },
                ..SolverConfig::default()
            };
            let (phi, _) = step1(&p, &s, &config).unwrap();
            assert_eq!(phi.slice(p.geom.nt()), &p.terminal[..]);
            let best = step1_objective(&p, &s, &phi, config.r);
            for _ in 0..100 {
                let mut other = phi.clone();
                let nt = p.geom.nt();
                for n in 0..nt {
                    for v in other.slice_mut(n) {
                        *v += rng.gen_range(-1e-2..1e-2);
                    }
                }
                assert!(step1_objective(&p, &s, &other, config.r) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn step1_keeps_an_optimal_potential() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = small_problem(Geometry::periodic(4, 3, 1.0).unwrap(), &mut rng);
        let mut s = random_state(&p, &mut rng);
        // σ = 0 and q = Λφ make φ stationary when m~0 = 0
        let p = Problem::new(p.geom.clone(), p.cost.clone(), vec![0.0; p.geom.n_nodes()], p.terminal.clone()).unwrap();
        s.sigma = Stacked5Field::on(&p.geom);
        s.q = lambda_apply(&p.geom, &s.phi).unwrap();
        let (phi, _) = step1(&p, &s, &SolverConfig::default()).unwrap();
        let diff = norm(&p.geom, &phi.sub(&s.phi).unwrap());
        assert!(diff < 1e-8 * (1.0 + norm(&p.geom, &s.phi)));
    }

    #[test]
    fn step2_zero_data_gives_zero() {
        let g = Geometry::unit_box(4, 3, 1.0, vec![]).unwrap();
        let p = Problem::new(
            g.clone(),
            CostModel::linear(0.5, 2.0, 1.0).unwrap(),
            vec![1.0; g.n_nodes()],
            vec![0.0; g.n_nodes()],
        )
        .unwrap();
        let zero = Stacked5Field::on(&g);
        let two = step2(&p, &zero, &zero, 1.0).unwrap();
        assert!(two.q.as_slice().iter().flatten().all(|v| *v == 0.0));
        assert!(two.sigma.as_slice().iter().flatten().all(|v| *v == 0.0));
    }

    /// Node-wise objective of the `q` minimization:
    /// `-K_h(q) + σ·q + r/2 |Λφ - q|²` up to the sign convention of `G_h`,
    /// evaluated through the conjugate pair `G_h(q) = sup_σ' [-σ'·q - L~_h(σ')]`.
    #[test]
    fn step2_matches_brute_force_on_small_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Geometry::unit_box(4, 3, 1.0, vec![]).unwrap();
        let p = small_problem(g.clone(), &mut rng);
        let s = random_state(&p, &mut rng);
        let lam = lambda_apply(&g, &s.phi).unwrap();
        let r = 1.0;
        let two = step2(&p, &lam, &s.sigma, r).unwrap();
        for n in 1..=g.nt() {
            for node in (0..g.n_nodes()).step_by(3) {
                let input = NodeProxInput {
                    sigma: *s.sigma.at(n, node),
                    lam_phi: *lam.at(n, node),
                    r,
                    cost: p.cost.local(node),
                    mask: g.mask(node),
                };
                let best = crate::pointwise::w_value(&input, two.sigma.at(n, node));
                // a coarse cone grid around the returned point
                let c = *two.sigma.at(n, node);
                let steps = [-0.2, -0.05, 0.0, 0.05, 0.2];
                for a in steps {
                    for b in steps {
                        for d in steps {
                            for e in steps {
                                for f in steps {
                                    let cand = [
                                        (c[0] + a).max(0.0),
                                        (c[1] + b).max(0.0),
                                        (c[2] + d).min(0.0),
                                        (c[3] + e).max(0.0),
                                        (c[4] + f).min(0.0),
                                    ];
                                    let cand = if g.mask(node).is_full() {
                                        cand
                                    } else {
                                        std::array::from_fn(|ch| if g.mask(node).has_channel(ch) { cand[ch] } else { 0.0 })
                                    };
                                    assert!(crate::pointwise::w_value(&input, &cand) <= best + 1e-5);
                                }
                            }
                        }
                    }
                }
                let q = two.q.at(n, node);
                for ch in 1..5 {
                    if !g.mask(node).has_channel(ch) {
                        assert_eq!(q[ch], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn step3_agrees_with_the_literal_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Geometry::periodic(4, 3, 1.0).unwrap();
        let p = small_problem(g.clone(), &mut rng);
        let s = random_state(&p, &mut rng);
        let lam = lambda_apply(&g, &s.phi).unwrap();
        for r in [0.1, 1.0, 10.0] {
            let two = step2(&p, &lam, &s.sigma, r).unwrap();
            let next = step3(&two);
            assert_eq!(next, two.sigma);
            assert!(dual_feasible(&next));
            let literal = dual_update(&s.sigma, &lam, &two.q, r).unwrap();
            for (a, b) in literal.as_slice().iter().zip(next.as_slice()) {
                for ch in 0..5 {
                    assert!((a[ch] - b[ch]).abs() < 1e-12 * (1.0 + r * 10.0));
                }
            }
            // q = Λφ leaves σ unchanged
            let same = dual_update(&s.sigma, &lam, &lam, r).unwrap();
            assert_eq!(same, s.sigma);
        }
    }

    #[test]
    fn tiny_run_conserves_mass_and_is_deterministic() {
        let sc = test_case_1();
        let p = Problem::from_scenario(&sc, 6, 2).unwrap();
        let config = SolverConfig {
            max_iters: 30,
            record_every: 5,
            ..SolverConfig::default()
        };
        let a = solve(&p, &config).unwrap();
        let b = solve(&p, &config).unwrap();
        assert_eq!(a.state, b.state);
        let strip = |h: &[Record]| h.iter().map(|r| Record { seconds: 0.0, ..*r }).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        assert!(dual_feasible(&a.state.sigma));
        let last = a.history.last().unwrap();
        assert!(last.iter <= 30);
        assert!((last.mass_max - last.mass_min) / last.mass_max < 1e-2);
        // the primal-dual objective pairs up with the terminal term
        let m = a.state.density(&p).unwrap();
        assert!(inner(&p.geom, &m, &m).unwrap() > 0.0);
    }

    #[test]
    fn budget_stop_and_records() {
        let sc = test_case_1();
        let p = Problem::from_scenario(&sc, 4, 2).unwrap();
        let config = SolverConfig {
            max_iters: 7,
            record_every: 3,
            stop_hjb: 1e-30,
            ..SolverConfig::default()
        };
        let mut seen = Vec::new();
        let rep = solve_with_observer(&p, &config, |v| seen.push(v.record.iter)).unwrap();
        assert_eq!(rep.stop, StopReason::Budget);
        assert_eq!(seen, vec![1, 3, 6, 7]);
        assert_eq!(rep.history.len(), 4);
        assert!(SolverConfig { r: 0.0, ..config.clone() }.validate().is_err());
        assert!(SolverConfig { record_every: 0, ..config }.validate().is_err());
    }
}
