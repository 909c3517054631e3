//! Residuals used to monitor convergence: the discrete HJB residual, the
//! transport operator and Kolmogorov residual, the primal gap and mass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Dir, Geometry};
use crate::model::CostModel;
use crate::operators::{lambda_apply, norm5, one_sided, ScalarField, Stacked5Field};

/// Densities `m^0 .. m^{NT}`: `m~0` on the first slice, the `m` channel of
/// `σ` on the others.
pub fn density_field(geom: &Geometry, sigma: &Stacked5Field, m0: &[f64]) -> Result<ScalarField> {
    let nodes = geom.n_nodes();
    if m0.len() != nodes || sigma.nodes() != nodes || sigma.nt() != geom.nt() {
        return Err(Error::ShapeMismatch {
            expected: nodes,
            got: m0.len(),
        });
    }
    let mut m = ScalarField::on(geom);
    m.slice_mut(0).copy_from_slice(m0);
    for n in 1..=geom.nt() {
        for (p, v) in m.slice_mut(n).iter_mut().enumerate() {
            *v = sigma.at(n, p)[0];
        }
    }
    Ok(m)
}

fn check(geom: &Geometry, f: &ScalarField, slices: usize) -> Result<()> {
    if f.nodes() != geom.n_nodes() || f.slices() != slices {
        return Err(Error::ShapeMismatch {
            expected: slices * geom.n_nodes(),
            got: f.len(),
        });
    }
    Ok(())
}

/// `w^n = (φ^{n+1} - φ^n)/Δt + H_h(m^{n+1}, ∇_h φ^n) + m^{n+1} ∂_m H_h(m^{n+1}, ∇_h φ^n)`
/// for `n = 0..NT`, and `w^n = 0` where `m^{n+1} = 0`. Differences that
/// would leave a state-constrained region are dropped, which turns `H_h`
/// into the boundary Hamiltonian at boundary nodes.
pub fn hjb_residual(geom: &Geometry, phi: &ScalarField, m: &ScalarField, cost: &CostModel) -> Result<ScalarField> {
    check(geom, phi, geom.nt() + 1)?;
    check(geom, m, geom.nt() + 1)?;
    let lam = lambda_apply(geom, phi)?;
    let nodes = geom.n_nodes();
    let mut w = ScalarField::zeros(geom.nt(), nodes);
    w.as_mut_slice()
        .par_chunks_mut(nodes)
        .enumerate()
        .try_for_each(|(n, chunk)| -> Result<()> {
            for (p, out) in chunk.iter_mut().enumerate() {
                let mm = m.get(n + 1, p);
                if mm <= 0.0 {
                    *out = 0.0;
                    continue;
                }
                let l = lam.at(n + 1, p);
                let grad = [l[1], l[2], l[3], l[4]];
                let c = cost.local(p);
                *out = l[0] + c.h_discrete(mm, &grad)? + mm * c.dm(mm, &grad)?;
            }
            Ok(())
        })?;
    Ok(w)
}

/// `(sqrt(h²Δt Σ w²), sqrt(h²Δt Σ m^{n+1} w²))`.
pub fn hjb_norms(geom: &Geometry, w: &ScalarField, m: &ScalarField) -> (f64, f64) {
    let weight = geom.h() * geom.h() * geom.dt();
    let nodes = geom.n_nodes();
    let mut plain = 0.0;
    let mut weighted = 0.0;
    for n in 0..w.slices() {
        let ws = w.slice(n);
        let ms = &m.as_slice()[(n + 1) * nodes..(n + 2) * nodes];
        plain += ws.iter().map(|v| v * v).sum::<f64>();
        weighted += ws.iter().zip(ms).map(|(v, mm)| mm.max(0.0) * v * v).sum::<f64>();
    }
    ((weight * plain).sqrt(), (weight * weighted).sqrt())
}

/// `m_p ∇_q H_h(m~_p, ∇_h u)_p` at every node (zero where `m_p = 0`).
fn weighted_gradients(geom: &Geometry, u: &[f64], m: &[f64], mt: &[f64], cost: &CostModel) -> Result<Vec<[f64; 4]>> {
    let inv_h = 1.0 / geom.h();
    (0..geom.n_nodes())
        .into_par_iter()
        .map(|p| {
            if m[p] == 0.0 {
                return Ok([0.0; 4]);
            }
            let grad = one_sided(geom, u, p, inv_h);
            let g = cost.local(p).grad_p(mt[p], &grad)?;
            Ok(std::array::from_fn(|k| m[p] * g[k]))
        })
        .collect()
}

/// Transport operator `𝒯(u, m, m~)`: the conservative stencil characterized by
/// `h² Σ 𝒯_p w_p = -h² Σ m_p ∇_q H_h(m~_p, ∇_h u)·[∇_h w]_p` for every `w`.
pub fn transport_operator(geom: &Geometry, u: &[f64], m: &[f64], mt: &[f64], cost: &CostModel) -> Result<Vec<f64>> {
    let nodes = geom.n_nodes();
    for len in [u.len(), m.len(), mt.len()] {
        if len != nodes {
            return Err(Error::ShapeMismatch {
                expected: nodes,
                got: len,
            });
        }
    }
    let f = weighted_gradients(geom, u, m, mt, cost)?;
    let inv_h = 1.0 / geom.h();
    Ok((0..nodes)
        .map(|p| {
            let nb = geom.neighbors(p);
            let mut acc = f[p][0] - f[p][1] + f[p][2] - f[p][3];
            if let Some(w) = nb[Dir::West as usize] {
                acc -= f[w][0];
            }
            if let Some(e) = nb[Dir::East as usize] {
                acc += f[e][1];
            }
            if let Some(s) = nb[Dir::South as usize] {
                acc -= f[s][2];
            }
            if let Some(n) = nb[Dir::North as usize] {
                acc += f[n][3];
            }
            acc * inv_h
        })
        .collect())
}

/// `(m^{n+1} - m^n)/Δt + 𝒯(u^n, m^{n+1}, m^{n+1})` for `n = 0..NT`.
pub fn kolmogorov_residual(geom: &Geometry, u: &ScalarField, m: &ScalarField, cost: &CostModel) -> Result<ScalarField> {
    check(geom, u, geom.nt() + 1)?;
    check(geom, m, geom.nt() + 1)?;
    let nodes = geom.n_nodes();
    let dt = geom.dt();
    let mut out = ScalarField::zeros(geom.nt(), nodes);
    for n in 0..geom.nt() {
        let next = m.slice(n + 1);
        let t = transport_operator(geom, u.slice(n), next, next, cost)?;
        for (p, o) in out.slice_mut(n).iter_mut().enumerate() {
            *o = (next[p] - m.get(n, p)) / dt + t[p];
        }
    }
    Ok(out)
}

/// `h² Σ_{ij} m^n_{ij}`.
pub fn mass(geom: &Geometry, m: &ScalarField, n: usize) -> f64 {
    geom.h() * geom.h() * m.slice(n).iter().sum::<f64>()
}

/// Whether every node of `σ` lies in the domain of the dual integrand:
/// `m ≥ 0`, `y, y~ ≥ 0`, `z, z~ ≤ 0`, and all fluxes zero where `m = 0`.
pub fn dual_feasible(sigma: &Stacked5Field) -> bool {
    sigma.as_slice().iter().all(|s| {
        let signs = s[0] >= 0.0 && s[1] >= 0.0 && s[2] <= 0.0 && s[3] >= 0.0 && s[4] <= 0.0;
        signs && (s[0] > 0.0 || s[1..].iter().all(|v| *v == 0.0))
    })
}

/// Summary of the residuals at one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub hjb_l2: f64,
    pub hjb_weighted: f64,
    pub kolmogorov_l2: f64,
    pub gap: f64,
    pub mass_by_slice: Vec<f64>,
}

pub fn residuals(
    geom: &Geometry,
    phi: &ScalarField,
    q: &Stacked5Field,
    sigma: &Stacked5Field,
    m0: &[f64],
    cost: &CostModel,
) -> Result<ResidualSet> {
    let m = density_field(geom, sigma, m0)?;
    let w = hjb_residual(geom, phi, &m, cost)?;
    let (hjb_l2, hjb_weighted) = hjb_norms(geom, &w, &m);
    let k = kolmogorov_residual(geom, phi, &m, cost)?;
    let kolmogorov_l2 = crate::operators::norm(geom, &k);
    let gap = norm5(geom, &lambda_apply(geom, phi)?.sub(q)?);
    let mass_by_slice = (0..=geom.nt()).map(|n| mass(geom, &m, n)).collect();
    Ok(ResidualSet {
        hjb_l2,
        hjb_weighted,
        kolmogorov_l2,
        gap,
        mass_by_slice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;
    use crate::operators::fp_residual;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cost() -> CostModel {
        CostModel::linear(0.4, 2.0, 0.3).unwrap()
    }

    fn geometries() -> Vec<Geometry> {
        vec![
            Geometry::periodic(5, 3, 1.0).unwrap(),
            Geometry::unit_box(10, 3, 1.0, vec![Rect::square(0.4, 0.6)]).unwrap(),
        ]
    }

    #[test]
    fn hjb_vanishes_without_density() {
        let g = Geometry::periodic(4, 3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = ScalarField::from_fn(&g, |_, _| rng.gen_range(-1.0..1.0));
        let m = ScalarField::on(&g);
        let w = hjb_residual(&g, &phi, &m, &cost()).unwrap();
        assert!(w.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hjb_constant_potential() {
        let g = Geometry::unit_box(4, 3, 1.0, vec![]).unwrap();
        let phi = ScalarField::from_fn(&g, |_, _| 0.7);
        let m = ScalarField::from_fn(&g, |_, _| 1.0);
        let w = hjb_residual(&g, &phi, &m, &cost()).unwrap();
        assert!(w.as_slice().iter().all(|v| (v - 0.6).abs() < 1e-14));
        let (l2, weighted) = hjb_norms(&g, &w, &m);
        // 25 nodes of weight h² = 1/16 over a unit horizon
        assert!((l2 - 0.75).abs() < 1e-12 && (weighted - 0.75).abs() < 1e-12);
    }

    /// Smooth data on the torus: the discrete residual approaches
    /// `∂_t φ - |∇φ|²/m^α + ℓ + α|∇φ|²/m^α + m ℓ'` at first order.
    #[test]
    fn hjb_is_consistent_under_refinement() {
        let c = cost();
        let alpha = c.alpha;
        let lambda = c.ell_coeff;
        let phi_fn = |t: f64, x: f64, y: f64| (2.0 * PI * x).sin() * (2.0 * PI * y).cos() * (1.0 + t);
        let m_fn = |t: f64, x: f64, y: f64| 1.5 + 0.5 * (2.0 * PI * (x + y)).cos() * (1.0 - 0.3 * t);
        let exact = |t: f64, x: f64, y: f64| {
            let dt_phi = (2.0 * PI * x).sin() * (2.0 * PI * y).cos();
            let px = 2.0 * PI * (2.0 * PI * x).cos() * (2.0 * PI * y).cos() * (1.0 + t);
            let py = -2.0 * PI * (2.0 * PI * x).sin() * (2.0 * PI * y).sin() * (1.0 + t);
            let m = m_fn(t, x, y);
            let grad2 = px * px + py * py;
            dt_phi - grad2 / m.powf(alpha) + lambda * m + alpha * grad2 / m.powf(alpha) + lambda * m
        };
        let mut errors = Vec::new();
        for nh in [16usize, 32, 64] {
            let g = Geometry::periodic(nh, nh, 1.0).unwrap();
            let dt = g.dt();
            let phi = ScalarField::from_fn(&g, |n, p| {
                let (x, y) = g.position(p);
                phi_fn(n as f64 * dt, x, y)
            });
            let m = ScalarField::from_fn(&g, |n, p| {
                let (x, y) = g.position(p);
                m_fn(n as f64 * dt, x, y)
            });
            let w = hjb_residual(&g, &phi, &m, &c).unwrap();
            let mut err: f64 = 0.0;
            for n in 0..g.nt() {
                for p in 0..g.n_nodes() {
                    let (x, y) = g.position(p);
                    err = err.max((w.get(n, p) - exact(n as f64 * dt, x, y)).abs());
                }
            }
            errors.push(err);
        }
        for pair in errors.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!(ratio > 1.7, "{errors:?}");
        }
    }

    #[test]
    fn transport_of_constant_potential_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in geometries() {
            let n = g.n_nodes();
            let u = vec![3.0; n];
            let m: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
            let t = transport_operator(&g, &u, &m, &m, &cost()).unwrap();
            assert!(t.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn transport_weak_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cost();
        for g in geometries() {
            let n = g.n_nodes();
            let h = g.h();
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
            let mt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
            let t = transport_operator(&g, &u, &m, &mt, &c).unwrap();
            for _ in 0..10 {
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let lhs: f64 = h * h * t.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let mut rhs = 0.0;
                for p in 0..n {
                    let gq = c.local(p).grad_p(mt[p], &one_sided(&g, &u, p, 1.0 / h)).unwrap();
                    let gw = one_sided(&g, &w, p, 1.0 / h);
                    rhs -= h * h * m[p] * (0..4).map(|k| gq[k] * gw[k]).sum::<f64>();
                }
                assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
            }
            if g.obstacles().is_empty() {
                assert!(t.iter().sum::<f64>().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kolmogorov_residual_of_stationary_state() {
        let g = Geometry::periodic(4, 3, 1.0).unwrap();
        let u = ScalarField::from_fn(&g, |_, _| 1.0);
        let m = ScalarField::from_fn(&g, |_, _| 2.0);
        let k = kolmogorov_residual(&g, &u, &m, &cost()).unwrap();
        assert!(k.as_slice().iter().all(|v| *v == 0.0));
    }

    /// Builds densities backwards from `m^{NT}` so that the discrete Kolmogorov
    /// equation holds, and the dual `σ` whose fluxes are `m ∇_q H_h`.
    #[test]
    fn kolmogorov_fixed_point_matches_continuity_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cost();
        for g in [
            Geometry::periodic(4, 3, 1.0).unwrap(),
            Geometry::unit_box(6, 3, 1.0, vec![Rect::square(1.0 / 3.0, 2.0 / 3.0)]).unwrap(),
        ] {
            let nodes = g.n_nodes();
            let nt = g.nt();
            let u = ScalarField::from_fn(&g, |_, _| rng.gen_range(-0.005..0.005));
            let mut m = ScalarField::on(&g);
            for p in 0..nodes {
                m.set(nt, p, rng.gen_range(1.0..2.0));
            }
            for n in (0..nt).rev() {
                let next = m.slice(n + 1).to_vec();
                let t = transport_operator(&g, u.slice(n), &next, &next, &c).unwrap();
                for p in 0..nodes {
                    m.set(n, p, next[p] + g.dt() * t[p]);
                }
            }
            assert!(m.as_slice().iter().all(|v| *v > 0.0));
            let k = kolmogorov_residual(&g, &u, &m, &c).unwrap();
            assert!(k.as_slice().iter().all(|v| v.abs() < 1e-10));

            let sigma = Stacked5Field::from_fn(&g, |n, p| {
                let mm = m.get(n, p);
                let grad = one_sided(&g, u.slice(n - 1), p, 1.0 / g.h());
                let gq = c.local(p).grad_p(mm, &grad).unwrap();
                [mm, mm * gq[0], mm * gq[1], mm * gq[2], mm * gq[3]]
            });
            assert!(dual_feasible(&sigma));
            let res = fp_residual(&g, &sigma, m.slice(0)).unwrap();
            assert!(res.as_slice().iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn kolmogorov_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cost();
        for g in geometries() {
            let u = ScalarField::from_fn(&g, |_, _| rng.gen_range(-1.0..1.0));
            let m = ScalarField::from_fn(&g, |_, _| rng.gen_range(0.1..2.0));
            let k = kolmogorov_residual(&g, &u, &m, &c).unwrap();
            let h = g.h();
            for n in 0..g.nt() {
                for p in 0..g.n_nodes() {
                    let (i, j) = g.coords(p);
                    let (i, j) = (i as i64, j as i64);
                    // m·∂H/∂q_k at grid position (a, b), zero off the admissible set
                    let flux = |a: i64, b: i64, k: usize| -> f64 {
                        match g.node_index(a, b) {
                            None => 0.0,
                            Some(x) => {
                                let grad = one_sided(&g, u.slice(n), x, 1.0 / h);
                                let mm = m.get(n + 1, x);
                                mm * c.local(x).grad_p(mm, &grad).unwrap()[k]
                            }
                        }
                    };
                    let mask = g.mask(p);
                    let mut t = flux(i, j, 0) - flux(i, j, 1) + flux(i, j, 2) - flux(i, j, 3);
                    if mask.has(Dir::West) {
                        t -= flux(i - 1, j, 0);
                    }
                    if mask.has(Dir::East) {
                        t += flux(i + 1, j, 1);
                    }
                    if mask.has(Dir::South) {
                        t -= flux(i, j - 1, 2);
                    }
                    if mask.has(Dir::North) {
                        t += flux(i, j + 1, 3);
                    }
                    let expected = (m.get(n + 1, p) - m.get(n, p)) / g.dt() + t / h;
                    assert!((k.get(n, p) - expected).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn mass_examples() {
        let g = Geometry::periodic(8, 2, 1.0).unwrap();
        let one = ScalarField::from_fn(&g, |_, _| 1.0);
        assert!((mass(&g, &one, 1) - 1.0).abs() < 1e-14);
        let b = Geometry::unit_box(10, 2, 1.0, vec![Rect::square(0.4, 0.6)]).unwrap();
        let one = ScalarField::from_fn(&b, |_, _| 1.0);
        // 121 grid points minus the single excluded one
        assert!((mass(&b, &one, 0) - 120.0 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn feasibility_detects_violations() {
        let g = Geometry::periodic(3, 2, 1.0).unwrap();
        let mut s = Stacked5Field::on(&g);
        assert!(dual_feasible(&s));
        s.at_mut(1, 0)[1] = 0.5;
        assert!(!dual_feasible(&s));
        s.at_mut(1, 0)[0] = 1.0;
        assert!(dual_feasible(&s));
        s.at_mut(2, 1)[0] = -1e-3;
        assert!(!dual_feasible(&s));
    }
}
