//! Node-wise proximal step.
//!
//! At each space-time node the dual variable `σ' = (μ, η, ζ, η~, ζ~)` maximizes
//!
//! ```text
//! W(σ') = -|σ' - σ|² / (2r) + Λφ·(σ - σ') - L~_h(σ')
//! ```
//!
//! over the cone where `L~_h` is finite. The flux components are explicit
//! functions of `μ`, which leaves the scalar equation `Ξ(μ) = 0`; `Ξ` is
//! increasing, so it is solved by bisection. The primal update is then
//! `q = (σ' - σ) / r + Λφ`.

use crate::error::{Error, Result};
use crate::geometry::ChannelMask;
use crate::model::{neg, pos, LocalCost};

const BISECTION_BUDGET: usize = 400;
const DOUBLING_BUDGET: usize = 2000;

/// Data of one node's proximal problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeProxInput {
    /// current dual `(m, y, z, y~, z~)`
    pub sigma: [f64; 5],
    /// channels of `Λφ` at the node
    pub lam_phi: [f64; 5],
    pub r: f64,
    pub cost: LocalCost,
    pub mask: ChannelMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// the maximizer is the origin of the cone
    ZeroPoint,
    /// `μ*` is an interior root of `Ξ`
    InteriorRoot,
    /// `μ*` is the left end of the admissible interval; the fluxes vanish
    LeftEndpoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeProxOutput {
    pub sigma: [f64; 5],
    pub q: [f64; 5],
    pub branch: Branch,
}

/// Scalar pieces of the reduction that depend only on the cost and `r`.
#[derive(Debug, Clone, Copy)]
struct Consts {
    bs: f64,
    kappa: f64,
    /// `r β^{-β*} (1 - α)`
    chi_den: f64,
    /// `r β^{1-β*}`
    flux_coef: f64,
}

impl NodeProxInput {
    fn consts(&self) -> Consts {
        let c = &self.cost;
        let bs = c.beta_star();
        Consts {
            bs,
            kappa: c.kappa(),
            chi_den: self.r * c.beta.powf(-bs) * (1.0 - c.alpha),
            flux_coef: self.r * c.beta.powf(1.0 - bs),
        }
    }

    /// The bracket of `χ` without the power of `μ`:
    /// `μ - m + r Λ1φ + r ℓ(μ) + r μ ℓ'(μ)`. Increasing in `μ`.
    pub fn chi_factor(&self, mu: f64) -> f64 {
        mu - self.sigma[0] + self.r * self.lam_phi[0] + self.r * (self.cost.ell(mu) + self.cost.m_ell_dm(mu))
    }

    /// Shifted flux values `y - r Λ2φ, ...` restricted to the channels present.
    fn shifted(&self) -> [f64; 4] {
        std::array::from_fn(|k| {
            if self.mask.has_channel(k + 1) {
                self.sigma[k + 1] - self.r * self.lam_phi[k + 1]
            } else {
                0.0
            }
        })
    }
}

/// `χ(μ) = N(μ) μ^{(β*-1)(1-α)+1} / (r β^{-β*} (1-α))` with `N` the
/// [`NodeProxInput::chi_factor`].
pub fn chi(input: &NodeProxInput, mu: f64) -> f64 {
    chi_with(input, &input.consts(), mu)
}

fn chi_with(input: &NodeProxInput, k: &Consts, mu: f64) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    input.chi_factor(mu) * mu.powf(k.kappa + 1.0) / k.chi_den
}

/// `γ = ((y - rΛ2φ)⁺)² + ((z - rΛ3φ)⁻)² + ((y~ - rΛ4φ)⁺)² + ((z~ - rΛ5φ)⁻)²`.
pub fn gamma(input: &NodeProxInput) -> f64 {
    let s = input.shifted();
    let (a, b, c, d) = (pos(s[0]), neg(s[1]), pos(s[2]), neg(s[3]));
    a * a + b * b + c * c + d * d
}

/// `Θ(μ) = χ^{1/β*} + r β^{1-β*} μ^{-(β*-1)(1-α)} χ^{1-1/β*}`, so that
/// `Ξ = Θ² - γ`. Vanishes where `χ` does.
fn theta(input: &NodeProxInput, k: &Consts, mu: f64) -> f64 {
    let x = chi_with(input, k, mu);
    if x <= 0.0 || mu <= 0.0 {
        return 0.0;
    }
    x.powf(1.0 / k.bs) + k.flux_coef * mu.powf(-k.kappa) * x.powf(1.0 - 1.0 / k.bs)
}

/// `Ξ(μ) = Σ(μ) (1 + r β^{1-β*} μ^{-(β*-1)(1-α)} χ(μ)^{1-2/β*})² - γ`,
/// with `Σ = χ^{2/β*}`. Defined where `χ ≥ 0`; equals `-γ` where `χ = 0`.
pub fn xi(input: &NodeProxInput, mu: f64) -> Result<f64> {
    if mu < 0.0 || (mu > 0.0 && input.chi_factor(mu) < 0.0) {
        return Err(Error::InvalidParameter(format!("Ξ evaluated at μ = {mu} where χ < 0")));
    }
    let k = input.consts();
    let t = theta(input, &k, mu);
    Ok(t * t - gamma(input))
}

/// Objective `W(σ')` of the node problem; `-∞` outside the cone.
pub fn w_value(input: &NodeProxInput, s: &[f64; 5]) -> f64 {
    let lt = input.cost.l_tilde(s);
    if lt.is_infinite() {
        return f64::NEG_INFINITY;
    }
    let mut quad = 0.0;
    let mut lin = 0.0;
    for c in 0..5 {
        let d = s[c] - input.sigma[c];
        quad += d * d;
        lin += input.lam_phi[c] * (input.sigma[c] - s[c]);
    }
    -quad / (2.0 * input.r) + lin - lt
}

fn converged(lo: f64, hi: f64) -> bool {
    hi - lo <= 4.0 * f64::EPSILON * hi
}

/// Root of the increasing function `f` on `[lo, ..)`, with `f(lo) ≤ 0`;
/// the upper end is found by doubling from `start`. On convergence the
/// returned point is the end of the final bracket where `f > 0`.
///
/// The bracket is always kept. Brackets spanning several orders of magnitude
/// are split geometrically, and a bracket starting at zero is shrunk by
/// `2^{-d}` with `d` doubling, so roots near zero stay cheap. Narrow brackets
/// use Illinois-modified false position, with a plain bisection step whenever
/// two steps in a row fail to halve the bracket.
fn increasing_root(
    what: &'static str,
    mut lo: f64,
    start: f64,
    value_tol: f64,
    mut f: impl FnMut(f64) -> f64,
) -> Result<f64> {
    let mut hi = start.max(lo);
    let mut f_lo = None;
    let mut f_hi;
    let mut doublings = 0;
    loop {
        let v = f(hi);
        if v > 0.0 {
            f_hi = v;
            break;
        }
        if v.abs() <= value_tol && hi > lo {
            return Ok(hi);
        }
        lo = hi;
        f_lo = Some(v);
        hi = if hi > 0.0 { 2.0 * hi } else { 1.0 };
        doublings += 1;
        if doublings > DOUBLING_BUDGET || !hi.is_finite() {
            return Err(Error::Bisection {
                what,
                iterations: doublings,
                lo,
                hi,
            });
        }
    }
    let mut drop = 1.0_f64;
    let mut last_side = 0i8;
    let mut slow_steps = 0;
    for _ in 0..BISECTION_BUDGET {
        if converged(lo, hi) {
            return Ok(hi);
        }
        let width = hi - lo;
        let mid = if lo == 0.0 {
            let m = hi * (-drop).exp2();
            drop *= 2.0;
            m
        } else if hi > 4.0 * lo {
            lo.sqrt() * hi.sqrt()
        } else if slow_steps >= 2 {
            slow_steps = 0;
            0.5 * (lo + hi)
        } else {
            let fl = *f_lo.get_or_insert_with(|| f(lo));
            let x = (lo * f_hi - hi * fl) / (f_hi - fl);
            if x > lo && x < hi {
                x
            } else {
                0.5 * (lo + hi)
            }
        };
        if !(mid > lo && mid < hi) {
            return Ok(hi);
        }
        let v = f(mid);
        if v.abs() <= value_tol {
            return Ok(mid);
        }
        if v > 0.0 {
            hi = mid;
            f_hi = v;
            if last_side == 1 {
                if let Some(fl) = f_lo.as_mut() {
                    *fl *= 0.5;
                }
            }
            last_side = 1;
        } else {
            lo = mid;
            f_lo = Some(v);
            if last_side == -1 {
                f_hi *= 0.5;
            }
            last_side = -1;
        }
        if hi - lo > 0.5 * width {
            slow_steps += 1;
        } else {
            slow_steps = 0;
        }
    }
    if converged(lo, hi) {
        return Ok(hi);
    }
    Err(Error::Bisection {
        what,
        iterations: BISECTION_BUDGET,
        lo,
        hi,
    })
}

/// Cone point `(μ, η, ζ, η~, ζ~)` attached to a value of `μ`.
fn candidate(input: &NodeProxInput, k: &Consts, mu: f64) -> [f64; 5] {
    let s = input.shifted();
    if mu <= 0.0 {
        return [0.0; 5];
    }
    let x = chi_with(input, k, mu).max(0.0);
    let big_sigma = x.powf(2.0 / k.bs);
    let expo = k.bs / 2.0 - 1.0;
    let factor = if expo == 0.0 { 1.0 } else { big_sigma.powf(expo) };
    let den = 1.0 + k.flux_coef * mu.powf(-k.kappa) * factor;
    [
        mu,
        pos(s[0]) / den,
        -neg(s[1]) / den,
        pos(s[2]) / den,
        -neg(s[3]) / den,
    ]
}

/// Maximizes `W` at one node and returns the new dual and primal values.
pub fn solve_node(input: &NodeProxInput) -> Result<NodeProxOutput> {
    solve_node_from(input, f64::max(1.0, input.sigma[0]))
}

/// [`solve_node`] with an explicit starting point for the bracket doubling.
pub fn solve_node_from(input: &NodeProxInput, start: f64) -> Result<NodeProxOutput> {
    let k = input.consts();
    let g = gamma(input);

    // left end of the set where χ ≥ 0
    let mu_low = if input.chi_factor(0.0) >= 0.0 {
        0.0
    } else {
        increasing_root("the zero of χ", 0.0, start, 0.0, |mu| input.chi_factor(mu))?
    };

    // Θ vanishes at the left end, whichever side of the χ root was returned
    let xi_low = -g;
    let (mu_star, branch) = if xi_low > 0.0 {
        (None, Branch::ZeroPoint)
    } else if g == 0.0 {
        (Some(mu_low), Branch::LeftEndpoint)
    } else {
        let tol = 1e-15 * (1.0 + g);
        let root = increasing_root("the root of Ξ", mu_low, start.max(mu_low), tol, |mu| {
            let t = theta(input, &k, mu);
            t * t - g
        })?;
        (Some(root), Branch::InteriorRoot)
    };

    let zero = [0.0; 5];
    let (sigma, branch) = match mu_star {
        None => (zero, branch),
        Some(mu) => {
            let cand = candidate(input, &k, mu);
            if w_value(input, &cand) > w_value(input, &zero) {
                let branch = if cand == zero { Branch::ZeroPoint } else { branch };
                (cand, branch)
            } else {
                (zero, Branch::ZeroPoint)
            }
        }
    };
    let q = std::array::from_fn(|c| (sigma[c] - input.sigma[c]) / input.r + input.lam_phi[c]);
    Ok(NodeProxOutput { sigma, q, branch })
}

/// Scaled residuals of the first-order conditions of `max W` at an interior
/// cone point: the `μ` equation and, per channel, stationarity where the flux
/// is active and the sign condition where it vanishes.
pub fn first_order_residuals(input: &NodeProxInput, s: &[f64; 5]) -> [f64; 5] {
    let k = input.consts();
    let c = &input.cost;
    let r = input.r;
    let mu = s[0];
    let flux2: f64 = s[1..].iter().map(|v| v * v).sum();
    let cb = (c.beta - 1.0) * c.beta.powf(-k.bs);
    let mut out = [0.0; 5];

    // ∂W/∂μ = -(μ - m)/r - Λ1φ + κ c_β |flux|^{β*} μ^{-κ-1} - ℓ(μ) - μℓ'(μ)
    // products of tiny and huge powers are formed in log space
    let kinetic = if flux2 > 0.0 {
        k.kappa * cb * (0.5 * k.bs * flux2.ln() - (k.kappa + 1.0) * mu.ln()).exp()
    } else {
        0.0
    };
    let terms = [
        (mu - input.sigma[0]) / r,
        input.lam_phi[0],
        kinetic,
        c.ell(mu),
        c.m_ell_dm(mu),
    ];
    let scale = 1.0 + terms.iter().map(|t| t.abs()).fold(0.0, f64::max);
    out[0] = (-terms[0] - terms[1] + terms[2] - terms[3] - terms[4]) / scale;

    // ∂W/∂η = -(η - y)/r - Λ2φ - c_β β* |flux|^{β*-2} μ^{-κ} η
    let weight = if flux2 > 0.0 {
        cb * k.bs * ((0.5 * k.bs - 1.0) * flux2.ln() - k.kappa * mu.ln()).exp()
    } else {
        0.0
    };
    let signs = [1.0, -1.0, 1.0, -1.0];
    for ch in 1..5 {
        if !input.mask.has_channel(ch) {
            out[ch] = s[ch].abs();
            continue;
        }
        let grad = -(s[ch] - input.sigma[ch]) / r - input.lam_phi[ch] - weight * s[ch];
        let scale = 1.0 + (input.sigma[ch] / r).abs() + input.lam_phi[ch].abs();
        out[ch] = if s[ch] != 0.0 {
            grad.abs() / scale
        } else {
            // at a vanishing flux the gradient must push out of the cone
            (signs[ch - 1] * grad).max(0.0) / scale
        };
    }
    out
}
