//! Congestion Hamiltonian and its dual integrand.
//!
//! The discrete Hamiltonian is
//!
//! ```text
//! H_h(x, m, p) = -m^{-α} ((p1⁻)² + (p2⁺)² + (p3⁻)² + (p4⁺)²)^{β/2} + ℓ(x, m)
//! ```
//!
//! with the congestion cost `ℓ(x, m) = λ(x) m^{q-1}`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{ChannelMask, NodeClass};

#[inline]
pub fn pos(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

/// `G = (p1⁻)² + (p2⁺)² + (p3⁻)² + (p4⁺)²`
#[inline]
pub fn monotone_norm2(p: &[f64; 4]) -> f64 {
    let (a, b, c, d) = (neg(p[0]), pos(p[1]), neg(p[2]), pos(p[3]));
    a * a + b * b + c * c + d * d
}

/// Cost parameters shared by every node.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub alpha: f64,
    pub beta: f64,
    /// `λ` in `ℓ = λ m^{q-1}`, used where no coefficient field is set
    pub ell_coeff: f64,
    /// `q` in `ℓ = λ m^{q-1}`
    pub ell_exponent: f64,
    /// optional per-node `λ(x)`, indexed like the geometry's nodes
    pub coeff_field: Option<Arc<Vec<f64>>>,
    /// viscosity; only `0` is supported
    pub nu: f64,
}

impl CostModel {
    /// `ℓ(x, m) = coeff · m`.
    pub fn linear(alpha: f64, beta: f64, coeff: f64) -> Result<Self> {
        let c = CostModel {
            alpha,
            beta,
            ell_coeff: coeff,
            ell_exponent: 2.0,
            coeff_field: None,
            nu: 0.0,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in [0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.beta > 1.0 && self.beta <= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must lie in (1, 2], got {}",
                self.beta
            )));
        }
        if !(self.ell_coeff > 0.0 && self.ell_coeff.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "congestion coefficient must be positive, got {}",
                self.ell_coeff
            )));
        }
        if !(self.ell_exponent > 1.0 && self.ell_exponent.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "congestion exponent must exceed 1, got {}",
                self.ell_exponent
            )));
        }
        if let Some(field) = &self.coeff_field {
            if let Some(bad) = field.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidParameter(format!(
                    "congestion coefficient field must be positive, found {bad}"
                )));
            }
        }
        if self.nu != 0.0 {
            return Err(Error::InvalidParameter(format!(
                "only the first-order case nu = 0 is supported, got nu = {}",
                self.nu
            )));
        }
        let q_star = self.ell_exponent / (self.ell_exponent - 1.0);
        if self.beta < q_star {
            log::warn!(
                "beta = {} is below the conjugate exponent {q_star:.3} of the congestion exponent; \
                 the existence theory does not cover this case",
                self.beta
            );
        }
        Ok(())
    }

    pub fn beta_star(&self) -> f64 {
        self.beta / (self.beta - 1.0)
    }

    /// The cost restricted to one node.
    #[inline]
    pub fn local(&self, node: usize) -> LocalCost {
        let lambda = match &self.coeff_field {
            Some(f) => f[node],
            None => self.ell_coeff,
        };
        LocalCost {
            alpha: self.alpha,
            beta: self.beta,
            lambda,
            q: self.ell_exponent,
        }
    }
}

/// Cost parameters with the congestion coefficient resolved at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalCost {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub q: f64,
}

impl LocalCost {
    pub fn beta_star(&self) -> f64 {
        self.beta / (self.beta - 1.0)
    }

    /// Exponent `(β* - 1)(1 - α)` of `m` in the denominator of the dual integrand.
    pub fn kappa(&self) -> f64 {
        (self.beta_star() - 1.0) * (1.0 - self.alpha)
    }

    /// `ℓ(m)`, with `ℓ(0) = 0`.
    #[inline]
    pub fn ell(&self, m: f64) -> f64 {
        if m <= 0.0 {
            0.0
        } else {
            self.lambda * m.powf(self.q - 1.0)
        }
    }

    /// `m ∂ℓ/∂m`, with value `0` at `m = 0`.
    #[inline]
    pub fn m_ell_dm(&self, m: f64) -> f64 {
        if m <= 0.0 {
            0.0
        } else {
            self.lambda * (self.q - 1.0) * m.powf(self.q - 1.0)
        }
    }

    #[inline]
    pub fn ell_dm(&self, m: f64) -> f64 {
        self.lambda * (self.q - 1.0) * m.powf(self.q - 2.0)
    }

    fn check_m(m: f64) -> Result<()> {
        if m > 0.0 {
            Ok(())
        } else {
            Err(Error::NonPositiveDensity(m))
        }
    }

    pub fn h_discrete(&self, m: f64, p: &[f64; 4]) -> Result<f64> {
        Self::check_m(m)?;
        let g = monotone_norm2(p);
        Ok(-m.powf(-self.alpha) * g.powf(self.beta / 2.0) + self.ell(m))
    }

    /// `(∂H_h/∂p1, .., ∂H_h/∂p4)`; zero when every monotone part vanishes.
    pub fn grad_p(&self, m: f64, p: &[f64; 4]) -> Result<[f64; 4]> {
        Self::check_m(m)?;
        let g = monotone_norm2(p);
        if g == 0.0 {
            return Ok([0.0; 4]);
        }
        let s = self.beta * m.powf(-self.alpha) * g.powf(self.beta / 2.0 - 1.0);
        Ok([s * neg(p[0]), -s * pos(p[1]), s * neg(p[2]), -s * pos(p[3])])
    }

    /// `∂H_h/∂m`.
    pub fn dm(&self, m: f64, p: &[f64; 4]) -> Result<f64> {
        Self::check_m(m)?;
        let g = monotone_norm2(p);
        let kinetic = if g == 0.0 {
            0.0
        } else {
            self.alpha * m.powf(-self.alpha - 1.0) * g.powf(self.beta / 2.0)
        };
        Ok(kinetic + self.ell_dm(m))
    }

    /// Hamiltonian at a node of a state-constrained region: the monotone
    /// parts of the differences that would leave the region are dropped.
    pub fn h_boundary(&self, class: NodeClass, m: f64, p: &[f64; 4], mask: ChannelMask) -> Result<f64> {
        if matches!(class, NodeClass::Interior | NodeClass::Excluded) {
            return Err(Error::InvalidParameter(format!(
                "boundary Hamiltonian requested at a node of class {class:?}"
            )));
        }
        self.h_discrete(m, &masked(p, mask))
    }

    /// Dual integrand `L~_h(m, y, z, y~, z~)`; `+∞` outside its domain.
    pub fn l_tilde(&self, s: &[f64; 5]) -> f64 {
        let [m, y, z, yt, zt] = *s;
        if m == 0.0 && y == 0.0 && z == 0.0 && yt == 0.0 && zt == 0.0 {
            return 0.0;
        }
        if !(m > 0.0 && y >= 0.0 && z <= 0.0 && yt >= 0.0 && zt <= 0.0) {
            return f64::INFINITY;
        }
        let bs = self.beta_star();
        let flux2 = y * y + z * z + yt * yt + zt * zt;
        (self.beta - 1.0) * self.beta.powf(-bs) * flux2.powf(bs / 2.0) / m.powf(self.kappa()) + m * self.ell(m)
    }
}

/// `p` with the differences missing from `mask` replaced by `0`.
#[inline]
pub fn masked(p: &[f64; 4], mask: ChannelMask) -> [f64; 4] {
    std::array::from_fn(|k| if mask.has_channel(k + 1) { p[k] } else { 0.0 })
}
