//! Closed-form constants of the blowup profile family for
//! d/dt u = -(-Lap)^m u + u|u|^(p-1) in one space dimension, m odd.
//!
//! In similarity variables y = x (T-t)^(-1/2m), s = -log(T-t),
//! w(y, s) = (T-t)^(1/(p-1)) u(x, t), the flat equilibrium is
//! kappa = (p-1)^(-1/(p-1)) and the slowly collapsing profile is
//!
//!   w(y, s) ~ Phi(y s^(-1/2m)) + shift/s,
//!   Phi(z) = kappa (1 + curv * z^(2m))^(-1/(p-1)).
//!
//! `curv` and `shift` are fixed by solvability of the neutral-mode flow:
//! with mu_bar = <psi_{2m}^2, psi*_{2m}> (the self-interaction projection
//! of the degree-2m eigenfunction),
//!
//!   mu_bar = (-1)^(m+1) sqrt((2m)!) ((4m)!/((2m)!)^2 - 2),
//!   curv   = 2 (p-1) / (p mu_bar sqrt((2m)!)),
//!   shift  = (-1)^(m+1) 2 kappa sqrt((2m)!) / (p mu_bar)
//!          = (2m)! kappa curv / (p-1).
//!
//! All factorial ratios are evaluated in exact integer arithmetic before
//! the single conversion to f64.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::num::{binomial_i128, factorial_i128, Accum};
use crate::spectral;

/// Largest mode degree any table or basis computation supports.
/// 32! is the largest factorial that fits in i128.
pub const K_MAX: usize = 32;

/// Model parameters and every derived constant the pipeline needs.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ModelParams {
    /// Half the derivative order: the operator is -(-Lap)^m.
    pub m: u32,
    /// Nonlinearity exponent, p > 1.
    pub p: f64,
    /// Flat equilibrium kappa = (p-1)^(-1/(p-1)).
    pub kappa: f64,
    /// Self-interaction projection mu_bar = <psi_{2m}^2, psi*_{2m}>.
    pub mu_bar: f64,
    /// Profile curvature coefficient (curv above). Positive for m odd.
    pub curv: f64,
    /// Subleading profile offset (shift above).
    pub shift: f64,
    /// Highest tracked mode degree M = 4m ceil(p/(p-1)).
    pub mode_cutoff: usize,
    /// Holder exponent of the nonlinear remainder: min(2, p).
    pub p_bar: f64,
}

impl ModelParams {
    /// Validate (m, p) and evaluate every constant.
    pub fn new(m: u32, p: f64) -> Result<Self> {
        if m == 0 || m % 2 == 0 {
            return Err(Error::InvalidModel(format!(
                "m = {m}: only odd m is supported; for even m the profile \
                 curvature coefficient flips sign and no bounded decreasing \
                 profile of this family exists"
            )));
        }
        if !(p > 1.0) || !p.is_finite() {
            return Err(Error::InvalidModel(format!(
                "p = {p}: need finite p > 1"
            )));
        }
        // Guarded ceiling: p/(p-1) can land a few ulps above an integer
        // (p = 1.2 gives 6.000000000000001) and must not round up to 7.
        let ratio = p / (p - 1.0);
        let mode_cutoff = 4 * m as usize * (ratio - ratio * 1e-12).ceil() as usize;
        if mode_cutoff > K_MAX {
            return Err(Error::InvalidModel(format!(
                "mode cutoff M = {mode_cutoff} exceeds supported maximum {K_MAX} \
                 (m = {m}, p = {p}: p too close to 1 or m too large)"
            )));
        }
        let kappa = (p - 1.0).powf(-1.0 / (p - 1.0));
        let sign = if m % 2 == 1 { 1.0 } else { -1.0 };
        // (4m)!/((2m)!)^2 is the central binomial C(4m, 2m), exact in i128.
        let central = binomial_i128(4 * m, 2 * m) as f64;
        let fact_2m = factorial_i128(2 * m) as f64;
        let mu_bar = sign * fact_2m.sqrt() * (central - 2.0);
        let curv = 2.0 * (p - 1.0) / (p * mu_bar * fact_2m.sqrt());
        let shift = sign * 2.0 * kappa * fact_2m.sqrt() / (p * mu_bar);
        Ok(Self {
            m,
            p,
            kappa,
            mu_bar,
            curv,
            shift,
            mode_cutoff,
            p_bar: p.min(2.0),
        })
    }

    /// Linearization eigenvalue of mode k: lambda_k = 1 - k/(2m).
    pub fn eigenvalue(&self, k: usize) -> f64 {
        spectral::eigenvalue(self.m, k)
    }

    /// Alternate closed form of `curv` with the factorial difference kept
    /// in exact integers: (-1)^(m+1) 2 (p-1) (2m)! / (p ((4m)! - 2 ((2m)!)^2)).
    /// Mathematically identical to `curv`; a different floating-point path,
    /// used to cross-check the primary form.
    pub fn curv_alternate(&self) -> f64 {
        let sign = if self.m % 2 == 1 { 1.0 } else { -1.0 };
        let f2m = factorial_i128(2 * self.m);
        let denom_int = factorial_i128(4 * self.m) - 2 * f2m * f2m;
        sign * 2.0 * (self.p - 1.0) * f2m as f64 / (self.p * denom_int as f64)
    }

    /// Identity tying the offset to the curvature: shift = (2m)! kappa curv / (p-1).
    pub fn shift_from_curv(&self) -> f64 {
        factorial_i128(2 * self.m) as f64 * self.kappa * self.curv / (self.p - 1.0)
    }
}

/// Quadrature estimate of mu_bar = <psi_{2m}^2, psi*_{2m}> from a kernel
/// table, independent of the closed form. The pairing is integrated by
/// parts 2m times onto the kernel itself,
/// mu_bar = (1/sqrt((2m)!)) int d^{2m}/dy^{2m}[psi_{2m}^2](y) F(y) dy,
/// which strips the polynomial degree from 4m down to 2m; the bare
/// product's oscillatory tail would otherwise dominate the value at any
/// feasible table width for m > 1. The integral runs over Gauss-Legendre
/// panels out to the point where the fitted kernel envelope reaches
/// 1e-19, with F evaluated by the table's own quadrature rule.
pub fn mu_bar_oracle(table: &crate::kernel::KernelTable) -> Result<f64> {
    use rayon::prelude::*;
    let m = table.m;
    let k = 2 * m as usize;
    let psi = spectral::eigenfunction(m, k)?;
    let square = spectral::poly_mul(&psi.coeffs, &psi.coeffs);
    let integrand_poly = spectral::poly_derive(&square, k);
    let norm = (factorial_i128(2 * m) as f64).sqrt();

    let y_cap = (42.5 / table.decay.rate).powf(1.0 / table.decay.exponent);
    let width = 0.5;
    let panels = (y_cap / width).ceil() as usize;
    let (nodes, weights) = crate::kernel::gauss_legendre(16);
    let partials: Result<Vec<f64>> = (0..panels)
        .into_par_iter()
        .map(|pnl| {
            let a = pnl as f64 * width;
            let mut acc = Accum::new();
            for (x, w) in nodes.iter().zip(&weights) {
                let yy = a + (x + 1.0) * 0.5 * width;
                let f = table.eval_deriv(0, yy)?;
                acc.add_prod(spectral::eval_poly(&integrand_poly, yy) * f, w * 0.5 * width);
            }
            Ok(acc.value())
        })
        .collect();
    let mut total = Accum::new();
    for v in partials? {
        total.add(v);
    }
    Ok(2.0 * total.value() / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_even_or_degenerate_models() {
        assert!(ModelParams::new(2, 2.0).is_err());
        assert!(ModelParams::new(0, 2.0).is_err());
        assert!(ModelParams::new(1, 1.0).is_err());
        assert!(ModelParams::new(1, 0.5).is_err());
        assert!(ModelParams::new(1, f64::NAN).is_err());
        // m = 3, p = 1.2 gives M = 72 > 32.
        assert!(ModelParams::new(3, 1.2).is_err());
    }

    #[test]
    fn kappa_balances_the_flat_ode() {
        // kappa solves kappa^p = kappa/(p-1), i.e. (p-1) kappa^(p-1) = 1.
        for &(m, p) in &[(1, 3.0), (1, 2.0), (3, 2.0), (3, 2.5), (1, 7.0)] {
            let c = ModelParams::new(m, p).unwrap();
            assert_relative_eq!((p - 1.0) * c.kappa.powf(p - 1.0), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn cubic_one_dimensional_values() {
        let c = ModelParams::new(1, 3.0).unwrap();
        assert_relative_eq!(c.kappa, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-16);
        // mu_bar = sqrt(2!) (C(4,2) - 2) = 4 sqrt(2).
        assert_relative_eq!(c.mu_bar, 4.0 * 2.0_f64.sqrt(), epsilon = 1e-15);
        // curv = (p-1)/(4p) at m = 1, so 1/6 for p = 3.
        assert_relative_eq!(c.curv, 1.0 / 6.0, epsilon = 1e-15);
        // shift = kappa/6.
        assert_relative_eq!(c.shift, c.kappa / 6.0, epsilon = 1e-15);
        assert_relative_eq!(c.shift, 0.11785113019775793, epsilon = 1e-15);
        assert_eq!(c.mode_cutoff, 8);
        assert_eq!(c.p_bar, 2.0);
    }

    #[test]
    fn quadratic_m1_matches_quarter_law() {
        // At m = 1, curv = (p-1)/(4p) for every p.
        for &p in &[1.5, 2.0, 3.0, 5.0, 9.0] {
            let c = ModelParams::new(1, p).unwrap();
            assert_relative_eq!(c.curv, (p - 1.0) / (4.0 * p), epsilon = 1e-14);
        }
    }

    #[test]
    fn sixth_order_values() {
        let c = ModelParams::new(3, 2.0).unwrap();
        assert_relative_eq!(c.kappa, 1.0, epsilon = 1e-16);
        // mu_bar = sqrt(720) (C(12,6) - 2) = 922 sqrt(720).
        assert_relative_eq!(c.mu_bar, 922.0 * 720.0_f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(c.mu_bar, 2.4739856103057677e4, max_relative = 1e-12);
        // curv = 2 * 1 / (2 * 922 * 720) = 1/663840.
        assert_relative_eq!(c.curv, 1.0 / 663_840.0, epsilon = 1e-18);
        assert_eq!(c.mode_cutoff, 24);
        assert_eq!(c.p_bar, 2.0);
    }

    #[test]
    fn curv_forms_agree_everywhere() {
        for &m in &[1u32, 3, 5] {
            for &p in &[1.8, 2.0, 2.5, 3.0, 6.0] {
                let c = match ModelParams::new(m, p) {
                    Ok(c) => c,
                    Err(_) => continue, // cutoff too large for this (m, p)
                };
                assert_relative_eq!(c.curv, c.curv_alternate(), max_relative = 1e-14);
                assert_relative_eq!(c.shift, c.shift_from_curv(), max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn mode_cutoff_scales_with_p_near_one() {
        assert_eq!(ModelParams::new(1, 3.0).unwrap().mode_cutoff, 8);
        assert_eq!(ModelParams::new(1, 2.0).unwrap().mode_cutoff, 8);
        assert_eq!(ModelParams::new(1, 1.5).unwrap().mode_cutoff, 12);
        assert_eq!(ModelParams::new(3, 2.0).unwrap().mode_cutoff, 24);
        assert_eq!(ModelParams::new(1, 1.2).unwrap().mode_cutoff, 24);
    }

    #[test]
    fn p_bar_caps_at_two() {
        assert_eq!(ModelParams::new(1, 1.5).unwrap().p_bar, 1.5);
        assert_eq!(ModelParams::new(1, 4.0).unwrap().p_bar, 2.0);
    }

    #[test]
    fn mu_bar_oracle_matches_closed_form_m1() {
        let table = crate::kernel::KernelTable::build(&crate::kernel::TableSpec {
            m: 1,
            half_width: 12.0,
            n_y: 1201,
            j_max: 2,
            quad: None,
        })
        .unwrap();
        let mu = mu_bar_oracle(&table).unwrap();
        let exact = ModelParams::new(1, 3.0).unwrap().mu_bar;
        assert_relative_eq!(mu, exact, max_relative = 1e-8);
    }

    #[test]
    fn mu_bar_oracle_matches_closed_form_m3() {
        let table = crate::kernel::KernelTable::build(&crate::kernel::TableSpec {
            m: 3,
            half_width: 44.0,
            n_y: 2201,
            j_max: 6,
            quad: None,
        })
        .unwrap();
        let mu = mu_bar_oracle(&table).unwrap();
        let exact = ModelParams::new(3, 2.0).unwrap().mu_bar;
        assert_relative_eq!(mu, exact, max_relative = 1e-6);
    }
}
