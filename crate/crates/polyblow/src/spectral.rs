//! Polynomial eigenfunctions of the rescaled linear flow.
//!
//! The drift operator L = (-1)^(m+1) d^{2m}/dy^{2m} - (y/2m) d/dy + 1 has
//! polynomial eigenfunctions psi_k of degree k with eigenvalues
//! lambda_k = 1 - k/(2m):
//!
//!   psi_k(y) = (1/sqrt(k!)) sum_j ((-1)^(jm) / j!) d^{2jm}/dy^{2jm} [y^k],
//!
//! a generalized Hermite family: only powers y^(k - 2jm) appear, so psi_k
//! has parity (-1)^k and consecutive degrees within one residue class mod
//! 2m never mix. Coefficients are integer multiples of 1/sqrt(k!) and are
//! built in exact i128 arithmetic (k <= 32 keeps every factorial in range).

use crate::constants::K_MAX;
use crate::error::{Error, Result};
use crate::num::{factorial_i128, falling_i128};

/// Eigenvalue of mode k: lambda_k = 1 - k/(2m).
pub fn eigenvalue(m: u32, k: usize) -> f64 {
    1.0 - k as f64 / (2.0 * m as f64)
}

/// A polynomial eigenfunction, dense coefficients in ascending powers.
#[derive(Clone, Debug)]
pub struct EigenPolynomial {
    pub k: usize,
    /// coeffs[r] multiplies y^r; length k + 1.
    pub coeffs: Vec<f64>,
}

/// Integer coefficient table of sqrt(k!) * psi_k: entry r multiplies y^r.
/// Exact for k <= 32; used where inner products must cancel exactly.
pub(crate) fn eigenfunction_int(m: u32, k: usize) -> Result<Vec<i128>> {
    if k > K_MAX {
        return Err(Error::ModeOutOfRange { k, max: K_MAX });
    }
    let mut coeffs = vec![0i128; k + 1];
    let step = 2 * m as usize;
    let mut j = 0usize;
    while step * j <= k {
        let r = k - step * j;
        // k!/(j!(k-2jm)!) = falling(k, 2jm)/j!, an exact integer.
        let ff = falling_i128(k as u32, (step * j) as u32).expect("k <= 32 cannot overflow");
        let jf = factorial_i128(j as u32);
        debug_assert_eq!(ff % jf, 0);
        let mag = ff / jf;
        let sign = if (j * m as usize) % 2 == 0 { 1 } else { -1 };
        coeffs[r] = sign * mag;
        j += 1;
    }
    Ok(coeffs)
}

/// Eigenfunction psi_k for the order-2m operator.
pub fn eigenfunction(m: u32, k: usize) -> Result<EigenPolynomial> {
    let ints = eigenfunction_int(m, k)?;
    let scale = 1.0 / (factorial_i128(k as u32) as f64).sqrt();
    let coeffs = ints.iter().map(|&c| c as f64 * scale).collect();
    Ok(EigenPolynomial { k, coeffs })
}

/// Evaluate a dense polynomial (ascending coefficients) by Horner.
pub fn eval_poly(coeffs: &[f64], y: f64) -> f64 {
    let mut v = 0.0f64;
    for &c in coeffs.iter().rev() {
        v = v.mul_add(y, c);
    }
    v
}

/// Evaluate psi_k at y.
pub fn eval(psi: &EigenPolynomial, y: f64) -> f64 {
    eval_poly(&psi.coeffs, y)
}

/// Differentiate a dense polynomial `times` times.
pub fn poly_derive(coeffs: &[f64], times: usize) -> Vec<f64> {
    let mut c = coeffs.to_vec();
    for _ in 0..times {
        if c.len() <= 1 {
            return vec![0.0];
        }
        c = c
            .iter()
            .enumerate()
            .skip(1)
            .map(|(r, &v)| r as f64 * v)
            .collect();
    }
    c
}

/// Multiply two dense polynomials.
pub fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// Expand a dense polynomial in the psi basis for the order-2m operator.
/// Returns a[k] with poly = sum_k a[k] psi_k; exact degree-by-degree
/// elimination against the unit-leading-coefficient structure.
pub fn expand_in_basis(m: u32, coeffs: &[f64]) -> Result<Vec<f64>> {
    let deg = coeffs.len().saturating_sub(1);
    if deg > K_MAX {
        return Err(Error::ModeOutOfRange {
            k: deg,
            max: K_MAX,
        });
    }
    let mut rem = coeffs.to_vec();
    let mut out = vec![0.0; deg + 1];
    for k in (0..=deg).rev() {
        // psi_k has leading coefficient 1/sqrt(k!).
        let a = rem[k] * (factorial_i128(k as u32) as f64).sqrt();
        if a != 0.0 {
            out[k] = a;
            let psi = eigenfunction(m, k)?;
            for r in 0..=k {
                rem[r] -= a * psi.coeffs[r];
            }
        }
    }
    Ok(out)
}

/// Stretched-exponential weight exp(-rate |y|^(2m/(2m-1))) matching the
/// decay class of the fundamental solution.
#[derive(Clone, Copy, Debug)]
pub struct WeightSpec {
    pub rate: f64,
    pub exponent: f64,
}

impl WeightSpec {
    pub fn new(m: u32, rate: f64) -> Self {
        let tm = 2.0 * m as f64;
        Self {
            rate,
            exponent: tm / (tm - 1.0),
        }
    }

    pub fn eval(&self, y: f64) -> f64 {
        (-self.rate * y.abs().powf(self.exponent)).exp()
    }
}
