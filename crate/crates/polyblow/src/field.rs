//! Scalar fields on symmetric uniform grids.
//!
//! The grid always contains y = 0 as an exact node and is exactly
//! antisymmetric: y_i = (i - c) h with c = (n-1)/2, h = l/c. Everything
//! downstream (parity checks, mode projections, boundary clamping) leans on
//! that exactness.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    l: f64,
    values: Vec<f64>,
}

impl Field {
    pub fn new(l: f64, values: Vec<f64>) -> Result<Self> {
        if !l.is_finite() || l <= 0.0 {
            return Err(Error::Config(format!(
                "grid half width must be positive and finite, got {l}"
            )));
        }
        let n = values.len();
        if n < 3 || n % 2 == 0 {
            return Err(Error::Config(format!(
                "grid needs an odd point count >= 3 so y = 0 is a node, got {n}"
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("field value {bad} is not finite")));
        }
        Ok(Self { l, values })
    }

    pub fn zeros(l: f64, n: usize) -> Result<Self> {
        Self::new(l, vec![0.0; n])
    }

    pub fn sample(l: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut out = Self::zeros(l, n)?;
        for i in 0..n {
            out.values[i] = f(out.y(i));
        }
        if let Some(bad) = out.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("sampled value {bad} is not finite")));
        }
        Ok(out)
    }

    pub fn half_width(&self) -> f64 {
        self.l
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid spacing h = 2l/(n-1).
    pub fn spacing(&self) -> f64 {
        self.l / self.center() as f64
    }

    /// Index of y = 0.
    pub fn center(&self) -> usize {
        (self.values.len() - 1) / 2
    }

    /// y_i = (i - c) h, exactly antisymmetric about the center index.
    pub fn y(&self, i: usize) -> f64 {
        (i as f64 - self.center() as f64) * self.spacing()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Largest spacing that resolves the profile's slow scale s^(1/2m) up to
    /// time s_end: h <= l / (20 s_end^(1/2m)).
    pub fn resolution_limit(l: f64, m: u32, s_end: f64) -> f64 {
        l / (20.0 * s_end.powf(1.0 / (2.0 * m as f64)))
    }
}
