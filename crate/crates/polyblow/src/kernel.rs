//! Tabulated fundamental solution of the linear flow d/dt v = -(-Lap)^m v.
//!
//! The profile of the order-2m heat kernel at unit time is the oscillatory
//! integral
//!
//!   F(y) = (1/pi) int_0^inf exp(-s^{2m}) cos(s y) ds,
//!
//! with derivatives obtained by rotating the phase a quarter turn per order:
//!
//!   F^(j)(y) = (1/pi) int_0^inf exp(-s^{2m}) s^j cos(s y + j pi/2) ds.
//!
//! For m = 1 this is the Gaussian (4 pi)^(-1/2) exp(-y^2/4). For m > 1 it
//! oscillates and decays like D exp(-d |y|^nu), nu = 2m/(2m-1), with
//! d = (2m-1) (2m)^(-2m/(2m-1)).
//!
//! Numerical standards in this module:
//! - Gauss-Legendre panels sized well below the fastest phase period, so the
//!   quadrature is spectrally accurate for every tabulated derivative order.
//! - All quadrature and grid sums run through compensated accumulation; the
//!   cos argument s*y is split hi/lo via FMA so phase error stays at one ulp
//!   even at the far edge of the table.
//! - Dual-mode rows psi*_k = ((-1)^k / sqrt(k!)) F^(k) come straight from
//!   the tabulated derivative rows.
//! - Even moments M_r = int y^r F dy follow the exact integer ladder
//!   M_r = (-1)^(m+1) 2m (r-1)!/(r-2m)! M_{r-2m} seeded by quadrature on
//!   the low moments, which keeps high-degree Gram entries exact where
//!   direct oscillatory quadrature would drown in its own noise floor.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::num::{factorial_i128, falling_i128, trapezoid, trapezoid_prod, Accum};
use crate::spectral;

/// Tail threshold for auto quadrature: integrand envelope is resolved down
/// to exp(TAIL_LOG_EPS) relative to its peak.
const TAIL_LOG_EPS: f64 = -43.4; // ln(1e-18) - 2

/// |mass - 1| beyond this aborts table construction.
pub const MASS_TOL: f64 = 1e-7;

/// Samples with |F| below this are excluded from decay fits; smaller values
/// sit at or below the oscillatory quadrature noise floor.
const FIT_FLOOR: f64 = 1e-13;

/// Gauss-Legendre panel layout on [0, s_max].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct QuadSpec {
    pub s_max: f64,
    pub panels: usize,
    pub nodes_per_panel: usize,
}

impl QuadSpec {
    /// Panel layout that resolves exp(-s^{2m}) s^{j_max} to TAIL_LOG_EPS and
    /// gives the fastest oscillation, cos(s y) at |y| = half_width, twelve
    /// nodes per period: n_s = 12 y_max s_max / (2 pi) six-node panels.
    /// At this budget every row is accurate to ~1e-11 relative or better;
    /// halving it degrades the unit-mass identity past MASS_TOL, so an
    /// underresolved table aborts instead of passing silently.
    pub fn auto(m: u32, j_max: usize, half_width: f64) -> Self {
        let tm = 2.0 * m as f64;
        let j = j_max as f64;
        // Envelope peak of s^j exp(-s^{2m}) sits at s = (j/2m)^(1/2m).
        let s_peak = if j_max == 0 { 0.0 } else { (j / tm).powf(1.0 / tm) };
        let g = |s: f64| -> f64 {
            let ln_s = if j_max == 0 { 0.0 } else { s.ln().max(0.0) * j };
            -s.powi(2 * m as i32) + ln_s - TAIL_LOG_EPS
        };
        let mut hi = (s_peak + 1.0).max(2.0);
        while g(hi) > 0.0 {
            hi *= 1.5;
        }
        let mut lo = s_peak.max(0.5);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s_max = hi;
        let omega = half_width.max(1.0);
        let n_s = (12.0 * omega * s_max / (2.0 * std::f64::consts::PI)).ceil();
        let panels = ((n_s / 6.0).ceil() as usize).clamp(4, 200_000);
        Self {
            s_max,
            panels,
            nodes_per_panel: 6,
        }
    }

    /// Total quadrature node count.
    pub fn n_s(&self) -> usize {
        self.panels * self.nodes_per_panel
    }

    /// Layout with the same s_max and panel order but a given total node
    /// budget; how configured n_s values map onto panels.
    pub fn with_total_nodes(&self, n_s: usize) -> Self {
        Self {
            s_max: self.s_max,
            panels: ((n_s + self.nodes_per_panel - 1) / self.nodes_per_panel).max(1),
            nodes_per_panel: self.nodes_per_panel,
        }
    }
}

/// Table construction request.
#[derive(Clone, Debug)]
pub struct TableSpec {
    pub m: u32,
    /// Half width of the symmetric grid; points span [-half_width, half_width].
    pub half_width: f64,
    /// Number of grid points, odd so y = 0 is a point.
    pub n_y: usize,
    /// Highest derivative row to tabulate.
    pub j_max: usize,
    /// Quadrature override; None picks QuadSpec::auto.
    pub quad: Option<QuadSpec>,
}

/// Fitted decay envelope of the kernel: |F| <= amplitude * exp(-rate |y|^exponent).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DecayFit {
    /// Fitted amplitude D of |F| ~ D |y|^(-(m-1)/(2m-1)) exp(-rate |y|^nu).
    pub amplitude: f64,
    /// Rate fitted with the exponent pinned to its theoretical value.
    pub rate: f64,
    /// Theoretical stretch exponent nu = 2m/(2m-1).
    pub exponent: f64,
    /// Exponent recovered by a free fit on the same samples, as a diagnostic.
    pub exponent_free: f64,
    /// Sharp saddle-point rate, see [`decay_rate_theory`].
    pub rate_theory: f64,
    pub points_used: usize,
}

impl DecayFit {
    /// Upper estimate of the one-sided envelope tail
    /// int_u^inf amplitude r^(-pp) exp(-rate r^nu) dr, pp the algebraic
    /// prefactor power for the table's m (see [`decay_prefactor_power`]).
    /// The leading integration-by-parts term, which bounds the integral
    /// from above; used for domain-width checks.
    pub fn tail_integral(&self, u: f64, prefactor_power: f64) -> f64 {
        if u <= 0.0 {
            return f64::INFINITY;
        }
        let nu = self.exponent;
        self.amplitude
            * u.powf(1.0 - nu - prefactor_power)
            * (-self.rate * u.powf(nu)).exp()
            / (self.rate * nu)
    }
}

/// Tabulated kernel profile and derivative rows on a symmetric grid.
#[derive(Clone, Debug)]
pub struct KernelTable {
    pub m: u32,
    pub j_max: usize,
    /// Grid points (i - c) h, c = (n-1)/2; exactly antisymmetric.
    pub y: Vec<f64>,
    /// rows[j][i] = F^(j)(y[i]).
    pub rows: Vec<Vec<f64>>,
    pub quad: QuadSpec,
    /// Trapezoid mass of row 0 over the table; should be 1.
    pub mass: f64,
    pub decay: DecayFit,
    /// Per-row envelope amplitude: sup |F^(j)| exp(+(rate/2)|y|^exponent).
    pub envelope_amp: Vec<f64>,
    nodes_s: Vec<f64>,
    weights_exp: Vec<f64>,
}

/// cos(s y + j pi/2) with the product s*y split hi/lo so the phase carries
/// ulp-level accuracy even for large arguments.
#[inline]
fn phased_cos(s: f64, y: f64, j: usize) -> f64 {
    let hi = s * y;
    let lo = s.mul_add(y, -hi);
    let (c, sn) = (hi.cos(), hi.sin());
    let c = c - lo * sn;
    let sn = sn + lo * hi.cos();
    match j & 3 {
        0 => c,
        1 => -sn,
        2 => -c,
        _ => sn,
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(t) and P'_n(t).
            let mut p0 = 1.0;
            let mut p1 = t;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * t * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (t * p1 - p0) / (t * t - 1.0);
            let dt = p1 / dp;
            t -= dt;
            if dt.abs() < 1e-15 {
                break;
            }
        }
        x[i] = t;
        w[i] = 2.0 / ((1.0 - t * t) * dp * dp);
    }
    (x, w)
}

impl KernelTable {
    pub fn build(spec: &TableSpec) -> Result<Self> {
        let m = spec.m;
        if m == 0 || m % 2 == 0 {
            return Err(Error::KernelSpec(format!("m = {m}: need odd m >= 1")));
        }
        if spec.n_y < 9 || spec.n_y % 2 == 0 {
            return Err(Error::KernelSpec(format!(
                "n_y = {}: need odd n_y >= 9",
                spec.n_y
            )));
        }
        if !(spec.half_width > 0.0) || spec.half_width > 1000.0 {
            return Err(Error::KernelSpec(format!(
                "half_width = {}: need 0 < half_width <= 1000",
                spec.half_width
            )));
        }
        if spec.j_max > crate::constants::K_MAX {
            return Err(Error::KernelSpec(format!(
                "j_max = {} exceeds {}",
                spec.j_max,
                crate::constants::K_MAX
            )));
        }
        let quad = spec
            .quad
            .unwrap_or_else(|| QuadSpec::auto(m, spec.j_max, spec.half_width));
        if quad.nodes_per_panel < 4 || quad.panels == 0 || !(quad.s_max > 0.0) {
            return Err(Error::KernelSpec(format!("bad quadrature layout {quad:?}")));
        }

        let (gx, gw) = gauss_legendre(quad.nodes_per_panel);
        let pw = quad.s_max / quad.panels as f64;
        let n_nodes = quad.panels * quad.nodes_per_panel;
        let mut nodes_s = Vec::with_capacity(n_nodes);
        let mut weights_exp = Vec::with_capacity(n_nodes);
        for p in 0..quad.panels {
            let left = pw * p as f64;
            for q in 0..quad.nodes_per_panel {
                let s = left + 0.5 * pw * (gx[q] + 1.0);
                nodes_s.push(s);
                weights_exp.push(0.5 * pw * gw[q] * (-s.powi(2 * m as i32)).exp());
            }
        }

        let n = spec.n_y;
        let c = (n - 1) as f64 / 2.0;
        let h = spec.half_width / c;
        let y: Vec<f64> = (0..n).map(|i| (i as f64 - c) * h).collect();

        // One column per grid point: all derivative rows in a single sweep
        // over the quadrature nodes, with a running power of s.
        let j_max = spec.j_max;
        let cols: Vec<Vec<f64>> = y
            .par_iter()
            .map(|&yi| {
                let mut acc = vec![Accum::new(); j_max + 1];
                let mut col = vec![0.0; j_max + 1];
                for (idx, &s) in nodes_s.iter().enumerate() {
                    let we = weights_exp[idx];
                    let hi = s * yi;
                    let lo = s.mul_add(yi, -hi);
                    let c0 = hi.cos();
                    let s0 = hi.sin();
                    let cc = c0 - lo * s0;
                    let ss = s0 + lo * c0;
                    let mut pow = 1.0;
                    for (j, a) in acc.iter_mut().enumerate() {
                        let ph = match j & 3 {
                            0 => cc,
                            1 => -ss,
                            2 => -cc,
                            _ => ss,
                        };
                        a.add_prod(we * pow, ph);
                        pow *= s;
                    }
                }
                for (j, a) in acc.iter().enumerate() {
                    col[j] = a.value() / std::f64::consts::PI;
                }
                col
            })
            .collect();
        let mut rows = vec![vec![0.0; n]; j_max + 1];
        for (i, col) in cols.iter().enumerate() {
            for (j, &v) in col.iter().enumerate() {
                rows[j][i] = v;
            }
        }

        let mass = trapezoid(h, &rows[0]);
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::MassCheck {
                mass,
                tol: MASS_TOL,
            });
        }

        let decay = fit_decay(m, &y, &rows[0])?;
        let envelope_amp = (0..=j_max)
            .map(|j| {
                rows[j]
                    .iter()
                    .zip(&y)
                    .map(|(&v, &yi)| v.abs() * (0.5 * decay.rate * yi.abs().powf(decay.exponent)).exp())
                    .fold(0.0f64, f64::max)
            })
            .collect();

        Ok(Self {
            m,
            j_max,
            y,
            rows,
            quad,
            mass,
            decay,
            envelope_amp,
            nodes_s,
            weights_exp,
        })
    }

    /// Grid spacing.
    pub fn h(&self) -> f64 {
        self.y[1] - self.y[0]
    }

    /// Half width of the table.
    pub fn half_width(&self) -> f64 {
        *self.y.last().unwrap()
    }

    /// Index of y if it is (within one ulp-scale rounding) a grid point.
    fn grid_index(&self, y: f64) -> Option<usize> {
        let c = (self.y.len() - 1) as f64 / 2.0;
        let t = y / self.h() + c;
        let i = t.round();
        if (t - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < self.y.len() {
            Some(i as usize)
        } else {
            None
        }
    }

    /// F^(j)(y): table lookup on grid points, direct quadrature elsewhere
    /// (valid for any y, including beyond the tabulated width).
    pub fn eval_deriv(&self, j: usize, y: f64) -> Result<f64> {
        if j > self.j_max {
            return Err(Error::ModeOutOfRange {
                k: j,
                max: self.j_max,
            });
        }
        if let Some(i) = self.grid_index(y) {
            return Ok(self.rows[j][i]);
        }
        if y.abs() <= self.half_width() {
            let mut acc = Accum::new();
            for (idx, &s) in self.nodes_s.iter().enumerate() {
                let mut t = self.weights_exp[idx];
                for _ in 0..j {
                    t *= s;
                }
                acc.add_prod(t, phased_cos(s, y, j));
            }
            return Ok(acc.value() / std::f64::consts::PI);
        }
        // Beyond the table the stored panels would be too coarse for the
        // faster phase; rebuild them with the panel count scaled by
        // |y| / half_width so the swing per panel stays fixed.
        let scale = y.abs() / self.half_width();
        let panels = ((self.quad.panels as f64 * scale).ceil() as usize).min(200_000);
        let (gx, gw) = gauss_legendre(self.quad.nodes_per_panel);
        let pw = self.quad.s_max / panels as f64;
        let mut acc = Accum::new();
        for p in 0..panels {
            let a = p as f64 * pw;
            for (&x, &w) in gx.iter().zip(&gw) {
                let s = a + (x + 1.0) * 0.5 * pw;
                let mut t = w * 0.5 * pw * (-s.powi(2 * self.m as i32)).exp();
                for _ in 0..j {
                    t *= s;
                }
                acc.add_prod(t, phased_cos(s, y, j));
            }
        }
        Ok(acc.value() / std::f64::consts::PI)
    }

    pub fn row(&self, j: usize) -> Result<&[f64]> {
        if j > self.j_max {
            return Err(Error::ModeOutOfRange {
                k: j,
                max: self.j_max,
            });
        }
        Ok(&self.rows[j])
    }

    /// F^(j)(y) by 8-point Lagrange interpolation of the stored row. Beyond
    /// the table edge it returns 0: tables are built wide enough that the
    /// true value there sits below the tabulation floor, and the scaled
    /// quadrature would only return oscillation noise at that magnitude.
    /// Interpolation error is ~h^8 sup|F^(j+8)|, far below the row accuracy
    /// for the spacings used here. Intended for inner loops; `eval_deriv`
    /// stays the exact reference.
    pub fn interp_deriv(&self, j: usize, y: f64) -> Result<f64> {
        if j > self.j_max {
            return Err(Error::ModeOutOfRange {
                k: j,
                max: self.j_max,
            });
        }
        if y.abs() > self.half_width() {
            return Ok(0.0);
        }
        // Uniform 8-point Lagrange: inverse denominators are the constants
        // 1 / (a! (7-a)! (-1)^(7-a)); numerators come from prefix/suffix
        // products of the node offsets.
        const INV_DEN: [f64; 8] = [
            -1.0 / 5040.0,
            1.0 / 720.0,
            -1.0 / 240.0,
            1.0 / 144.0,
            -1.0 / 144.0,
            1.0 / 240.0,
            -1.0 / 720.0,
            1.0 / 5040.0,
        ];
        let row = &self.rows[j];
        let n = row.len();
        let t = (y - self.y[0]) / self.h();
        let i0 = ((t.floor() as isize) - 3).clamp(0, n as isize - 8) as usize;
        let tt = t - i0 as f64;
        let mut d = [0.0f64; 8];
        for (b, db) in d.iter_mut().enumerate() {
            *db = tt - b as f64;
        }
        let mut pre = [1.0f64; 8];
        for a in 1..8 {
            pre[a] = pre[a - 1] * d[a - 1];
        }
        let mut suf = [1.0f64; 8];
        for a in (0..7).rev() {
            suf[a] = suf[a + 1] * d[a + 1];
        }
        let mut acc = 0.0;
        for a in 0..8 {
            acc += row[i0 + a] * pre[a] * suf[a] * INV_DEN[a];
        }
        Ok(acc)
    }

    /// Dual mode psi*_k = ((-1)^k / sqrt(k!)) F^(k) sampled on the grid.
    pub fn psi_star_row(&self, k: usize) -> Result<Vec<f64>> {
        let row = self.row(k)?;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let scale = sign / (factorial_i128(k as u32) as f64).sqrt();
        Ok(row.iter().map(|&v| v * scale).collect())
    }

    /// Dual mode at an arbitrary point.
    pub fn psi_star_at(&self, k: usize, y: f64) -> Result<f64> {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let scale = sign / (factorial_i128(k as u32) as f64).sqrt();
        Ok(self.eval_deriv(k, y)? * scale)
    }

    /// Dual mode at an arbitrary point by table interpolation, zero beyond
    /// the table edge. Cheap enough to sample dual rows onto solver grids.
    pub fn psi_star_interp(&self, k: usize, y: f64) -> Result<f64> {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let scale = sign / (factorial_i128(k as u32) as f64).sqrt();
        Ok(self.interp_deriv(k, y)? * scale)
    }

    /// Even moment M_r = int y^r F dy by direct quadrature on the table.
    /// Odd moments vanish by symmetry and return exactly 0.
    pub fn moment(&self, r: usize) -> Result<f64> {
        if r > 4 * self.m as usize {
            return Err(Error::ModeOutOfRange {
                k: r,
                max: 4 * self.m as usize,
            });
        }
        if r % 2 == 1 {
            return Ok(0.0);
        }
        let pw: Vec<f64> = self.y.iter().map(|&yi| yi.powi(r as i32)).collect();
        Ok(trapezoid_prod(self.h(), &pw, &self.rows[0]))
    }

    /// Moments M_0..M_r_max via the exact ladder
    /// M_r = (-1)^(m+1) 2m (r-1)!/(r-2m)! M_{r-2m},
    /// which follows from multiplying the elliptic identity for F by y^r
    /// and integrating by parts. Applied to 0 < r < 2m the same identity
    /// reads -(r/2m) M_r = 0, so every seed below the step vanishes
    /// exactly and the whole ladder rests on the mass M_0 alone. High
    /// moments therefore inherit only the mass quadrature error.
    pub fn moment_ladder(&self, r_max: usize) -> Result<Vec<f64>> {
        let step = 2 * self.m as usize;
        let sign = if self.m % 2 == 1 { 1.0 } else { -1.0 };
        let mut out = vec![0.0; r_max + 1];
        out[0] = self.mass;
        for r in step..=r_max {
            let mult = 2.0 * self.m as f64
                * falling_i128(r as u32 - 1, 2 * self.m - 1)
                    .expect("ladder multiplier fits i128 for r <= 33") as f64;
            out[r] = sign * mult * out[r - step];
        }
        Ok(out)
    }

    /// Biorthogonality matrix G[j][k] = <psi_j, psi*_k> for j, k < size,
    /// via exact k-fold integration by parts: <psi_j, psi*_k> =
    /// (1/sqrt(k!)) int psi_j^(k) F. Polynomial coefficients and the moment
    /// ladder multipliers stay in i128, so each entry reduces to a tiny
    /// combination of the quadrature seed moments.
    pub fn gram_matrix(&self, size: usize) -> Result<Vec<Vec<f64>>> {
        if size == 0 || size - 1 > crate::constants::K_MAX {
            return Err(Error::ModeOutOfRange {
                k: size.saturating_sub(1),
                max: crate::constants::K_MAX,
            });
        }
        let m = self.m;
        let step = 2 * m as usize;
        let sign = if m % 2 == 1 { 1i128 } else { -1i128 };
        let max_deg = size - 1;

        // Integer ladder multipliers I_r with M_r = I_r * seed(r mod 2m),
        // and an f64 shadow copy for the overflow fallback.
        let mut ladder: Vec<Option<i128>> = vec![None; max_deg + 1];
        let mut ladder_f = vec![0.0f64; max_deg + 1];
        for r in 0..=max_deg.min(step - 1) {
            ladder[r] = Some(1);
            ladder_f[r] = 1.0;
        }
        for r in step..=max_deg {
            ladder[r] = ladder[r - step].and_then(|prev| {
                falling_i128(r as u32 - 1, 2 * m - 1)
                    .and_then(|f| f.checked_mul(2 * m as i128))
                    .and_then(|f| f.checked_mul(prev))
                    .and_then(|f| f.checked_mul(sign))
            });
            let mut fall_f = 1.0;
            for t in 0..(2 * m - 1) as usize {
                fall_f *= (r - 1 - t) as f64;
            }
            ladder_f[r] = sign as f64 * 2.0 * m as f64 * fall_f * ladder_f[r - step];
        }
        // Seeds: the elliptic identity forces M_r = 0 exactly for
        // 0 < r < 2m, so only the mass survives. Off-diagonal entries then
        // cancel through integer identities alone and the diagonal reduces
        // to the measured mass.
        let mut seeds = vec![0.0; step];
        seeds[0] = self.mass;

        let mut g = vec![vec![0.0; size]; size];
        for j in 0..size {
            let psi_int = spectral::eigenfunction_int(m, j)?;
            let norm_j = (factorial_i128(j as u32) as f64).sqrt();
            for k in 0..=j.min(size - 1) {
                let norm_k = (factorial_i128(k as u32) as f64).sqrt();
                // Per residue family: exact i128 accumulation first.
                let fam_exact: Option<Vec<i128>> = (|| {
                    let mut fam = vec![0i128; step];
                    for r in (0..=j - k).step_by(2) {
                        let c = psi_int[r + k];
                        if c == 0 {
                            continue;
                        }
                        let term = c
                            .checked_mul(falling_i128((r + k) as u32, k as u32)?)?
                            .checked_mul(ladder[r]?)?;
                        let f = r % step;
                        fam[f] = fam[f].checked_add(term)?;
                    }
                    Some(fam)
                })();
                let fam: Vec<f64> = match fam_exact {
                    Some(v) => v.iter().map(|&t| t as f64).collect(),
                    None => {
                        // Overflow fallback: same sum in f64.
                        let mut fam = vec![0.0f64; step];
                        for r in (0..=j - k).step_by(2) {
                            let c = psi_int[r + k] as f64;
                            if c == 0.0 {
                                continue;
                            }
                            let mut fall = 1.0;
                            for t in 0..k {
                                fall *= (r + k - t) as f64;
                            }
                            fam[r % step] += c * fall * ladder_f[r];
                        }
                        fam
                    }
                };
                let mut total = Accum::new();
                for f in 0..step {
                    total.add_prod(fam[f], seeds[f]);
                }
                g[j][k] = total.value() / (norm_j * norm_k);
            }
        }
        Ok(g)
    }

    /// Biorthogonality by direct trapezoid quadrature on the table rows.
    /// Honest but noise-limited at high k; kept as a cross-check of the
    /// ladder route.
    pub fn gram_direct(&self, size: usize) -> Result<Vec<Vec<f64>>> {
        if size == 0 || size - 1 > self.j_max {
            return Err(Error::ModeOutOfRange {
                k: size.saturating_sub(1),
                max: self.j_max,
            });
        }
        let mut g = vec![vec![0.0; size]; size];
        for k in 0..size {
            let dual = self.psi_star_row(k)?;
            for (j, grow) in g.iter_mut().enumerate().take(size) {
                let psi = spectral::eigenfunction(self.m, j)?;
                let vals: Vec<f64> = self.y.iter().map(|&yi| spectral::eval(&psi, yi)).collect();
                grow[k] = trapezoid_prod(self.h(), &vals, &dual);
            }
        }
        Ok(g)
    }

    /// Normalized residual of the profile equation
    /// (-1)^(m+1) F^(2m) + (y F' + F)/(2m) = 0 over |y| <= y_cap,
    /// measured as max |lhs| / (1 + |F| n_y).
    pub fn elliptic_residual(&self, y_cap: f64) -> Result<f64> {
        let tm = 2 * self.m as usize;
        if self.j_max < tm {
            return Err(Error::ModeOutOfRange {
                k: tm,
                max: self.j_max,
            });
        }
        let sign = if self.m % 2 == 1 { 1.0 } else { -1.0 };
        let n = self.y.len() as f64;
        let mut worst = 0.0f64;
        for (i, &yi) in self.y.iter().enumerate() {
            if yi.abs() > y_cap {
                continue;
            }
            let lhs = sign * self.rows[tm][i]
                + (self.rows[0][i] + yi * self.rows[1][i]) / (2.0 * self.m as f64);
            let denom = 1.0 + self.rows[0][i].abs() * n;
            worst = worst.max(lhs.abs() / denom);
        }
        Ok(worst)
    }

    /// Fraction of the half width at which the worst-placed envelope
    /// supremum sits, with the offending row. Values near 1 mean a row's
    /// envelope is still growing at the table edge and the table is too
    /// narrow for that derivative order.
    pub fn envelope_interior_fraction(&self) -> (f64, usize) {
        let mut worst = (0.0f64, 0usize);
        for j in 0..=self.j_max {
            let mut best_v = 0.0f64;
            let mut best_y = 0.0f64;
            for (i, &yi) in self.y.iter().enumerate() {
                let v = self.rows[j][i].abs()
                    * (0.5 * self.decay.rate * yi.abs().powf(self.decay.exponent)).exp();
                if v > best_v {
                    best_v = v;
                    best_y = yi.abs();
                }
            }
            let frac = best_y / self.half_width();
            if frac > worst.0 {
                worst = (frac, j);
            }
        }
        worst
    }
}

/// Sharp stretched-exponential decay rate of the kernel envelope,
/// (2m-1) (2m)^(-2m/(2m-1)) |cos(pi m / (2m-1))|, from the dominant
/// saddle of the oscillatory integral. For m = 1 the cosine factor is 1
/// and the rate reduces to the Gaussian 1/4; for m > 1 the saddle sits
/// off the real axis and the kernel decays more slowly than the
/// phaseless rate while oscillating with |y|.
pub fn decay_rate_theory(m: u32) -> f64 {
    let tm = 2.0 * m as f64;
    let phase = (std::f64::consts::PI * m as f64 / (tm - 1.0)).cos().abs();
    (tm - 1.0) * tm.powf(-tm / (tm - 1.0)) * phase
}

/// Power of the algebraic prefactor |y|^(-(m-1)/(2m-1)) multiplying the
/// stretched-exponential envelope; zero for m = 1.
pub fn decay_prefactor_power(m: u32) -> f64 {
    (m as f64 - 1.0) / (2.0 * m as f64 - 1.0)
}

/// Fit log|F| + p log|y| = log(amplitude) - rate |y|^nu on the outer half
/// of the grid, where p = (m-1)/(2m-1) is the known algebraic prefactor
/// power. Uses envelope peaks when the kernel oscillates, all decaying
/// samples otherwise; the free-exponent fit reuses the fixed-exponent
/// intercept.
fn fit_decay(m: u32, y: &[f64], f_row: &[f64]) -> Result<DecayFit> {
    let tm = 2.0 * m as f64;
    let exponent = tm / (tm - 1.0);
    let pref = decay_prefactor_power(m);
    let half = y.last().unwrap() / 2.0;
    // (|y|, ln|F| + pref ln|y|), prefactor-corrected so the residual decay
    // is a clean stretched exponential.
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let n = y.len();
    for i in 1..n - 1 {
        let v = f_row[i].abs();
        if y[i].abs() < half || v < FIT_FLOOR {
            continue;
        }
        if v >= f_row[i - 1].abs() && v >= f_row[i + 1].abs() {
            pts.push((y[i].abs(), v.ln() + pref * y[i].abs().ln()));
        }
    }
    if pts.len() < 8 {
        // Monotone tail (m = 1): use every qualifying sample.
        pts.clear();
        for i in 0..n {
            let v = f_row[i].abs();
            if y[i].abs() >= half && v > FIT_FLOOR {
                pts.push((y[i].abs(), v.ln() + pref * y[i].abs().ln()));
            }
        }
    }
    if pts.len() < 4 {
        return Err(Error::KernelSpec(
            "too few decaying samples to fit the kernel envelope; widen the table".into(),
        ));
    }
    // Linear LS of z = b0 - rate x with x = |y|^nu.
    let (mut sx, mut sz, mut sxx, mut sxz) = (0.0, 0.0, 0.0, 0.0);
    for &(ya, z) in &pts {
        let x = ya.powf(exponent);
        sx += x;
        sz += z;
        sxx += x * x;
        sxz += x * z;
    }
    let np = pts.len() as f64;
    let det = np * sxx - sx * sx;
    let rate = -(np * sxz - sx * sz) / det;
    let b0 = (sz * sxx - sx * sxz) / det;

    // Free exponent: ln(b0 - z) = ln(rate) + nu ln|y| on the same samples.
    let (mut su, mut sv, mut suu, mut suv, mut nf) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(ya, z) in &pts {
        let gpos = b0 - z;
        if gpos > 1.0 {
            let u = ya.ln();
            let v = gpos.ln();
            su += u;
            sv += v;
            suu += u * u;
            suv += u * v;
            nf += 1.0;
        }
    }
    let exponent_free = if nf >= 4.0 {
        (nf * suv - su * sv) / (nf * suu - su * su)
    } else {
        f64::NAN
    };

    Ok(DecayFit {
        amplitude: b0.exp(),
        rate,
        exponent,
        exponent_free,
        rate_theory: decay_rate_theory(m),
        points_used: pts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    use once_cell::sync::Lazy;

    static SMALL_M1: Lazy<KernelTable> = Lazy::new(|| {
        KernelTable::build(&TableSpec {
            m: 1,
            half_width: 12.0,
            n_y: 1201,
            j_max: 8,
            quad: None,
        })
        .unwrap()
    });

    // m = 3 needs width ~44: the envelope decays like exp(-0.18 y^1.2),
    // so the tail mass only drops below the unit-mass tolerance there.
    static SMALL_M3: Lazy<KernelTable> = Lazy::new(|| {
        KernelTable::build(&TableSpec {
            m: 3,
            half_width: 44.0,
            n_y: 2201,
            j_max: 12,
            quad: None,
        })
        .unwrap()
    });

    fn small_m1() -> &'static KernelTable {
        &SMALL_M1
    }

    fn small_m3() -> &'static KernelTable {
        &SMALL_M3
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(16);
        assert_eq!(x.len(), 16);
        // Exact for degree <= 31; int_{-1}^{1} x^{2q} dx = 2/(2q+1).
        for q in 0..16 {
            let got: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * xi.powi(2 * q)).sum();
            assert_relative_eq!(got, 2.0 / (2.0 * q as f64 + 1.0), max_relative = 1e-13);
        }
        // Symmetry of nodes.
        for i in 0..8 {
            assert_relative_eq!(x[i], -x[15 - i], epsilon = 1e-14);
        }
    }

    #[test]
    fn gaussian_case_matches_closed_form() {
        let t = small_m1();
        let norm = 1.0 / (4.0 * std::f64::consts::PI).sqrt();
        for (i, &yi) in t.y.iter().enumerate() {
            if yi.abs() <= 8.0 {
                let exact = norm * (-yi * yi / 4.0).exp();
                assert!(
                    (t.rows[0][i] - exact).abs() < 1e-13,
                    "F({yi}) = {} vs {exact}",
                    t.rows[0][i]
                );
            }
        }
        // F' = -(y/2) F for the Gaussian.
        for (i, &yi) in t.y.iter().enumerate() {
            if yi.abs() <= 8.0 {
                assert!((t.rows[1][i] + 0.5 * yi * t.rows[0][i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn sixth_order_center_value() {
        let t = small_m3();
        // F(0) = Gamma(7/6)/pi: int_0^inf exp(-s^6) ds = Gamma(7/6).
        let exact = statrs::function::gamma::gamma(7.0 / 6.0) / std::f64::consts::PI;
        let i0 = t.y.len() / 2;
        assert_relative_eq!(t.rows[0][i0], exact, max_relative = 1e-12);
    }

    #[test]
    fn mass_is_unit() {
        assert!((small_m1().mass - 1.0).abs() < 1e-10);
        assert!((small_m3().mass - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rows_have_alternating_parity() {
        for t in [small_m1(), small_m3()] {
            let n = t.y.len();
            for j in 0..=t.j_max {
                let scale = t.rows[j].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                for i in 0..n {
                    let mirrored = if j % 2 == 0 {
                        t.rows[j][n - 1 - i]
                    } else {
                        -t.rows[j][n - 1 - i]
                    };
                    assert!(
                        (t.rows[j][i] - mirrored).abs() <= 1e-12 * scale.max(1e-30),
                        "m={} j={j} i={i}",
                        t.m
                    );
                }
            }
        }
    }

    #[test]
    fn elliptic_residual_small() {
        assert!(small_m1().elliptic_residual(8.0).unwrap() < 1e-10);
        assert!(small_m3().elliptic_residual(8.0).unwrap() < 1e-6);
    }

    #[test]
    fn halved_quadrature_degrades_residual() {
        let t = small_m3();
        let coarse = KernelTable::build(&TableSpec {
            m: 3,
            half_width: 44.0,
            n_y: 2201,
            j_max: 12,
            quad: Some(t.quad.with_total_nodes(t.quad.n_s() / 2)),
        });
        // The coarse table may fail its mass check outright; if it builds,
        // its residual must be at least 10x worse.
        match coarse {
            Err(Error::MassCheck { .. }) => {}
            Ok(ct) => {
                let fine = t.elliptic_residual(t.half_width()).unwrap();
                let rough = ct.elliptic_residual(t.half_width()).unwrap();
                assert!(
                    rough > 10.0 * fine,
                    "fine {fine:.3e} rough {rough:.3e}"
                );
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn moments_match_ladder() {
        let t1 = small_m1();
        assert_relative_eq!(t1.moment(0).unwrap(), 1.0, max_relative = 1e-10);
        assert_relative_eq!(t1.moment(2).unwrap(), 2.0, max_relative = 1e-9);
        assert_relative_eq!(t1.moment(4).unwrap(), 12.0, max_relative = 1e-9);
        assert_eq!(t1.moment(3).unwrap(), 0.0);
        let lad = t1.moment_ladder(8).unwrap();
        assert_relative_eq!(lad[2], 2.0, max_relative = 1e-9);
        assert_relative_eq!(lad[4], 12.0, max_relative = 1e-9);
        // m = 1 Gaussian: M_6 = 15 sigma^6 = 120, M_8 = 105 * 16 = 1680.
        assert_relative_eq!(lad[6], 120.0, max_relative = 1e-9);
        assert_relative_eq!(lad[8], 1680.0, max_relative = 1e-9);

        let t3 = small_m3();
        let lad3 = t3.moment_ladder(12).unwrap();
        assert_relative_eq!(lad3[6], 720.0, max_relative = 1e-7);
        assert_relative_eq!(lad3[12], 239_500_800.0, max_relative = 1e-7);
        // Sub-step even moments vanish identically: the elliptic identity
        // applied to y^r with r < 2m has no derivative term left.
        assert_eq!(lad3[2], 0.0);
        assert_eq!(lad3[4], 0.0);
        assert!(t3.moment(2).unwrap().abs() < 1e-4);
        // Direct quadrature of y^6 F is truncation-limited: the integrand
        // envelope y^6 exp(-0.18 y^1.2) is still ~1e1 at the table edge,
        // so only percent-level agreement is possible at this width. The
        // ladder value is the accurate one.
        assert_relative_eq!(t3.moment(6).unwrap(), 720.0, max_relative = 0.05);
    }

    #[test]
    fn gram_is_near_identity() {
        let t1 = small_m1();
        let g = t1.gram_matrix(9).unwrap();
        for j in 0..9 {
            for k in 0..9 {
                let target = if j == k { 1.0 } else { 0.0 };
                assert!(
                    (g[j][k] - target).abs() < 1e-9,
                    "m=1 G[{j}][{k}] = {}",
                    g[j][k]
                );
            }
        }
        let t3 = small_m3();
        let g3 = t3.gram_matrix(13).unwrap();
        for j in 0..13 {
            for k in 0..13 {
                let target = if j == k { 1.0 } else { 0.0 };
                assert!(
                    (g3[j][k] - target).abs() < 1e-7,
                    "m=3 G[{j}][{k}] = {}",
                    g3[j][k]
                );
            }
        }
    }

    #[test]
    fn direct_gram_agrees_at_low_degree() {
        let t = small_m1();
        let g = t.gram_direct(7).unwrap();
        for j in 0..7 {
            for k in 0..7 {
                let target = if j == k { 1.0 } else { 0.0 };
                assert!(
                    (g[j][k] - target).abs() < 1e-8,
                    "G[{j}][{k}] = {}",
                    g[j][k]
                );
            }
        }
    }

    #[test]
    fn dual_row_matches_gaussian_identity() {
        // m = 1: psi*_1 = -F' = (y/2) F.
        let t = small_m1();
        let dual = t.psi_star_row(1).unwrap();
        for (i, &yi) in t.y.iter().enumerate() {
            let expect = 0.5 * yi * t.rows[0][i];
            assert!((dual[i] - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn decay_fit_recovers_theory() {
        // m = 1: Gaussian, rate exactly 1/4 and amplitude (4 pi)^(-1/2).
        assert_relative_eq!(decay_rate_theory(1), 0.25, epsilon = 1e-15);
        let t1 = small_m1();
        assert_relative_eq!(t1.decay.rate, 0.25, max_relative = 1e-3);
        assert_relative_eq!(t1.decay.exponent_free, 2.0, max_relative = 0.01);
        assert_eq!(t1.decay.exponent, 2.0);
        assert_relative_eq!(
            t1.decay.amplitude,
            1.0 / (4.0 * std::f64::consts::PI).sqrt(),
            max_relative = 1e-3
        );
        // m = 3: saddle-point rate 5 * 6^(-1.2) |cos(3 pi / 5)|.
        assert_relative_eq!(decay_rate_theory(3), 0.17996, max_relative = 1e-4);
        let t3 = small_m3();
        assert_relative_eq!(t3.decay.exponent, 1.2, epsilon = 1e-12);
        assert_relative_eq!(t3.decay.rate, decay_rate_theory(3), max_relative = 0.02);
        assert_relative_eq!(t3.decay.exponent_free, 1.2, max_relative = 0.01);
    }

    #[test]
    fn envelope_peaks_sit_inside() {
        assert!(small_m1().envelope_interior_fraction().0 <= 0.75);
        assert!(small_m3().envelope_interior_fraction().0 <= 0.75);
    }

    #[test]
    fn off_grid_eval_is_consistent() {
        let t = small_m1();
        // On a grid point the quadrature path must reproduce the row value.
        let i = 700;
        let yi = t.y[i];
        assert_eq!(t.eval_deriv(0, yi).unwrap(), t.rows[0][i]);
        // Off grid: bracketed by neighbors for the monotone Gaussian tail.
        let ymid = 0.5 * (t.y[i] + t.y[i + 1]);
        let v = t.eval_deriv(0, ymid).unwrap();
        let (a, b) = (t.rows[0][i + 1], t.rows[0][i]);
        assert!(v > a.min(b) && v < a.max(b), "{a} {v} {b}");
        // Beyond the table edge the quadrature still returns a tiny value.
        let far = t.eval_deriv(0, 14.0).unwrap();
        assert!(far.abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(KernelTable::build(&TableSpec {
            m: 2,
            half_width: 10.0,
            n_y: 101,
            j_max: 4,
            quad: None
        })
        .is_err());
        assert!(KernelTable::build(&TableSpec {
            m: 1,
            half_width: 10.0,
            n_y: 100,
            j_max: 4,
            quad: None
        })
        .is_err());
        assert!(KernelTable::build(&TableSpec {
            m: 1,
            half_width: -1.0,
            n_y: 101,
            j_max: 4,
            quad: None
        })
        .is_err());
    }
}
