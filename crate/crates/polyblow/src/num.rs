//! Small numeric utilities shared across modules: compensated accumulation,
//! exact integer combinatorics, uniform trapezoid quadrature, and a dense
//! pivoted solve for the small Gram systems.

/// Compensated accumulator (Neumaier two-sum, FMA-corrected products).
///
/// Keeps a running hi/lo pair so that sums of n terms carry an error of
/// order eps^2 * sum|x| instead of eps * n * sum|x|. Used wherever long
/// oscillatory quadrature sums would otherwise set the noise floor.
#[derive(Clone, Copy, Debug, Default)]
pub struct Accum {
    hi: f64,
    lo: f64,
}

impl Accum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a single value with Neumaier compensation.
    #[inline]
    pub fn add(&mut self, x: f64) {
        let s = self.hi + x;
        if self.hi.abs() >= x.abs() {
            self.lo += (self.hi - s) + x;
        } else {
            self.lo += (x - s) + self.hi;
        }
        self.hi = s;
    }

    /// Add a*b, capturing the rounding error of the product via FMA.
    #[inline]
    pub fn add_prod(&mut self, a: f64, b: f64) {
        let p = a * b;
        let e = a.mul_add(b, -p);
        self.add(p);
        self.add(e);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

/// Trapezoid rule on a uniform grid with spacing `h`, compensated.
pub fn trapezoid(h: f64, values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mut acc = Accum::new();
    acc.add(0.5 * values[0]);
    for v in &values[1..values.len() - 1] {
        acc.add(*v);
    }
    acc.add(0.5 * values[values.len() - 1]);
    acc.value() * h
}

/// Trapezoid rule for a product of two sampled rows, compensated.
pub fn trapezoid_prod(h: f64, a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let mut acc = Accum::new();
    acc.add_prod(0.5 * a[0], b[0]);
    for i in 1..n - 1 {
        acc.add_prod(a[i], b[i]);
    }
    acc.add_prod(0.5 * a[n - 1], b[n - 1]);
    acc.value() * h
}

/// Composite Simpson weights for an odd-length uniform grid with spacing h:
/// h/3 * (1, 4, 2, 4, ..., 2, 4, 1).
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n >= 3 && n % 2 == 1, "Simpson needs an odd point count >= 3");
    let mut w = vec![0.0; n];
    let third = h / 3.0;
    w[0] = third;
    w[n - 1] = third;
    for (i, wi) in w.iter_mut().enumerate().take(n - 1).skip(1) {
        *wi = if i % 2 == 1 { 4.0 * third } else { 2.0 * third };
    }
    w
}

/// Exact n! as i128. Valid for n <= 33 (33! overflows i128).
pub fn factorial_i128(n: u32) -> i128 {
    assert!(n <= 33, "factorial_i128 overflows beyond 33!");
    let mut f: i128 = 1;
    for k in 2..=n as i128 {
        f *= k;
    }
    f
}

/// Exact binomial coefficient as i128.
pub fn binomial_i128(n: u32, k: u32) -> i128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut num: i128 = 1;
    let mut den: i128 = 1;
    for j in 0..k {
        num *= (n - j) as i128;
        den *= (j + 1) as i128;
        let g = gcd(num.unsigned_abs(), den.unsigned_abs()) as i128;
        num /= g;
        den /= g;
    }
    debug_assert_eq!(den, 1);
    num
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Falling factorial n * (n-1) * ... * (n-k+1) as i128, None on overflow.
pub fn falling_i128(n: u32, k: u32) -> Option<i128> {
    if k > n {
        return Some(0);
    }
    let mut f: i128 = 1;
    for j in 0..k {
        f = f.checked_mul((n - j) as i128)?;
    }
    Some(f)
}

/// Solve a small dense system A x = b in place with partial pivoting.
/// Intended for Gram systems of a few dozen rows; not for large matrices.
pub fn dense_solve(a: &mut [Vec<f64>], b: &mut [f64]) -> crate::error::Result<()> {
    let n = b.len();
    assert!(a.len() == n && a.iter().all(|r| r.len() == n));
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() < f64::MIN_POSITIVE * 16.0 {
            return Err(crate::error::Error::SingularMatrix {
                col,
                pivot: a[piv][col],
            });
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s -= a[col][k] * b[k];
        }
        b[col] = s / a[col][col];
    }
    Ok(())
}

/// LU factorization of a banded matrix with partial pivoting.
///
/// Column-band storage: entry (i, j) with i - j in [-(ku + kl), kl] lives at
/// ab[j * ldab + (ku + kl) + i - j], ldab = 2*kl + ku + 1. The extra kl
/// superdiagonals hold pivoting fill. Factor once, solve many times; a
/// tridiagonal-to-heptadiagonal step matrix is solved each time step while
/// the factorization is reused until the step size changes.
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandedLu {
    /// Factor the matrix given by `entry(i, j)` over the band |i - j| <= max(kl, ku).
    pub fn factor(
        n: usize,
        kl: usize,
        ku: usize,
        entry: impl Fn(usize, usize) -> f64,
    ) -> crate::error::Result<Self> {
        assert!(n > 0 && kl < n && ku < n);
        let width = 2 * kl + ku + 1;
        let mut ab = vec![0.0; n * width];
        let at = |j: usize, i: usize| j * width + (ku + kl + i) - j;
        for j in 0..n {
            let lo = j.saturating_sub(ku);
            let hi = (j + kl).min(n - 1);
            for i in lo..=hi {
                ab[at(j, i)] = entry(i, j);
            }
        }
        let mut ipiv = vec![0usize; n];
        for k in 0..n {
            let hi = (k + kl).min(n - 1);
            let mut piv = k;
            let mut best = ab[at(k, k)].abs();
            for i in k + 1..=hi {
                let v = ab[at(k, i)].abs();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best < f64::MIN_POSITIVE * 16.0 {
                return Err(crate::error::Error::SingularMatrix {
                    col: k,
                    pivot: ab[at(k, k)],
                });
            }
            ipiv[k] = piv;
            let jhi = (k + ku + kl).min(n - 1);
            if piv != k {
                for j in k..=jhi {
                    ab.swap(at(j, k), at(j, piv));
                }
            }
            let pivot = ab[at(k, k)];
            for i in k + 1..=hi {
                let l = ab[at(k, i)] / pivot;
                ab[at(k, i)] = l;
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..=jhi {
                    ab[at(j, i)] -= l * ab[at(j, k)];
                }
            }
        }
        Ok(Self {
            n,
            kl,
            ku,
            ab,
            ipiv,
        })
    }

    /// Solve A x = b in place.
    pub fn solve(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let width = 2 * self.kl + self.ku + 1;
        let at = |j: usize, i: usize| j * width + (self.ku + self.kl + i) - j;
        for k in 0..self.n {
            let piv = self.ipiv[k];
            if piv != k {
                b.swap(k, piv);
            }
            let hi = (k + self.kl).min(self.n - 1);
            for i in k + 1..=hi {
                b[i] -= self.ab[at(k, i)] * b[k];
            }
        }
        for k in (0..self.n).rev() {
            let jhi = (k + self.ku + self.kl).min(self.n - 1);
            let mut s = b[k];
            for j in k + 1..=jhi {
                s -= self.ab[at(j, k)] * b[j];
            }
            b[k] = s / self.ab[at(k, k)];
        }
    }
}
