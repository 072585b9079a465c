//! Small numerical helpers shared by the modules: compensated summation,
//! lattice detection, least squares and polynomial roots.

use alloc::vec;
use alloc::vec::Vec;
use num_complex::Complex64;

pub use libm::{exp, fabs, floor, log, pow, sqrt};

/// Absolute tolerance used when deciding whether reals lie on a common lattice.
pub const LATTICE_TOL: f64 = 1e-9;

/// Neumaier compensated summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub const fn new() -> Self {
        Self { sum: 0.0, comp: 0.0 }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if fabs(self.sum) >= fabs(x) {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl core::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Compensated sum of an iterator.
pub fn ksum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<KahanSum>().value()
}

/// `max(log x, 0)`.
#[inline]
pub fn log_plus(x: f64) -> f64 {
    if x > 1.0 {
        log(x)
    } else {
        0.0
    }
}

/// Largest `h > 0` such that every value is an integer multiple of `h`
/// (within [`LATTICE_TOL`]). Zeros are ignored; `None` when all values are zero
/// or when the values share no span above `1e-6`.
pub fn lattice_span(values: &[f64]) -> Option<f64> {
    let mut h: Option<f64> = None;
    for &v in values {
        let a = fabs(v);
        if a <= LATTICE_TOL {
            continue;
        }
        h = Some(match h {
            None => a,
            Some(g) => float_gcd(g, a)?,
        });
    }
    let h = h?;
    let ok = values.iter().all(|&v| {
        let q = v / h;
        fabs(q - libm::round(q)) * h <= LATTICE_TOL * (1.0 + fabs(v))
    });
    ok.then_some(h)
}

fn float_gcd(a: f64, b: f64) -> Option<f64> {
    let (mut a, mut b) = if a >= b { (a, b) } else { (b, a) };
    for _ in 0..200 {
        if b <= LATTICE_TOL * (1.0 + a) {
            return (a >= 1e-6).then_some(a);
        }
        let r = a - b * floor(a / b);
        // the remainder may come out as b - eps for exact multiples
        let r = if b - r <= LATTICE_TOL * (1.0 + a) { 0.0 } else { r };
        a = b;
        b = r;
    }
    None
}

/// Round `x / span` to the nearest integer lattice index.
#[inline]
pub fn lattice_index(x: f64, span: f64) -> i64 {
    libm::round(x / span) as i64
}

/// Ordinary least-squares fit `y = intercept + slope * x`.
/// Returns `(slope, intercept, r2)`; `None` for fewer than two distinct x.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = ksum(xs[..n].iter().copied()) / nf;
    let my = ksum(ys[..n].iter().copied()) / nf;
    let sxx = ksum(xs[..n].iter().map(|&x| (x - mx) * (x - mx)));
    if sxx <= 0.0 {
        return None;
    }
    let sxy = ksum(xs[..n].iter().zip(&ys[..n]).map(|(&x, &y)| (x - mx) * (y - my)));
    let syy = ksum(ys[..n].iter().map(|&y| (y - my) * (y - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Some((slope, intercept, r2))
}

/// Divide a polynomial (coefficients in increasing degree) by `(z - root)`,
/// returning the quotient and the remainder.
pub fn deflate(coeffs: &[f64], root: f64) -> (Vec<f64>, f64) {
    let d = coeffs.len() - 1;
    let mut q = vec![0.0; d];
    let mut carry = coeffs[d];
    for k in (0..d).rev() {
        q[k] = carry;
        carry = coeffs[k] + carry * root;
    }
    (q, carry)
}

/// All complex roots of a real polynomial (increasing-degree coefficients),
/// by Aberth–Ehrlich iteration. Leading zero coefficients are trimmed.
pub fn poly_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let mut c: Vec<f64> = coeffs.to_vec();
    while c.len() > 1 && c[c.len() - 1] == 0.0 {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let lead = c[deg];
    let c: Vec<f64> = c.iter().map(|x| x / lead).collect();
    // Cauchy bound for the initial circle.
    let radius = 1.0 + c[..deg].iter().fold(0.0f64, |m, x| m.max(fabs(*x)));
    let mut z: Vec<Complex64> = (0..deg)
        .map(|k| {
            let ang = 2.0 * core::f64::consts::PI * (k as f64 + 0.25) / deg as f64 + 0.4;
            Complex64::from_polar(0.5 * radius, ang)
        })
        .collect();
    let eval = |x: Complex64| -> (Complex64, Complex64) {
        let mut p = Complex64::new(c[deg], 0.0);
        let mut dp = Complex64::new(0.0, 0.0);
        for k in (0..deg).rev() {
            dp = dp * x + p;
            p = p * x + c[k];
        }
        (p, dp)
    };
    for _ in 0..500 {
        let mut moved = 0.0f64;
        for i in 0..deg {
            let (p, dp) = eval(z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let mut s = Complex64::new(0.0, 0.0);
            for j in 0..deg {
                if j != i {
                    s += Complex64::new(1.0, 0.0) / (z[i] - z[j]);
                }
            }
            let w = ratio / (Complex64::new(1.0, 0.0) - ratio * s);
            if w.re.is_finite() && w.im.is_finite() {
                z[i] -= w;
                moved = moved.max(w.norm() / (1.0 + z[i].norm()));
            }
        }
        if moved < 1e-15 {
            break;
        }
    }
    z
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_beats_naive_on_cancellation() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(ksum(xs.iter().copied()), 2.0);
    }

    #[test]
    fn lattice_detection() {
        assert_eq!(lattice_span(&[1.0, -1.0, 3.0]), Some(1.0));
        let h = lattice_span(&[0.5, -0.25, 1.0]).unwrap();
        assert!((h - 0.25).abs() < 1e-12);
        assert!(lattice_span(&[1.0, core::f64::consts::SQRT_2]).is_none());
        assert!(lattice_span(&[0.0, 0.0]).is_none());
        let ln2 = core::f64::consts::LN_2;
        assert!((lattice_span(&[ln2, ln2]).unwrap() - ln2).abs() < 1e-15);
    }

    #[test]
    fn roots_of_known_polynomial() {
        // (z - 1)(z + 2)(z - 0.5) = z^3 + 0.5 z^2 - 2.5 z + 1
        let mut r: Vec<f64> = poly_roots(&[1.0, -2.5, 0.5, 1.0]).iter().map(|z| z.re).collect();
        r.sort_by(|a, b| a.total_cmp(b));
        assert!((r[0] + 2.0).abs() < 1e-12);
        assert!((r[1] - 0.5).abs() < 1e-12);
        assert!((r[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deflation_by_root() {
        let (q, rem) = deflate(&[1.0, -2.5, 0.5, 1.0], 1.0);
        assert!(rem.abs() < 1e-15);
        assert_eq!(q, vec![-1.0, 1.5, 1.0]);
    }

    #[test]
    fn fit_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let (s, i, r2) = linear_fit(&xs, &ys).unwrap();
        assert!((s - 2.0).abs() < 1e-14 && (i - 1.0).abs() < 1e-14 && (r2 - 1.0).abs() < 1e-14);
    }
}
