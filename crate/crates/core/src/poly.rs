//! Polynomial utilities: roots via companion matrices, evaluation, root-based
//! coprimeness and truncated power-series division.
//!
//! Coefficients are stored in descending powers of `z`.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Descending coefficients of a monic polynomial `z^n + p_1 z^{n-1} + … + p_n`.
pub fn monic(tail: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(tail.len() + 1);
    v.push(1.0);
    v.extend_from_slice(tail);
    v
}

fn trim_leading(coeffs: &[f64]) -> &[f64] {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let start = coeffs
        .iter()
        .position(|c| c.abs() > 1e-14 * scale)
        .unwrap_or(coeffs.len());
    &coeffs[start..]
}

/// Roots of the polynomial. Leading (near-)zero coefficients are dropped, so
/// the number of roots equals the effective degree. Companion-matrix
/// eigenvalues are used first; when that iteration stalls, simultaneous
/// Durand-Kerner iteration takes over. Non-finite coefficients give roots at
/// infinity.
pub fn roots(coeffs: &[f64]) -> Vec<Complex64> {
    let c = trim_leading(coeffs);
    if c.len() <= 1 {
        return Vec::new();
    }
    let deg = c.len() - 1;
    let lead = c[0];
    let mut comp = DMatrix::<f64>::zeros(deg, deg);
    for j in 0..deg {
        comp[(0, j)] = -c[j + 1] / lead;
    }
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    if c.iter().any(|v| !v.is_finite()) {
        return vec![Complex64::new(f64::INFINITY, 0.0); deg];
    }
    crate::linalg::eigenvalues(&comp).unwrap_or_else(|| durand_kerner(c))
}

fn durand_kerner(c: &[f64]) -> Vec<Complex64> {
    let deg = c.len() - 1;
    let monic: Vec<Complex64> = c.iter().map(|v| Complex64::new(v / c[0], 0.0)).collect();
    let bound = 1.0 + monic[1..].iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut z: Vec<Complex64> = (0..deg)
        .map(|k| Complex64::from_polar(bound, 0.4 + 2.0 * std::f64::consts::PI * k as f64 / deg as f64))
        .collect();
    let horner = |x: Complex64| monic.iter().fold(Complex64::new(0.0, 0.0), |acc, v| acc * x + v);
    for _ in 0..2000 {
        let mut change: f64 = 0.0;
        for i in 0..deg {
            let mut den = Complex64::new(1.0, 0.0);
            for j in 0..deg {
                if i != j {
                    den *= z[i] - z[j];
                }
            }
            if den.norm() == 0.0 {
                den = Complex64::new(f64::EPSILON, 0.0);
            }
            let step = horner(z[i]) / den;
            z[i] -= step;
            change = change.max(step.norm());
        }
        if change <= 1e-15 * bound {
            break;
        }
    }
    z
}

/// Largest root modulus, zero for constant polynomials.
pub fn max_root_modulus(coeffs: &[f64]) -> f64 {
    roots(coeffs).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Horner evaluation at a complex point.
pub fn eval(coeffs: &[f64], z: Complex64) -> Complex64 {
    coeffs
        .iter()
        .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
}

/// Real evaluation.
pub fn eval_real(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
}

/// Result of a root-clustering coprimeness test.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonRoots {
    pub coprime: bool,
    pub common: Vec<Complex64>,
}

/// Two polynomials are declared coprime when no pair of roots lies within
/// `rel_tol · max(1, |root|)`. A zero polynomial is never coprime with a
/// non-constant one.
pub fn common_roots(p: &[f64], q: &[f64], rel_tol: f64) -> CommonRoots {
    let p_zero = p.iter().all(|&c| c == 0.0);
    let q_zero = q.iter().all(|&c| c == 0.0);
    if p_zero || q_zero {
        let other = if p_zero { q } else { p };
        let r = roots(other);
        return CommonRoots {
            coprime: r.is_empty() && !(p_zero && q_zero),
            common: r,
        };
    }
    let rp = roots(p);
    let rq = roots(q);
    let mut common = Vec::new();
    for a in &rp {
        if rq
            .iter()
            .any(|b| (a - b).norm() <= rel_tol * a.norm().max(1.0))
        {
            common.push(*a);
        }
    }
    CommonRoots {
        coprime: common.is_empty(),
        common,
    }
}

/// First `len` coefficients of the power series `num(x) / den(x)` where both
/// are given in ascending powers of `x = z^{-1}` and `den[0] != 0`.
pub fn series_divide(num: &[f64], den: &[f64], len: usize) -> Vec<f64> {
    let d0 = den[0];
    let mut h = vec![0.0; len];
    for k in 0..len {
        let mut v = num.get(k).copied().unwrap_or(0.0);
        for j in 1..den.len().min(k + 1) {
            v -= den[j] * h[k - j];
        }
        h[k] = v / d0;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_near_a_multiple_root_at_zero() {
        for p in [[1.0, 0.0, 0.0, 1e-6, 0.0], [1.0, 1e-7, 0.0, 0.0, -1e-9]] {
            let r = roots(&p);
            assert_eq!(r.len(), 4);
            for z in &r {
                assert!(eval(&p, *z).norm() < 1e-12, "{p:?}: {r:?}");
            }
        }
        assert!(max_root_modulus(&[1.0, f64::NAN]).is_infinite());
    }

    #[test]
    fn roots_of_factored_quadratic() {
        let mut r: Vec<f64> = roots(&[1.0, -1.5, 0.56]).iter().map(|z| z.re).collect();
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((r[0] - 0.7).abs() < 1e-12 && (r[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn leading_zero_drops_degree() {
        assert_eq!(roots(&[0.0, 2.0, -1.0]).len(), 1);
        assert!(roots(&[0.0, 0.0, 3.0]).is_empty());
    }

    #[test]
    fn series_inverse_of_geometric() {
        let h = series_divide(&[1.0], &[1.0, -0.5], 5);
        for (k, v) in h.iter().enumerate() {
            assert!((v - 0.5f64.powi(k as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_polynomial_is_not_coprime() {
        assert!(!common_roots(&[1.0, -0.5], &[0.0, 0.0], 1e-8).coprime);
        assert!(common_roots(&[1.0, -0.5], &[0.0, 1.0], 1e-8).coprime);
    }
}
