//! Numerical check that the reference spectrum is positive definite at every
//! frequency.
//!
//! The spectral density is estimated by averaging Hann-windowed periodograms
//! over non-overlapping segments whose length equals the grid size.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Relative threshold on `min eig / (trace / m)` averaged over the grid.
pub const INFORMATIVITY_REL_TOL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformativityReport {
    pub grid_size: usize,
    pub segments: usize,
    /// Smallest eigenvalue of the estimated spectrum over the grid.
    pub min_eig: f64,
    /// Frequency in rad/sample where the minimum is attained.
    pub argmin_frequency: f64,
    /// Average of `trace(Φ)/m` over the grid.
    pub mean_level: f64,
    /// `min_eig / mean_level`.
    pub relative_min_eig: f64,
    pub pass: bool,
}

/// Estimates the spectrum of the rows of `r` on `grid_size` frequencies in `[0, 2π)`.
pub fn spectrum(r: &DMatrix<f64>, grid_size: usize) -> Vec<DMatrix<Complex64>> {
    let m = r.nrows();
    let l = grid_size.max(2).min(r.ncols().max(2));
    let segments = (r.ncols() / l).max(1);
    let window: Vec<f64> = (0..l)
        .map(|t| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t as f64 / l as f64).cos())
        .collect();
    let wpow: f64 = window.iter().map(|w| w * w).sum();
    let mut out = vec![DMatrix::<Complex64>::zeros(m, m); l];
    for s in 0..segments {
        for (j, phi) in out.iter_mut().enumerate() {
            let omega = 2.0 * std::f64::consts::PI * j as f64 / l as f64;
            let mut f = vec![Complex64::new(0.0, 0.0); m];
            for t in 0..l.min(r.ncols() - s * l) {
                let z = Complex64::from_polar(window[t], -omega * t as f64);
                for (i, fi) in f.iter_mut().enumerate() {
                    *fi += z * r[(i, s * l + t)];
                }
            }
            for a in 0..m {
                for b in 0..m {
                    phi[(a, b)] += f[a] * f[b].conj() / (wpow * segments as f64);
                }
            }
        }
    }
    out
}

/// Advisory check of positive definiteness of the reference spectrum.
pub fn informativity_check(r: &DMatrix<f64>, grid_size: usize) -> InformativityReport {
    let m = r.nrows();
    let phis = spectrum(r, grid_size);
    let l = phis.len();
    let mut min_eig = f64::INFINITY;
    let mut argmin = 0.0;
    let mut level = 0.0;
    for (j, phi) in phis.iter().enumerate() {
        level += phi.trace().re / m.max(1) as f64;
        let e = if m == 0 {
            0.0
        } else {
            nalgebra::SymmetricEigen::new(phi.clone()).eigenvalues.min()
        };
        if e < min_eig {
            min_eig = e;
            argmin = 2.0 * std::f64::consts::PI * j as f64 / l as f64;
        }
    }
    level /= l as f64;
    let rel = if level > 0.0 { min_eig / level } else { 0.0 };
    InformativityReport {
        grid_size: l,
        segments: (r.ncols() / l).max(1),
        min_eig,
        argmin_frequency: argmin,
        mean_level: level,
        relative_min_eig: rel,
        pass: m > 0 && rel > INFORMATIVITY_REL_TOL,
    }
}
