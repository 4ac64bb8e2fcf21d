//! Algebraic Riccati equation of the innovation form, its recursion, the
//! Lyapunov equation and detection of trivial solutions.

use nalgebra::DMatrix;

use crate::closed_loop::ClosedLoopSS;
use crate::error::{Error, Result};
use crate::linalg::{greedy_independent_rows, logdet_spd, right_solve, spectral_radius, symmetrize};
use crate::model::NetworkModel;
use crate::poly;

/// Entrywise tolerance of the trivial-solution conditions.
pub const TRIVIAL_TOL: f64 = 1e-10;
/// Relative residual accepted for a certified solution.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Noise second moments `[Q S; Sᵀ R] = [G_e; J_eo] Σ_e [G_e; J_eo]ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qrs {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

pub fn qrs_blocks(ss: &ClosedLoopSS) -> Qrs {
    let ge_sig = &ss.g_e * &ss.sigma_e;
    let jeo_sig = &ss.j_eo * &ss.sigma_e;
    let mut q = &ge_sig * ss.g_e.transpose();
    let mut r = &jeo_sig * ss.j_eo.transpose();
    symmetrize(&mut q);
    symmetrize(&mut r);
    Qrs {
        q,
        s: ge_sig * ss.j_eo.transpose(),
        r,
    }
}

/// Which sufficient condition produced a trivial solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum TrivialReason {
    /// `Σ_e - Σ_e J_eoᵀ R⁻¹ J_eo Σ_e = 0` with stable noise polynomials.
    NoiseProjection,
    /// Output-error nodes with `Υ (I - J_eoᵀ (J_eo J_eoᵀ)⁻¹ J_eo) = 0`.
    OutputError,
    /// `Q - S R⁻¹ Sᵀ = 0` with a stabilizing gain, detected from the
    /// realization alone.
    Realization,
}

/// `(Σ, K, Σ_ε)` with its certificate.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub sigma: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub sigma_eps: DMatrix<f64>,
    pub stabilizing: bool,
    /// `ρ(F_c - K H_o)`
    pub spectral_radius_closed: f64,
    /// Largest relative residual over the three blocks of the gain form.
    pub residual: f64,
    pub iterations: usize,
    pub trivial: Option<TrivialReason>,
}

#[derive(Debug, Clone, Copy)]
pub struct DareOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub trivial_fast_path: bool,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100_000,
            trivial_fast_path: true,
        }
    }
}

fn check_row_rank(ss: &ClosedLoopSS) -> Result<()> {
    let kept = greedy_independent_rows(&ss.j_eo, crate::closed_loop::ROW_RANK_TOL);
    if kept.len() < ss.j_eo.nrows() {
        return Err(Error::RankDeficientObservation);
    }
    Ok(())
}

fn inv_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Conditioning("innovation covariance is not positive definite".into()))?;
    Ok(chol.inverse())
}

/// Residuals of
/// `Σ = F_c Σ F_cᵀ + Q - K Σ_ε Kᵀ`, `K Σ_ε = F_c Σ H_oᵀ + S`, `Σ_ε = H_o Σ H_oᵀ + R`.
pub fn dare_residual(
    ss: &ClosedLoopSS,
    qrs: &Qrs,
    sigma: &DMatrix<f64>,
    k: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
) -> f64 {
    let rel = |lhs: DMatrix<f64>, rhs: DMatrix<f64>| (&lhs - &rhs).norm() / (1.0 + rhs.norm());
    let fs = &ss.f_c * sigma;
    let r1 = rel(
        sigma.clone(),
        &fs * ss.f_c.transpose() + &qrs.q - k * sigma_eps * k.transpose(),
    );
    let r2 = rel(k * sigma_eps, &fs * ss.h_o.transpose() + &qrs.s);
    let r3 = rel(sigma_eps.clone(), &ss.h_o * sigma * ss.h_o.transpose() + &qrs.r);
    r1.max(r2).max(r3)
}

fn certify(
    ss: &ClosedLoopSS,
    qrs: &Qrs,
    sigma: DMatrix<f64>,
    k: DMatrix<f64>,
    sigma_eps: DMatrix<f64>,
    iterations: usize,
    trivial: Option<TrivialReason>,
) -> RiccatiSolution {
    let rho = spectral_radius(&(&ss.f_c - &k * &ss.h_o));
    let residual = dare_residual(ss, qrs, &sigma, &k, &sigma_eps);
    RiccatiSolution {
        sigma,
        k,
        sigma_eps,
        stabilizing: rho < 1.0,
        spectral_radius_closed: rho,
        residual,
        iterations,
        trivial,
    }
}

fn trivial_solution(ss: &ClosedLoopSS, qrs: &Qrs, reason: TrivialReason) -> Result<RiccatiSolution> {
    let k = right_solve(&qrs.s, &qrs.r).ok_or(Error::RankDeficientObservation)?;
    let n = ss.states();
    Ok(certify(ss, qrs, DMatrix::zeros(n, n), k, qrs.r.clone(), 0, Some(reason)))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Tests the two sufficient conditions for `(Σ, K, Σ_ε) = (0, S R⁻¹, R)`.
pub fn check_trivial_solution(ss: &ClosedLoopSS, model: &NetworkModel) -> Result<Option<RiccatiSolution>> {
    check_row_rank(ss)?;
    let qrs = qrs_blocks(ss);
    let r_inv = inv_spd(&qrs.r).map_err(|_| Error::RankDeficientObservation)?;
    let se = &ss.sigma_e;
    let jt_rinv_j = ss.j_eo.transpose() * &r_inv * &ss.j_eo;
    let cond1 = se - se * &jt_rinv_j * se;
    let scale = max_abs(se).max(1.0);
    let c_stable = model
        .nodes()
        .iter()
        .all(|n| poly::max_root_modulus(&n.c_poly()) < 1.0);
    if max_abs(&cond1) <= TRIVIAL_TOL * scale && c_stable {
        return trivial_solution(ss, &qrs, TrivialReason::NoiseProjection).map(Some);
    }

    let oe = model.nodes().iter().all(|n| n.a() == n.c());
    let a_stable = model
        .nodes()
        .iter()
        .all(|n| poly::max_root_modulus(&n.a_poly()) < 1.0);
    if oe && a_stable {
        let jjt = &ss.j_eo * ss.j_eo.transpose();
        let proj = ss.j_eo.transpose() * inv_spd(&jjt)? * &ss.j_eo;
        let m = ss.nodes();
        let cond2 = model.topology().upsilon() * (DMatrix::identity(m, m) - proj);
        if max_abs(&cond2) <= TRIVIAL_TOL {
            return trivial_solution(ss, &qrs, TrivialReason::OutputError).map(Some);
        }
    }
    Ok(None)
}

/// One step of the Riccati recursion, returning `(Σ_{k+1}, K_k, Σ_ε,k)`.
pub fn riccati_step(
    sigma: &DMatrix<f64>,
    ss: &ClosedLoopSS,
    qrs: &Qrs,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let mut sigma_eps = &ss.h_o * sigma * ss.h_o.transpose() + &qrs.r;
    symmetrize(&mut sigma_eps);
    let fs = &ss.f_c * sigma;
    let num = &fs * ss.h_o.transpose() + &qrs.s;
    let k = &num * inv_spd(&sigma_eps)?;
    let mut next = &fs * ss.f_c.transpose() + &qrs.q - &k * num.transpose();
    symmetrize(&mut next);
    Ok((next, k, sigma_eps))
}

/// Solution of `P = F P Fᵀ + Q` for stable `F`.
pub fn lyapunov(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let rho = spectral_radius(f);
    if rho >= 1.0 {
        return Err(Error::Stability(format!("spectral radius {rho} is not below one")));
    }
    let mut p = if n <= 64 {
        let kron = f.kronecker(f);
        let lhs = DMatrix::identity(n * n, n * n) - kron;
        let vq = DMatrix::from_column_slice(n * n, 1, q.as_slice());
        let v = lhs
            .lu()
            .solve(&vq)
            .ok_or_else(|| Error::Singular("Lyapunov operator is singular".into()))?;
        DMatrix::from_column_slice(n, n, v.as_slice())
    } else {
        // doubling of the series Σ F^j Q (Fᵀ)^j
        let mut p = q.clone();
        let mut a = f.clone();
        for _ in 0..64 {
            let inc = &a * &p * a.transpose();
            let done = inc.norm() <= 1e-16 * (1.0 + p.norm());
            p += inc;
            a = &a * &a;
            if done {
                break;
            }
        }
        p
    };
    symmetrize(&mut p);
    Ok(p)
}

/// `P = F_c P F_cᵀ + G_e Σ_e G_eᵀ`
pub fn solve_lyapunov(ss: &ClosedLoopSS) -> Result<DMatrix<f64>> {
    lyapunov(&ss.f_c, &qrs_blocks(ss).q)
}

/// `(0, S R⁻¹, R)` when `Q - S R⁻¹ Sᵀ` vanishes and the gain stabilizes.
fn realization_trivial(ss: &ClosedLoopSS, qrs: &Qrs) -> Result<Option<RiccatiSolution>> {
    let k = right_solve(&qrs.s, &qrs.r).ok_or(Error::RankDeficientObservation)?;
    let qbar = &qrs.q - &k * qrs.s.transpose();
    if max_abs(&qbar) > TRIVIAL_TOL * max_abs(&qrs.q).max(1.0) {
        return Ok(None);
    }
    let sol = trivial_solution(ss, qrs, TrivialReason::Realization)?;
    Ok(if sol.stabilizing { Some(sol) } else { None })
}

/// Stabilizing solution of the Riccati equation by fixed-point iteration of
/// the recursion started at the Lyapunov solution.
pub fn solve_dare(ss: &ClosedLoopSS, qrs: &Qrs, opts: &DareOptions) -> Result<RiccatiSolution> {
    check_row_rank(ss)?;
    if inv_spd(&qrs.r).is_err() {
        return Err(Error::RankDeficientObservation);
    }
    if opts.trivial_fast_path {
        if let Some(sol) = realization_trivial(ss, qrs)? {
            return Ok(sol);
        }
    }
    let mut sigma = lyapunov(&ss.f_c, &qrs.q)?;
    let mut it = 0;
    loop {
        let (next, _, _) = riccati_step(&sigma, ss, qrs)?;
        it += 1;
        let delta = (&next - &sigma).norm() / (1.0 + sigma.norm());
        sigma = next;
        if delta <= opts.tol {
            break;
        }
        if it >= opts.max_iter || !delta.is_finite() {
            return Err(Error::Convergence {
                iterations: it,
                residual: delta,
            });
        }
    }
    let (_, k, sigma_eps) = riccati_step(&sigma, ss, qrs)?;
    let sol = certify(ss, qrs, sigma, k, sigma_eps, it, None);
    if sol.residual > RESIDUAL_TOL || !sol.stabilizing {
        return Err(Error::Convergence {
            iterations: it,
            residual: sol.residual.max(sol.spectral_radius_closed - 1.0),
        });
    }
    Ok(sol)
}

/// `ln det Σ_ε` of a solution.
pub fn logdet_innovation(sol: &RiccatiSolution) -> Result<f64> {
    logdet_spd(&sol.sigma_eps)
        .ok_or_else(|| Error::Conditioning("innovation covariance is not positive definite".into()))
}
