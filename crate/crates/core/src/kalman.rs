//! Stationary and time-varying Kalman predictors in innovation form and the
//! predictor transfer functions.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::closed_loop::{resolvent_solve, to_complex, ClosedLoopSS};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::riccati::{lyapunov, riccati_step, Qrs, RiccatiSolution};

/// Initial state covariance of the time-varying filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InitKind {
    /// `Σ₁ = P`, the stationary state covariance.
    Lyapunov,
    /// `Σ₁ = 0`, exact for zero initial conditions.
    Zero,
}

/// Innovations `ε` (p × N), their covariances and the predicted states (n × N).
#[derive(Debug, Clone)]
pub struct InnovationSequence {
    pub eps: DMatrix<f64>,
    /// One entry per step, or a single entry for the stationary filter.
    pub sigma_eps: Vec<DMatrix<f64>>,
    pub xi_hat: DMatrix<f64>,
}

impl InnovationSequence {
    pub fn sigma_eps_at(&self, k: usize) -> &DMatrix<f64> {
        &self.sigma_eps[k.min(self.sigma_eps.len() - 1)]
    }

    /// One-step predictions `x_o - ε`.
    pub fn predictions(&self, data: &Dataset) -> DMatrix<f64> {
        data.x_o() - &self.eps
    }
}

/// Gain, innovation covariance and its inverse and log-determinant at one step.
#[derive(Debug, Clone)]
pub struct GainStep {
    pub k: DMatrix<f64>,
    pub sigma_eps: DMatrix<f64>,
    pub sigma_eps_inv: DMatrix<f64>,
    pub logdet: f64,
}

impl GainStep {
    fn new(k: DMatrix<f64>, sigma_eps: DMatrix<f64>) -> Result<Self> {
        let chol = sigma_eps.clone().cholesky().ok_or_else(|| {
            Error::Conditioning("innovation covariance is not positive definite".into())
        })?;
        let l = chol.l_dirty();
        let logdet = (0..sigma_eps.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum();
        Ok(Self {
            sigma_eps_inv: chol.inverse(),
            k,
            sigma_eps,
            logdet,
        })
    }
}

/// Gains of a filter over a horizon: explicit steps followed by a constant tail.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    pub steps: Vec<GainStep>,
    pub tail: GainStep,
}

impl GainSchedule {
    pub fn at(&self, k: usize) -> &GainStep {
        self.steps.get(k).unwrap_or(&self.tail)
    }

    pub fn stationary(ric: &RiccatiSolution) -> Result<Self> {
        Ok(Self {
            steps: Vec::new(),
            tail: GainStep::new(ric.k.clone(), ric.sigma_eps.clone())?,
        })
    }

    /// Runs the Riccati recursion from `Σ₁` for at most `horizon` steps and
    /// switches to a constant gain once the covariance stops changing at
    /// machine precision.
    pub fn time_varying(ss: &ClosedLoopSS, qrs: &Qrs, init: InitKind, horizon: usize) -> Result<Self> {
        let n = ss.states();
        let mut sigma = match init {
            InitKind::Lyapunov => lyapunov(&ss.f_c, &qrs.q)?,
            InitKind::Zero => DMatrix::zeros(n, n),
        };
        let scale = qrs.q.norm() + qrs.r.norm();
        let mut steps = Vec::new();
        for _ in 0..horizon.max(1) {
            let (next, k, se) = riccati_step(&sigma, ss, qrs)?;
            let delta = (&next - &sigma).norm();
            steps.push(GainStep::new(k, se)?);
            sigma = next;
            if delta <= 1e-14 * (scale + sigma.norm()) {
                break;
            }
        }
        let (_, k, se) = riccati_step(&sigma, ss, qrs)?;
        Ok(Self {
            steps,
            tail: GainStep::new(k, se)?,
        })
    }
}

/// Outputs of a filter pass.
#[derive(Debug, Clone, Default)]
pub struct FilterSums {
    /// `Σ εᵀ Σ_ε⁻¹ ε`
    pub quad: f64,
    /// `Σ ln det Σ_ε`
    pub logdet: f64,
    pub per_step: Option<Vec<f64>>,
}

/// Runs the innovation-form predictor
/// `ε = x_o - H_o ξ - J_ro r`, `ξ⁺ = F_c ξ + G_r r + K ε` with `ξ₁ = 0`.
/// Innovations and states are written to the optional outputs.
pub fn run_filter(
    ss: &ClosedLoopSS,
    gains: &GainSchedule,
    data: &Dataset,
    mut eps_out: Option<&mut DMatrix<f64>>,
    mut xi_out: Option<&mut DMatrix<f64>>,
    per_step: bool,
) -> Result<FilterSums> {
    let n = ss.states();
    let p = ss.observations();
    let m = ss.references();
    if data.observations() != p || data.references() != m {
        return Err(Error::Dimension(format!(
            "data has {} observations and {} references, model expects {p} and {m}",
            data.observations(),
            data.references()
        )));
    }
    let big_n = data.horizon();
    let f = ss.f_c.as_slice();
    let g = ss.g_r.as_slice();
    let h = ss.h_o.as_slice();
    let j = ss.j_ro.as_slice();
    let r_all = data.r().as_slice();
    let x_all = data.x_o().as_slice();
    let mut xi = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut eps = vec![0.0; p];
    let mut sums = FilterSums {
        per_step: per_step.then(|| Vec::with_capacity(big_n)),
        ..Default::default()
    };
    for t in 0..big_n {
        let r = &r_all[t * m..(t + 1) * m];
        let x = &x_all[t * p..(t + 1) * p];
        let gs = gains.at(t);
        for i in 0..p {
            let mut v = x[i];
            for c in 0..n {
                v -= h[c * p + i] * xi[c];
            }
            for c in 0..m {
                v -= j[c * p + i] * r[c];
            }
            eps[i] = v;
        }
        let sinv = gs.sigma_eps_inv.as_slice();
        let mut q = 0.0;
        for a in 0..p {
            let mut row = 0.0;
            for b in 0..p {
                row += sinv[b * p + a] * eps[b];
            }
            q += eps[a] * row;
        }
        sums.quad += q;
        sums.logdet += gs.logdet;
        if let Some(ps) = sums.per_step.as_mut() {
            ps.push(0.5 * (q + gs.logdet));
        }
        if let Some(e) = eps_out.as_deref_mut() {
            e.column_mut(t).copy_from_slice(&eps);
        }
        if let Some(xo) = xi_out.as_deref_mut() {
            xo.column_mut(t).copy_from_slice(&xi);
        }
        let kk = gs.k.as_slice();
        for i in 0..n {
            let mut v = 0.0;
            for c in 0..n {
                v += f[c * n + i] * xi[c];
            }
            for c in 0..m {
                v += g[c * n + i] * r[c];
            }
            for c in 0..p {
                v += kk[c * n + i] * eps[c];
            }
            next[i] = v;
        }
        std::mem::swap(&mut xi, &mut next);
    }
    Ok(sums)
}

fn sequence(ss: &ClosedLoopSS, gains: &GainSchedule, data: &Dataset, constant: bool) -> Result<InnovationSequence> {
    let big_n = data.horizon();
    let mut eps = DMatrix::zeros(ss.observations(), big_n);
    let mut xi = DMatrix::zeros(ss.states(), big_n);
    run_filter(ss, gains, data, Some(&mut eps), Some(&mut xi), false)?;
    let sigma_eps = if constant {
        vec![gains.tail.sigma_eps.clone()]
    } else {
        (0..big_n).map(|k| gains.at(k).sigma_eps.clone()).collect()
    };
    Ok(InnovationSequence {
        eps,
        sigma_eps,
        xi_hat: xi,
    })
}

/// Time-varying Kalman predictor with `ξ₁ = 0` and `Σ₁` chosen by `init`.
pub fn kalman_time_varying(
    ss: &ClosedLoopSS,
    qrs: &Qrs,
    data: &Dataset,
    init: InitKind,
) -> Result<InnovationSequence> {
    let gains = GainSchedule::time_varying(ss, qrs, init, data.horizon())?;
    sequence(ss, &gains, data, false)
}

/// Stationary Kalman predictor with `ξ₁ = 0`.
pub fn kalman_stationary(
    ss: &ClosedLoopSS,
    ric: &RiccatiSolution,
    data: &Dataset,
) -> Result<InnovationSequence> {
    let gains = GainSchedule::stationary(ric)?;
    sequence(ss, &gains, data, true)
}

/// `W_o = H_o (zI - F_c + K H_o)⁻¹ K` and
/// `W_r = H_o (zI - F_c + K H_o)⁻¹ (G_r - K J_ro) + J_ro`.
pub fn predictor_transfers(
    ss: &ClosedLoopSS,
    k: &DMatrix<f64>,
    z: Complex64,
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    let a = &ss.f_c - k * &ss.h_o;
    let ho = to_complex(&ss.h_o);
    let wo = &ho * resolvent_solve(&a, z, k)?;
    let wr = &ho * resolvent_solve(&a, z, &(&ss.g_r - k * &ss.j_ro))? + to_complex(&ss.j_ro);
    Ok((wo, wr))
}

/// `G_o = W_o (I - W_o)⁻¹` and `G_c = (I - W_o)⁻¹ W_r`. The returned `G_o`
/// excludes the identity feedthrough of the innovation model, i.e. it equals
/// `H_o (zI - F_c)⁻¹ K`.
pub fn predictor_to_innovation(
    wo: &DMatrix<Complex64>,
    wr: &DMatrix<Complex64>,
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    let p = wo.nrows();
    let lhs = DMatrix::<Complex64>::identity(p, p) - wo;
    let lu = lhs.clone().lu();
    let singular = || Error::DegenerateSample("I - W_o is singular".into());
    let gc = lu
        .solve(wr)
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(singular)?;
    // W_o (I - W_o)⁻¹ = ((I - W_o)⁻ᵀ W_oᵀ)ᵀ
    let go = lhs
        .transpose()
        .lu()
        .solve(&wo.transpose())
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(singular)?
        .transpose();
    Ok((go, gc))
}
