//! Trust-region minimization with symmetric rank-one curvature updates.
//!
//! The quadratic model is minimized exactly over the ball through an
//! eigendecomposition of the curvature matrix, which is cheap at the parameter
//! counts of interest (a few dozen). Objective values of `+∞` mark points
//! outside the admissible set; such trial steps are rejected and the radius
//! shrinks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial curvature matrix of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialHessian {
    Identity,
    /// Forward differences of the gradient, symmetrized.
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustRegionOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub initial_radius: f64,
    pub max_radius: f64,
    pub shrink: f64,
    pub grow: f64,
    /// Minimum ratio of actual to predicted decrease for acceptance.
    pub eta: f64,
    pub initial_hessian: InitialHessian,
}

impl Default for TrustRegionOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iter: 300,
            initial_radius: 0.5,
            max_radius: 10.0,
            shrink: 0.25,
            grow: 2.0,
            eta: 1e-4,
            initial_hessian: InitialHessian::FiniteDifference,
        }
    }
}

impl TrustRegionOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tol > 0.0
            && self.max_iter > 0
            && self.initial_radius > 0.0
            && self.max_radius >= self.initial_radius
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.grow > 1.0
            && (0.0..0.25).contains(&self.eta);
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid trust-region options {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// A trial step no longer than `tol` that was rejected or decreased the
    /// objective by at most `tol` relative to its magnitude.
    SmallStep,
    /// Gradient norm at most `tol`.
    SmallGradient,
    /// As `SmallStep`, with the unrestricted step leaving the domain
    /// (`f = ∞`): the minimum lies on the boundary and the final steps moved
    /// only the coordinates that can move on their own.
    Boundary,
    MaxIterations,
}

impl Status {
    pub fn converged(self) -> bool {
        !matches!(self, Status::MaxIterations)
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
    /// Objective after each accepted step, starting with `f(x0)`.
    pub accepted: Vec<f64>,
}

/// Minimizes `f` from `x0`. `grad` is only called at points where `f` is finite.
pub fn trust_region_minimize<F, G>(f: F, grad: G, x0: &[f64], opts: &TrustRegionOptions) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    opts.validate()?;
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x0);
    let mut evaluations = 1;
    if !fx.is_finite() {
        return Err(Error::InvalidStart);
    }
    let mut g = DVector::from_vec(grad(x0)?);
    let mut b = match opts.initial_hessian {
        InitialHessian::Identity => DMatrix::identity(n, n),
        InitialHessian::FiniteDifference => {
            let (h, evals) = fd_hessian(&f, &grad, x.as_slice(), g.as_slice())?;
            evaluations += evals;
            h
        }
    };
    let mut radius = opts.initial_radius;
    let mut accepted = vec![fx];
    let mut status = Status::MaxIterations;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if g.norm() <= opts.tol {
            status = Status::SmallGradient;
            break;
        }
        iterations += 1;
        let mut s = solve_subproblem(&b, &g, radius);
        let full_norm = s.norm();
        let mut trial = &x + &s;
        let mut ft = f(trial.as_slice());
        evaluations += 1;
        let blocked_step = !ft.is_finite();
        if blocked_step {
            // hold the coordinates that leave the domain on their own and
            // step in the others
            let (free, evals) = free_coordinates(&f, &x, &s);
            evaluations += evals;
            if !free.is_empty() && free.len() < n {
                let bf = b.select_rows(&free).select_columns(&free);
                let gf = g.select_rows(&free);
                let sf = solve_subproblem(&bf, &gf, radius);
                s = DVector::zeros(n);
                for (k, &i) in free.iter().enumerate() {
                    s[i] = sf[k];
                }
                trial = &x + &s;
                ft = f(trial.as_slice());
                evaluations += 1;
            }
        }
        let snorm = s.norm();
        let pred = -(g.dot(&s) + 0.5 * s.dot(&(&b * &s)));
        let improves = ft.is_finite() && ft < fx;
        let rho = if !ft.is_finite() {
            f64::NEG_INFINITY
        } else if pred > 0.0 {
            (fx - ft) / pred
        } else if improves {
            1.0
        } else {
            f64::NEG_INFINITY
        };
        let mut decrease = 0.0;
        let accept = rho > opts.eta || (snorm <= opts.tol && improves);
        if accept {
            let gt = DVector::from_vec(grad(trial.as_slice())?);
            sr1_update(&mut b, &s, &(&gt - &g));
            decrease = fx - ft;
            x = trial;
            fx = ft;
            g = gt;
            accepted.push(fx);
        }
        // a short step that still buys a sizeable decrease does not stop the run
        // lengths of the unrestricted step drive termination and rejection
        if full_norm <= opts.tol && decrease <= opts.tol * (1.0 + fx.abs()) {
            status = if blocked_step { Status::Boundary } else { Status::SmallStep };
            break;
        }
        if !accept {
            radius = opts.shrink * full_norm;
        } else if rho < 0.25 {
            radius = opts.shrink * snorm;
        } else if rho > 0.75 && snorm >= 0.99 * radius {
            radius = (opts.grow * radius).min(opts.max_radius);
        }
    }
    Ok(Minimum {
        x: x.as_slice().to_vec(),
        f: fx,
        gradient: g.as_slice().to_vec(),
        iterations,
        evaluations,
        status,
        accepted,
    })
}

/// Coordinates `i` with `f(x + s_i e_i)` finite, and the evaluation count.
fn free_coordinates<F: Fn(&[f64]) -> f64>(f: &F, x: &DVector<f64>, s: &DVector<f64>) -> (Vec<usize>, usize) {
    let mut free = Vec::new();
    let mut evals = 0;
    let mut y = x.clone();
    for i in 0..x.len() {
        if s[i] == 0.0 {
            free.push(i);
            continue;
        }
        y[i] = x[i] + s[i];
        evals += 1;
        if f(y.as_slice()).is_finite() {
            free.push(i);
        }
        y[i] = x[i];
    }
    (free, evals)
}

/// Symmetric rank-one update, skipped when the denominator is too small
/// relative to the correction.
pub fn sr1_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> bool {
    let r = y - &*b * s;
    let den = r.dot(s);
    if den.abs() < 1e-8 * r.norm() * s.norm() || den == 0.0 {
        return false;
    }
    *b += &r * r.transpose() / den;
    true
}

fn fd_hessian<F, G>(f: &F, grad: &G, x: &[f64], g0: &[f64]) -> Result<(DMatrix<f64>, usize)>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut evals = 0;
    let mut work = x.to_vec();
    for j in 0..n {
        let step = 1e-4 * x[j].abs().max(1.0);
        let mut column = None;
        for sign in [1.0, -1.0] {
            work[j] = x[j] + sign * step;
            evals += 1;
            if f(&work).is_finite() {
                if let Ok(gj) = grad(&work) {
                    column = Some((gj, sign * step));
                    break;
                }
            }
        }
        work[j] = x[j];
        match column {
            Some((gj, d)) => {
                for i in 0..n {
                    h[(i, j)] = (gj[i] - g0[i]) / d;
                }
            }
            None => h[(j, j)] = 1.0,
        }
    }
    crate::linalg::symmetrize(&mut h);
    Ok((h, evals))
}

/// Exact minimizer of `gᵀs + ½ sᵀBs` subject to `‖s‖ ≤ radius`.
pub fn solve_subproblem(b: &DMatrix<f64>, g: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = g.len();
    if n == 0 {
        return DVector::zeros(0);
    }
    let eig = SymmetricEigen::new(b.clone());
    let q = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let gt = q.transpose() * g;
    let scale = lam.amax().max(1.0);
    let lmin = lam.min();
    let step = |mu: f64| -> DVector<f64> {
        let mut c = DVector::zeros(n);
        for i in 0..n {
            let d = lam[i] + mu;
            if d > 1e-14 * scale {
                c[i] = -gt[i] / d;
            }
        }
        q * c
    };
    if lmin > 1e-14 * scale {
        let s = step(0.0);
        if s.norm() <= radius {
            return s;
        }
    }
    let lo0 = (-lmin).max(0.0);
    // components along the bottom eigenspace decide between the easy and hard case
    let bottom_weight: f64 = (0..n)
        .filter(|&i| lam[i] + lo0 <= 1e-10 * scale)
        .map(|i| gt[i] * gt[i])
        .sum::<f64>()
        .sqrt();
    if bottom_weight <= 1e-12 * g.norm().max(f64::MIN_POSITIVE) {
        let s = step(lo0);
        let sn = s.norm();
        if sn <= radius {
            let imin = lam.imin();
            let v = q.column(imin).into_owned();
            let sv = s.dot(&v);
            let tau = -sv + (sv * sv + radius * radius - sn * sn).max(0.0).sqrt();
            return s + v * tau;
        }
    }
    // ‖s(μ)‖ decreases in μ; bisect on the bracket [lo, hi]
    let mut lo = lo0;
    let mut hi = lo0 + g.norm() / radius + scale;
    while step(hi).norm() > radius {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if step(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1.0) {
            break;
        }
    }
    step(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }
    fn rosenbrock_grad(x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![
            -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
            200.0 * (x[1] - x[0] * x[0]),
        ])
    }

    #[test]
    fn quadratic_converges() {
        let target = [1.0, 2.0];
        let f = |x: &[f64]| 0.5 * x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let g = |x: &[f64]| Ok(x.iter().zip(&target).map(|(a, b)| a - b).collect());
        for init in [InitialHessian::Identity, InitialHessian::FiniteDifference] {
            let opts = TrustRegionOptions {
                initial_hessian: init,
                ..Default::default()
            };
            let m = trust_region_minimize(f, g, &[0.0, 0.0], &opts).unwrap();
            assert!(m.iterations <= 30);
            assert!((m.x[0] - 1.0).abs() < 1e-8 && (m.x[1] - 2.0).abs() < 1e-8, "{:?}", m.x);
            assert!(m.status.converged());
        }
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        for init in [InitialHessian::Identity, InitialHessian::FiniteDifference] {
            let opts = TrustRegionOptions {
                tol: 1e-10,
                max_iter: 2000,
                initial_hessian: init,
                ..Default::default()
            };
            let m = trust_region_minimize(rosenbrock, rosenbrock_grad, &[-1.2, 1.0], &opts).unwrap();
            assert!(m.f <= 1e-8, "{init:?}: f = {} at {:?}", m.f, m.x);
            assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn wall_is_never_accepted() {
        let calls = std::cell::RefCell::new(Vec::new());
        let f = |x: &[f64]| {
            let v = if x[0].abs() > 1.0 { f64::INFINITY } else { -x[0] + 0.5 * x[1] * x[1] };
            calls.borrow_mut().push((x[0], v));
            v
        };
        let g = |x: &[f64]| Ok(vec![-1.0, x[1]]);
        let m = trust_region_minimize(f, g, &[0.9, 0.3], &TrustRegionOptions::default()).unwrap();
        assert!(m.x[0] <= 1.0 && m.x[0] > 0.99, "{:?}", m.x);
        // the free coordinate keeps moving while the other one is held
        assert!(m.x[1].abs() < 1e-4, "{:?}", m.x);
        assert!(m.f.is_finite());
        assert!(m.accepted.iter().all(|v| v.is_finite()));
        assert!(calls.borrow().iter().any(|(_, v)| v.is_infinite()));
        assert!(matches!(m.status, Status::SmallStep | Status::Boundary), "{:?}", m.status);
        assert!(m.status.converged());
    }

    #[test]
    fn infinite_start_is_rejected() {
        let f = |_: &[f64]| f64::INFINITY;
        let g = |_: &[f64]| Ok(vec![0.0]);
        assert!(matches!(
            trust_region_minimize(f, g, &[0.0], &TrustRegionOptions::default()),
            Err(Error::InvalidStart)
        ));
    }

    #[test]
    fn hard_case_reaches_boundary() {
        let b = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 2.0]);
        let g = DVector::from_vec(vec![0.0, 1.0]);
        let s = solve_subproblem(&b, &g, 1.0);
        assert!((s.norm() - 1.0).abs() < 1e-10);
        // the model value beats the pure gradient direction
        let m = |s: &DVector<f64>| g.dot(s) + 0.5 * s.dot(&(&b * s));
        assert!(m(&s) < m(&DVector::from_vec(vec![0.0, -1.0])));
    }

    proptest! {
        #[test]
        fn subproblem_is_optimal_on_random_directions(
            entries in proptest::collection::vec(-3.0f64..3.0, 9),
            gv in proptest::collection::vec(-2.0f64..2.0, 3),
            radius in 0.05f64..3.0,
            dirs in proptest::collection::vec(-1.0f64..1.0, 30),
        ) {
            let mut b = DMatrix::from_row_slice(3, 3, &entries);
            crate::linalg::symmetrize(&mut b);
            let g = DVector::from_vec(gv);
            let s = solve_subproblem(&b, &g, radius);
            prop_assert!(s.norm() <= radius * (1.0 + 1e-9));
            let m = |s: &DVector<f64>| g.dot(s) + 0.5 * s.dot(&(&b * s));
            let ms = m(&s);
            for d in dirs.chunks(3) {
                let mut t = DVector::from_column_slice(d);
                let tn = t.norm();
                if tn > 1e-3 {
                    t *= radius / tn;
                    prop_assert!(ms <= m(&t) + 1e-8 * (1.0 + ms.abs()));
                    prop_assert!(ms <= m(&(t * 0.5)) + 1e-8 * (1.0 + ms.abs()));
                }
            }
        }

        #[test]
        fn accepted_values_never_increase(x0 in -2.0f64..2.0, y0 in -1.0f64..3.0) {
            let m = trust_region_minimize(rosenbrock, rosenbrock_grad, &[x0, y0], &TrustRegionOptions::default()).unwrap();
            prop_assert!(m.accepted.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
