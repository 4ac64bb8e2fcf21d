//! Closed-loop simulation from zero initial conditions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::closed_loop::assemble_closed_loop;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::NetworkModel;

/// All node signals of a simulated run, each M × N.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub y: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

/// Gaussian noise with per-node variances `λ_i`, M × N.
pub fn draw_noise(model: &NetworkModel, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd: Vec<f64> = model.lambdas().iter().map(|l| l.sqrt()).collect();
    let mut e = DMatrix::zeros(sd.len(), n);
    for k in 0..n {
        for (i, s) in sd.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            e[(i, k)] = s * z;
        }
    }
    e
}

/// Runs the closed loop driven by `r` (m × N) and `e` (M × N).
pub fn simulate_trajectory(model: &NetworkModel, r: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<Trajectory> {
    let topo = model.topology();
    let mm = topo.nodes();
    if r.nrows() != topo.references() || e.nrows() != mm || e.ncols() != r.ncols() {
        return Err(Error::Dimension("reference or noise dimensions do not match the model".into()));
    }
    let ss = assemble_closed_loop(model)?;
    let n = r.ncols();
    let mut xi = DVector::zeros(ss.states());
    let mut y = DMatrix::zeros(mm, n);
    let mut u = DMatrix::zeros(mm, n);
    for k in 0..n {
        let rk = r.column(k);
        let ek = e.column(k);
        let yk = &ss.h * &xi + ek;
        let uk = topo.upsilon() * &yk + topo.omega() * rk;
        y.set_column(k, &yk);
        u.set_column(k, &uk);
        xi = &ss.f * &xi + &ss.b * &uk + &ss.c * ek;
    }
    Ok(Trajectory { y, u, e: e.clone() })
}

/// Observed signals of a trajectory, p × N.
pub fn observe(model: &NetworkModel, traj: &Trajectory) -> DMatrix<f64> {
    let mm = model.topology().nodes();
    let obs = model.topology().observed();
    DMatrix::from_fn(obs.len(), traj.y.ncols(), |i, k| {
        let s = obs[i];
        if s < mm {
            traj.y[(s, k)]
        } else {
            traj.u[(s - mm, k)]
        }
    })
}

/// Simulates with explicit noise and returns the dataset and the trajectory.
pub fn simulate_with_noise(model: &NetworkModel, r: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<(Dataset, Trajectory)> {
    let traj = simulate_trajectory(model, r, e)?;
    let ds = Dataset::new(r.clone(), observe(model, &traj), model.topology().observed_signals())?;
    Ok((ds, traj))
}

/// Simulates with Gaussian noise drawn from `noise_seed`.
pub fn simulate(model: &NetworkModel, r: &DMatrix<f64>, noise_seed: u64) -> Result<Dataset> {
    let e = draw_noise(model, r.ncols(), noise_seed);
    Ok(simulate_with_noise(model, r, &e)?.0)
}

/// Noise-free response `G_c r`.
pub fn simulate_noise_free(model: &NetworkModel, r: &DMatrix<f64>) -> Result<Dataset> {
    let e = DMatrix::zeros(model.topology().nodes(), r.ncols());
    Ok(simulate_with_noise(model, r, &e)?.0)
}
