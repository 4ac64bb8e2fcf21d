//! Negative log-likelihood objectives and finite-difference gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::closed_loop::assemble_closed_loop;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kalman::{run_filter, GainSchedule, InitKind};
use crate::linalg::spectral_radius;
use crate::model::{NetworkModel, ParamLayout, Topology, THETA_MARGIN};
use crate::riccati::{qrs_blocks, solve_dare, DareOptions};
use crate::toeplitz::ToeplitzObjective;

/// Which likelihood is minimized. Serialized by its short name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Stationary Kalman predictor with `ξ̂₁ = 0`.
    Stationary,
    /// Time-varying predictor started at the stationary state covariance.
    TimeVaryingLyapunov,
    /// Time-varying predictor started at zero covariance; exact under zero
    /// initial conditions.
    TimeVaryingZero,
    /// Predictor-free reduced Toeplitz likelihood.
    ToeplitzReduced,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::Stationary,
        Objective::TimeVaryingLyapunov,
        Objective::TimeVaryingZero,
        Objective::ToeplitzReduced,
    ];
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Objective::Stationary => "stationary",
            Objective::TimeVaryingLyapunov => "tv-lyapunov",
            Objective::TimeVaryingZero => "tv-zero",
            Objective::ToeplitzReduced => "toeplitz",
        };
        f.write_str(s)
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "stationary" => Ok(Objective::Stationary),
            "tvlyapunov" | "timevaryinglyapunov" => Ok(Objective::TimeVaryingLyapunov),
            "tvzero" | "timevaryingzero" => Ok(Objective::TimeVaryingZero),
            "toeplitz" | "toeplitzreduced" => Ok(Objective::ToeplitzReduced),
            _ => Err(Error::Input(format!(
                "unknown objective '{s}' (expected stationary, tv-lyapunov, tv-zero or toeplitz)"
            ))),
        }
    }
}

impl Serialize for Objective {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Objective {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `value = (quad + logdet)/2`, the `(dim/2) ln 2π` constant omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct NllValue {
    pub value: f64,
    pub quad: f64,
    pub logdet: f64,
    /// Number of scalar observations in the density.
    pub dim: usize,
    pub per_step: Option<Vec<f64>>,
    pub theta: Vec<f64>,
}

impl NllValue {
    pub(crate) fn finite(quad: f64, logdet: f64, dim: usize, theta: Vec<f64>) -> Self {
        Self {
            value: 0.5 * (quad + logdet),
            quad,
            logdet,
            dim,
            per_step: None,
            theta,
        }
    }

    /// Sentinel for parameters outside the admissible set.
    pub fn infinite(theta: Vec<f64>) -> Self {
        Self {
            value: f64::INFINITY,
            quad: f64::INFINITY,
            logdet: f64::INFINITY,
            dim: 0,
            per_step: None,
            theta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }

    /// Minimum over a common positive scale `s` of all noise variances and the
    /// minimizing `s`. Every covariance in the density scales linearly in `s`.
    pub fn profiled(&self) -> (f64, f64) {
        if !self.is_finite() || self.dim == 0 {
            return (self.value, 1.0);
        }
        let d = self.dim as f64;
        let q = self.quad.max(1e-300);
        let s = q / d;
        (0.5 * (d + d * s.ln() + self.logdet), s)
    }

    /// Absolute negative log-likelihood including the Gaussian constant.
    pub fn with_constant(&self) -> f64 {
        self.value + 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

fn filter_nll(model: &NetworkModel, data: &Dataset, init: Option<InitKind>, margin: f64) -> Result<NllValue> {
    data.check_topology(model.topology())?;
    let ss = assemble_closed_loop(model)?;
    if spectral_radius(&ss.f_c) > 1.0 - margin {
        return Ok(NllValue::infinite(model.theta()));
    }
    let qrs = qrs_blocks(&ss);
    let gains = match init {
        None => GainSchedule::stationary(&solve_dare(&ss, &qrs, &DareOptions::default())?)?,
        Some(kind) => GainSchedule::time_varying(&ss, &qrs, kind, data.horizon())?,
    };
    let sums = run_filter(&ss, &gains, data, None, None, true)?;
    let mut v = NllValue::finite(
        sums.quad,
        sums.logdet,
        data.horizon() * data.observations(),
        model.theta(),
    );
    v.per_step = sums.per_step;
    Ok(v)
}

/// Stationary-predictor negative log-likelihood; `+∞` outside the stability set.
pub fn nll_stationary(model: &NetworkModel, data: &Dataset) -> Result<NllValue> {
    filter_nll(model, data, None, THETA_MARGIN)
}

/// Time-varying-predictor negative log-likelihood; `+∞` outside the stability set.
pub fn nll_time_varying(model: &NetworkModel, data: &Dataset, init: InitKind) -> Result<NllValue> {
    filter_nll(model, data, Some(init), THETA_MARGIN)
}

/// An objective bound to one dataset and topology.
#[derive(Debug, Clone)]
pub struct Evaluator {
    objective: Objective,
    data: Dataset,
    toeplitz: Option<ToeplitzObjective>,
    margin: f64,
}

impl Evaluator {
    pub fn new(objective: Objective, data: &Dataset, topology: &Topology) -> Result<Self> {
        data.check_topology(topology)?;
        let toeplitz = match objective {
            Objective::ToeplitzReduced => Some(ToeplitzObjective::new(topology, data)?),
            _ => None,
        };
        Ok(Self {
            objective,
            data: data.clone(),
            toeplitz,
            margin: THETA_MARGIN,
        })
    }

    /// Stability margin: `+∞` is returned when `ρ(F_c) > 1 - margin`.
    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn eval(&self, model: &NetworkModel) -> Result<NllValue> {
        match self.objective {
            Objective::Stationary => filter_nll(model, &self.data, None, self.margin),
            Objective::TimeVaryingLyapunov => {
                filter_nll(model, &self.data, Some(InitKind::Lyapunov), self.margin)
            }
            Objective::TimeVaryingZero => filter_nll(model, &self.data, Some(InitKind::Zero), self.margin),
            Objective::ToeplitzReduced => {
                let ss = assemble_closed_loop(model)?;
                if spectral_radius(&ss.f_c) > 1.0 - self.margin {
                    return Ok(NllValue::infinite(model.theta()));
                }
                let mut v = self.toeplitz.as_ref().expect("built in new").eval(model)?;
                v.theta = model.theta();
                Ok(v)
            }
        }
    }
}

/// Step used for coordinate `x` of a central difference.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Central-difference gradient. Coordinates flagged in `log_coords` are
/// differentiated in `ln x` and mapped back by the chain rule. A stencil that
/// leaves the domain (`f = ±∞` or NaN) is retried once with a ten times smaller
/// step before failing.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], log_coords: &[bool]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for i in 0..x.len() {
        let log = log_coords.get(i).copied().unwrap_or(false);
        if log && x[i] <= 0.0 {
            return Err(Error::Stencil(i));
        }
        let base = if log { x[i].ln() } else { x[i] };
        let map = |v: f64| if log { v.exp() } else { v };
        let mut h = fd_step(base);
        let mut done = false;
        for _ in 0..2 {
            work[i] = map(base + h);
            let fp = f(&work);
            work[i] = map(base - h);
            let fm = f(&work);
            work[i] = x[i];
            if fp.is_finite() && fm.is_finite() {
                let d = (fp - fm) / (2.0 * h);
                g[i] = if log { d / x[i] } else { d };
                done = true;
                break;
            }
            h *= 0.1;
        }
        if !done {
            return Err(Error::Stencil(i));
        }
    }
    Ok(g)
}

/// Gradient of an objective with respect to the packed parameter vector
/// `(a, b, c, λ)`; the λ coordinates are differentiated in log-space.
pub fn gradient(objective: Objective, model: &NetworkModel, data: &Dataset) -> Result<Vec<f64>> {
    let ev = Evaluator::new(objective, data, model.topology())?;
    let layout = model.layout();
    let topo = model.topology().clone();
    let theta = model.theta();
    let log: Vec<bool> = (0..layout.len())
        .map(|i| i >= layout.lambda_index(0))
        .collect();
    let f = |th: &[f64]| objective_at(&ev, &layout, &topo, th);
    if !f(&theta).is_finite() {
        return Err(Error::InvalidStart);
    }
    fd_gradient(f, &theta, &log)
}

/// Objective value at a packed parameter vector; `+∞` when the vector does not
/// describe an admissible model or the evaluation fails.
pub fn objective_at(ev: &Evaluator, layout: &ParamLayout, topo: &Topology, theta: &[f64]) -> f64 {
    NetworkModel::from_theta(layout, topo.clone(), theta)
        .and_then(|m| ev.eval(&m))
        .map(|v| v.value)
        .unwrap_or(f64::INFINITY)
}
