//! Staged maximum-likelihood estimation.
//!
//! For the ARMAX class the stages are
//! 1. ARX: `c = 0`, one noise variance shared by all nodes;
//! 2. ARMAX with the shared variance, warm-started from stage 1;
//! 3. all parameters, with each variance written as `floor + exp(v)`.
//!
//! The output-error class ties `c = a` and runs the shared and the free
//! variance stages only. A shared variance is always profiled out in closed
//! form, which is exact for every objective since all covariances in the
//! density scale with it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{fd_step, Evaluator, Objective};
use crate::model::{ArmaxNode, ModelClass, NetworkModel, ParamLayout, Topology, THETA_MARGIN};
use crate::optim::{trust_region_minimize, InitialHessian, Status, TrustRegionOptions};
use crate::poly;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegionConfig {
    pub initial_radius: f64,
    pub max_radius: f64,
    pub shrink: f64,
    pub grow: f64,
    pub eta: f64,
    pub initial_hessian: InitialHessian,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        let o = TrustRegionOptions::default();
        Self {
            initial_radius: o.initial_radius,
            max_radius: o.max_radius,
            shrink: o.shrink,
            grow: o.grow,
            eta: o.eta,
            initial_hessian: o.initial_hessian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub objective: Objective,
    pub class: ModelClass,
    pub tol: f64,
    /// Iteration cap per stage.
    pub max_iter: usize,
    pub stability_margin: f64,
    /// Noise variances are parametrized as `lambda_floor + exp(v)`.
    pub lambda_floor: f64,
    pub trust_region: TrustRegionConfig,
    /// Seeds the perturbation of the stage-1 starting point.
    pub seed: u64,
    /// Additional seeded starts; the best final objective wins.
    pub restarts: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            objective: Objective::TimeVaryingZero,
            class: ModelClass::Armax,
            tol: 1e-5,
            max_iter: 300,
            stability_margin: THETA_MARGIN,
            lambda_floor: 1e-10,
            trust_region: TrustRegionConfig::default(),
            seed: 0,
            restarts: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Input(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.stability_margin > 0.0 && self.stability_margin < 1.0) {
            return Err(Error::Input(format!(
                "stability_margin must lie in (0, 1), got {}",
                self.stability_margin
            )));
        }
        if !(self.lambda_floor > 0.0) {
            return Err(Error::Input("lambda_floor must be positive".into()));
        }
        self.options().validate()
    }

    fn options(&self) -> TrustRegionOptions {
        let t = &self.trust_region;
        TrustRegionOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            initial_radius: t.initial_radius,
            max_radius: t.max_radius,
            shrink: t.shrink,
            grow: t.grow,
            eta: t.eta,
            initial_hessian: t.initial_hessian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Arx,
    Armax,
    OutputError,
    Full,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Arx => "arx",
            Stage::Armax => "armax",
            Stage::OutputError => "output_error",
            Stage::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Packed `(a, b, c, λ)` at the end of the stage; shared variances are
    /// filled in with their profiled value.
    pub theta: Vec<f64>,
    pub initial_value: f64,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
    /// Objective after each accepted step.
    pub accepted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub theta_hat: Vec<f64>,
    pub orders: Vec<usize>,
    pub objective: Objective,
    pub stages: Vec<StageRecord>,
    pub converged: bool,
    /// Index of the winning start when restarts were requested.
    pub start: usize,
}

impl EstimateResult {
    pub fn model(&self, topology: &Topology) -> Result<NetworkModel> {
        NetworkModel::from_theta(&ParamLayout::new(self.orders.clone()), topology.clone(), &self.theta_hat)
    }
    pub fn final_value(&self) -> f64 {
        self.stages.last().map_or(f64::INFINITY, |s| s.value)
    }
}

/// Parameter maps for one class; `oe` ties `c = a`.
struct Problem<'a> {
    ev: Evaluator,
    layout: ParamLayout,
    topology: &'a Topology,
    oe: bool,
    margin: f64,
    lambda_floor: f64,
}

impl Problem<'_> {
    fn nodes_from(&self, stage: Stage, v: &[f64]) -> Option<Vec<ArmaxNode>> {
        let l = &self.layout;
        let n = l.total_order();
        let mut out = Vec::with_capacity(l.nodes());
        let mut offset = 0;
        for (i, &k) in l.orders().iter().enumerate() {
            let a = v[offset..offset + k].to_vec();
            let b = v[n + offset..n + offset + k].to_vec();
            let c = match stage {
                Stage::Arx => vec![0.0; k],
                Stage::OutputError => a.clone(),
                Stage::Armax => v[2 * n + offset..2 * n + offset + k].to_vec(),
                Stage::Full if self.oe => a.clone(),
                Stage::Full => v[2 * n + offset..2 * n + offset + k].to_vec(),
            };
            let lambda = match stage {
                Stage::Full => {
                    let base = if self.oe { 2 * n } else { 3 * n };
                    self.lambda_floor + v[base + i].exp()
                }
                _ => 1.0,
            };
            if !lambda.is_finite() {
                return None;
            }
            if poly::max_root_modulus(&poly::monic(&c)) > 1.0 - self.margin {
                return None;
            }
            out.push(ArmaxNode::new(a, b, c, lambda).ok()?);
            offset += k;
        }
        Some(out)
    }

    fn dim(&self, stage: Stage) -> usize {
        let n = self.layout.total_order();
        match stage {
            Stage::Arx | Stage::OutputError => 2 * n,
            Stage::Armax => 3 * n,
            Stage::Full if self.oe => 2 * n + self.layout.nodes(),
            Stage::Full => 3 * n + self.layout.nodes(),
        }
    }

    /// Objective and, for shared-variance stages, the profiled variance.
    fn value(&self, stage: Stage, v: &[f64]) -> (f64, f64) {
        let Some(nodes) = self.nodes_from(stage, v) else {
            return (f64::INFINITY, 1.0);
        };
        let Ok(model) = NetworkModel::new(nodes, self.topology.clone()) else {
            return (f64::INFINITY, 1.0);
        };
        match self.ev.eval(&model) {
            Ok(nll) if nll.is_finite() => {
                if stage == Stage::Full {
                    (nll.value, 1.0)
                } else {
                    nll.profiled()
                }
            }
            _ => (f64::INFINITY, 1.0),
        }
    }

    fn gradient(&self, stage: Stage, v: &[f64]) -> Result<Vec<f64>> {
        let f0 = self.value(stage, v).0;
        (0..v.len())
            .into_par_iter()
            .map(|i| {
                let mut h = fd_step(v[i]);
                let mut work = v.to_vec();
                for _ in 0..3 {
                    work[i] = v[i] + h;
                    let fp = self.value(stage, &work).0;
                    work[i] = v[i] - h;
                    let fm = self.value(stage, &work).0;
                    match (fp.is_finite(), fm.is_finite()) {
                        (true, true) => return Ok((fp - fm) / (2.0 * h)),
                        (true, false) => return Ok((fp - f0) / h),
                        (false, true) => return Ok((f0 - fm) / h),
                        (false, false) => h *= 0.1,
                    }
                }
                Err(Error::Stencil(i))
            })
            .collect()
    }

    /// Full packed θ for a stage vector; `scale` replaces the shared unit variance.
    fn full_theta(&self, stage: Stage, v: &[f64], scale: f64) -> Result<Vec<f64>> {
        let nodes = self
            .nodes_from(stage, v)
            .ok_or_else(|| Error::Estimation {
                stage: stage.name().into(),
                message: "stage optimum left the admissible set".into(),
            })?;
        let nodes = nodes
            .into_iter()
            .map(|nd| {
                let lambda = if stage == Stage::Full { nd.lambda() } else { scale };
                ArmaxNode::new(nd.a().to_vec(), nd.b().to_vec(), nd.c().to_vec(), lambda)
            })
            .collect::<Result<Vec<_>>>()?;
        self.layout.pack(&nodes)
    }
}

/// Runs the staged estimator. The horizon must be at least the parameter count.
pub fn estimate(data: &Dataset, topology: &Topology, orders: &[usize], config: &EstimatorConfig) -> Result<EstimateResult> {
    estimate_logged(data, topology, orders, config).0
}

/// Like [`estimate`], also returning the stages completed by the first start
/// before it failed when no start succeeds (empty otherwise).
pub fn estimate_logged(
    data: &Dataset,
    topology: &Topology,
    orders: &[usize],
    config: &EstimatorConfig,
) -> (Result<EstimateResult>, Vec<StageRecord>) {
    let mut partial = Vec::new();
    let res = estimate_inner(data, topology, orders, config, &mut partial);
    if res.is_ok() {
        partial.clear();
    }
    (res, partial)
}

fn estimate_inner(
    data: &Dataset,
    topology: &Topology,
    orders: &[usize],
    config: &EstimatorConfig,
    partial: &mut Vec<StageRecord>,
) -> Result<EstimateResult> {
    config.validate()?;
    let layout = ParamLayout::new(orders.to_vec());
    if layout.nodes() != topology.nodes() {
        return Err(Error::Dimension(format!(
            "{} orders for {} nodes",
            layout.nodes(),
            topology.nodes()
        )));
    }
    if data.horizon() < layout.len() {
        return Err(Error::Input(format!(
            "horizon {} is shorter than the parameter count {}",
            data.horizon(),
            layout.len()
        )));
    }
    let ev = Evaluator::new(config.objective, data, topology)?.with_margin(config.stability_margin);
    let problem = Problem {
        ev,
        layout,
        topology,
        oe: config.class == ModelClass::OutputError,
        margin: config.stability_margin,
        lambda_floor: config.lambda_floor,
    };
    let mut best: Option<EstimateResult> = None;
    let mut first_err = None;
    for start in 0..=config.restarts {
        let seed = if start == 0 {
            config.seed
        } else {
            crate::experiments::derive_seed(config.seed, start as u64)
        };
        let mut log = Vec::new();
        match run_stages(&problem, config, seed, &mut log) {
            Ok(mut r) => {
                r.start = start;
                if best.as_ref().is_none_or(|b| r.final_value() < b.final_value()) {
                    best = Some(r);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    *partial = log;
                    first_err = Some(e);
                }
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one start ran"))
}

fn run_stages(p: &Problem, config: &EstimatorConfig, seed: u64, records: &mut Vec<StageRecord>) -> Result<EstimateResult> {
    let opts = config.options();
    let n = p.layout.total_order();
    let m = p.layout.nodes();
    let stages: &[Stage] = if p.oe {
        &[Stage::OutputError, Stage::Full]
    } else {
        &[Stage::Arx, Stage::Armax, Stage::Full]
    };
    // a = 0 and a small seeded b keep the start stable and off symmetric saddles
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = vec![0.0; 2 * n];
    for x in v[n..].iter_mut() {
        *x = rng.random_range(-0.1..0.1);
    }
    let mut scale: f64 = 1.0;
    for &stage in stages {
        // embed the previous optimum
        let x0 = match stage {
            Stage::Arx | Stage::OutputError => v.clone(),
            Stage::Armax => [v.as_slice(), &vec![0.0; n]].concat(),
            Stage::Full => {
                let mut x = v.clone();
                let above = (scale - config.lambda_floor).max(config.lambda_floor);
                x.extend(std::iter::repeat_n(above.ln(), m));
                x
            }
        };
        debug_assert_eq!(x0.len(), p.dim(stage));
        let f = |x: &[f64]| p.value(stage, x).0;
        let g = |x: &[f64]| p.gradient(stage, x);
        let tag = |message: String| Error::Estimation {
            stage: stage.name().into(),
            message,
        };
        let initial_value = f(&x0);
        if !initial_value.is_finite() {
            return Err(tag("objective is not finite at the stage start".into()));
        }
        let min = trust_region_minimize(f, g, &x0, &opts).map_err(|e| tag(e.to_string()))?;
        if !min.f.is_finite() {
            return Err(tag("objective is not finite at the stage end".into()));
        }
        let (_, s) = p.value(stage, &min.x);
        scale = s;
        records.push(StageRecord {
            stage,
            theta: p.full_theta(stage, &min.x, scale)?,
            initial_value,
            value: min.f,
            iterations: min.iterations,
            evaluations: min.evaluations,
            status: min.status,
            accepted: min.accepted,
        });
        v = min.x;
    }
    let last = records.last().expect("at least one stage");
    Ok(EstimateResult {
        theta_hat: last.theta.clone(),
        orders: p.layout.orders().to_vec(),
        objective: config.objective,
        converged: records.iter().all(|r| r.status.converged()),
        stages: records.clone(),
        start: 0,
    })
}
