//! Monte Carlo harness: random networks, replicated noise realizations,
//! staged estimation, validation and aggregated tables.
//!
//! Every cell draws its randomness from seeds derived from the master seed
//! and the cell coordinates, so results do not depend on scheduling.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimatorConfig};
use crate::model::{NetworkModel, Signal, Topology, TopologyFile};

use super::generate::{derive_seed, generate_random_network, generate_reference, GeneratorSpec};
use super::metrics::{fit_rows, replicate_stats, snr_db, validate_metrics, validation_fit};
use super::pem::{pem_baseline, PemConfig, PemEstimate};
use super::simulate::{draw_noise, simulate_noise_free, simulate_with_noise};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub observed: Vec<Signal>,
    pub horizons: Vec<usize>,
    pub replicates: usize,
    /// Index of the generated model the study is run on.
    pub model: u64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            observed: vec![Signal::u(2)],
            horizons: vec![100, 400, 1600],
            replicates: 20,
            model: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub master_seed: u64,
    /// Network structure; the three-node feedback network when absent. The
    /// observed signals are taken from `observation_sets`.
    pub topology: Option<TopologyFile>,
    pub models: usize,
    pub replicates: usize,
    pub horizons: Vec<usize>,
    pub observation_sets: Vec<Vec<Signal>>,
    pub generator: GeneratorSpec,
    pub estimator: EstimatorConfig,
    /// Runs the separable baseline where the topology admits it.
    pub pem: Option<PemConfig>,
    pub consistency: Option<ConsistencyConfig>,
    /// Worker threads; zero uses the rayon default.
    pub jobs: usize,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            topology: None,
            models: 2,
            replicates: 3,
            horizons: vec![200],
            observation_sets: vec![vec![Signal::u(2)]],
            generator: GeneratorSpec::default(),
            estimator: EstimatorConfig::default(),
            pem: None,
            consistency: None,
            jobs: 0,
        }
    }
}

impl MonteCarloConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models == 0 || self.replicates == 0 || self.horizons.is_empty() || self.observation_sets.is_empty() {
            return Err(Error::Input(
                "models, replicates, horizons and observation_sets must be non-empty".into(),
            ));
        }
        if self.horizons.contains(&0) {
            return Err(Error::Input("horizons must be positive".into()));
        }
        self.estimator.validate()?;
        for set in &self.observation_sets {
            self.topology_for(set)?;
        }
        if let Some(c) = &self.consistency {
            self.topology_for(&c.observed)?;
            if c.replicates == 0 || c.horizons.is_empty() {
                return Err(Error::Input("consistency study needs replicates and horizons".into()));
            }
        }
        Ok(())
    }

    fn base_topology(&self) -> Result<Topology> {
        match &self.topology {
            Some(t) => Topology::try_from(t),
            None => Topology::three_node(&[Signal::u(2)]),
        }
    }

    pub fn topology_for(&self, observed: &[Signal]) -> Result<Topology> {
        let base = self.base_topology()?;
        let m = base.nodes();
        if let Some(s) = observed.iter().find(|s| s.node >= m) {
            return Err(Error::Input(format!("signal {s} is not in a {m}-node network")));
        }
        base.with_observed(observed.iter().map(|s| s.index(m)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ml,
    Pem,
}

/// Outcome of one estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: Method,
    pub observed: Vec<Signal>,
    pub horizon: usize,
    pub model: usize,
    pub replicate: usize,
    pub converged: bool,
    pub error: Option<String>,
    /// `(a, b)` estimate.
    pub ab: Vec<f64>,
    /// `‖(â, b̂) - (a₀, b₀)‖₂`.
    pub ab_error: f64,
    pub fit_pred: Vec<f64>,
    pub fit_sim: Vec<f64>,
    /// Empirical signal-to-noise ratio of the training data per observed signal.
    pub snr_db: Vec<f64>,
    pub time_s: f64,
    #[serde(skip)]
    theta: Option<Vec<f64>>,
    #[serde(skip)]
    pem: Option<PemEstimate>,
}

impl CellRecord {
    /// Converged with positive prediction fits on every observed signal.
    pub fn success(&self) -> bool {
        self.converged && self.error.is_none() && !self.fit_pred.is_empty() && self.fit_pred.iter().all(|f| *f > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub method: Method,
    pub observed: Vec<Signal>,
    pub horizon: usize,
    pub runs: usize,
    /// Runs that converged with positive fits; the means below are over these.
    pub converged: usize,
    pub fit_pred_mean: Vec<f64>,
    pub fit_pred_std: Vec<f64>,
    pub fit_sim_mean: Vec<f64>,
    pub fit_sim_std: Vec<f64>,
    pub mean_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub method: Method,
    pub observed: Vec<Signal>,
    pub horizon: usize,
    pub model: usize,
    pub replicates: usize,
    /// Fits of the replicate-averaged estimate on the validation data.
    pub fit_pred: Vec<f64>,
    pub fit_sim: Vec<f64>,
    pub cov_trace: f64,
    pub cov_max_eig: f64,
    pub bias_sq: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub horizon: usize,
    pub replicates: usize,
    pub converged: usize,
    pub median_error: f64,
    pub mean_error: f64,
    pub q25_error: f64,
    pub q75_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub config: MonteCarloConfig,
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2Row>,
    pub consistency: Option<Vec<ConsistencyRow>>,
    pub cells: Vec<CellRecord>,
    /// Mean empirical SNR over all training sets, in dB.
    pub mean_snr_db: f64,
}

impl MonteCarloReport {
    /// Largest `|mse - trace(cov) - ‖bias‖²|` over the per-system rows.
    pub fn max_decomposition_gap(&self) -> f64 {
        self.table2
            .iter()
            .map(|r| (r.mse - r.cov_trace - r.bias_sq).abs())
            .fold(0.0, f64::max)
    }

    /// Consistency medians are strictly decreasing in the horizon.
    pub fn consistency_decreasing(&self) -> Option<bool> {
        self.consistency
            .as_ref()
            .map(|rows| rows.windows(2).all(|w| w[1].median_error < w[0].median_error))
    }
}

/// Seeds of one model at one horizon.
struct Seeds {
    reference: u64,
    validation_reference: u64,
    validation_noise: u64,
}

fn seeds(model_seed: u64, horizon: usize) -> Seeds {
    let base = derive_seed(model_seed, horizon as u64);
    Seeds {
        reference: derive_seed(base, 1),
        validation_reference: derive_seed(base, 2),
        validation_noise: derive_seed(base, 3),
    }
}

fn noise_seed(model_seed: u64, horizon: usize, replicate: usize) -> u64 {
    derive_seed(derive_seed(model_seed, horizon as u64), 1000 + replicate as u64)
}

fn model_seed(master: u64, model: usize) -> u64 {
    derive_seed(master, model as u64)
}

struct Cell {
    observed: Vec<Signal>,
    horizon: usize,
    model: usize,
    replicate: usize,
}

fn ab_error(ab: &[f64], truth: &[f64]) -> f64 {
    ab.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

fn failed(method: Method, cell: &Cell, msg: String, time_s: f64) -> CellRecord {
    CellRecord {
        method,
        observed: cell.observed.clone(),
        horizon: cell.horizon,
        model: cell.model,
        replicate: cell.replicate,
        converged: false,
        error: Some(msg),
        ab: Vec::new(),
        ab_error: f64::NAN,
        fit_pred: Vec::new(),
        fit_sim: Vec::new(),
        snr_db: Vec::new(),
        time_s,
        theta: None,
        pem: None,
    }
}

fn run_cell(cfg: &MonteCarloConfig, cell: &Cell, models: &[NetworkModel]) -> Result<Vec<CellRecord>> {
    let topo = cfg.topology_for(&cell.observed)?;
    let model = models[cell.model].with_topology(topo.clone())?;
    let mseed = model_seed(cfg.master_seed, cell.model);
    let sd = seeds(mseed, cell.horizon);
    let m = topo.references();
    let r = generate_reference(sd.reference, cell.horizon, m);
    let e = draw_noise(&model, cell.horizon, noise_seed(mseed, cell.horizon, cell.replicate));
    let (train, _) = simulate_with_noise(&model, &r, &e)?;
    let rv = generate_reference(sd.validation_reference, cell.horizon, m);
    let ev = draw_noise(&model, cell.horizon, sd.validation_noise);
    let (valid, _) = simulate_with_noise(&model, &rv, &ev)?;
    let snr = snr_db(&model, &r, &train)?;
    let truth_ab = model.theta()[model.layout().ab_indices()].to_vec();

    let mut out = Vec::new();
    let t = Instant::now();
    let ml = estimate(&train, &topo, &model.orders(), &cfg.estimator).and_then(|res| {
        let hat = res.model(&topo)?;
        let vf = validation_fit(&hat, &valid)?;
        Ok((res, vf))
    });
    let time_s = t.elapsed().as_secs_f64();
    out.push(match ml {
        Ok((res, vf)) => {
            let ab = res.theta_hat[model.layout().ab_indices()].to_vec();
            CellRecord {
                method: Method::Ml,
                observed: cell.observed.clone(),
                horizon: cell.horizon,
                model: cell.model,
                replicate: cell.replicate,
                converged: res.converged,
                error: vf.fit_pred.is_none().then(|| "no stabilizing predictor at the estimate".to_string()),
                ab_error: ab_error(&ab, &truth_ab),
                ab,
                fit_pred: vf.fit_pred.unwrap_or_default(),
                fit_sim: vf.fit_sim,
                snr_db: snr.clone(),
                time_s,
                theta: Some(res.theta_hat),
                pem: None,
            }
        }
        Err(err) => failed(Method::Ml, cell, err.to_string(), time_s),
    });

    if let Some(pcfg) = &cfg.pem {
        if pem_applicable(&topo) {
            let t = Instant::now();
            let res = pem_baseline(&train, &topo, &model.orders(), pcfg).and_then(|p| {
                let pred = p.predict(&valid, &topo)?;
                Ok((p, pred))
            });
            let time_s = t.elapsed().as_secs_f64();
            out.push(match res {
                Ok((p, pred)) => {
                    let ab = p.ab();
                    CellRecord {
                        method: Method::Pem,
                        observed: cell.observed.clone(),
                        horizon: cell.horizon,
                        model: cell.model,
                        replicate: cell.replicate,
                        converged: p.converged,
                        error: None,
                        ab_error: ab_error(&ab, &truth_ab),
                        ab,
                        fit_pred: fit_rows(&pred, valid.x_o()),
                        fit_sim: pem_simulation_fit(&p, &topo, &valid)?,
                        snr_db: snr,
                        time_s,
                        theta: None,
                        pem: Some(p),
                    }
                }
                Err(err) => failed(Method::Pem, cell, err.to_string(), time_s),
            });
        }
    }
    Ok(out)
}

fn pem_applicable(topo: &Topology) -> bool {
    let mut obs = topo.observed_signals();
    obs.sort_by_key(|s| s.index(3));
    topo.is_three_node() && obs == [Signal::u(0), Signal::u(2)]
}

/// Simulation fit of a baseline estimate: the plant transfer functions with
/// the noise models dropped.
fn pem_simulation_fit(p: &PemEstimate, topo: &Topology, valid: &Dataset) -> Result<Vec<f64>> {
    let nodes = (0..3)
        .map(|i| crate::model::ArmaxNode::output_error(p.a[i].clone(), p.b[i].clone(), 1.0))
        .collect::<Result<Vec<_>>>()?;
    let model = NetworkModel::new(nodes, topo.clone())?;
    Ok(fit_rows(simulate_noise_free(&model, valid.r())?.x_o(), valid.x_o()))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn table1(cells: &[CellRecord], cfg: &MonteCarloConfig) -> Vec<Table1Row> {
    let mut rows = Vec::new();
    for method in [Method::Ml, Method::Pem] {
        for obs in &cfg.observation_sets {
            for &n in &cfg.horizons {
                let group: Vec<&CellRecord> = cells
                    .iter()
                    .filter(|c| c.method == method && &c.observed == obs && c.horizon == n)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let ok: Vec<&&CellRecord> = group.iter().filter(|c| c.success()).collect();
                let per_signal = |f: &dyn Fn(&CellRecord) -> &Vec<f64>| -> (Vec<f64>, Vec<f64>) {
                    (0..obs.len())
                        .map(|i| {
                            let v: Vec<f64> = ok.iter().filter_map(|c| f(c).get(i).copied()).collect();
                            mean_std(&v)
                        })
                        .unzip()
                };
                let (fit_pred_mean, fit_pred_std) = per_signal(&|c| &c.fit_pred);
                let (fit_sim_mean, fit_sim_std) = per_signal(&|c| &c.fit_sim);
                rows.push(Table1Row {
                    method,
                    observed: obs.clone(),
                    horizon: n,
                    runs: group.len(),
                    converged: ok.len(),
                    fit_pred_mean,
                    fit_pred_std,
                    fit_sim_mean,
                    fit_sim_std,
                    mean_time_s: mean_std(&group.iter().map(|c| c.time_s).collect::<Vec<_>>()).0,
                });
            }
        }
    }
    rows
}

fn table2(cells: &[CellRecord], cfg: &MonteCarloConfig, models: &[NetworkModel]) -> Result<Vec<Table2Row>> {
    let mut rows = Vec::new();
    for method in [Method::Ml, Method::Pem] {
        for obs in &cfg.observation_sets {
            let topo = cfg.topology_for(obs)?;
            for &n in &cfg.horizons {
                for (mi, base) in models.iter().enumerate() {
                    let group: Vec<&CellRecord> = cells
                        .iter()
                        .filter(|c| {
                            c.method == method && &c.observed == obs && c.horizon == n && c.model == mi && c.error.is_none()
                        })
                        .collect();
                    if group.is_empty() {
                        continue;
                    }
                    let model = base.with_topology(topo.clone())?;
                    let sd = seeds(model_seed(cfg.master_seed, mi), n);
                    let rv = generate_reference(sd.validation_reference, n, topo.references());
                    let ev = draw_noise(&model, n, sd.validation_noise);
                    let (valid, _) = simulate_with_noise(&model, &rv, &ev)?;
                    let row = match method {
                        Method::Ml => {
                            let thetas: Vec<Vec<f64>> = group.iter().filter_map(|c| c.theta.clone()).collect();
                            let rep = validate_metrics(&thetas, &model, &valid)?;
                            Table2Row {
                                method,
                                observed: obs.clone(),
                                horizon: n,
                                model: mi,
                                replicates: rep.replicates,
                                fit_pred: rep.fit_pred.unwrap_or_default(),
                                fit_sim: rep.fit_sim,
                                cov_trace: rep.cov_trace,
                                cov_max_eig: rep.cov_max_eig,
                                bias_sq: rep.bias_sq,
                                mse: rep.mse,
                            }
                        }
                        Method::Pem => {
                            let ests: Vec<&PemEstimate> = group.iter().filter_map(|c| c.pem.as_ref()).collect();
                            let abs: Vec<Vec<f64>> = ests.iter().map(|p| p.ab()).collect();
                            let truth = &model.theta()[model.layout().ab_indices()];
                            let stats = replicate_stats(&abs, truth)?;
                            let avg = average_pem(&ests);
                            let fit_pred = avg
                                .predict(&valid, &topo)
                                .map(|p| fit_rows(&p, valid.x_o()))
                                .unwrap_or_default();
                            Table2Row {
                                method,
                                observed: obs.clone(),
                                horizon: n,
                                model: mi,
                                replicates: stats.replicates,
                                fit_pred,
                                fit_sim: pem_simulation_fit(&avg, &topo, &valid).unwrap_or_default(),
                                cov_trace: stats.cov_trace,
                                cov_max_eig: stats.cov_max_eig,
                                bias_sq: stats.bias_sq,
                                mse: stats.mse,
                            }
                        }
                    };
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

fn average_pem(ests: &[&PemEstimate]) -> PemEstimate {
    let k = ests.len() as f64;
    let avg_vec = |get: &dyn Fn(&PemEstimate) -> Vec<f64>| -> Vec<f64> {
        let mut acc = vec![0.0; get(ests[0]).len()];
        for e in ests {
            for (a, v) in acc.iter_mut().zip(get(e)) {
                *a += v / k;
            }
        }
        acc
    };
    let mut out = ests[0].clone();
    for i in 0..3 {
        out.a[i] = avg_vec(&|e| e.a[i].clone());
        out.b[i] = avg_vec(&|e| e.b[i].clone());
    }
    if out.c1.is_some() {
        out.c1 = Some(avg_vec(&|e| e.c1.clone().unwrap_or_default()));
    }
    if let Some((c, d)) = &out.noise_bar {
        let nb = c.len();
        debug_assert_eq!(nb, d.len());
        let cd = avg_vec(&|e| {
            let (c, d) = e.noise_bar.clone().unwrap_or_default();
            [c, d].concat()
        });
        out.noise_bar = Some((cd[..nb].to_vec(), cd[nb..].to_vec()));
    }
    out
}

/// Median parameter error against the horizon on one fixed network.
pub fn consistency_study(cfg: &MonteCarloConfig, study: &ConsistencyConfig) -> Result<Vec<ConsistencyRow>> {
    let topo = cfg.topology_for(&study.observed)?;
    let mseed = model_seed(cfg.master_seed, study.model as usize);
    let model = generate_random_network(mseed, &cfg.generator, &topo)?;
    let truth = model.theta()[model.layout().ab_indices()].to_vec();
    let jobs: Vec<(usize, usize)> = study
        .horizons
        .iter()
        .flat_map(|&n| (0..study.replicates).map(move |j| (n, j)))
        .collect();
    let results: Vec<(usize, Option<(f64, bool)>)> = jobs
        .par_iter()
        .map(|&(n, j)| {
            let s = derive_seed(derive_seed(mseed, n as u64), 5000 + j as u64);
            let r = generate_reference(derive_seed(s, 1), n, topo.references());
            let e = draw_noise(&model, n, derive_seed(s, 2));
            let res = simulate_with_noise(&model, &r, &e)
                .and_then(|(d, _)| estimate(&d, &topo, &model.orders(), &cfg.estimator));
            let out = res.ok().map(|res| {
                let ab = &res.theta_hat[model.layout().ab_indices()];
                (ab_error(ab, &truth), res.converged)
            });
            (n, out)
        })
        .collect();
    Ok(study
        .horizons
        .iter()
        .map(|&n| {
            let group: Vec<(f64, bool)> = results.iter().filter(|(h, _)| *h == n).filter_map(|(_, r)| *r).collect();
            let mut errs: Vec<f64> = group.iter().map(|(e, _)| *e).collect();
            errs.sort_by(|a, b| a.total_cmp(b));
            ConsistencyRow {
                horizon: n,
                replicates: study.replicates,
                converged: group.iter().filter(|(_, c)| *c).count(),
                median_error: quantile(&errs, 0.5),
                mean_error: mean_std(&errs).0,
                q25_error: quantile(&errs, 0.25),
                q75_error: quantile(&errs, 0.75),
            }
        })
        .collect())
}

/// Runs the full grid. Failures of individual estimates are recorded in the
/// cells; only configuration and generation errors abort.
pub fn monte_carlo(cfg: &MonteCarloConfig) -> Result<MonteCarloReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    pool.install(|| run(cfg))
}

fn run(cfg: &MonteCarloConfig) -> Result<MonteCarloReport> {
    let base = cfg.base_topology()?;
    let models = (0..cfg.models)
        .map(|i| generate_random_network(model_seed(cfg.master_seed, i), &cfg.generator, &base))
        .collect::<Result<Vec<_>>>()?;
    let mut grid = Vec::new();
    for obs in &cfg.observation_sets {
        for &horizon in &cfg.horizons {
            for model in 0..cfg.models {
                for replicate in 0..cfg.replicates {
                    grid.push(Cell {
                        observed: obs.clone(),
                        horizon,
                        model,
                        replicate,
                    });
                }
            }
        }
    }
    let cells: Vec<CellRecord> = grid
        .par_iter()
        .map(|c| run_cell(cfg, c, &models))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let consistency = cfg
        .consistency
        .as_ref()
        .map(|c| consistency_study(cfg, c))
        .transpose()?;
    let snrs: Vec<f64> = cells
        .iter()
        .filter(|c| c.method == Method::Ml)
        .flat_map(|c| c.snr_db.iter().copied())
        .collect();
    Ok(MonteCarloReport {
        table1: table1(&cells, cfg),
        table2: table2(&cells, cfg, &models)?,
        consistency,
        mean_snr_db: mean_std(&snrs).0,
        cells,
        config: cfg.clone(),
    })
}

/// Flat CSV export of the summary table.
pub fn table1_csv(report: &MonteCarloReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "observed",
        "horizon",
        "signal",
        "runs",
        "converged",
        "fit_pred_mean",
        "fit_pred_std",
        "fit_sim_mean",
        "fit_sim_std",
        "mean_time_s",
    ])?;
    for r in &report.table1 {
        for (i, s) in r.observed.iter().enumerate() {
            w.write_record([
                method_name(r.method).to_string(),
                join(&r.observed),
                r.horizon.to_string(),
                s.to_string(),
                r.runs.to_string(),
                r.converged.to_string(),
                r.fit_pred_mean[i].to_string(),
                r.fit_pred_std[i].to_string(),
                r.fit_sim_mean[i].to_string(),
                r.fit_sim_std[i].to_string(),
                r.mean_time_s.to_string(),
            ])?;
        }
    }
    finish(w)
}

/// Flat CSV export of the per-system table.
pub fn table2_csv(report: &MonteCarloReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "observed",
        "horizon",
        "model",
        "replicates",
        "fit_pred",
        "fit_sim",
        "cov_trace",
        "cov_max_eig",
        "bias_sq",
        "mse",
    ])?;
    let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
    for r in &report.table2 {
        w.write_record([
            method_name(r.method).to_string(),
            join(&r.observed),
            r.horizon.to_string(),
            r.model.to_string(),
            r.replicates.to_string(),
            list(&r.fit_pred),
            list(&r.fit_sim),
            r.cov_trace.to_string(),
            r.cov_max_eig.to_string(),
            r.bias_sq.to_string(),
            r.mse.to_string(),
        ])?;
    }
    finish(w)
}

/// Error against horizon series of the consistency study; empty body when
/// the study was not run.
pub fn consistency_csv(report: &MonteCarloReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["horizon", "replicates", "converged", "median_error", "mean_error", "q25_error", "q75_error"])?;
    for r in report.consistency.iter().flatten() {
        w.write_record([
            r.horizon.to_string(),
            r.replicates.to_string(),
            r.converged.to_string(),
            r.median_error.to_string(),
            r.mean_error.to_string(),
            r.q25_error.to_string(),
            r.q75_error.to_string(),
        ])?;
    }
    finish(w)
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Ml => "ml",
        Method::Pem => "pem",
    }
}

fn join(s: &[Signal]) -> String {
    s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("+")
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke() -> MonteCarloConfig {
        MonteCarloConfig {
            models: 2,
            replicates: 3,
            horizons: vec![200],
            observation_sets: vec![vec![Signal::u(2)], vec![Signal::u(0), Signal::u(2)]],
            pem: Some(PemConfig::default()),
            jobs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn smoke_grid_is_well_formed() {
        let cfg = smoke();
        let rep = monte_carlo(&cfg).unwrap();
        // 2 sets × 2 models × 3 replicates for ML, plus the PEM cells of the (u1, u3) set
        assert_eq!(rep.cells.iter().filter(|c| c.method == Method::Ml).count(), 12);
        assert_eq!(rep.cells.iter().filter(|c| c.method == Method::Pem).count(), 6);
        assert_eq!(rep.table1.len(), 3);
        assert_eq!(rep.table2.len(), 6);
        assert!(rep.max_decomposition_gap() <= 1e-9);
        for row in &rep.table1 {
            assert!(row.converged <= row.runs);
        }
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("table1"));
        let t1 = table1_csv(&rep).unwrap();
        assert_eq!(t1.lines().count(), 1 + 1 + 2 + 2);
    }

    #[test]
    fn cells_do_not_depend_on_thread_count() {
        let mut cfg = smoke();
        cfg.models = 1;
        cfg.replicates = 2;
        cfg.observation_sets = vec![vec![Signal::u(2)]];
        cfg.pem = None;
        let a = monte_carlo(&cfg).unwrap();
        cfg.jobs = 2;
        let b = monte_carlo(&cfg).unwrap();
        let strip = |r: &MonteCarloReport| r.cells.iter().map(|c| (c.ab.clone(), c.fit_pred.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<MonteCarloConfig>(r#"{"models": 1, "bogus": 2}"#);
        assert!(err.is_err());
        let ok: MonteCarloConfig = serde_json::from_str(r#"{"observation_sets": [["u1", "u3"]]}"#).unwrap();
        assert_eq!(ok.observation_sets, vec![vec![Signal::u(0), Signal::u(2)]]);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
