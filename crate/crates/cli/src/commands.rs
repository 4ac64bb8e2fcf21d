//! Configuration schemas and the four commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use netml::closed_loop::assemble_closed_loop;
use netml::data::Dataset;
use netml::estimator::{estimate_logged, EstimatorConfig, StageRecord};
use netml::experiments::monte_carlo::{consistency_csv, table1_csv, table2_csv};
use netml::experiments::{
    derive_seed, generate_random_network, generate_reference, informativity_check, monte_carlo, simulate as simulate_data,
    simulate_noise_free, snr_db, validation_fit, GeneratorSpec, InformativityReport, MonteCarloConfig,
};
use netml::likelihood::Objective;
use netml::linalg::spectral_radius;
use netml::model::{validate_model, ModelFile, NetworkModel, Signal, Topology, TopologyFile, ValidationReport};
use netml::riccati::{check_trivial_solution, qrs_blocks, solve_dare, DareOptions, TrivialReason};
use netml::toeplitz::{diagnose_reduction, ReductionDiagnostics};
use netml::Error;

use crate::{Common, Failure};

type Res<T> = std::result::Result<T, Failure>;

/// Library errors caused by bad inputs map to 2, everything else to `other`.
fn classify(e: Error, other: fn(String) -> Failure) -> Failure {
    match e {
        Error::Input(_) | Error::Dimension(_) | Error::Json(_) | Error::Csv(_) | Error::Io(_) => Failure::input(e.to_string()),
        Error::Generation(_) => Failure::generation(e.to_string()),
        _ => other(e.to_string()),
    }
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Res<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("invalid config {}: {e}", path.display())))
}

/// Paths in a configuration are relative to the configuration file.
fn resolve(config: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn load_model(path: &Path) -> Res<NetworkModel> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("cannot read model {}: {e}", path.display())))?;
    NetworkModel::from_json(&text).map_err(|e| Failure::input(format!("invalid model {}: {e}", path.display())))
}

fn load_data(path: &Path, topo: &Topology) -> Res<Dataset> {
    Dataset::load_csv(path, topo).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn create_out(out: &Path) -> Res<()> {
    fs::create_dir_all(out).map_err(|e| Failure::input(format!("cannot create {}: {e}", out.display())))
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Res<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::input(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn join(signals: &[Signal]) -> String {
    signals.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_objective(s: Option<&str>) -> Res<Option<Objective>> {
    s.map(|s| s.parse::<Objective>().map_err(|e| Failure::input(e.to_string())))
        .transpose()
}

// ---------------------------------------------------------------------------
// simulate

/// Random network drawn on a topology; the three-node feedback network when
/// `topology` is absent.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomModel {
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub topology: Option<TopologyFile>,
    /// Replaces the observed set of `topology`.
    #[serde(default)]
    pub observed: Option<Vec<Signal>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Model JSON; exclusive with `random`.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub random: Option<RandomModel>,
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub noise: bool,
    /// Also write an independent validation set.
    #[serde(default = "yes")]
    pub validation: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize)]
struct SimulateMeta {
    seed: u64,
    horizon: usize,
    noise: bool,
    reference_seed: u64,
    noise_seed: Option<u64>,
    validation_reference_seed: Option<u64>,
    validation_noise_seed: Option<u64>,
    labels: Vec<Signal>,
    orders: Vec<usize>,
    theta0: Vec<f64>,
    /// Empirical signal-to-noise ratio of the training data per observed signal.
    snr_db: Option<Vec<f64>>,
    files: Vec<String>,
}

fn random_model(r: &RandomModel, seed: u64) -> Res<NetworkModel> {
    let mut topo = match &r.topology {
        Some(t) => Topology::try_from(t).map_err(|e| Failure::input(format!("topology: {e}")))?,
        None => Topology::three_node(&[Signal::u(2)]).expect("fixed topology"),
    };
    if let Some(obs) = &r.observed {
        let m = topo.nodes();
        if let Some(s) = obs.iter().find(|s| s.node >= m) {
            return Err(Failure::input(format!("signal {s} is not in a {m}-node network")));
        }
        topo = topo
            .with_observed(obs.iter().map(|s| s.index(m)).collect())
            .map_err(|e| Failure::input(e.to_string()))?;
    }
    generate_random_network(derive_seed(seed, 0), &r.generator, &topo).map_err(|e| match e {
        Error::Generation(_) => Failure::generation(e.to_string()),
        e => classify(e, Failure::generation),
    })
}

pub fn simulate(args: &Common) -> Res<()> {
    let cfg: SimulateConfig = load_config(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    if cfg.horizon == 0 {
        return Err(Failure::input("horizon must be positive"));
    }
    let model = match (&cfg.model, &cfg.random) {
        (Some(p), None) => {
            let m = load_model(&resolve(&args.config, p))?;
            let rep = validate_model(&m).map_err(|e| classify(e, Failure::input))?;
            if !rep.pass {
                return Err(Failure::input(format!("model {p} is not admissible: {}", serde_json::to_string(&rep).unwrap_or_default())));
            }
            m
        }
        (None, Some(r)) => random_model(r, seed)?,
        _ => return Err(Failure::input("give exactly one of `model` and `random`")),
    };
    let topo = model.topology();
    let gen = |e: Error| classify(e, Failure::generation);

    let reference_seed = derive_seed(seed, 1);
    let r = generate_reference(reference_seed, cfg.horizon, topo.references());
    let (train, noise_seed) = if cfg.noise {
        let s = derive_seed(seed, 2);
        (simulate_data(&model, &r, s).map_err(gen)?, Some(s))
    } else {
        (simulate_noise_free(&model, &r).map_err(gen)?, None)
    };
    let snr = if cfg.noise {
        Some(snr_db(&model, &r, &train).map_err(gen)?)
    } else {
        None
    };

    create_out(&args.out)?;
    let mut files = vec!["train.csv".to_string(), "model.json".to_string()];
    train
        .save_csv(&args.out.join("train.csv"))
        .map_err(|e| Failure::input(e.to_string()))?;
    let (mut vr_seed, mut vn_seed) = (None, None);
    if cfg.validation {
        let s = derive_seed(seed, 3);
        let rv = generate_reference(s, cfg.horizon, topo.references());
        let valid = if cfg.noise {
            let n = derive_seed(seed, 4);
            vn_seed = Some(n);
            simulate_data(&model, &rv, n).map_err(gen)?
        } else {
            simulate_noise_free(&model, &rv).map_err(gen)?
        };
        vr_seed = Some(s);
        valid
            .save_csv(&args.out.join("valid.csv"))
            .map_err(|e| Failure::input(e.to_string()))?;
        files.push("valid.csv".into());
    }
    write_text(&args.out.join("model.json"), &(model.to_json() + "\n"))?;
    let meta = SimulateMeta {
        seed,
        horizon: cfg.horizon,
        noise: cfg.noise,
        reference_seed,
        noise_seed,
        validation_reference_seed: vr_seed,
        validation_noise_seed: vn_seed,
        labels: topo.observed_signals(),
        orders: model.orders(),
        theta0: model.theta(),
        snr_db: snr,
        files,
    };
    write_json(&args.out.join("meta.json"), &meta)?;
    log::info!("wrote {} samples of {} to {}", cfg.horizon, join(&meta.labels), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// identify

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    pub train: String,
    #[serde(default)]
    pub validation: Option<String>,
    /// Model JSON supplying the topology and orders; its parameters serve as
    /// the reference for parameter errors. Exclusive with `topology`.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub topology: Option<TopologyFile>,
    #[serde(default)]
    pub orders: Option<Vec<usize>>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
}

#[derive(Debug, Serialize)]
struct ThetaFile {
    objective: Objective,
    orders: Vec<usize>,
    theta_hat: Vec<f64>,
    converged: bool,
    final_value: f64,
    start: usize,
    model: ModelFile,
}

#[derive(Debug, Serialize)]
struct StagesFile<'a> {
    objective: Objective,
    stages: &'a [StageRecord],
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct MetricsFile {
    /// `validation` or `train`.
    evaluated_on: &'static str,
    labels: Vec<Signal>,
    fit_pred: Option<Vec<f64>>,
    fit_sim: Vec<f64>,
    /// `‖(â, b̂) - (a₀, b₀)‖₂` against the model file, when one was given.
    ab_error: Option<f64>,
    ab_max_abs_error: Option<f64>,
}

pub fn identify(args: &Common, objective: Option<&str>) -> Res<()> {
    let cfg: IdentifyConfig = load_config(&args.config)?;
    let (topo, orders, truth) = match (&cfg.model, &cfg.topology) {
        (Some(p), None) => {
            let m = load_model(&resolve(&args.config, p))?;
            let orders = cfg.orders.clone().unwrap_or_else(|| m.orders());
            let truth = (orders == m.orders()).then(|| m.clone());
            (m.topology().clone(), orders, truth)
        }
        (None, Some(t)) => {
            let topo = Topology::try_from(t).map_err(|e| Failure::input(format!("topology: {e}")))?;
            let orders = cfg
                .orders
                .clone()
                .ok_or_else(|| Failure::input("`orders` is required with `topology`"))?;
            (topo, orders, None)
        }
        _ => return Err(Failure::input("give exactly one of `model` and `topology`")),
    };
    let mut est = cfg.estimator.clone();
    if let Some(o) = parse_objective(objective)? {
        est.objective = o;
    }
    if let Some(s) = args.seed {
        est.seed = s;
    }
    est.validate().map_err(|e| Failure::input(e.to_string()))?;
    let train = load_data(&resolve(&args.config, &cfg.train), &topo)?;
    let valid = cfg
        .validation
        .as_ref()
        .map(|p| load_data(&resolve(&args.config, p), &topo))
        .transpose()?;

    create_out(&args.out)?;
    let (res, partial) = estimate_logged(&train, &topo, &orders, &est);
    let res = match res {
        Ok(r) => r,
        Err(e) => {
            write_json(
                &args.out.join("stages.json"),
                &StagesFile {
                    objective: est.objective,
                    stages: &partial,
                    error: Some(e.to_string()),
                },
            )?;
            return Err(classify(e, Failure::estimation));
        }
    };
    write_json(
        &args.out.join("stages.json"),
        &StagesFile {
            objective: res.objective,
            stages: &res.stages,
            error: None,
        },
    )?;
    let hat = res.model(&topo).map_err(|e| classify(e, Failure::estimation))?;
    write_json(
        &args.out.join("theta_hat.json"),
        &ThetaFile {
            objective: res.objective,
            orders: res.orders.clone(),
            theta_hat: res.theta_hat.clone(),
            converged: res.converged,
            final_value: res.final_value(),
            start: res.start,
            model: ModelFile::from(&hat),
        },
    )?;
    let (evaluated_on, ds) = match &valid {
        Some(v) => ("validation", v),
        None => ("train", &train),
    };
    let vf = validation_fit(&hat, ds).map_err(|e| classify(e, Failure::estimation))?;
    let (ab_error, ab_max_abs_error) = match &truth {
        Some(m) => {
            let ab = m.layout().ab_indices();
            let th = m.theta();
            let d: Vec<f64> = ab.map(|i| res.theta_hat[i] - th[i]).collect();
            (
                Some(d.iter().map(|v| v * v).sum::<f64>().sqrt()),
                Some(d.iter().fold(0.0, |a: f64, v| a.max(v.abs()))),
            )
        }
        None => (None, None),
    };
    let metrics = MetricsFile {
        evaluated_on,
        labels: topo.observed_signals(),
        fit_pred: vf.fit_pred,
        fit_sim: vf.fit_sim,
        ab_error,
        ab_max_abs_error,
    };
    write_json(&args.out.join("metrics.json"), &metrics)?;
    log::info!(
        "{} estimate, objective {:.6}, converged {}, prediction fit on {evaluated_on} {:?}",
        res.objective,
        res.final_value(),
        res.converged,
        metrics.fit_pred
    );
    if !res.converged {
        log::warn!("at least one stage stopped at the iteration cap");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnose

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub model: String,
    /// Dataset whose references are checked; references are generated when absent.
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    /// Horizon of the structural system that is assembled and reduced.
    #[serde(default = "default_reduction_horizon")]
    pub reduction_horizon: usize,
}

fn default_horizon() -> usize {
    1000
}
fn default_grid() -> usize {
    64
}
fn default_reduction_horizon() -> usize {
    8
}

#[derive(Debug, Serialize)]
struct RiccatiDiagnostics {
    trivial: bool,
    trivial_reason: Option<TrivialReason>,
    /// `ρ(F_c)`
    spectral_radius_open: f64,
    /// `ρ(F_c - K H_o)`
    spectral_radius_closed: Option<f64>,
    stabilizing: Option<bool>,
    residual: Option<f64>,
    iterations: Option<usize>,
    sigma_norm: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct Diagnostics {
    labels: Vec<Signal>,
    model: ValidationReport,
    riccati: RiccatiDiagnostics,
    informativity: InformativityReport,
    reduction: Option<ReductionDiagnostics>,
    reduction_error: Option<String>,
}

fn riccati_diagnostics(model: &NetworkModel) -> RiccatiDiagnostics {
    let mut d = RiccatiDiagnostics {
        trivial: false,
        trivial_reason: None,
        spectral_radius_open: f64::NAN,
        spectral_radius_closed: None,
        stabilizing: None,
        residual: None,
        iterations: None,
        sigma_norm: None,
        error: None,
    };
    let ss = match assemble_closed_loop(model) {
        Ok(ss) => ss,
        Err(e) => {
            d.error = Some(e.to_string());
            return d;
        }
    };
    d.spectral_radius_open = spectral_radius(&ss.f_c);
    match check_trivial_solution(&ss, model) {
        Ok(Some(sol)) => {
            d.trivial = true;
            d.trivial_reason = sol.trivial;
        }
        Ok(None) => {}
        Err(e) => d.error = Some(e.to_string()),
    }
    match solve_dare(&ss, &qrs_blocks(&ss), &DareOptions::default()) {
        Ok(sol) => {
            if !d.trivial && sol.trivial.is_some() {
                d.trivial = true;
                d.trivial_reason = sol.trivial;
            }
            d.spectral_radius_closed = Some(sol.spectral_radius_closed);
            d.stabilizing = Some(sol.stabilizing);
            d.residual = Some(sol.residual);
            d.iterations = Some(sol.iterations);
            d.sigma_norm = Some(sol.sigma.norm());
        }
        Err(e) => {
            d.error.get_or_insert(e.to_string());
        }
    }
    d
}

pub fn diagnose(args: &Common) -> Res<()> {
    let cfg: DiagnoseConfig = load_config(&args.config)?;
    if cfg.grid_size < 2 || cfg.reduction_horizon == 0 || cfg.horizon == 0 {
        return Err(Failure::input("horizon, grid_size and reduction_horizon must be positive (grid_size at least 2)"));
    }
    let model = load_model(&resolve(&args.config, &cfg.model))?;
    let topo = model.topology();
    let r = match &cfg.data {
        Some(p) => load_data(&resolve(&args.config, p), topo)?.r().clone(),
        None => generate_reference(derive_seed(args.seed.unwrap_or(cfg.seed), 1), cfg.horizon, topo.references()),
    };
    let validation = validate_model(&model).map_err(|e| Failure::input(e.to_string()))?;
    let riccati = riccati_diagnostics(&model);
    let informativity = informativity_check(&r, cfg.grid_size);
    let nr = cfg.reduction_horizon.min(r.ncols());
    let (reduction, reduction_error) = match diagnose_reduction(&model, &r.columns(0, nr).into_owned()) {
        Ok(d) => (Some(d), None),
        Err(e) => (None, Some(e.to_string())),
    };
    if !informativity.pass {
        log::warn!(
            "reference spectrum is nearly singular (relative min eigenvalue {:.3e})",
            informativity.relative_min_eig
        );
    }
    let diag = Diagnostics {
        labels: topo.observed_signals(),
        model: validation,
        riccati,
        informativity,
        reduction,
        reduction_error,
    };
    create_out(&args.out)?;
    write_json(&args.out.join("diagnostics.json"), &diag)?;
    log::info!(
        "trivial Riccati solution: {}, informativity {}",
        diag.riccati.trivial,
        if diag.informativity.pass { "pass" } else { "fail" }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// montecarlo

pub fn montecarlo(args: &Common, objective: Option<&str>, jobs: Option<usize>) -> Res<()> {
    let mut cfg: MonteCarloConfig = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    if let Some(o) = parse_objective(objective)? {
        cfg.estimator.objective = o;
    }
    cfg.validate().map_err(|e| Failure::input(e.to_string()))?;
    let report = monte_carlo(&cfg).map_err(|e| classify(e, Failure::estimation))?;
    for c in report.cells.iter().filter(|c| c.error.is_some()) {
        log::warn!(
            "{:?} model {} replicate {} N={} ({}): {}",
            c.method,
            c.model,
            c.replicate,
            c.horizon,
            join(&c.observed),
            c.error.as_deref().unwrap_or_default()
        );
    }
    create_out(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    let csv = |r: netml::Result<String>| r.map_err(|e| Failure::input(e.to_string()));
    write_text(&args.out.join("table1.csv"), &csv(table1_csv(&report))?)?;
    write_text(&args.out.join("table2.csv"), &csv(table2_csv(&report))?)?;
    write_text(&args.out.join("consistency.csv"), &csv(consistency_csv(&report))?)?;
    for row in &report.table1 {
        log::info!(
            "{:?} ({}) N={}: {}/{} converged, prediction fit {:?}",
            row.method,
            join(&row.observed),
            row.horizon,
            row.converged,
            row.runs,
            row.fit_pred_mean
        );
    }
    if let Some(dec) = report.consistency_decreasing() {
        log::info!("consistency medians strictly decreasing: {dec}");
    }
    Ok(())
}
