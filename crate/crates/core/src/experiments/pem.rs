//! Separable prediction-error baseline for the three-node feedback network
//! observed at `(u¹, u³)`.
//!
//! The network equations split into two independent single-equation models,
//!
//! ```text
//! u³ - r³ = G¹ u¹ + H¹ e¹
//! u¹ - r¹ = G³ u³ + G² r² + H̄ ē
//! ```
//!
//! each fitted by minimizing its sum of squared prediction errors. In the
//! output-error class both noise models are one. In the ARMAX class the first
//! equation is an ARMAX model and the lumped noise `H̄ ē = H² e² + H³ e³` of
//! the second is given a Box-Jenkins model `C̄/D̄` of configurable order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::fd_gradient;
use crate::model::{ArmaxNode, ModelClass, NetworkModel, ParamLayout, Signal, Topology, THETA_MARGIN};
use crate::optim::{trust_region_minimize, TrustRegionOptions};
use crate::poly;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PemConfig {
    pub class: ModelClass,
    /// Order of `C̄` and `D̄`; zero selects the order of the exact spectral
    /// factor of `H² e² + H³ e³`, the sum of the two node orders.
    pub noise_order: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PemConfig {
    fn default() -> Self {
        Self {
            class: ModelClass::Armax,
            noise_order: 0,
            tol: 1e-5,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PemEstimate {
    pub class: ModelClass,
    pub orders: Vec<usize>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Noise numerator of node 1 (ARMAX class).
    pub c1: Option<Vec<f64>>,
    /// `(c̄, d̄)` of the lumped noise model (ARMAX class).
    pub noise_bar: Option<(Vec<f64>, Vec<f64>)>,
    pub lambda1: f64,
    /// Only the sum `λ² + λ³` is identifiable from this data.
    pub lambda23: f64,
    /// Sums of squared prediction errors of the `u¹` and `u³` equations.
    pub sse_u1: f64,
    pub sse_u3: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `y = (b/a) x` with zero initial conditions; `a[0] = 1`, coefficients in
/// ascending powers of the delay operator.
pub fn lfilter(b: &[f64], a: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for k in 0..x.len() {
        let mut v = 0.0;
        for (j, bj) in b.iter().enumerate() {
            if j <= k {
                v += bj * x[k - j];
            }
        }
        for (j, aj) in a.iter().enumerate().skip(1) {
            if j <= k {
                v -= aj * y[k - j];
            }
        }
        y[k] = v / a[0];
    }
    y
}

/// `1 + p₁ q⁻¹ + … + pₙ q⁻ⁿ`.
fn monic(p: &[f64]) -> Vec<f64> {
    poly::monic(p)
}

/// `p₁ q⁻¹ + … + pₙ q⁻ⁿ`.
fn delayed(p: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0];
    v.extend_from_slice(p);
    v
}

fn stable(p: &[f64]) -> bool {
    p.is_empty() || poly::max_root_modulus(&monic(p)) <= 1.0 - THETA_MARGIN
}

struct Signals {
    u1: Vec<f64>,
    u3: Vec<f64>,
    r1: Vec<f64>,
    r2: Vec<f64>,
    r3: Vec<f64>,
    rows: (usize, usize),
}

fn signals(data: &Dataset, topology: &Topology) -> Result<Signals> {
    let observed = topology.observed_signals();
    let mut obs = observed.clone();
    obs.sort_by_key(|s| s.index(3));
    if !topology.is_three_node() || obs != [Signal::u(0), Signal::u(2)] {
        return Err(Error::UnsupportedTopology(
            "the separable baseline needs the three-node feedback network observed at (u1, u3)".into(),
        ));
    }
    data.check_topology(topology)?;
    let row = |s: Signal| observed.iter().position(|o| *o == s).expect("checked above");
    let (i1, i3) = (row(Signal::u(0)), row(Signal::u(2)));
    let take = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<f64>>();
    Ok(Signals {
        u1: take(data.x_o(), i1),
        u3: take(data.x_o(), i3),
        r1: take(data.r(), 0),
        r2: take(data.r(), 1),
        r3: take(data.r(), 2),
        rows: (i1, i3),
    })
}

fn sub(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

/// Prediction errors of the `u³` equation; `None` outside the admissible set.
fn residual_u3(s: &Signals, n1: usize, v: &[f64], armax: bool) -> Option<Vec<f64>> {
    let (a, b) = (&v[..n1], &v[n1..2 * n1]);
    let lhs = sub(&s.u3, &s.r3);
    if armax {
        let c = &v[2 * n1..3 * n1];
        if !stable(c) {
            return None;
        }
        // C ε = A (u³ - r³) - B u¹
        let w = sub(&lfilter(&monic(a), &[1.0], &lhs), &lfilter(&delayed(b), &[1.0], &s.u1));
        Some(lfilter(&[1.0], &monic(c), &w))
    } else {
        if !stable(a) {
            return None;
        }
        Some(sub(&lhs, &lfilter(&delayed(b), &monic(a), &s.u1)))
    }
}

/// Prediction errors of the `u¹` equation; `None` outside the admissible set.
fn residual_u1(s: &Signals, n2: usize, n3: usize, nb: usize, v: &[f64], armax: bool) -> Option<Vec<f64>> {
    let a2 = &v[..n2];
    let b2 = &v[n2..2 * n2];
    let a3 = &v[2 * n2..2 * n2 + n3];
    let b3 = &v[2 * n2 + n3..2 * n2 + 2 * n3];
    if !stable(a2) || !stable(a3) {
        return None;
    }
    let g2r2 = lfilter(&delayed(b2), &monic(a2), &s.r2);
    let g3u3 = lfilter(&delayed(b3), &monic(a3), &s.u3);
    let w: Vec<f64> = (0..s.u1.len()).map(|k| s.u1[k] - s.r1[k] - g2r2[k] - g3u3[k]).collect();
    if armax && nb > 0 {
        let off = 2 * n2 + 2 * n3;
        let (c, d) = (&v[off..off + nb], &v[off + nb..off + 2 * nb]);
        if !stable(c) || !stable(d) {
            return None;
        }
        Some(lfilter(&monic(d), &monic(c), &w))
    } else {
        Some(w)
    }
}

fn half_sse(e: Option<Vec<f64>>) -> f64 {
    match e {
        Some(e) => 0.5 * e.iter().map(|v| v * v).sum::<f64>(),
        None => f64::INFINITY,
    }
}

/// Output-error fit followed, for the ARMAX class, by the noise-model fit
/// warm-started with zero noise parameters.
fn fit_equation<F>(f: F, plant: usize, noise: usize, opts: &TrustRegionOptions) -> Result<(Vec<f64>, f64, bool, usize)>
where
    F: Fn(&[f64], bool) -> f64,
{
    let x0 = vec![0.0; plant];
    let oe = |x: &[f64]| f(x, false);
    let m1 = trust_region_minimize(oe, |x| fd_gradient(oe, x, &[]), &x0, opts)?;
    if noise == 0 {
        return Ok((m1.x, m1.f, m1.status.converged(), m1.iterations));
    }
    let full = |x: &[f64]| f(x, true);
    let mut x1 = m1.x.clone();
    x1.extend(std::iter::repeat_n(0.0, noise));
    let m2 = trust_region_minimize(full, |x| fd_gradient(full, x, &[]), &x1, opts)?;
    Ok((
        m2.x,
        m2.f,
        m1.status.converged() && m2.status.converged(),
        m1.iterations + m2.iterations,
    ))
}

/// Fits both equations of the separable baseline.
pub fn pem_baseline(data: &Dataset, topology: &Topology, orders: &[usize], config: &PemConfig) -> Result<PemEstimate> {
    let s = signals(data, topology)?;
    if orders.len() != 3 {
        return Err(Error::Dimension(format!("expected 3 orders, got {}", orders.len())));
    }
    let (n1, n2, n3) = (orders[0], orders[1], orders[2]);
    let armax = config.class == ModelClass::Armax;
    let nb = if !armax {
        0
    } else if config.noise_order == 0 {
        n2 + n3
    } else {
        config.noise_order
    };
    let opts = TrustRegionOptions {
        tol: config.tol,
        max_iter: config.max_iter,
        ..Default::default()
    };
    let n = data.horizon() as f64;

    let f3 = |x: &[f64], noisy: bool| half_sse(residual_u3(&s, n1, x, noisy));
    let (x3, sse3, conv3, it3) = fit_equation(f3, 2 * n1, if armax { n1 } else { 0 }, &opts)?;
    let f1 = |x: &[f64], noisy: bool| half_sse(residual_u1(&s, n2, n3, nb, x, noisy));
    let (x1, sse1, conv1, it1) = fit_equation(f1, 2 * (n2 + n3), 2 * nb, &opts)?;

    let a = vec![
        x3[..n1].to_vec(),
        x1[..n2].to_vec(),
        x1[2 * n2..2 * n2 + n3].to_vec(),
    ];
    let b = vec![
        x3[n1..2 * n1].to_vec(),
        x1[n2..2 * n2].to_vec(),
        x1[2 * n2 + n3..2 * n2 + 2 * n3].to_vec(),
    ];
    let off = 2 * (n2 + n3);
    Ok(PemEstimate {
        class: config.class,
        orders: orders.to_vec(),
        a,
        b,
        c1: armax.then(|| x3[2 * n1..3 * n1].to_vec()),
        noise_bar: (armax && nb > 0).then(|| (x1[off..off + nb].to_vec(), x1[off + nb..off + 2 * nb].to_vec())),
        lambda1: 2.0 * sse3 / n,
        lambda23: 2.0 * sse1 / n,
        sse_u1: 2.0 * sse1,
        sse_u3: 2.0 * sse3,
        converged: conv1 && conv3,
        iterations: it1 + it3,
    })
}

impl PemEstimate {
    fn plant_vector(&self, eq: usize) -> Vec<f64> {
        if eq == 0 {
            let mut v = [self.a[0].as_slice(), &self.b[0]].concat();
            if let Some(c) = &self.c1 {
                v.extend_from_slice(c);
            }
            v
        } else {
            let mut v = [self.a[1].as_slice(), &self.b[1], &self.a[2], &self.b[2]].concat();
            if let Some((c, d)) = &self.noise_bar {
                v.extend_from_slice(c);
                v.extend_from_slice(d);
            }
            v
        }
    }

    /// One-step predictions of the observed rows of `data` from the two
    /// single-equation predictors.
    pub fn predict(&self, data: &Dataset, topology: &Topology) -> Result<DMatrix<f64>> {
        let s = signals(data, topology)?;
        let armax = self.class == ModelClass::Armax;
        let nb = self.noise_bar.as_ref().map_or(0, |(c, _)| c.len());
        let inadmissible = || Error::Stability("baseline estimate is not admissible".into());
        let e3 = residual_u3(&s, self.orders[0], &self.plant_vector(0), armax).ok_or_else(inadmissible)?;
        let e1 = residual_u1(&s, self.orders[1], self.orders[2], nb, &self.plant_vector(1), armax)
            .ok_or_else(inadmissible)?;
        let mut out = data.x_o().clone();
        for k in 0..data.horizon() {
            out[(s.rows.0, k)] -= e1[k];
            out[(s.rows.1, k)] -= e3[k];
        }
        Ok(out)
    }

    /// Network model of an output-error estimate, splitting `λ² + λ³` evenly.
    pub fn to_model(&self, topology: &Topology) -> Result<NetworkModel> {
        if self.class != ModelClass::OutputError {
            return Err(Error::Input("only an output-error baseline defines a full network model".into()));
        }
        let lambdas = [self.lambda1, 0.5 * self.lambda23, 0.5 * self.lambda23];
        let nodes = (0..3)
            .map(|i| ArmaxNode::output_error(self.a[i].clone(), self.b[i].clone(), lambdas[i]))
            .collect::<Result<Vec<_>>>()?;
        NetworkModel::new(nodes, topology.clone())
    }

    /// `(a, b)` packed in the network parameter order.
    pub fn ab(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.a.concat();
        v.extend(self.b.concat());
        v
    }

    /// Layout of the full network parameter vector.
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.orders.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::generate::generate_reference;
    use crate::experiments::metrics::fit_rows;
    use crate::experiments::simulate::{simulate, simulate_noise_free};
    use crate::likelihood::nll_stationary;
    use crate::testutil::three_node_model;

    fn obs() -> [Signal; 2] {
        [Signal::u(0), Signal::u(2)]
    }

    #[test]
    fn filter_matches_recursion() {
        let x = [1.0, 0.0, 0.0, 0.0];
        let y = lfilter(&[0.0, 1.0], &[1.0, -0.5], &x);
        assert_eq!(y, vec![0.0, 1.0, 0.5, 0.25]);
    }

    #[test]
    fn rejects_other_topologies() {
        let m = three_node_model(&[Signal::u(2)], true);
        let d = simulate_noise_free(&m, &generate_reference(1, 50, 3)).unwrap();
        let err = pem_baseline(&d, m.topology(), &m.orders(), &PemConfig::default());
        assert!(matches!(err, Err(Error::UnsupportedTopology(_))));
    }

    #[test]
    fn noise_free_recovery() {
        for class in [ModelClass::OutputError, ModelClass::Armax] {
            let m = three_node_model(&obs(), class == ModelClass::OutputError);
            let d = simulate_noise_free(&m, &generate_reference(2, 300, 3)).unwrap();
            let cfg = PemConfig {
                class,
                tol: 1e-10,
                ..Default::default()
            };
            let est = pem_baseline(&d, m.topology(), &m.orders(), &cfg).unwrap();
            let truth = &m.theta()[m.layout().ab_indices()];
            for (e, t) in est.ab().iter().zip(truth) {
                assert!((e - t).abs() < 1e-4, "{class:?}: {:?} vs {truth:?}", est.ab());
            }
        }
    }

    #[test]
    fn output_error_objective_matches_likelihood() {
        let m = three_node_model(&obs(), true);
        let d = simulate(&m, &generate_reference(3, 400, 3), 4).unwrap();
        let cfg = PemConfig {
            class: ModelClass::OutputError,
            ..Default::default()
        };
        let est = pem_baseline(&d, m.topology(), &m.orders(), &cfg).unwrap();
        let model = est.to_model(m.topology()).unwrap();
        let n = d.horizon() as f64;
        let ml = nll_stationary(&model, &d).unwrap().value;
        let display = 0.5 * (2.0 * n + n * (est.sse_u3 / n).ln() + n * (est.sse_u1 / n).ln());
        assert!((ml - display).abs() <= 1e-8 * (1.0 + ml.abs()), "{ml} vs {display}");
        // predictions agree with the network predictor at the same parameters
        let p = est.predict(&d, m.topology()).unwrap();
        let q = crate::experiments::metrics::predict(&model, &d).unwrap();
        assert!((p - q).amax() < 1e-9);
    }

    #[test]
    fn armax_predictions_fit_validation_data() {
        let m = three_node_model(&obs(), false);
        let d = simulate(&m, &generate_reference(5, 500, 3), 6).unwrap();
        let est = pem_baseline(&d, m.topology(), &m.orders(), &PemConfig::default()).unwrap();
        let v = simulate(&m, &generate_reference(7, 500, 3), 8).unwrap();
        let fits = fit_rows(&est.predict(&v, m.topology()).unwrap(), v.x_o());
        let ideal = fit_rows(&crate::experiments::metrics::predict(&m, &v).unwrap(), v.x_o());
        for (f, i) in fits.iter().zip(&ideal) {
            assert!(*f > i - 0.05, "{fits:?} vs {ideal:?}");
        }
    }
}
