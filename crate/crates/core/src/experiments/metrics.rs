//! Validation fits and replicate statistics of parameter estimates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::closed_loop::assemble_closed_loop;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kalman::kalman_stationary;
use crate::model::NetworkModel;
use crate::riccati::{qrs_blocks, solve_dare, DareOptions};

use super::simulate::simulate_noise_free;

/// `1 - ‖x̂ - x‖ / ‖x - mean(x)‖`. A constant signal gives `-∞` unless matched exactly.
pub fn fit(predicted: &[f64], measured: &[f64]) -> f64 {
    assert_eq!(predicted.len(), measured.len());
    let n = measured.len().max(1) as f64;
    let mean = measured.iter().sum::<f64>() / n;
    let err: f64 = predicted.iter().zip(measured).map(|(p, x)| (p - x).powi(2)).sum::<f64>().sqrt();
    let spread: f64 = measured.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt();
    if spread == 0.0 {
        return if err == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - err / spread
}

/// Row-wise fits of a `p × N` prediction against the observations.
pub fn fit_rows(predicted: &DMatrix<f64>, measured: &DMatrix<f64>) -> Vec<f64> {
    (0..measured.nrows())
        .map(|i| {
            let p: Vec<f64> = predicted.row(i).iter().copied().collect();
            let x: Vec<f64> = measured.row(i).iter().copied().collect();
            fit(&p, &x)
        })
        .collect()
}

/// One-step predictions `W_r r + W_o x_o` of the stationary predictor, started at zero.
pub fn predict(model: &NetworkModel, data: &Dataset) -> Result<DMatrix<f64>> {
    let ss = assemble_closed_loop(model)?;
    let ric = solve_dare(&ss, &qrs_blocks(&ss), &DareOptions::default())?;
    Ok(kalman_stationary(&ss, &ric, data)?.predictions(data))
}

/// Empirical signal-to-noise ratio per observed signal in dB: the noise-free
/// response to `r` against the remainder of `data`.
pub fn snr_db(model: &NetworkModel, r: &DMatrix<f64>, data: &Dataset) -> Result<Vec<f64>> {
    let clean = simulate_noise_free(model, r)?;
    let var = |x: &[f64]| {
        let n = x.len().max(1) as f64;
        let m = x.iter().sum::<f64>() / n;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
    };
    Ok((0..data.observations())
        .map(|i| {
            let s: Vec<f64> = clean.x_o().row(i).iter().copied().collect();
            let noise: Vec<f64> = (0..data.horizon()).map(|k| data.x_o()[(i, k)] - s[k]).collect();
            10.0 * (var(&s) / var(&noise)).log10()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationFit {
    /// `None` when the Riccati equation has no stabilizing solution at the estimate.
    pub fit_pred: Option<Vec<f64>>,
    pub fit_sim: Vec<f64>,
}

/// Prediction and simulation fits of `model` on validation data.
pub fn validation_fit(model: &NetworkModel, validation: &Dataset) -> Result<ValidationFit> {
    validation.check_topology(model.topology())?;
    let sim = simulate_noise_free(model, validation.r())?;
    let fit_sim = fit_rows(sim.x_o(), validation.x_o());
    let fit_pred = predict(model, validation)
        .ok()
        .map(|p| fit_rows(&p, validation.x_o()));
    Ok(ValidationFit { fit_pred, fit_sim })
}

/// Bias, covariance and mean squared error of replicated estimates of a
/// subvector. The covariance is normalized by the replicate count, so
/// `mse = trace(cov) + ‖bias‖²` holds as an identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateStats {
    pub replicates: usize,
    pub mean: Vec<f64>,
    pub bias: Vec<f64>,
    pub bias_sq: f64,
    pub cov_trace: f64,
    pub cov_max_eig: f64,
    pub mse: f64,
}

pub fn replicate_stats(estimates: &[Vec<f64>], truth: &[f64]) -> Result<ReplicateStats> {
    let r = estimates.len();
    if r == 0 {
        return Err(Error::Input("no replicates".into()));
    }
    let d = truth.len();
    if estimates.iter().any(|e| e.len() != d) {
        return Err(Error::Dimension("replicate length differs from the truth".into()));
    }
    let rf = r as f64;
    let mut mean = DVector::zeros(d);
    for e in estimates {
        mean += DVector::from_column_slice(e);
    }
    mean /= rf;
    let truth_v = DVector::from_column_slice(truth);
    let bias = &mean - &truth_v;
    let mut cov = DMatrix::zeros(d, d);
    let mut mse = 0.0;
    for e in estimates {
        let ev = DVector::from_column_slice(e);
        let dev = &ev - &mean;
        cov += &dev * dev.transpose();
        mse += (&ev - &truth_v).norm_squared();
    }
    cov /= rf;
    mse /= rf;
    let cov_max_eig = if d == 0 {
        0.0
    } else {
        SymmetricEigen::new(cov.clone()).eigenvalues.max()
    };
    Ok(ReplicateStats {
        replicates: r,
        mean: mean.as_slice().to_vec(),
        bias_sq: bias.norm_squared(),
        bias: bias.as_slice().to_vec(),
        cov_trace: cov.trace(),
        cov_max_eig,
        mse,
    })
}

/// Replicate statistics together with the fits of the averaged estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fit_pred: Option<Vec<f64>>,
    pub fit_sim: Vec<f64>,
    pub bias: Vec<f64>,
    pub bias_sq: f64,
    pub cov_trace: f64,
    pub cov_max_eig: f64,
    pub mse: f64,
    pub replicates: usize,
}

impl MetricsReport {
    /// `|mse - trace(cov) - ‖bias‖²|`.
    pub fn decomposition_gap(&self) -> f64 {
        (self.mse - self.cov_trace - self.bias_sq).abs()
    }
}

/// Statistics on the `(a, b)` subvector over replicated full estimates and
/// fits of the model built from the averaged estimate.
pub fn validate_metrics(theta_hats: &[Vec<f64>], model_true: &NetworkModel, validation: &Dataset) -> Result<MetricsReport> {
    let layout = model_true.layout();
    let ab = layout.ab_indices();
    let sub: Vec<Vec<f64>> = theta_hats.iter().map(|t| t[ab.clone()].to_vec()).collect();
    let truth = model_true.theta();
    let stats = replicate_stats(&sub, &truth[ab])?;
    let mut avg = vec![0.0; layout.len()];
    for t in theta_hats {
        if t.len() != layout.len() {
            return Err(Error::Dimension("estimate length differs from the model".into()));
        }
        for (a, v) in avg.iter_mut().zip(t) {
            *a += v / theta_hats.len() as f64;
        }
    }
    let model = NetworkModel::from_theta(&layout, model_true.topology().clone(), &avg)?;
    let vf = validation_fit(&model, validation)?;
    Ok(MetricsReport {
        fit_pred: vf.fit_pred,
        fit_sim: vf.fit_sim,
        bias: stats.bias,
        bias_sq: stats.bias_sq,
        cov_trace: stats.cov_trace,
        cov_max_eig: stats.cov_max_eig,
        mse: stats.mse,
        replicates: stats.replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::generate::generate_reference;
    use crate::experiments::simulate::simulate;
    use crate::model::Signal;
    use crate::testutil::three_node_model;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_mean_predictors() {
        let x = [1.0, 3.0, -2.0, 0.5];
        assert_eq!(fit(&x, &x), 1.0);
        let mean = x.iter().sum::<f64>() / 4.0;
        assert!(fit(&[mean; 4], &x).abs() < 1e-15);
    }

    #[test]
    fn true_model_simulates_noise_free_data_exactly() {
        let m = three_node_model(&[Signal::u(2)], false);
        let r = generate_reference(3, 200, 3);
        let d = simulate_noise_free(&m, &r).unwrap();
        let v = validation_fit(&m, &d).unwrap();
        assert_eq!(v.fit_sim, vec![1.0]);
        // the predictor of noise-free data is exact as well
        assert!((v.fit_pred.unwrap()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prediction_beats_simulation_on_noisy_data() {
        let m = three_node_model(&[Signal::u(0), Signal::u(2)], false);
        let r = generate_reference(4, 500, 3);
        let d = simulate(&m, &r, 5).unwrap();
        let v = validation_fit(&m, &d).unwrap();
        for (p, s) in v.fit_pred.unwrap().iter().zip(&v.fit_sim) {
            assert!(p >= s && *s > 0.0, "{p} {s}");
        }
    }

    #[test]
    fn replicate_stats_by_hand() {
        let est = vec![vec![1.0, 0.0], vec![3.0, 2.0]];
        let s = replicate_stats(&est, &[1.0, 1.0]).unwrap();
        assert_eq!(s.mean, vec![2.0, 1.0]);
        assert_eq!(s.bias, vec![1.0, 0.0]);
        assert!((s.cov_trace - 2.0).abs() < 1e-15);
        assert!((s.cov_max_eig - 2.0).abs() < 1e-12);
        assert!((s.mse - 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mse_decomposes(values in proptest::collection::vec(-5.0f64..5.0, 3..40), truth in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let est: Vec<Vec<f64>> = values.chunks_exact(3).map(|c| c.to_vec()).collect();
            prop_assume!(!est.is_empty());
            let s = replicate_stats(&est, &truth).unwrap();
            prop_assert!((s.mse - s.cov_trace - s.bias_sq).abs() <= 1e-9 * (1.0 + s.mse));
        }

        #[test]
        fn fit_ignores_replicate_order(values in proptest::collection::vec(-5.0f64..5.0, 6..30)) {
            let est: Vec<Vec<f64>> = values.chunks_exact(2).map(|c| c.to_vec()).collect();
            let mut rev = est.clone();
            rev.reverse();
            let a = replicate_stats(&est, &[0.0, 0.0]).unwrap();
            let b = replicate_stats(&rev, &[0.0, 0.0]).unwrap();
            prop_assert!((a.mse - b.mse).abs() < 1e-12 && (a.cov_trace - b.cov_trace).abs() < 1e-12);
        }
    }
}
