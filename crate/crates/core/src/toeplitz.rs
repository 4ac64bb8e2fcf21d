//! Predictor-free likelihood: the network over a finite horizon written as a
//! square linear system in all node signals, with the unobserved signals
//! eliminated by orthogonal transformations.
//!
//! Signals are stacked signal-major: `(y¹, …, y^M, u¹, …, u^M)` with each
//! block holding `N` time samples. The interconnection rows
//! `A₂ = K ⊗ I_N` inherit a Kronecker structure from `u = Υ y + Ω r`, so all
//! θ-independent orthogonal factors are Kronecker products of small
//! matrices with `I_N` and are computed once per topology and horizon.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::NllValue;
use crate::linalg::{full_q, orthogonal_complement};
use crate::model::{NetworkModel, Topology};
use crate::poly::series_divide;

/// Relative singular-value threshold of the rank decision.
pub const RANK_TOL: f64 = 1e-10;
/// Relative band around the threshold that triggers a conditioning note.
pub const RANK_WARN_BAND: (f64, f64) = (1e-12, 1e-8);

/// Lower-triangular Toeplitz matrix with the given first column (zero padded).
pub fn lower_toeplitz(first_col: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i >= j {
            first_col.get(i - j).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    })
}

/// Per-node Toeplitz matrices and the block-diagonal `T_y = T_c⁻¹ T_a`,
/// `T_u = T_c⁻¹ T_b`.
#[derive(Debug, Clone)]
pub struct ToeplitzBank {
    pub t_a: Vec<DMatrix<f64>>,
    pub t_b: Vec<DMatrix<f64>>,
    pub t_c: Vec<DMatrix<f64>>,
    pub t_y: DMatrix<f64>,
    pub t_u: DMatrix<f64>,
}

/// First columns of `T_y^i` and `T_u^i` for every node.
fn node_series(model: &NetworkModel, n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    model
        .nodes()
        .iter()
        .map(|node| {
            let a = node.a_poly();
            let c = node.c_poly();
            let mut b = vec![0.0];
            b.extend_from_slice(node.b());
            (series_divide(&a, &c, n), series_divide(&b, &c, n))
        })
        .collect()
}

pub fn build_toeplitz_bank(model: &NetworkModel, n: usize) -> ToeplitzBank {
    let mm = model.nodes().len();
    let mut bank = ToeplitzBank {
        t_a: Vec::with_capacity(mm),
        t_b: Vec::with_capacity(mm),
        t_c: Vec::with_capacity(mm),
        t_y: DMatrix::zeros(mm * n, mm * n),
        t_u: DMatrix::zeros(mm * n, mm * n),
    };
    for (i, (node, (sy, su))) in model.nodes().iter().zip(node_series(model, n)).enumerate() {
        let mut b = vec![0.0];
        b.extend_from_slice(node.b());
        bank.t_a.push(lower_toeplitz(&node.a_poly(), n));
        bank.t_b.push(lower_toeplitz(&b, n));
        bank.t_c.push(lower_toeplitz(&node.c_poly(), n));
        bank.t_y
            .view_mut((i * n, i * n), (n, n))
            .copy_from(&lower_toeplitz(&sy, n));
        bank.t_u
            .view_mut((i * n, i * n), (n, n))
            .copy_from(&lower_toeplitz(&su, n));
    }
    bank
}

/// Dense `t ⊗ I_n`.
pub fn kron_identity(t: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    t.kronecker(&DMatrix::identity(n, n))
}

/// `x (t ⊗ I_n)` computed block-wise.
fn right_kron(x: &DMatrix<f64>, t: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), t.ncols() * n);
    for l in 0..t.ncols() {
        for j in 0..t.nrows() {
            let c = t[(j, l)];
            if c != 0.0 {
                let src = x.columns(j * n, n);
                let mut dst = out.columns_mut(l * n, n);
                dst.zip_apply(&src, |d, s| *d += c * s);
            }
        }
    }
    out
}

/// `(t ⊗ I_n) v`
fn kron_vec(t: &DMatrix<f64>, v: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(t.nrows() * n);
    for i in 0..t.nrows() {
        for j in 0..t.ncols() {
            let c = t[(i, j)];
            if c != 0.0 {
                let src = v.rows(j * n, n);
                out.rows_mut(i * n, n).axpy(c, &src, 1.0);
            }
        }
    }
    out
}

/// Signal order of `x`: observed signals in observation order, then the
/// remaining signals in ascending stacked index.
pub fn signal_permutation(topo: &Topology) -> Vec<usize> {
    let mut perm = topo.observed().to_vec();
    perm.extend((0..2 * topo.nodes()).filter(|i| !topo.observed().contains(i)));
    perm
}

/// Signal-major stacking of a p × N (or m × N) sample matrix.
pub fn stack_rows(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

/// `A x + b = (e, 0)` over a horizon of `n` samples.
#[derive(Debug, Clone)]
pub struct StructuralSystem {
    /// `[A₁; A₂]`, 2MN × 2MN
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Stacked signal index of each column block of `x`.
    pub perm: Vec<usize>,
    /// Small factor of the interconnection rows, `A₂ = K ⊗ I_N`.
    pub a2_factor: DMatrix<f64>,
    pub n_o: usize,
    pub n_m: usize,
    pub horizon: usize,
}

impl StructuralSystem {
    pub fn nodes(&self) -> usize {
        self.a2_factor.nrows()
    }

    /// Stacks node trajectories `y`, `u` (M × N) into `x` in permuted order.
    pub fn stack_x(&self, y: &DMatrix<f64>, u: &DMatrix<f64>) -> DVector<f64> {
        let mm = self.nodes();
        let n = self.horizon;
        let mut x = DVector::zeros(2 * mm * n);
        for (blk, &s) in self.perm.iter().enumerate() {
            let row = if s < mm { y.row(s) } else { u.row(s - mm) };
            x.rows_mut(blk * n, n).copy_from(&row.transpose());
        }
        x
    }
}

fn a2_factor(topo: &Topology, perm: &[usize]) -> DMatrix<f64> {
    let mm = topo.nodes();
    let mut k = DMatrix::zeros(mm, 2 * mm);
    k.view_mut((0, 0), (mm, mm)).copy_from(&(-topo.upsilon()));
    k.view_mut((0, mm), (mm, mm)).fill_with_identity();
    k.select_columns(perm)
}

/// `b₂ = -(Ω ⊗ I) r`
fn b2_vector(topo: &Topology, r: &DMatrix<f64>) -> DVector<f64> {
    -kron_vec(topo.omega(), &stack_rows(r), r.ncols())
}

/// Columns of `A₁` for the given signals, MN × (signals · N).
fn a1_columns(series: &[(Vec<f64>, Vec<f64>)], signals: &[usize], n: usize) -> DMatrix<f64> {
    let mm = series.len();
    let mut out = DMatrix::zeros(mm * n, signals.len() * n);
    for (blk, &s) in signals.iter().enumerate() {
        let (node, col, sign) = if s < mm {
            (s, &series[s].0, 1.0)
        } else {
            (s - mm, &series[s - mm].1, -1.0)
        };
        let t = lower_toeplitz(col, n) * sign;
        out.view_mut((node * n, blk * n), (n, n)).copy_from(&t);
    }
    out
}

/// Assembles `A` and `b` for references `r` (m × N) under zero initial conditions.
pub fn assemble_structural(model: &NetworkModel, r: &DMatrix<f64>) -> Result<StructuralSystem> {
    let topo = model.topology();
    let mm = topo.nodes();
    let n = r.ncols();
    if r.nrows() != topo.references() {
        return Err(Error::Dimension(format!(
            "{} reference rows, topology expects {}",
            r.nrows(),
            topo.references()
        )));
    }
    let perm = signal_permutation(topo);
    let series = node_series(model, n);
    let k = a2_factor(topo, &perm);
    let mut a = DMatrix::zeros(2 * mm * n, 2 * mm * n);
    a.view_mut((0, 0), (mm * n, 2 * mm * n))
        .copy_from(&a1_columns(&series, &perm, n));
    a.view_mut((mm * n, 0), (mm * n, 2 * mm * n))
        .copy_from(&kron_identity(&k, n));
    // Schur complement of the unpermuted system, T_y - T_u (Υ ⊗ I)
    let bank = build_toeplitz_bank(model, n);
    let schur = &bank.t_y - &bank.t_u * kron_identity(topo.upsilon(), n);
    if schur.clone().lu().determinant().abs() < crate::closed_loop::WELL_POSED_TOL {
        return Err(Error::Singular("structural system is singular".into()));
    }
    let mut b = DVector::zeros(2 * mm * n);
    b.rows_mut(mm * n, mm * n).copy_from(&b2_vector(topo, r));
    let p = topo.observations();
    Ok(StructuralSystem {
        a,
        b,
        perm,
        a2_factor: k,
        n_o: p * n,
        n_m: (2 * mm - p) * n,
        horizon: n,
    })
}

/// θ-independent part of the elimination: SVD of the missing-signal block of
/// `A₂`, the orthogonal factor `W` of the observed block and the transformed
/// offsets. Dimensions are per time sample; multiply by `N` for the full system.
#[derive(Debug, Clone)]
pub struct ReductionPlan {
    pub horizon: usize,
    pub nodes: usize,
    /// observed signal count `p`
    pub observed: usize,
    pub u1: DMatrix<f64>,
    pub u2: DMatrix<f64>,
    pub sigma1: Vec<f64>,
    pub v1: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    /// `Σ₁⁻¹ Ā_2o1`
    pub pivot_2o1: DMatrix<f64>,
    /// `Ã_2o11`, `Ã_2o12`, `Ã_2o21`
    pub a2o11: DMatrix<f64>,
    pub a2o12: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub l_inv: DMatrix<f64>,
    pub b21: DVector<f64>,
    pub b22: DVector<f64>,
    /// Singular values of the small missing-signal factor.
    pub singular_values: Vec<f64>,
    pub conditioning_note: Option<String>,
}

impl ReductionPlan {
    pub fn new(k: &DMatrix<f64>, observed: usize, b2: &DVector<f64>, horizon: usize) -> Result<Self> {
        let mm = k.nrows();
        let k_o = k.columns(0, observed).into_owned();
        let k_m = k.columns(observed, k.ncols() - observed).into_owned();
        let nm = k_m.ncols();

        let (u1, sigma1, v1, singular_values, note) = if nm == 0 {
            (DMatrix::zeros(mm, 0), Vec::new(), DMatrix::zeros(0, 0), Vec::new(), None)
        } else {
            let svd = k_m.clone().svd(true, true);
            let u = svd.u.expect("requested");
            let vt = svd.v_t.expect("requested");
            let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
            let smax = sv.iter().copied().fold(0.0, f64::max);
            let mut idx: Vec<usize> = (0..sv.len()).collect();
            idx.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
            let keep: Vec<usize> = idx.iter().copied().filter(|&i| sv[i] > RANK_TOL * smax).collect();
            let note = sv
                .iter()
                .find(|&&s| s >= RANK_WARN_BAND.0 * smax && s <= RANK_WARN_BAND.1 * smax)
                .map(|s| format!("singular value {s:e} lies near the rank threshold"));
            (
                u.select_columns(&keep),
                keep.iter().map(|&i| sv[i]).collect(),
                vt.select_rows(&keep).transpose(),
                sv,
                note,
            )
        };
        let rank = sigma1.len();
        let u2 = orthogonal_complement(&u1);
        let v2 = if nm == 0 {
            DMatrix::zeros(0, 0)
        } else {
            orthogonal_complement(&v1)
        };

        let a2o1 = u1.transpose() * &k_o;
        let a2o2 = u2.transpose() * &k_o;
        let n_o1 = mm - rank;
        if crate::linalg::rank(&a2o2, RANK_TOL) < n_o1 || n_o1 > observed {
            return Err(Error::Singular(
                "structural system is singular: observed block lacks full row rank".into(),
            ));
        }
        // LQ of Ā_2o2 through the QR of its transpose
        let w = full_q(&a2o2.transpose());
        let w1 = w.columns(0, n_o1).into_owned();
        let w2 = w.columns(n_o1, observed - n_o1).into_owned();
        let l = &a2o2 * &w1;
        let l_inv = if n_o1 == 0 {
            DMatrix::zeros(0, 0)
        } else {
            l.clone()
                .try_inverse()
                .ok_or_else(|| Error::Singular("pivot block is singular".into()))?
        };
        let s_inv = DMatrix::from_diagonal(&DVector::from_iterator(rank, sigma1.iter().map(|s| 1.0 / s)));
        let pivot_2o1 = &s_inv * &a2o1;
        let b21 = kron_vec(&u1.transpose(), b2, horizon);
        let b22 = kron_vec(&u2.transpose(), b2, horizon);
        Ok(Self {
            horizon,
            nodes: mm,
            observed,
            a2o11: &a2o1 * &w1,
            a2o12: &a2o1 * &w2,
            u1,
            u2,
            sigma1,
            v1,
            v2,
            w1,
            w2,
            pivot_2o1,
            l,
            l_inv,
            b21,
            b22,
            singular_values,
            conditioning_note: note,
        })
    }

    pub fn for_data(topo: &Topology, r: &DMatrix<f64>) -> Result<Self> {
        let perm = signal_permutation(topo);
        let k = a2_factor(topo, &perm);
        Self::new(&k, topo.observations(), &b2_vector(topo, r), r.ncols())
    }

    pub fn rank(&self) -> usize {
        self.sigma1.len()
    }
    /// Per-sample dimension of `x̄_o1`.
    pub fn n_o1(&self) -> usize {
        self.w1.ncols()
    }
    /// Per-sample dimension of `x̄_o2`.
    pub fn n_o2(&self) -> usize {
        self.w2.ncols()
    }
    /// Per-sample dimension of `x̄_m2`.
    pub fn n_m2(&self) -> usize {
        self.v2.ncols()
    }

    /// `x̄_o = (Wᵀ ⊗ I) x_o`, split into `(x̄_o1, x̄_o2)`.
    pub fn transform_observed(&self, x_o: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.horizon;
        (
            kron_vec(&self.w1.transpose(), x_o, n),
            kron_vec(&self.w2.transpose(), x_o, n),
        )
    }

    /// Applies the θ-dependent part of the elimination to the observed and
    /// missing column blocks of `A₁`.
    pub fn reduce(&self, a1o: &DMatrix<f64>, a1m: &DMatrix<f64>) -> Result<ReducedSystem> {
        let n = self.horizon;
        let a1m1 = right_kron(a1m, &self.v1, n);
        let a1m2 = right_kron(a1m, &self.v2, n);
        let a1o_bar = a1o - right_kron(&a1m1, &self.pivot_2o1, n);
        let s_inv = DMatrix::from_diagonal(&DVector::from_iterator(
            self.rank(),
            self.sigma1.iter().map(|s| 1.0 / s),
        ));
        let b1_bar = -(&a1m1 * kron_vec(&s_inv, &self.b21, n));
        let a1o1 = right_kron(&a1o_bar, &self.w1, n);
        let a1o2 = right_kron(&a1o_bar, &self.w2, n);
        let b1_tilde = &b1_bar - &a1o1 * kron_vec(&self.l_inv, &self.b22, n);
        let rows = a1o2.nrows();
        let cols = a1o2.ncols() + a1m2.ncols();
        if rows != cols {
            return Err(Error::Conditioning(format!(
                "reduced system is {rows} × {cols}, expected square"
            )));
        }
        let mut j = DMatrix::zeros(rows, cols);
        j.columns_mut(0, a1o2.ncols()).copy_from(&a1o2);
        j.columns_mut(a1o2.ncols(), a1m2.ncols()).copy_from(&a1m2);
        Ok(ReducedSystem {
            j,
            n_o2: a1o2.ncols(),
            b1_tilde,
        })
    }

    /// `x̄_o1 = -Ã_2o21⁻¹ b̄_22`
    pub fn reconstruct_o1(&self) -> DVector<f64> {
        -kron_vec(&self.l_inv, &self.b22, self.horizon)
    }

    /// `x̄_m1 = -Σ₁⁻¹ (Ã_2o11 x̄_o1 + b̄_21 + Ã_2o12 x̄_o2)`
    pub fn reconstruct_m1(&self, x_o1: &DVector<f64>, x_o2: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon;
        let s_inv = DMatrix::from_diagonal(&DVector::from_iterator(
            self.rank(),
            self.sigma1.iter().map(|s| 1.0 / s),
        ));
        let rhs = kron_vec(&self.a2o11, x_o1, n) + &self.b21 + kron_vec(&self.a2o12, x_o2, n);
        -kron_vec(&s_inv, &rhs, n)
    }

    /// `x_o = (W ⊗ I) x̄_o` and `x_m = (V ⊗ I) x̄_m`.
    pub fn untransform(
        &self,
        x_o1: &DVector<f64>,
        x_o2: &DVector<f64>,
        x_m1: &DVector<f64>,
        x_m2: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let n = self.horizon;
        let x_o = kron_vec(&self.w1, x_o1, n) + kron_vec(&self.w2, x_o2, n);
        let x_m = if self.v1.nrows() == 0 {
            DVector::zeros(0)
        } else {
            kron_vec(&self.v1, x_m1, n) + kron_vec(&self.v2, x_m2, n)
        };
        (x_o, x_m)
    }
}

/// `[Ã_1o2 Ā_1m2] (x̄_o2, x̄_m2) + b̃₁ = e`
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    /// `[Ã_1o2 Ā_1m2]`, square MN × MN.
    pub j: DMatrix<f64>,
    /// Number of leading columns of `j` belonging to `x̄_o2`.
    pub n_o2: usize,
    pub b1_tilde: DVector<f64>,
}

impl ReducedSystem {
    /// Negative log-density (without the 2π constant) of `x̄_o2` when `e` has
    /// covariance `diag(λ_i I_N)`.
    pub fn nll(&self, x_o2: &DVector<f64>, lambdas: &[f64], horizon: usize) -> Result<NllValue> {
        let dim = self.n_o2;
        let total = self.j.nrows();
        if dim == 0 {
            return Ok(NllValue::finite(0.0, 0.0, 0, Vec::new()));
        }
        let lu = self.j.transpose().lu();
        // Gᵀ = J⁻ᵀ S₁ᵀ, the first n_o2 rows of J⁻¹ transposed
        let mut sel = DMatrix::zeros(total, dim);
        sel.view_mut((0, 0), (dim, dim)).fill_with_identity();
        let gt = lu
            .solve(&sel)
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Conditioning("reduced system matrix is singular".into()))?;
        let mut scaled = gt.clone();
        for (i, &lam) in lambdas.iter().enumerate() {
            scaled.rows_mut(i * horizon, horizon).scale_mut(lam.sqrt());
        }
        let c = scaled.transpose() * &scaled;
        let mu = -(gt.transpose() * &self.b1_tilde);
        let d = x_o2 - mu;
        let chol = c.cholesky().ok_or_else(|| {
            Error::Conditioning("marginal covariance of the observations is singular".into())
        })?;
        let l = chol.l_dirty();
        let z = l
            .solve_lower_triangular(&d)
            .ok_or_else(|| Error::Conditioning("triangular solve failed".into()))?;
        let logdet: f64 = (0..dim).map(|i| 2.0 * l[(i, i)].ln()).sum();
        Ok(NllValue::finite(z.norm_squared(), logdet, dim, Vec::new()))
    }
}

/// Runs the full elimination on an assembled system.
pub fn eliminate(sys: &StructuralSystem) -> Result<(ReductionPlan, ReducedSystem)> {
    let mm = sys.nodes();
    let n = sys.horizon;
    let b2 = sys.b.rows(mm * n, mm * n).into_owned();
    let plan = ReductionPlan::new(&sys.a2_factor, sys.n_o / n.max(1), &b2, n)?;
    let a1 = sys.a.rows(0, mm * n);
    let a1o = a1.columns(0, sys.n_o).into_owned();
    let a1m = a1.columns(sys.n_o, sys.n_m).into_owned();
    let red = plan.reduce(&a1o, &a1m)?;
    Ok((plan, red))
}

/// Reduced likelihood with the θ-independent factors cached for one dataset.
#[derive(Debug, Clone)]
pub struct ToeplitzObjective {
    plan: ReductionPlan,
    perm: Vec<usize>,
    observed: usize,
    x_o2: DVector<f64>,
}

impl ToeplitzObjective {
    pub fn new(topo: &Topology, data: &Dataset) -> Result<Self> {
        data.check_topology(topo)?;
        let plan = ReductionPlan::for_data(topo, data.r())?;
        let (_, x_o2) = plan.transform_observed(&stack_rows(data.x_o()));
        Ok(Self {
            plan,
            perm: signal_permutation(topo),
            observed: topo.observations(),
            x_o2,
        })
    }

    pub fn plan(&self) -> &ReductionPlan {
        &self.plan
    }

    pub fn reduce(&self, model: &NetworkModel) -> Result<ReducedSystem> {
        let n = self.plan.horizon;
        let series = node_series(model, n);
        let a1o = a1_columns(&series, &self.perm[..self.observed], n);
        let a1m = a1_columns(&series, &self.perm[self.observed..], n);
        self.plan.reduce(&a1o, &a1m)
    }

    pub fn eval(&self, model: &NetworkModel) -> Result<NllValue> {
        let red = self.reduce(model)?;
        red.nll(&self.x_o2, &model.lambdas(), self.plan.horizon)
    }
}

/// Sizes and conditioning of the structural system and its reduction.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ReductionDiagnostics {
    pub horizon: usize,
    /// `A` is square, `2MN × 2MN`.
    pub structural_rows: usize,
    pub structural_cols: usize,
    /// `[Ã_1o2 Ā_1m2]` is square, `MN × MN`.
    pub reduced_rows: usize,
    pub reduced_cols: usize,
    /// Length of `x̄_o2`, the part of the observations carrying the likelihood.
    pub observed_informative: usize,
    /// Rank of the missing-signal block of `A₂` per time sample.
    pub rank_per_sample: usize,
    pub singular_values: Vec<f64>,
    /// 2-norm condition number of the reduced matrix.
    pub reduced_condition: f64,
    pub conditioning_note: Option<String>,
}

/// Assembles and reduces the system for the references `r` and reports its shape.
pub fn diagnose_reduction(model: &NetworkModel, r: &DMatrix<f64>) -> Result<ReductionDiagnostics> {
    let sys = assemble_structural(model, r)?;
    let (plan, red) = eliminate(&sys)?;
    let sv = red.j.clone().svd(false, false).singular_values;
    let cond = if sv.is_empty() {
        1.0
    } else if sv.min() > 0.0 {
        sv.max() / sv.min()
    } else {
        f64::INFINITY
    };
    Ok(ReductionDiagnostics {
        horizon: sys.horizon,
        structural_rows: sys.a.nrows(),
        structural_cols: sys.a.ncols(),
        reduced_rows: red.j.nrows(),
        reduced_cols: red.j.ncols(),
        observed_informative: red.n_o2,
        rank_per_sample: plan.rank(),
        singular_values: plan.singular_values.clone(),
        reduced_condition: cond,
        conditioning_note: plan.conditioning_note.clone(),
    })
}

/// Negative log-likelihood of the observations from the reduced system.
pub fn nll_reduced(model: &NetworkModel, data: &Dataset) -> Result<NllValue> {
    let mut v = ToeplitzObjective::new(model.topology(), data)?.eval(model)?;
    v.theta = model.theta();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::generate::generate_reference;
    use crate::experiments::simulate::{draw_noise, simulate_with_noise};
    use crate::kalman::InitKind;
    use crate::likelihood::nll_time_varying;
    use crate::model::{ArmaxNode, Signal};
    use crate::testutil::{three_node_model, random_model};
    use rand::{Rng, SeedableRng};

    fn single(a: &[f64], b: &[f64], c: &[f64], lambda: f64, ups: f64, observed: Vec<usize>) -> NetworkModel {
        let topo = Topology::new(
            DMatrix::from_element(1, 1, ups),
            DMatrix::from_element(1, 1, 1.0),
            observed,
        )
        .unwrap();
        NetworkModel::new(vec![ArmaxNode::new(a.to_vec(), b.to_vec(), c.to_vec(), lambda).unwrap()], topo).unwrap()
    }

    fn residual(sys: &StructuralSystem, x: &DVector<f64>, e: &DMatrix<f64>) -> f64 {
        let mm = sys.nodes();
        let n = sys.horizon;
        let mut rhs = DVector::zeros(2 * mm * n);
        rhs.rows_mut(0, mm * n).copy_from(&stack_rows(e));
        (&sys.a * x + &sys.b - rhs).amax()
    }

    #[test]
    fn toeplitz_shape() {
        let m = single(&[0.3, -0.2], &[1.0, 0.5], &[0.1, 0.0], 1.0, 0.0, vec![0]);
        let bank = build_toeplitz_bank(&m, 3);
        let want = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.3, 1.0, 0.0, -0.2, 0.3, 1.0]);
        assert_eq!(bank.t_a[0], want);
        assert_eq!(bank.t_b[0][(0, 0)], 0.0);
        assert_eq!(bank.t_b[0][(1, 0)], 1.0);
    }

    #[test]
    fn unit_delay() {
        let m = single(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], 1.0, 0.0, vec![0]);
        let bank = build_toeplitz_bank(&m, 4);
        let u = DVector::from_row_slice(&[1.0, 0.0, 0.0, 0.0]);
        let y = DVector::from_row_slice(&[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(&bank.t_a[0] * y - &bank.t_b[0] * u, DVector::zeros(4));
    }

    #[test]
    fn node_identity_against_recursion() {
        let m = single(&[-0.5, 0.2, 0.1], &[0.4, -1.0, 0.3], &[0.3, -0.1, 0.05], 1.0, 0.0, vec![0]);
        let node = &m.nodes()[0];
        let n = 50;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; n];
        for k in 0..n {
            let mut v = e[k];
            for j in 1..=3 {
                if k >= j {
                    v += -node.a()[j - 1] * y[k - j] + node.b()[j - 1] * u[k - j] + node.c()[j - 1] * e[k - j];
                }
            }
            y[k] = v;
        }
        let bank = build_toeplitz_bank(&m, n);
        let (yv, uv, ev) = (DVector::from_vec(y), DVector::from_vec(u), DVector::from_vec(e));
        let res = &bank.t_a[0] * &yv - &bank.t_b[0] * &uv - &bank.t_c[0] * &ev;
        assert!(res.amax() <= 1e-12);
        let res2 = &bank.t_y * &yv - &bank.t_u * &uv - ev;
        assert!(res2.amax() <= 1e-10);
    }

    #[test]
    fn three_node_dimensions() {
        let m = three_node_model(&[Signal::u(2)], false);
        let sys = assemble_structural(&m, &generate_reference(0, 2, 3)).unwrap();
        assert_eq!(sys.a.shape(), (12, 12));
        assert_eq!((sys.n_o, sys.n_m), (2, 10));
    }

    #[test]
    fn simulated_trajectory_satisfies_structure() {
        for seed in 0..5 {
            let m = random_model(seed);
            let n = 40;
            let r = generate_reference(seed, n, m.topology().references());
            let e = draw_noise(&m, n, seed + 100);
            let (_, t) = simulate_with_noise(&m, &r, &e).unwrap();
            let sys = assemble_structural(&m, &r).unwrap();
            assert!(residual(&sys, &sys.stack_x(&t.y, &t.u), &e) <= 1e-10);
            let fig = three_node_model(&[Signal::u(2)], false);
            let r3 = generate_reference(seed, n, 3);
            let e3 = draw_noise(&fig, n, seed);
            let (_, t3) = simulate_with_noise(&fig, &r3, &e3).unwrap();
            let sys3 = assemble_structural(&fig, &r3).unwrap();
            assert!(residual(&sys3, &sys3.stack_x(&t3.y, &t3.u), &e3) <= 1e-10);
        }
    }

    #[test]
    fn interconnection_rows_do_not_depend_on_theta() {
        let r = generate_reference(3, 6, 3);
        let a = assemble_structural(&three_node_model(&[Signal::u(2)], false), &r).unwrap();
        let b = assemble_structural(&three_node_model(&[Signal::u(2)], true), &r).unwrap();
        assert_ne!(a.a.rows(0, 18), b.a.rows(0, 18));
        assert_eq!(a.a.rows(18, 18), b.a.rows(18, 18));
        assert_eq!(a.b, b.b);
    }

    #[test]
    fn all_observed_single_node() {
        let m = single(&[-0.5], &[0.8], &[0.3], 0.7, 0.0, vec![0, 1]);
        let n = 12;
        let r = generate_reference(1, n, 1);
        let e = draw_noise(&m, n, 2);
        let (d, t) = simulate_with_noise(&m, &r, &e).unwrap();
        let sys = assemble_structural(&m, &r).unwrap();
        let (plan, red) = eliminate(&sys).unwrap();
        assert_eq!(plan.n_m2(), 0);
        assert_eq!(red.j.shape(), (n, n));
        let v = nll_reduced(&m, &d).unwrap();
        let bank = build_toeplitz_bank(&m, n);
        let yv = t.y.row(0).transpose();
        let uv = t.u.row(0).transpose();
        let tc_inv = bank.t_c[0].clone().try_inverse().unwrap();
        let ehat = tc_inv * (&bank.t_a[0] * yv - &bank.t_b[0] * uv);
        let want = 0.5 * (ehat.norm_squared() / 0.7 + n as f64 * 0.7f64.ln());
        assert!((v.value - want).abs() < 1e-10 * (1.0 + want.abs()));
    }

    #[test]
    fn unconstrained_missing_signal() {
        // only u = r is observed; y does not appear in the interconnection rows
        let m = single(&[-0.5], &[0.8], &[0.3], 0.7, 0.0, vec![1]);
        let r = generate_reference(1, 5, 1);
        let sys = assemble_structural(&m, &r).unwrap();
        let (plan, _) = eliminate(&sys).unwrap();
        assert_eq!(plan.rank(), 0);
        assert_eq!(plan.n_m2(), 1);
    }

    #[test]
    fn reconstruction_round_trip() {
        for seed in 0..5 {
            let m = random_model(seed + 10);
            let n = 15;
            let r = generate_reference(seed, n, m.topology().references());
            let e = draw_noise(&m, n, seed);
            let (_, t) = simulate_with_noise(&m, &r, &e).unwrap();
            let sys = assemble_structural(&m, &r).unwrap();
            let (plan, red) = eliminate(&sys).unwrap();
            let x = sys.stack_x(&t.y, &t.u);
            let x_o = x.rows(0, sys.n_o).into_owned();
            let x_m = x.rows(sys.n_o, sys.n_m).into_owned();
            let (_, x_o2) = plan.transform_observed(&x_o);
            let x_m2 = if plan.n_m2() == 0 {
                DVector::zeros(0)
            } else {
                kron_vec(&plan.v2.transpose(), &x_m, n)
            };
            let x_o1 = plan.reconstruct_o1();
            let x_m1 = plan.reconstruct_m1(&x_o1, &x_o2);
            let (xo_r, xm_r) = plan.untransform(&x_o1, &x_o2, &x_m1, &x_m2);
            let mut xr = DVector::zeros(x.len());
            xr.rows_mut(0, sys.n_o).copy_from(&xo_r);
            xr.rows_mut(sys.n_o, sys.n_m).copy_from(&xm_r);
            assert!(residual(&sys, &xr, &e) <= 1e-9, "seed {seed}");
            // the first reduced system reproduces e
            let mut z = DVector::zeros(red.j.ncols());
            z.rows_mut(0, x_o2.len()).copy_from(&x_o2);
            z.rows_mut(x_o2.len(), x_m2.len()).copy_from(&x_m2);
            assert!((&red.j * z + &red.b1_tilde - stack_rows(&e)).amax() <= 1e-9);
            // isometry of the orthogonal factors
            let (o1, o2) = plan.transform_observed(&x_o);
            assert!(((o1.norm_squared() + o2.norm_squared()).sqrt() - x_o.norm()).abs() <= 1e-12 * (1.0 + x_o.norm()));
            if plan.v1.nrows() > 0 {
                let m1 = kron_vec(&plan.v1.transpose(), &x_m, n);
                assert!(((m1.norm_squared() + x_m2.norm_squared()).sqrt() - x_m.norm()).abs() <= 1e-12 * (1.0 + x_m.norm()));
            }
            // reduced matrix has full row rank
            let sv = red.j.singular_values();
            assert!(sv.min() > 1e-10 * sv.max());
        }
    }

    #[test]
    fn matches_zero_initialized_filter() {
        let m = single(&[-0.6], &[-0.5], &[0.2], 0.4, 1.0, vec![1]);
        let r = generate_reference(4, 3, 1);
        let d = simulate_with_noise(&m, &r, &draw_noise(&m, 3, 5)).unwrap().0;
        let a = nll_reduced(&m, &d).unwrap().value;
        let b = nll_time_varying(&m, &d, InitKind::Zero).unwrap().value;
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        for seed in 0..5 {
            let m = random_model(seed + 50);
            let r = generate_reference(seed, 20, m.topology().references());
            let d = simulate_with_noise(&m, &r, &draw_noise(&m, 20, seed)).unwrap().0;
            let a = nll_reduced(&m, &d).unwrap().value;
            let b = nll_time_varying(&m, &d, InitKind::Zero).unwrap().value;
            assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn true_parameter_dominates() {
        let m = single(&[-0.6], &[-0.5], &[0.2], 0.4, 1.0, vec![1]);
        let p = single(&[-0.5], &[-0.4], &[0.1], 0.4, 1.0, vec![1]);
        let mut wins = 0;
        for seed in 0..50 {
            let r = generate_reference(seed, 200, 1);
            let d = simulate_with_noise(&m, &r, &draw_noise(&m, 200, seed + 1000)).unwrap().0;
            let obj = ToeplitzObjective::new(m.topology(), &d).unwrap();
            if obj.eval(&m).unwrap().value < obj.eval(&p).unwrap().value {
                wins += 1;
            }
        }
        assert!(wins >= 45, "{wins}");
    }
}
