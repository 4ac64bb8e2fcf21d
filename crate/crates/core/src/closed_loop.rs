//! Open- and closed-loop state-space realizations of a network and
//! frequency-domain evaluation of its transfer functions.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::greedy_independent_rows;
use crate::model::NetworkModel;

/// Relative tolerance of the row-rank decision on `J_eo`.
pub const ROW_RANK_TOL: f64 = 1e-10;
/// Smallest admissible `|det(I - D Υ)|` of the algebraic loop.
pub const WELL_POSED_TOL: f64 = 1e-12;
/// Smallest denominator accepted by [`recover_modules_three_node`].
pub const DEGENERATE_TOL: f64 = 1e-12;

/// Closed-loop realization
/// `ξ⁺ = F_c ξ + G_r r + G_e e`, `x_o = H_o ξ + J_ro r + J_eo e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopSS {
    pub f_c: DMatrix<f64>,
    pub g_r: DMatrix<f64>,
    pub g_e: DMatrix<f64>,
    pub h_o: DMatrix<f64>,
    pub j_ro: DMatrix<f64>,
    pub j_eo: DMatrix<f64>,
    pub sigma_e: DMatrix<f64>,
    /// Open-loop block-diagonal `F`.
    pub f: DMatrix<f64>,
    /// Open-loop block-diagonal input matrix `B` (n × M).
    pub b: DMatrix<f64>,
    /// Open-loop block-diagonal noise matrix `C` with columns `c^i - a^i`.
    pub c: DMatrix<f64>,
    /// Open-loop block-diagonal output matrix `H` (M × n).
    pub h: DMatrix<f64>,
}

impl ClosedLoopSS {
    pub fn states(&self) -> usize {
        self.f_c.nrows()
    }
    pub fn observations(&self) -> usize {
        self.h_o.nrows()
    }
    pub fn references(&self) -> usize {
        self.g_r.ncols()
    }
    pub fn nodes(&self) -> usize {
        self.g_e.ncols()
    }

    /// `H_o (zI - F_c)⁻¹ G_r + J_ro`
    pub fn transfer_r(&self, z: Complex64) -> Result<DMatrix<Complex64>> {
        let x = resolvent_solve(&self.f_c, z, &self.g_r)?;
        Ok(to_complex(&self.h_o) * x + to_complex(&self.j_ro))
    }
}

pub(crate) fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

/// `(zI - F)⁻¹ X`
pub(crate) fn resolvent_solve(
    f: &DMatrix<f64>,
    z: Complex64,
    x: &DMatrix<f64>,
) -> Result<DMatrix<Complex64>> {
    let n = f.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, x.ncols()));
    }
    let m = DMatrix::<Complex64>::identity(n, n) * z - to_complex(f);
    m.lu()
        .solve(&to_complex(x))
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(format!("z = {z} is an eigenvalue of the state matrix")))
}

/// Builds the block-diagonal observer-form realization of all nodes and
/// closes the loop `u = Υ y + Ω r`.
pub fn assemble_closed_loop(model: &NetworkModel) -> Result<ClosedLoopSS> {
    let topo = model.topology();
    let mm = topo.nodes();
    let n: usize = model.orders().iter().sum();
    let mut f = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, mm);
    let mut c = DMatrix::zeros(n, mm);
    let mut h = DMatrix::zeros(mm, n);
    let mut off = 0;
    for (i, node) in model.nodes().iter().enumerate() {
        let ni = node.order();
        for k in 0..ni {
            f[(off + k, off)] = -node.a()[k];
            if k + 1 < ni {
                f[(off + k, off + k + 1)] = 1.0;
            }
            b[(off + k, i)] = node.b()[k];
            c[(off + k, i)] = node.c()[k] - node.a()[k];
        }
        h[(i, off)] = 1.0;
        off += ni;
    }

    // The node realizations are strictly proper, so the direct coupling of the
    // algebraic loop is D = 0 and det(I - D Υ) = 1. Kept as an explicit check.
    let d = DMatrix::<f64>::zeros(mm, mm);
    let det = (DMatrix::identity(mm, mm) - &d * topo.upsilon()).determinant();
    if det.abs() < WELL_POSED_TOL {
        return Err(Error::Singular("interconnection is not well-posed".into()));
    }

    let ups = topo.upsilon();
    let om = topo.omega();
    let t_o = topo.selection_matrix();
    let mut stack_h = DMatrix::zeros(2 * mm, mm);
    stack_h.view_mut((0, 0), (mm, mm)).fill_with_identity();
    stack_h.view_mut((mm, 0), (mm, mm)).copy_from(ups);
    let mut stack_r = DMatrix::zeros(2 * mm, om.ncols());
    stack_r.view_mut((mm, 0), (mm, om.ncols())).copy_from(om);

    let f_c = &f + &b * ups * &h;
    let g_r = &b * om;
    let g_e = &c + &b * ups;
    let j_eo = &t_o * &stack_h;
    let h_o = &j_eo * &h;
    let j_ro = &t_o * &stack_r;
    Ok(ClosedLoopSS {
        f_c,
        g_r,
        g_e,
        h_o,
        j_ro,
        j_eo,
        sigma_e: model.sigma_e(),
        f,
        b,
        c,
        h,
    })
}

/// Returns `(G_c(z), G(z))` with `G_c = J_eo (I - G Υ)⁻¹ G Ω + J_ro` and
/// `G = diag(B^i/A^i)`.
pub fn eval_closed_loop_transfer(
    ss: &ClosedLoopSS,
    model: &NetworkModel,
    z: Complex64,
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    let mm = model.topology().nodes();
    let mut g = DMatrix::<Complex64>::zeros(mm, mm);
    for (i, node) in model.nodes().iter().enumerate() {
        let den = crate::poly::eval(&node.a_poly(), z);
        if den.norm() < DEGENERATE_TOL {
            return Err(Error::Singular(format!("z = {z} is a pole of node {}", i + 1)));
        }
        g[(i, i)] = crate::poly::eval(&node.b_poly(), z) / den;
    }
    let ups = to_complex(model.topology().upsilon());
    let lhs = DMatrix::<Complex64>::identity(mm, mm) - &g * &ups;
    let rhs = &g * to_complex(model.topology().omega());
    let x = lhs
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(format!("I - G Υ is singular at z = {z}")))?;
    let gc = to_complex(&ss.j_eo) * x + to_complex(&ss.j_ro);
    Ok((gc, g))
}

/// Recovers the three modules of the example network observed at `u³` from
/// samples of its 1 × 3 closed-loop transfer function.
pub fn recover_modules_three_node(samples: &[(Complex64, [Complex64; 3])]) -> Result<Vec<[Complex64; 3]>> {
    samples
        .iter()
        .map(|&(z, gc)| {
            if gc[2].norm() < DEGENERATE_TOL || gc[0].norm() < DEGENERATE_TOL {
                return Err(Error::DegenerateSample(format!(
                    "closed-loop transfer vanishes at z = {z}"
                )));
            }
            Ok([gc[0] / gc[2], gc[1] / gc[0], (gc[2] - 1.0) / gc[0]])
        })
        .collect()
}

/// Keeps the lowest-index maximal subset of observations whose `J_eo` rows are
/// linearly independent. The discarded observations are deterministic affine
/// functions of `r` and the kept ones, since `H_o = J_eo H`.
pub fn reduce_observations(ss: &ClosedLoopSS) -> (ClosedLoopSS, Vec<usize>) {
    let kept = greedy_independent_rows(&ss.j_eo, ROW_RANK_TOL);
    let out = ClosedLoopSS {
        h_o: ss.h_o.select_rows(&kept),
        j_ro: ss.j_ro.select_rows(&kept),
        j_eo: ss.j_eo.select_rows(&kept),
        ..ss.clone()
    };
    (out, kept)
}
