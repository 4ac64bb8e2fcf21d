//! ARMAX nodes, network topology, parameter packing and model validation.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::closed_loop::assemble_closed_loop;
use crate::error::{Error, Result};
use crate::linalg::spectral_radius;
use crate::poly;

/// Relative tolerance of the root-clustering coprimeness test.
pub const COPRIME_TOL: f64 = 1e-8;
/// Margin used to make the open stability set decidable.
pub const THETA_MARGIN: f64 = 1e-6;
/// Band around the unit circle in which a noise-polynomial root violates A3.
pub const UNIT_CIRCLE_BAND: f64 = 1e-6;

/// Noise structure of a node: general ARMAX or output error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    #[default]
    Armax,
    /// `c = a`, so the noise enters at the output unfiltered.
    OutputError,
}

/// A single-input single-output ARMAX system
/// `A(q) y = B(q) u + C(q) e` with `var(e) = lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmaxNode {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    lambda: f64,
}

impl ArmaxNode {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, lambda: f64) -> Result<Self> {
        let n = a.len();
        if n == 0 {
            return Err(Error::Dimension("node order must be positive".into()));
        }
        if b.len() != n || c.len() != n {
            return Err(Error::Dimension(format!(
                "coefficient lengths a={}, b={}, c={} differ",
                n,
                b.len(),
                c.len()
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Input(format!("noise variance must be positive, got {lambda}")));
        }
        if a.iter().chain(&b).chain(&c).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite coefficient".into()));
        }
        Ok(Self { a, b, c, lambda })
    }

    /// Output-error node (`c = a`).
    pub fn output_error(a: Vec<f64>, b: Vec<f64>, lambda: f64) -> Result<Self> {
        let c = a.clone();
        Self::new(a, b, c, lambda)
    }

    pub fn order(&self) -> usize {
        self.a.len()
    }
    pub fn a(&self) -> &[f64] {
        &self.a
    }
    pub fn b(&self) -> &[f64] {
        &self.b
    }
    pub fn c(&self) -> &[f64] {
        &self.c
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `A(z) = z^n + a_1 z^{n-1} + … + a_n`
    pub fn a_poly(&self) -> Vec<f64> {
        poly::monic(&self.a)
    }
    /// `B(z) = b_1 z^{n-1} + … + b_n`
    pub fn b_poly(&self) -> Vec<f64> {
        self.b.clone()
    }
    /// `C(z) = z^n + c_1 z^{n-1} + … + c_n`
    pub fn c_poly(&self) -> Vec<f64> {
        poly::monic(&self.c)
    }

    /// `G(z) = B(z)/A(z)`
    pub fn g(&self, z: num_complex::Complex64) -> num_complex::Complex64 {
        poly::eval(&self.b_poly(), z) / poly::eval(&self.a_poly(), z)
    }

    /// `H(z) = C(z)/A(z)`
    pub fn h(&self, z: num_complex::Complex64) -> num_complex::Complex64 {
        poly::eval(&self.c_poly(), z) / poly::eval(&self.a_poly(), z)
    }
}

/// Whether a network signal is a node output `y` or a node input `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignalKind {
    Output,
    Input,
}

/// One scalar signal of the stacked `(y, u)` vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signal {
    pub kind: SignalKind,
    /// zero-based node index
    pub node: usize,
}

impl Signal {
    pub fn y(node: usize) -> Self {
        Self { kind: SignalKind::Output, node }
    }
    pub fn u(node: usize) -> Self {
        Self { kind: SignalKind::Input, node }
    }

    /// Row index into the stacked `(y, u)` vector of a network with `m` nodes.
    pub fn index(&self, m: usize) -> usize {
        match self.kind {
            SignalKind::Output => self.node,
            SignalKind::Input => m + self.node,
        }
    }

    pub fn from_index(index: usize, m: usize) -> Self {
        if index < m {
            Self::y(index)
        } else {
            Self::u(index - m)
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            SignalKind::Output => 'y',
            SignalKind::Input => 'u',
        };
        write!(f, "{}{}", k, self.node + 1)
    }
}

impl Serialize for Signal {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Signal {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for Signal {
    type Err = Error;

    /// Parses one-based labels such as `y1` or `u3`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Input(format!("invalid signal label '{s}'"));
        let mut chars = s.chars();
        let kind = match chars.next() {
            Some('y') | Some('Y') => SignalKind::Output,
            Some('u') | Some('U') => SignalKind::Input,
            _ => return Err(bad()),
        };
        let idx: usize = chars.as_str().parse().map_err(|_| bad())?;
        if idx == 0 {
            return Err(bad());
        }
        Ok(Self { kind, node: idx - 1 })
    }
}

/// Interconnection `u = Υ y + Ω r` plus the observation selection `x_o = T_o (y, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    upsilon: DMatrix<f64>,
    omega: DMatrix<f64>,
    observed: Vec<usize>,
}

fn is_zero_one(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&v| v == 0.0 || v == 1.0)
}

impl Topology {
    /// `observed` lists row indices into the stacked `(y, u)` vector.
    pub fn new(upsilon: DMatrix<f64>, omega: DMatrix<f64>, observed: Vec<usize>) -> Result<Self> {
        let m = upsilon.nrows();
        if m == 0 || upsilon.ncols() != m {
            return Err(Error::Dimension("Υ must be a non-empty square matrix".into()));
        }
        if omega.nrows() != m {
            return Err(Error::Dimension(format!(
                "Ω has {} rows, expected {}",
                omega.nrows(),
                m
            )));
        }
        if !is_zero_one(&upsilon) || !is_zero_one(&omega) {
            return Err(Error::Input("Υ and Ω must be zero-one matrices".into()));
        }
        if observed.is_empty() {
            return Err(Error::Input("at least one signal must be observed".into()));
        }
        let mut seen = vec![false; 2 * m];
        for &i in &observed {
            if i >= 2 * m {
                return Err(Error::Dimension(format!(
                    "observed index {i} outside the stacked (y, u) vector of length {}",
                    2 * m
                )));
            }
            if seen[i] {
                return Err(Error::Input(format!("signal index {i} observed twice")));
            }
            seen[i] = true;
        }
        Ok(Self {
            upsilon,
            omega,
            observed,
        })
    }

    /// The three-node example network: `u¹ = y² + y³ + r¹`, `u² = r²`, `u³ = y¹ + r³`.
    pub fn three_node(observed: &[Signal]) -> Result<Self> {
        let upsilon = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        );
        let omega = DMatrix::identity(3, 3);
        Self::new(upsilon, omega, observed.iter().map(|s| s.index(3)).collect())
    }

    /// Whether this is the three-node example network (any observation set).
    pub fn is_three_node(&self) -> bool {
        let reference = Self::three_node(&[Signal::u(2)]).expect("valid");
        self.upsilon == reference.upsilon && self.omega == reference.omega
    }

    pub fn with_observed(&self, observed: Vec<usize>) -> Result<Self> {
        Self::new(self.upsilon.clone(), self.omega.clone(), observed)
    }

    /// Number of nodes `M`.
    pub fn nodes(&self) -> usize {
        self.upsilon.nrows()
    }
    /// Number of reference signals `m`.
    pub fn references(&self) -> usize {
        self.omega.ncols()
    }
    /// Number of observed signals `p`.
    pub fn observations(&self) -> usize {
        self.observed.len()
    }
    pub fn upsilon(&self) -> &DMatrix<f64> {
        &self.upsilon
    }
    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }
    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn observed_signals(&self) -> Vec<Signal> {
        let m = self.nodes();
        self.observed
            .iter()
            .map(|&i| Signal::from_index(i, m))
            .collect()
    }

    /// `T_o`, a `p × 2M` matrix whose rows are standard basis vectors.
    pub fn selection_matrix(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.observations(), 2 * self.nodes());
        for (row, &i) in self.observed.iter().enumerate() {
            t[(row, i)] = 1.0;
        }
        t
    }
}

/// Layout of the parameter vector `θ = (a, b, c, λ)`, each block concatenated
/// over nodes in node order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    orders: Vec<usize>,
}

impl ParamLayout {
    pub fn new(orders: Vec<usize>) -> Self {
        Self { orders }
    }
    pub fn orders(&self) -> &[usize] {
        &self.orders
    }
    pub fn nodes(&self) -> usize {
        self.orders.len()
    }
    /// `n = Σ n_i`
    pub fn total_order(&self) -> usize {
        self.orders.iter().sum()
    }
    pub fn len(&self) -> usize {
        3 * self.total_order() + self.nodes()
    }
    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }
    fn offset(&self, node: usize) -> usize {
        self.orders[..node].iter().sum()
    }
    pub fn a_range(&self, node: usize) -> std::ops::Range<usize> {
        let o = self.offset(node);
        o..o + self.orders[node]
    }
    pub fn b_range(&self, node: usize) -> std::ops::Range<usize> {
        let r = self.a_range(node);
        let n = self.total_order();
        r.start + n..r.end + n
    }
    pub fn c_range(&self, node: usize) -> std::ops::Range<usize> {
        let r = self.a_range(node);
        let n = 2 * self.total_order();
        r.start + n..r.end + n
    }
    pub fn lambda_index(&self, node: usize) -> usize {
        3 * self.total_order() + node
    }
    /// Indices of the `(a, b)` sub-vector.
    pub fn ab_indices(&self) -> std::ops::Range<usize> {
        0..2 * self.total_order()
    }

    pub fn pack(&self, nodes: &[ArmaxNode]) -> Result<Vec<f64>> {
        if nodes.len() != self.nodes()
            || nodes.iter().zip(&self.orders).any(|(n, &o)| n.order() != o)
        {
            return Err(Error::Dimension("nodes do not match the parameter layout".into()));
        }
        let mut theta = vec![0.0; self.len()];
        for (i, node) in nodes.iter().enumerate() {
            theta[self.a_range(i)].copy_from_slice(node.a());
            theta[self.b_range(i)].copy_from_slice(node.b());
            theta[self.c_range(i)].copy_from_slice(node.c());
            theta[self.lambda_index(i)] = node.lambda();
        }
        Ok(theta)
    }

    pub fn unpack(&self, theta: &[f64]) -> Result<Vec<ArmaxNode>> {
        if theta.len() != self.len() {
            return Err(Error::Dimension(format!(
                "parameter vector has length {}, layout expects {}",
                theta.len(),
                self.len()
            )));
        }
        (0..self.nodes())
            .map(|i| {
                ArmaxNode::new(
                    theta[self.a_range(i)].to_vec(),
                    theta[self.b_range(i)].to_vec(),
                    theta[self.c_range(i)].to_vec(),
                    theta[self.lambda_index(i)],
                )
            })
            .collect()
    }
}

/// A network of ARMAX nodes with a fixed topology; the unit of estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    nodes: Vec<ArmaxNode>,
    topology: Topology,
}

impl NetworkModel {
    pub fn new(nodes: Vec<ArmaxNode>, topology: Topology) -> Result<Self> {
        if nodes.len() != topology.nodes() {
            return Err(Error::Dimension(format!(
                "{} nodes given for a topology with {} nodes",
                nodes.len(),
                topology.nodes()
            )));
        }
        Ok(Self { nodes, topology })
    }

    pub fn from_theta(layout: &ParamLayout, topology: Topology, theta: &[f64]) -> Result<Self> {
        Self::new(layout.unpack(theta)?, topology)
    }

    pub fn nodes(&self) -> &[ArmaxNode] {
        &self.nodes
    }
    pub fn topology(&self) -> &Topology {
        &self.topology
    }
    pub fn orders(&self) -> Vec<usize> {
        self.nodes.iter().map(ArmaxNode::order).collect()
    }
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.orders())
    }
    pub fn theta(&self) -> Vec<f64> {
        self.layout().pack(&self.nodes).expect("layout built from nodes")
    }
    pub fn lambdas(&self) -> Vec<f64> {
        self.nodes.iter().map(ArmaxNode::lambda).collect()
    }
    /// Same nodes, different observation set.
    pub fn with_topology(&self, topology: Topology) -> Result<Self> {
        Self::new(self.nodes.clone(), topology)
    }
    /// `Σ_e = diag(λ_1, …, λ_M)`
    pub fn sigma_e(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.lambdas()))
    }

    /// Whether `θ` lies in the margin-shrunk stability set: closed-loop
    /// spectral radius at most `1 - margin`.
    pub fn in_theta(&self, margin: f64) -> bool {
        match assemble_closed_loop(self) {
            Ok(ss) => spectral_radius(&ss.f_c) <= 1.0 - margin,
            Err(_) => false,
        }
    }
}

/// Per-node part of [`ValidationReport`].
#[derive(Debug, Clone, Serialize)]
pub struct NodeValidation {
    pub coprime: bool,
    /// Common roots of `A` and `B` as `(re, im)` pairs.
    pub common_roots: Vec<(f64, f64)>,
    pub a_root_moduli: Vec<f64>,
    pub c_root_moduli: Vec<f64>,
    /// No root of `C` within the band around the unit circle.
    pub c_off_unit_circle: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub nodes: Vec<NodeValidation>,
    pub closed_loop_spectral_radius: f64,
    pub in_theta: bool,
    pub pass: bool,
}

/// Checks coprimeness of each `(A, B)` pair, the root moduli of each `C`
/// and the closed-loop spectral radius.
pub fn validate_model(model: &NetworkModel) -> Result<ValidationReport> {
    let nodes: Vec<NodeValidation> = model
        .nodes()
        .iter()
        .map(|node| {
            let cr = poly::common_roots(&node.a_poly(), &node.b_poly(), COPRIME_TOL);
            let mut a_mod: Vec<f64> = poly::roots(&node.a_poly()).iter().map(|z| z.norm()).collect();
            let mut c_mod: Vec<f64> = poly::roots(&node.c_poly()).iter().map(|z| z.norm()).collect();
            a_mod.sort_by(f64::total_cmp);
            c_mod.sort_by(f64::total_cmp);
            NodeValidation {
                coprime: cr.coprime,
                common_roots: cr.common.iter().map(|z| (z.re, z.im)).collect(),
                c_off_unit_circle: c_mod.iter().all(|r| (r - 1.0).abs() > UNIT_CIRCLE_BAND),
                a_root_moduli: a_mod,
                c_root_moduli: c_mod,
            }
        })
        .collect();
    let ss = assemble_closed_loop(model)?;
    let rho = spectral_radius(&ss.f_c);
    let in_theta = rho <= 1.0 - THETA_MARGIN;
    let pass = in_theta && nodes.iter().all(|n| n.coprime && n.c_off_unit_circle);
    Ok(ValidationReport {
        nodes,
        closed_loop_spectral_radius: rho,
        in_theta,
        pass,
    })
}

// ---------------------------------------------------------------------------
// JSON representation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub lambda: f64,
}

/// Topology on disk: Υ and Ω as nested integer arrays, `observed` as row
/// indices into the stacked `(y, u)` vector (zero-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub upsilon: Vec<Vec<i64>>,
    pub omega: Vec<Vec<i64>>,
    pub observed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub nodes: Vec<NodeFile>,
    pub topology: TopologyFile,
}

fn nested_to_matrix(rows: &[Vec<i64>], name: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Dimension(format!("{name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j] as f64))
}

fn matrix_to_nested(m: &DMatrix<f64>) -> Vec<Vec<i64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].round() as i64).collect())
        .collect()
}

impl TryFrom<&TopologyFile> for Topology {
    type Error = Error;
    fn try_from(f: &TopologyFile) -> Result<Self> {
        let ups = nested_to_matrix(&f.upsilon, "upsilon")?;
        let om = nested_to_matrix(&f.omega, "omega")?;
        Topology::new(ups, om, f.observed.clone())
    }
}

impl From<&Topology> for TopologyFile {
    fn from(t: &Topology) -> Self {
        Self {
            upsilon: matrix_to_nested(t.upsilon()),
            omega: matrix_to_nested(t.omega()),
            observed: t.observed().to_vec(),
        }
    }
}

impl TryFrom<&ModelFile> for NetworkModel {
    type Error = Error;
    fn try_from(f: &ModelFile) -> Result<Self> {
        let nodes = f
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if let Some(o) = n.order {
                    if n.a.len() != o || n.b.len() != o || n.c.len() != o {
                        return Err(Error::Dimension(format!(
                            "node {} declares order {o} but has coefficient lengths ({}, {}, {})",
                            i + 1,
                            n.a.len(),
                            n.b.len(),
                            n.c.len()
                        )));
                    }
                }
                ArmaxNode::new(n.a.clone(), n.b.clone(), n.c.clone(), n.lambda)
            })
            .collect::<Result<Vec<_>>>()?;
        NetworkModel::new(nodes, Topology::try_from(&f.topology)?)
    }
}

impl From<&NetworkModel> for ModelFile {
    fn from(m: &NetworkModel) -> Self {
        Self {
            nodes: m
                .nodes()
                .iter()
                .map(|n| NodeFile {
                    order: Some(n.order()),
                    a: n.a().to_vec(),
                    b: n.b().to_vec(),
                    c: n.c().to_vec(),
                    lambda: n.lambda(),
                })
                .collect(),
            topology: m.topology().into(),
        }
    }
}

impl NetworkModel {
    pub fn from_json(s: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(s)?;
        NetworkModel::try_from(&f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from(self)).expect("serializable")
    }
}
