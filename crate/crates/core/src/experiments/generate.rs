//! Random stable networks and ±1 reference sequences.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::closed_loop::assemble_closed_loop;
use crate::error::{Error, Result};
use crate::linalg::spectral_radius;
use crate::model::{validate_model, ArmaxNode, ModelClass, NetworkModel, Topology};
use crate::poly;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    /// Order of every node; the length must match the topology.
    pub orders: Vec<usize>,
    pub pole_radius: f64,
    /// Largest admissible root modulus of a gain-normalized noise polynomial.
    pub noise_root_radius: f64,
    pub closed_loop_radius: f64,
    pub lambda_bar: f64,
    pub class: ModelClass,
    pub max_attempts: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            orders: vec![2, 2, 2],
            pole_radius: 0.9,
            noise_root_radius: 0.95,
            closed_loop_radius: 0.9,
            lambda_bar: 0.1,
            class: ModelClass::Armax,
            max_attempts: 100_000,
        }
    }
}

/// Point uniformly distributed in the disk of the given radius.
fn disk_point(rng: &mut impl Rng, radius: f64) -> Complex64 {
    let r = radius * rng.random::<f64>().sqrt();
    Complex64::from_polar(r, 2.0 * std::f64::consts::PI * rng.random::<f64>())
}

/// `count` roots closed under conjugation: conjugate pairs plus one real root
/// for odd counts.
fn conjugate_roots(rng: &mut impl Rng, count: usize, radius: f64) -> Vec<Complex64> {
    let mut roots = Vec::with_capacity(count);
    for _ in 0..count / 2 {
        let z = disk_point(rng, radius);
        roots.push(z);
        roots.push(z.conj());
    }
    if count % 2 == 1 {
        roots.push(Complex64::new(radius * (2.0 * rng.random::<f64>() - 1.0), 0.0));
    }
    roots
}

/// Real coefficients, leading first, of `Π (z - root)`.
fn from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &z in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &v) in c.iter().enumerate() {
            next[i] += v;
            next[i + 1] -= v * z;
        }
        c = next;
    }
    c.iter().map(|v| v.re).collect()
}

fn random_node(rng: &mut impl Rng, n: usize, spec: &GeneratorSpec) -> Option<ArmaxNode> {
    let a_poly = from_roots(&conjugate_roots(rng, n, spec.pole_radius));
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let b: Vec<f64> = from_roots(&conjugate_roots(rng, n - 1, 1.0))
        .iter()
        .map(|v| sign * v)
        .collect();
    if !poly::common_roots(&a_poly, &b, 1e-6).coprime {
        return None;
    }
    let a = a_poly[1..].to_vec();
    let lambda = spec.lambda_bar * rng.random_range(0.1..=1.0);
    match spec.class {
        ModelClass::OutputError => ArmaxNode::output_error(a, b, lambda).ok(),
        ModelClass::Armax => {
            let mut c_poly = from_roots(&conjugate_roots(rng, n, spec.pole_radius));
            // unit static gain of C/A through the constant coefficient
            let a1: f64 = a_poly.iter().sum();
            let c1: f64 = c_poly.iter().sum();
            if a1.abs() < 1e-8 {
                return None;
            }
            c_poly[n] += a1 - c1;
            if poly::max_root_modulus(&c_poly) > spec.noise_root_radius {
                return None;
            }
            ArmaxNode::new(a, b, c_poly[1..].to_vec(), lambda).ok()
        }
    }
}

/// Rejection-samples a network on `topology` whose closed loop has spectral
/// radius at most `spec.closed_loop_radius`.
pub fn generate_random_network(seed: u64, spec: &GeneratorSpec, topology: &Topology) -> Result<NetworkModel> {
    if spec.orders.len() != topology.nodes() || spec.orders.contains(&0) {
        return Err(Error::Generation(format!(
            "{} node orders given for a topology with {} nodes",
            spec.orders.len(),
            topology.nodes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..spec.max_attempts {
        let mut nodes = Vec::with_capacity(spec.orders.len());
        for &n in &spec.orders {
            let node = loop {
                if let Some(node) = random_node(&mut rng, n, spec) {
                    break node;
                }
            };
            nodes.push(node);
        }
        let model = NetworkModel::new(nodes, topology.clone())?;
        let ss = assemble_closed_loop(&model)?;
        if spectral_radius(&ss.f_c) <= spec.closed_loop_radius && validate_model(&model)?.pass {
            return Ok(model);
        }
    }
    Err(Error::Generation(format!(
        "no admissible model after {} attempts",
        spec.max_attempts
    )))
}

/// Independent ±1 entries with equal probability, m × N.
pub fn generate_reference(seed: u64, n: usize, m: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = DMatrix::zeros(m, n);
    for k in 0..n {
        for i in 0..m {
            r[(i, k)] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    r
}

/// Deterministic 64-bit mix of a master seed and a cell index.
pub fn derive_seed(master: u64, cell: u64) -> u64 {
    let mut z = master ^ cell.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Signal;

    #[test]
    fn deterministic_and_admissible() {
        let topo = Topology::three_node(&[Signal::u(2)]).unwrap();
        let spec = GeneratorSpec::default();
        for seed in 0..20 {
            let m = generate_random_network(seed, &spec, &topo).unwrap();
            assert_eq!(m, generate_random_network(seed, &spec, &topo).unwrap());
            assert!(validate_model(&m).unwrap().pass);
            let ss = assemble_closed_loop(&m).unwrap();
            assert!(spectral_radius(&ss.f_c) <= 0.9);
            for node in m.nodes() {
                assert!(poly::max_root_modulus(&node.a_poly()) <= 0.9 + 1e-9);
                assert!((node.b()[0].abs() - 1.0).abs() < 1e-12);
                let h1 = poly::eval_real(&node.c_poly(), 1.0) / poly::eval_real(&node.a_poly(), 1.0);
                assert!((h1 - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lambda_mean() {
        let spec = GeneratorSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| random_node_retry(&mut rng, &spec).lambda())
            .sum::<f64>()
            / n as f64;
        assert!((mean / (0.55 * spec.lambda_bar) - 1.0).abs() < 0.03);
    }

    fn random_node_retry(rng: &mut ChaCha8Rng, spec: &GeneratorSpec) -> ArmaxNode {
        loop {
            if let Some(n) = random_node(rng, 2, spec) {
                return n;
            }
        }
    }

    #[test]
    fn reference_moments() {
        let r = generate_reference(5, 100_000, 1);
        let n = r.ncols() as f64;
        assert!(r.iter().all(|&v| v == 1.0 || v == -1.0));
        assert!((r.sum() / n).abs() < 0.02);
        for lag in 1..=10 {
            let ac: f64 = (lag..r.ncols()).map(|k| r[(0, k)] * r[(0, k - lag)]).sum::<f64>() / n;
            assert!(ac.abs() < 0.02, "lag {lag}: {ac}");
        }
        assert_eq!(generate_reference(5, 50, 3), generate_reference(5, 50, 3));
    }

    #[test]
    fn order_mismatch_is_generation_error() {
        let topo = Topology::three_node(&[Signal::u(2)]).unwrap();
        let spec = GeneratorSpec {
            orders: vec![2, 2],
            ..Default::default()
        };
        assert!(matches!(generate_random_network(0, &spec, &topo), Err(Error::Generation(_))));
    }

    #[test]
    fn seeds_differ_per_cell() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|c| derive_seed(42, c)).collect();
        assert_eq!(s.len(), 1000);
    }
}

/// Random admissible network with up to `max_nodes` nodes of order up to
/// `max_order`, a random interconnection without self-loops and a random
/// observation set whose noise map has full row rank.
pub fn random_network(seed: u64, max_nodes: usize, max_order: usize) -> Result<NetworkModel> {
    use crate::closed_loop::reduce_observations;
    if max_nodes == 0 || max_order == 0 {
        return Err(Error::Generation("empty network requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10_000 {
        let mm = rng.random_range(1..=max_nodes);
        let ups = DMatrix::from_fn(mm, mm, |i, j| {
            if i != j && rng.random::<f64>() < 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let mut observed: Vec<usize> = (0..2 * mm).filter(|_| rng.random::<f64>() < 0.4).collect();
        if observed.is_empty() {
            observed.push(rng.random_range(0..2 * mm));
        }
        let topo = Topology::new(ups, DMatrix::identity(mm, mm), observed)?;
        let spec = GeneratorSpec {
            orders: (0..mm).map(|_| rng.random_range(1..=max_order)).collect(),
            max_attempts: 200,
            ..Default::default()
        };
        let Ok(m) = generate_random_network(rng.random(), &spec, &topo) else {
            continue;
        };
        let ss = assemble_closed_loop(&m)?;
        if reduce_observations(&ss).1.len() == topo.observations() {
            return Ok(m);
        }
    }
    Err(Error::Generation("no admissible random network found".into()))
}
