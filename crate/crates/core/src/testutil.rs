use crate::model::{ArmaxNode, NetworkModel, Signal, Topology};

/// A fixed stable second-order instance of the three-node example network.
pub(crate) fn three_node_model(observed: &[Signal], oe: bool) -> NetworkModel {
    let mk = |a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, l: f64| {
        if oe {
            ArmaxNode::output_error(a, b, l).unwrap()
        } else {
            ArmaxNode::new(a, b, c, l).unwrap()
        }
    };
    let nodes = vec![
        mk(vec![-0.6, 0.2], vec![0.5, 0.1], vec![0.1, -0.2], 0.05),
        mk(vec![0.4, 0.1], vec![-1.0, 0.5], vec![-0.3, 0.05], 0.08),
        mk(vec![-0.2, -0.3], vec![0.2, 0.05], vec![0.2, 0.1], 0.02),
    ];
    let m = NetworkModel::new(nodes, Topology::three_node(observed).unwrap()).unwrap();
    assert!(m.in_theta(0.05));
    m
}

/// Random admissible network with 1 to 3 nodes.
pub(crate) fn random_model(seed: u64) -> NetworkModel {
    crate::experiments::generate::random_network(seed, 3, 3).unwrap()
}
