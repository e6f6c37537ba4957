use ctxforest_core::graphcut::{max_flow, FlowNetwork};
use proptest::prelude::*;

/// Minimum over all source/sink partitions of the capacity crossing forward.
fn brute_force_min_cut(net: &FlowNetwork) -> f64 {
    let n = net.num_nodes();
    let interior: Vec<usize> = (0..n).filter(|&v| v != net.source() && v != net.sink()).collect();
    let mut best = f64::INFINITY;
    for bits in 0u32..(1 << interior.len()) {
        let mut side = vec![false; n];
        side[net.source()] = true;
        for (k, &v) in interior.iter().enumerate() {
            side[v] = bits >> k & 1 == 1;
        }
        let cut: f64 = net
            .arcs()
            .iter()
            .filter(|a| side[a.from] && !side[a.to])
            .map(|a| a.capacity)
            .sum();
        best = best.min(cut);
    }
    best
}

fn network() -> impl Strategy<Value = FlowNetwork> {
    (2usize..=10).prop_flat_map(|n| {
        proptest::collection::vec((0..n, 0..n, 0u32..20), 0..(4 * n)).prop_map(move |arcs| {
            let mut net = FlowNetwork::new(n, 0, n - 1).unwrap();
            for (a, b, c) in arcs {
                if a != b {
                    net.add_arc(a, b, f64::from(c)).unwrap();
                }
            }
            net
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn flow_equals_exhaustive_min_cut(net in network()) {
        let cut = max_flow(&net);
        let oracle = brute_force_min_cut(&net);
        prop_assert_eq!(cut.flow, oracle);
        prop_assert_eq!(net.cut_value(&cut.source_side), oracle);
        prop_assert!(cut.source_side[net.source()] && !cut.source_side[net.sink()]);
    }
}

#[test]
fn grid_with_fractional_capacities() {
    // 4x4 grid, source feeds the left column, right column drains to the sink.
    let id = |x: usize, y: usize| y * 4 + x;
    let mut net = FlowNetwork::new(18, 16, 17).unwrap();
    for y in 0..4 {
        net.add_arc(16, id(0, y), 0.75).unwrap();
        net.add_arc(id(3, y), 17, 1.25).unwrap();
        for x in 0..4 {
            if x + 1 < 4 {
                net.add_arc(id(x, y), id(x + 1, y), 0.5).unwrap();
                net.add_arc(id(x + 1, y), id(x, y), 0.5).unwrap();
            }
            if y + 1 < 4 {
                net.add_arc(id(x, y), id(x, y + 1), 0.1).unwrap();
                net.add_arc(id(x, y + 1), id(x, y), 0.1).unwrap();
            }
        }
    }
    let cut = max_flow(&net);
    assert!((cut.flow - 2.0).abs() < 1e-12);
    assert!((net.cut_value(&cut.source_side) - cut.flow).abs() < 1e-12);
}
