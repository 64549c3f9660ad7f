//! Shared-edge profile recomputed by hand.

mod common;

use std::collections::BTreeSet;

use circuitscope::compare::TaskLabel;
use circuitscope::stats::intersect_and_profile;
use circuitscope::{ChannelMode, ComputationalGraph, EdgeId, Family, Granularity, Member};

fn edges(c: &circuitscope::Circuit) -> BTreeSet<EdgeId> {
    c.members
        .keys()
        .filter_map(|m| match m {
            Member::Edge(e) => Some(*e),
            _ => None,
        })
        .collect()
}

fn jaccard(a: &BTreeSet<EdgeId>, b: &BTreeSet<EdgeId>) -> f64 {
    let u = a.union(b).count();
    if u == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / u as f64
    }
}

#[test]
fn exclusion_iou_is_recomputed_from_scratch() {
    let g = ComputationalGraph::with_shape(3, 2, 8, ChannelMode::Split);
    let mut r = common::rng(5);
    for trial in 0..20 {
        let k = 2 + trial % 4;
        let circuits: Vec<_> = (0..k).map(|_| common::random_edge_circuit(&g, 0.5, &mut r)).collect();
        let tasks: Vec<_> = (0..k).map(|i| TaskLabel::new(format!("t{i}"), Family::Formal)).collect();
        let report = intersect_and_profile(&tasks, &circuits, &g).unwrap();

        let sets: Vec<_> = circuits.iter().map(edges).collect();
        let common_edges = sets[1..].iter().fold(sets[0].clone(), |acc, s| acc.intersection(s).copied().collect());
        assert_eq!(report.intersection.iter().copied().collect::<BTreeSet<_>>(), common_edges);
        let reduced: Vec<BTreeSet<EdgeId>> = sets.iter().map(|s| s.difference(&common_edges).copied().collect()).collect();

        for i in 0..k {
            assert_eq!(report.sizes[i].before, sets[i].len());
            assert_eq!(report.sizes[i].after, sets[i].len() - common_edges.len());
            for j in 0..k {
                if i != j {
                    assert_eq!(report.iou_before[i][j], jaccard(&sets[i], &sets[j]));
                    assert_eq!(report.iou_after[i][j], jaccard(&reduced[i], &reduced[j]));
                }
            }
        }
        let by_type: usize = report.edge_types.iter().flatten().sum();
        assert_eq!(by_type, common_edges.len());
        assert_eq!(report.source_layers.counts.iter().sum::<usize>(), common_edges.len());
        assert_eq!(report.target_layers.counts.len(), 4);
    }
}

#[test]
fn node_circuits_are_rejected() {
    let g = ComputationalGraph::with_shape(1, 1, 8, ChannelMode::Split);
    let prov = circuitscope::Provenance::new("t", "eap");
    let c = circuitscope::Circuit::full(&g, Granularity::Node, prov);
    let tasks = vec![TaskLabel::new("a", Family::Formal), TaskLabel::new("b", Family::Formal)];
    assert!(intersect_and_profile(&tasks, &[c.clone(), c], &g).is_err());
}
