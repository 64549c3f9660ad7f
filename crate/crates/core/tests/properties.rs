//! Property checks against naive reimplementations.

mod common;

use std::collections::BTreeSet;

use circuitscope::circuits::{search_min_n, SearchParams};
use circuitscope::cluster::{cluster_rows, euclidean, Linkage};
use circuitscope::compare::{iou, recall};
use circuitscope::stats::{hypergeom, TailMode};
use circuitscope::{prune, ChannelMode, Circuit, ComputationalGraph, EdgeId, Granularity, Member, NodeId, Provenance};
use proptest::prelude::*;

fn graph(layers: usize, heads: usize, split: bool) -> ComputationalGraph {
    let mode = if split { ChannelMode::Split } else { ChannelMode::Unified };
    ComputationalGraph::with_shape(layers, heads, 8, mode)
}

fn circuit_from_mask(g: &ComputationalGraph, mask: &[bool]) -> Circuit {
    let members = g.edges().iter().zip(mask.iter().cycle()).filter(|(_, &k)| k).map(|(&e, _)| (Member::Edge(e), 1.0));
    Circuit::from_members(Granularity::Edge, members, Provenance::new("p", "mask")).unwrap()
}

/// Drops edges with a dangling end until nothing changes.
fn naive_prune(edges: &BTreeSet<EdgeId>) -> BTreeSet<EdgeId> {
    let mut kept = edges.clone();
    loop {
        let next: BTreeSet<EdgeId> = kept
            .iter()
            .filter(|e| {
                let fed = e.src == NodeId::Input || kept.iter().any(|f| f.dst == e.src);
                let read = e.dst == NodeId::Logits || kept.iter().any(|f| f.src == e.dst);
                fed && read
            })
            .copied()
            .collect();
        if next.len() == kept.len() {
            return kept;
        }
        kept = next;
    }
}

fn edge_set(c: &Circuit) -> BTreeSet<EdgeId> {
    c.members
        .keys()
        .map(|m| match m {
            Member::Edge(e) => *e,
            _ => unreachable!(),
        })
        .collect()
}

/// Linkage distance straight from the cluster members.
fn naive_linkage(rows: &[Vec<f64>], a: &[usize], b: &[usize], linkage: Linkage) -> f64 {
    match linkage {
        Linkage::Average => {
            let s: f64 = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).map(|(i, j)| euclidean(&rows[i], &rows[j])).sum();
            s / (a.len() * b.len()) as f64
        }
        Linkage::Complete => a
            .iter()
            .flat_map(|&i| b.iter().map(move |&j| (i, j)))
            .map(|(i, j)| euclidean(&rows[i], &rows[j]))
            .fold(0.0, f64::max),
        Linkage::Ward => {
            let centroid = |c: &[usize]| -> Vec<f64> {
                (0..rows[0].len()).map(|d| c.iter().map(|&i| rows[i][d]).sum::<f64>() / c.len() as f64).collect()
            };
            let (na, nb) = (a.len() as f64, b.len() as f64);
            (2.0 * na * nb / (na + nb)).sqrt() * euclidean(&centroid(a), &centroid(b))
        }
    }
}

/// Cubic agglomeration: every step rescans all active pairs.
fn naive_cluster(rows: &[Vec<f64>], linkage: Linkage) -> Vec<(BTreeSet<usize>, f64)> {
    let mut active: Vec<Vec<usize>> = (0..rows.len()).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    while active.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                let d = naive_linkage(rows, &active[i], &active[j], linkage);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (d, i, j) = best;
        let b = active.remove(j);
        let mut a = active.remove(i);
        a.extend(b);
        out.push((a.iter().copied().collect(), d));
        active.push(a);
    }
    out
}

fn merged_sets(k: usize, merges: &[circuitscope::cluster::Merge]) -> Vec<(BTreeSet<usize>, f64)> {
    let mut members: Vec<BTreeSet<usize>> = (0..k).map(|i| BTreeSet::from([i])).collect();
    merges
        .iter()
        .map(|m| {
            let s: BTreeSet<usize> = members[m.a].union(&members[m.b]).copied().collect();
            members.push(s.clone());
            (s, m.distance)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prune_matches_fixpoint(layers in 0usize..3, heads in 1usize..3, split: bool, mask in prop::collection::vec(prop::bool::weighted(0.3), 1..64)) {
        let g = graph(layers, heads, split);
        let c = circuit_from_mask(&g, &mask);
        let p = prune(&c).unwrap();
        prop_assert_eq!(edge_set(&p), naive_prune(&edge_set(&c)));
        prop_assert_eq!(prune(&p).unwrap(), p.clone());
        prop_assert!(edge_set(&p).is_subset(&edge_set(&c)));
    }

    #[test]
    fn overlap_metrics_are_bounded(a in prop::collection::vec(any::<bool>(), 1..40), b in prop::collection::vec(any::<bool>(), 1..40)) {
        let g = graph(1, 2, true);
        let (ca, cb) = (circuit_from_mask(&g, &a), circuit_from_mask(&g, &b));
        let x = iou(&ca, &cb).unwrap();
        prop_assert_eq!(x, iou(&cb, &ca).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(&ca, &ca).unwrap(), 1.0);
        if cb.is_empty() {
            prop_assert!(recall(&ca, &cb).is_err());
        } else {
            let r = recall(&ca, &cb).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(x <= r + 1e-15);
            if !ca.is_empty() {
                let back = recall(&cb, &ca).unwrap();
                prop_assert!((r * cb.len() as f64 - back * ca.len() as f64).abs() < 1e-9);
            }
        }
        let sa = edge_set(&ca);
        let sb = edge_set(&cb);
        let union = sa.union(&sb).count();
        let expect = if union == 0 { 1.0 } else { sa.intersection(&sb).count() as f64 / union as f64 };
        prop_assert_eq!(x, expect);
    }

    #[test]
    fn circuit_json_round_trip(layers in 0usize..3, mask in prop::collection::vec(any::<bool>(), 1..30), scores in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        let g = graph(layers, 2, true);
        let members = g
            .edges()
            .iter()
            .zip(mask.iter().cycle())
            .zip(scores.iter().cycle())
            .filter(|((_, &k), _)| k)
            .map(|((&e, _), &s)| (Member::Edge(e), s));
        let c = Circuit::from_members(Granularity::Edge, members, Provenance::new("t", "eap")).unwrap();
        prop_assert_eq!(Circuit::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn hypergeom_is_a_distribution(population in 1u64..400, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let n1 = (a * population as f64) as u64;
        let n2 = (b * population as f64) as u64;
        let top = n1.min(n2);
        let points: Vec<f64> = (0..=top).map(|k| hypergeom(population, n1, n2, k, TailMode::Point).unwrap()).collect();
        prop_assert!((points.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((hypergeom(population, n1, n2, 0, TailMode::Tail).unwrap() - 1.0).abs() < 1e-9);
        for k in 0..=top {
            let tail = hypergeom(population, n1, n2, k, TailMode::Tail).unwrap();
            let sum: f64 = points[k as usize..].iter().sum();
            prop_assert!((tail - sum).abs() < 1e-9, "k {} tail {} sum {}", k, tail, sum);
        }
    }

    #[test]
    fn cluster_matches_cubic_reference(rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..9)) {
        for linkage in [Linkage::Average, Linkage::Complete, Linkage::Ward] {
            let labels = (0..rows.len()).map(|i| i.to_string()).collect();
            let d = cluster_rows(labels, &rows, linkage).unwrap();
            let got = merged_sets(rows.len(), &d.merges);
            let want = naive_cluster(&rows, linkage);
            for ((gs, gd), (ws, wd)) in got.iter().zip(&want) {
                prop_assert_eq!(gs, ws, "{:?}", linkage);
                prop_assert!((gd - wd).abs() < 1e-9, "{:?}: {} vs {}", linkage, gd, wd);
            }
        }
    }

    #[test]
    fn search_finds_global_minimum(profile in prop::collection::vec(0.0f64..1.0, 1..80), tau in 0.05f64..1.0, factor in 2usize..4) {
        let mut profile = profile;
        let total = profile.len() - 1;
        profile[total] = 1.0;
        let params = SearchParams { threshold: tau, coarse_factor: factor };
        let out = search_min_n(total, &params, |n| Ok(profile[n])).unwrap();
        let want = profile.iter().position(|&f| f >= tau).unwrap();
        prop_assert_eq!(out.n, want);
        prop_assert_eq!(out.f, profile[want]);
    }
}
