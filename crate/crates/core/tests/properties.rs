use std::collections::{BTreeMap, BTreeSet};

use omtl_core::datastore::Record;
use omtl_core::metrics::{auc_roc, average_precision, delong_test, ScoredSet};
use omtl_core::model::{Mode, ModelSpec, OmtlModel, Variant};
use omtl_core::ontology::{compute_levels, ConceptNode, Edge, OntologyGraph};
use omtl_core::tensor::{softmax_rows, DenseTensor};
use proptest::prelude::*;

/// Upper-triangular adjacency: bit (i, j) with i < j means edge i → j.
fn dag_strategy(max_nodes: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2..=max_nodes).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| (0..j).map(move |i| (i, j))).collect();
        proptest::collection::vec(any::<bool>(), pairs.len()).prop_map(move |bits| {
            let edges = pairs.iter().zip(bits).filter(|(_, b)| *b).map(|(&p, _)| p).collect();
            (n, edges)
        })
    })
}

fn name(i: usize) -> String {
    // names deliberately unsorted relative to index
    format!("k{}", (i * 7) % 11)
}

fn build(n: usize, edges: &[(usize, usize)]) -> OntologyGraph {
    let nodes = (0..n)
        .map(|i| ConceptNode {
            id: name(i),
            concept_code: format!("C{i}"),
            is_core: i % 2 == 1,
            outcomes: if i % 2 == 1 { vec!["y".into()] } else { vec![] },
        })
        .collect();
    let edges = edges.iter().map(|&(p, c)| Edge { parent: name(p), child: name(c) }).collect();
    OntologyGraph::new(nodes, edges).unwrap()
}

// longest path into `v`, by enumerating every path
fn brute_level(v: usize, edges: &[(usize, usize)]) -> usize {
    edges
        .iter()
        .filter(|e| e.1 == v)
        .map(|e| 1 + brute_level(e.0, edges))
        .max()
        .unwrap_or(0)
}

fn brute_closure(seeds: &BTreeSet<usize>, edges: &[(usize, usize)]) -> BTreeSet<usize> {
    let mut set = seeds.clone();
    loop {
        let before = set.len();
        for &(p, c) in edges {
            if set.contains(&c) {
                set.insert(p);
            }
        }
        if set.len() == before {
            return set;
        }
    }
}

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn sweep_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let total = labels.iter().filter(|&&y| y == 1).count() as f64;
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let sel: Vec<u8> = scores.iter().zip(labels).filter(|(s, _)| **s >= t).map(|(_, &y)| y).collect();
        let tp = sel.iter().filter(|&&y| y == 1).count() as f64;
        let recall = tp / total;
        ap += (recall - prev_recall) * (tp / sel.len() as f64);
        prev_recall = recall;
    }
    ap
}

fn scored_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            proptest::collection::vec((0u8..12).prop_map(|k| f64::from(k) / 12.0 + 0.01), n),
            proptest::collection::vec(0u8..=1, n),
        )
    })
}

fn two_class(labels: &[u8]) -> bool {
    labels.contains(&0) && labels.contains(&1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn levels_match_longest_paths((n, edges) in dag_strategy(8)) {
        let ids: Vec<String> = (0..n).map(name).collect();
        let named: Vec<(String, String)> = edges.iter().map(|&(p, c)| (name(p), name(c))).collect();
        let levels = compute_levels(&ids, &named).unwrap();
        for v in 0..n {
            prop_assert_eq!(levels[&name(v)], brute_level(v, &edges));
        }
        let g = build(n, &edges);
        for &(p, c) in &edges {
            prop_assert!(levels[&name(c)] > levels[&name(p)]);
            prop_assert!(g.routing_order().iter().position(|&i| g.node(i).id == name(p))
                < g.routing_order().iter().position(|&i| g.node(i).id == name(c)));
        }
    }

    #[test]
    fn routing_visits_exactly_the_closure(
        (n, edges) in dag_strategy(7),
        picks in proptest::collection::btree_set(0usize..7, 1..4),
        x in proptest::collection::vec(-2.0f64..2.0, 3),
    ) {
        let g = build(n, &edges);
        let picks: BTreeSet<usize> = picks.into_iter().filter(|&p| p < n).collect();
        prop_assume!(!picks.is_empty());
        let closure = brute_closure(&picks, &edges);
        let record = Record {
            id: "r".into(),
            features: x,
            concepts: closure.iter().map(|&i| name(i)).collect(),
            labels: BTreeMap::from([("y".into(), 1)]),
        };
        let m = OmtlModel::build(ModelSpec::new(Variant::Omtl, 3), &g, 0).unwrap();
        let fr = m.forward(&g, &record, Mode::Eval, None).unwrap();
        let visited: BTreeSet<String> = fr.order.iter().cloned().collect();
        prop_assert_eq!(&visited, &record.concepts);

        let levels = g.level_map();
        let mut expect: Vec<String> = record.concepts.iter().cloned().collect();
        expect.sort_by(|a, b| (levels[a], a).cmp(&(levels[b], b)));
        prop_assert_eq!(fr.order, expect);
    }

    #[test]
    fn auc_matches_pair_counting((scores, labels) in scored_strategy()) {
        prop_assume!(two_class(&labels));
        let s = ScoredSet::new("n", "o", scores.clone(), labels.clone());
        prop_assert!((auc_roc(&s).unwrap() - pair_count_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_threshold_sweep((scores, labels) in scored_strategy()) {
        prop_assume!(labels.contains(&1));
        let s = ScoredSet::new("n", "o", scores.clone(), labels.clone());
        prop_assert!((average_precision(&s).unwrap() - sweep_ap(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_maps((scores, labels) in scored_strategy()) {
        prop_assume!(two_class(&labels));
        let base = auc_roc(&ScoredSet::new("n", "o", scores.clone(), labels.clone())).unwrap();
        let logit: Vec<f64> = scores.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let cube: Vec<f64> = scores.iter().map(|p| p * p * p).collect();
        prop_assert_eq!(auc_roc(&ScoredSet::new("n", "o", logit, labels.clone())).unwrap(), base);
        prop_assert_eq!(auc_roc(&ScoredSet::new("n", "o", cube, labels)).unwrap(), base);
    }

    #[test]
    fn delong_is_antisymmetric(
        (a, labels) in scored_strategy(),
        seed in any::<u64>(),
    ) {
        prop_assume!(two_class(&labels));
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| (v + ((seed >> (i % 60)) & 1) as f64 * 0.37) % 1.0).collect();
        let sa = ScoredSet::new("n", "o", a, labels.clone());
        let sb = ScoredSet::new("n", "o", b, labels);
        let ab = delong_test(&sa, &sb).unwrap();
        let ba = delong_test(&sb, &sa).unwrap();
        prop_assert_eq!(ab.delta, -ba.delta);
        prop_assert_eq!(ab.z, -ba.z);
        prop_assert_eq!(ab.p_value, ba.p_value);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
        prop_assert_eq!(delong_test(&sa, &sa).unwrap().p_value, 1.0);
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..6,
        vals in proptest::collection::vec(-50.0f64..50.0, 36),
    ) {
        let t = DenseTensor::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let s = softmax_rows(&t);
        for r in 0..rows {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn aps_reference_points() {
    // constant scores: one threshold covering everything
    let labels = vec![1, 0, 0, 0, 1, 0, 0, 0, 0, 0];
    let flat = ScoredSet::new("n", "o", vec![0.3; 10], labels.clone());
    assert!((average_precision(&flat).unwrap() - 0.2).abs() < 1e-15);
    let perfect: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    let p = ScoredSet::new("n", "o", perfect, labels);
    assert_eq!(average_precision(&p).unwrap(), 1.0);
}
