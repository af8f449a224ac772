use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::probe::ProbeResult;
use crate::rng::Rng;

fn probe_result(id: &str, layer: usize, m: Vec<f64>) -> ProbeResult {
    ProbeResult {
        sample_id: id.to_string(),
        vectors: BTreeMap::from([(layer, m)]),
        loss_sen: 0.0,
        loss_benign: 0.0,
        loss_l1: 0.0,
        steps_run: 1,
        in_bounds_every_step: true,
    }
}

/// Naive double-loop counter, kept independent of the implementation.
fn brute_force_fractions(results: &[ProbeResult], layer: usize) -> Vec<f64> {
    let d = results[0].vectors[&layer].len();
    let mut out = vec![0.0; d];
    for j in 0..d {
        let mut count = 0usize;
        for r in results {
            if r.vectors[&layer][j] < 0.0 {
                count += 1;
            }
        }
        out[j] = count as f64 / results.len() as f64;
    }
    out
}

#[test]
fn aggregate_direct_count() {
    // sign patterns across 4 samples: d0 -,-,+,-  d1 -,+,+,+  d2 +,+,+,+
    let rows = [
        vec![-0.5, -0.1, 0.4],
        vec![-0.2, 0.3, 0.9],
        vec![0.7, 0.2, 0.1],
        vec![-0.9, 0.6, 0.2],
    ];
    let results: Vec<ProbeResult> = rows
        .iter()
        .enumerate()
        .map(|(i, m)| probe_result(&format!("s{i}"), 2, m.clone()))
        .collect();
    let gate = aggregate(&results, 2, 0.3).unwrap();
    assert_eq!(gate.fractions(), vec![0.75, 0.25, 0.0]);
    assert_eq!(gate.binary_mask(), vec![1.0, 0.0, 0.0]);
}

#[test]
fn all_positive_probes_give_empty_gate() {
    let results: Vec<ProbeResult> = (0..3)
        .map(|i| probe_result(&format!("s{i}"), 0, vec![0.1, 0.5, 0.9, 1.0]))
        .collect();
    let gate = aggregate(&results, 0, 0.3).unwrap();
    assert!(gate.fractions().iter().all(|&m| m == 0.0));
    assert!(gate.binary_mask().iter().all(|&b| b == 0.0));
}

#[test]
fn zero_entries_count_as_non_negative() {
    let results = vec![probe_result("a", 0, vec![0.0, -0.0, -1e-300])];
    let gate = aggregate(&results, 0, 0.3).unwrap();
    // -0.0 is not strictly negative; a denormal is
    assert_eq!(gate.negative_counts, vec![0, 0, 1]);
}

#[test]
fn aggregate_matches_brute_force_on_random_instances() {
    let mut rng = Rng::new(77);
    for trial in 0..100 {
        let n = 1 + rng.below(16);
        let d = 1 + rng.below(32);
        let results: Vec<ProbeResult> = (0..n)
            .map(|i| {
                probe_result(
                    &format!("t{trial}_s{i}"),
                    1,
                    (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                )
            })
            .collect();
        let gate = aggregate(&results, 1, 0.3).unwrap();
        assert_eq!(gate.fractions(), brute_force_fractions(&results, 1));
    }
}

#[test]
fn aggregate_rejects_inconsistencies() {
    let results = vec![
        probe_result("a", 0, vec![0.1, 0.2]),
        probe_result("b", 0, vec![0.1, 0.2, 0.3]),
    ];
    assert!(aggregate(&results, 0, 0.3).is_err());
    assert!(aggregate(&results[..1], 3, 0.3).is_err());
    assert!(aggregate(&[], 0, 0.3).is_err());
}

#[test]
fn classify_boundary_is_strict() {
    // M = 0.3 exactly must classify weak
    let gate = NeuralGate {
        layer: 0,
        negative_counts: vec![3, 4, 0],
        sample_count: 10,
        threshold: 0.3,
    };
    let tax = classify(&gate);
    assert_eq!(tax.class_of(0), Some(NeuronClass::Weak));
    assert_eq!(tax.class_of(1), Some(NeuronClass::Strong));
    assert_eq!(tax.class_of(2), Some(NeuronClass::Inactive));
    assert_eq!(gate.binary_mask(), vec![0.0, 1.0, 0.0]);
}

#[test]
fn classify_example_triple() {
    let gate = NeuralGate {
        layer: 1,
        negative_counts: vec![3, 1, 0],
        sample_count: 4,
        threshold: 0.3,
    };
    let tax = classify(&gate);
    assert_eq!(tax.strong, vec![0]);
    assert_eq!(tax.weak, vec![1]);
    assert_eq!(tax.inactive, vec![2]);
}

proptest! {
    #[test]
    fn classify_partitions_dimensions(
        counts in proptest::collection::vec(0u32..=8, 1..32),
    ) {
        let gate = NeuralGate {
            layer: 0,
            negative_counts: counts.clone(),
            sample_count: 8,
            threshold: 0.3,
        };
        let tax = classify(&gate);
        let mut seen = vec![0usize; counts.len()];
        for &j in tax.inactive.iter().chain(&tax.weak).chain(&tax.strong) {
            seen[j] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(tax.dim(), counts.len());
    }

    #[test]
    fn mask_is_pure_function_of_fractions_and_threshold(
        counts in proptest::collection::vec(0u32..=16, 1..24),
    ) {
        let gate = NeuralGate {
            layer: 0,
            negative_counts: counts,
            sample_count: 16,
            threshold: 0.3,
        };
        let m = gate.fractions();
        let expect: Vec<f64> = m.iter().map(|&x| if x > 0.3 { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(gate.binary_mask(), expect);
    }
}

fn taxonomy_with_strong(layer: usize, strong: usize, d: usize) -> NeuronTaxonomy {
    NeuronTaxonomy {
        layer,
        inactive: (strong..d).collect(),
        weak: vec![],
        strong: (0..strong).collect(),
    }
}

#[test]
fn locate_center_argmax() {
    // proportions .02 .05 .09 .04 over layers 2..=5
    let d = 100;
    let taxes: BTreeMap<usize, NeuronTaxonomy> = [(2, 2), (3, 5), (4, 9), (5, 4)]
        .into_iter()
        .map(|(l, s)| (l, taxonomy_with_strong(l, s, d)))
        .collect();
    assert_eq!(locate_center(&taxes, 2..6).unwrap(), 4);
}

#[test]
fn locate_center_tie_breaks_low() {
    let taxes: BTreeMap<usize, NeuronTaxonomy> = (1..5)
        .map(|l| (l, taxonomy_with_strong(l, 3, 10)))
        .collect();
    assert_eq!(locate_center(&taxes, 1..5).unwrap(), 1);
}

#[test]
fn search_range_scales_proportionally() {
    assert_eq!(layer_search_range(32), 3..20);
    assert_eq!(layer_search_range(8), 1..6);
}

#[test]
fn radius_zero_evaluates_only_center() {
    let mut calls = Vec::new();
    let r = radius_search(
        |l| {
            calls.push(l);
            Ok(0.5)
        },
        3,
        0,
        8,
    )
    .unwrap();
    assert_eq!(calls, vec![3]);
    assert_eq!(r.chosen, 3);
    assert_eq!(r.per_radius.len(), 1);
}

#[test]
fn radius_search_example_arithmetic() {
    let table: BTreeMap<usize, f64> = [(8, 0.90), (9, 0.88), (10, 0.91)].into();
    let r = radius_search(|l| Ok(table[&l]), 9, 1, 12).unwrap();
    assert_eq!(r.chosen, 10);
    let mean = r.per_radius.last().unwrap().mean_eta;
    assert!((mean - 0.8966666666666667).abs() < 1e-12);
    assert_eq!(r.per_radius.last().unwrap().max_eta, 0.91);
}

#[test]
fn radius_search_visits_each_layer_once_and_max_is_monotone() {
    let mut rng = Rng::new(5);
    let mut calls: BTreeMap<usize, usize> = BTreeMap::new();
    let r = radius_search(
        |l| {
            *calls.entry(l).or_insert(0) += 1;
            Ok(rng.next_f64())
        },
        4,
        5,
        8,
    )
    .unwrap();
    assert!(calls.values().all(|&c| c == 1));
    assert_eq!(calls.len(), 8); // clipped at both edges
    let maxes: Vec<f64> = r.per_radius.iter().map(|s| s.max_eta).collect();
    assert!(maxes.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn radius_search_tie_prefers_center_then_low() {
    let r = radius_search(|_| Ok(0.7), 4, 2, 8).unwrap();
    assert_eq!(r.chosen, 4);
    // center fails, neighbors tie -> closest distance ties -> lower index
    let r2 = radius_search(
        |l| {
            if l == 4 {
                Err(crate::error::Error::Numeric("boom".into()))
            } else {
                Ok(0.7)
            }
        },
        4,
        2,
        8,
    )
    .unwrap();
    assert_eq!(r2.chosen, 3);
    assert_eq!(r2.failures.len(), 1);
}

#[test]
fn radius_search_all_failures_is_error() {
    let r = radius_search(
        |_| Err(crate::error::Error::Numeric("boom".into())),
        2,
        1,
        8,
    );
    assert!(r.is_err());
}

#[test]
fn gate_file_round_trip_and_tamper_detection() {
    let rows = [
        vec![-0.5, 0.1, -0.4, 0.2],
        vec![-0.2, 0.3, 0.9, -0.8],
        vec![-0.7, 0.2, 0.1, 0.5],
    ];
    let results: Vec<ProbeResult> = rows
        .iter()
        .enumerate()
        .map(|(i, m)| probe_result(&format!("s{i}"), 3, m.clone()))
        .collect();
    let gate = aggregate(&results, 3, 0.3).unwrap();
    let dir = std::env::temp_dir().join("neurogate_gate_rt");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("gate.json");
    write_gate_file(&gate, "abc123".into(), &path).unwrap();
    let (back, digest) = read_gate_file(&path).unwrap();
    assert_eq!(back, gate);
    assert_eq!(digest, "abc123");

    // flip the stored mask; loader must notice
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\"mask\": [\n    1.0", "\"mask\": [\n    0.0", 1);
    assert_ne!(text, tampered);
    assert!(parse_gate_file(tampered.as_bytes()).is_err());
}

#[test]
fn histogram_single_sample_mass_at_extremes() {
    let results = vec![probe_result("only", 0, vec![-0.5, 0.2, -0.1, 0.9])];
    let hist = stats::frequency_histogram(&results, 0.3).unwrap();
    let bins = &hist[&0];
    // N = 1 puts every dimension at frequency 0 or 1
    assert_eq!(bins[0], 2);
    assert_eq!(bins[stats::HISTOGRAM_BINS - 1], 2);
    assert_eq!(bins.iter().sum::<usize>(), 4);
    for b in &bins[1..stats::HISTOGRAM_BINS - 1] {
        assert_eq!(*b, 0);
    }
}

#[test]
fn histogram_hand_count() {
    // two samples, d = 2: dim0 negative in both (freq 1.0), dim1 in one (0.5)
    let results = vec![
        probe_result("a", 1, vec![-0.3, -0.4]),
        probe_result("b", 1, vec![-0.6, 0.4]),
    ];
    let hist = stats::frequency_histogram(&results, 0.3).unwrap();
    let bins = &hist[&1];
    assert_eq!(bins[5], 1); // 0.5 falls in [0.5, 0.6)
    assert_eq!(bins[9], 1); // 1.0 clamps into the last bin
    assert_eq!(bins.iter().sum::<usize>(), 2);

    let props = stats::strong_proportions(&results, 0.3).unwrap();
    assert_eq!(props[&1], 1.0);
}
