use attrshield::attributes::{dedup_attributes, FixtureSimilarity};
use attrshield::cbm::{compute_scr, normalize_weights, select_spurious};
use attrshield::eval::{filter_by_similarity, group_metrics, group_metrics_from_accuracies};
use attrshield::sas::select_categories_by_scr;
use attrshield::vlm::distribution_from_similarities;
use attrshield::{Attribute, AttributeKind, AttributeOrigin, ThresholdPolicy};
use proptest::prelude::*;

fn attrs(kinds: &[bool]) -> Vec<Attribute> {
    kinds
        .iter()
        .enumerate()
        .map(|(i, &core)| {
            let kind = if core { AttributeKind::Core } else { AttributeKind::NonCore };
            Attribute::new(format!("attr {i}"), kind, AttributeOrigin::Manual).unwrap()
        })
        .collect()
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.contains(x))
}

proptest! {
    #[test]
    fn normalized_weights_sum_to_one(raw in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let w = normalize_weights(&raw);
        prop_assert_eq!(w.len(), raw.len());
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn raising_fixed_gamma_never_enlarges_the_set(
        raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..12),
        g1 in 0.0f64..1.0,
        g2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let weights = normalize_weights(&raw.iter().map(|p| p.0).collect::<Vec<_>>());
        let a = attrs(&raw.iter().map(|p| p.1).collect::<Vec<_>>());
        let high = select_spurious(&a, &weights, &ThresholdPolicy::fixed(hi));
        let low = select_spurious(&a, &weights, &ThresholdPolicy::fixed(lo));
        prop_assert!(is_subset(&high, &low));
    }

    #[test]
    fn adaptive_selection_clears_the_weakest_core_weight(
        raw in prop::collection::vec((0.01f64..1.0, any::<bool>()), 2..12),
    ) {
        let weights = normalize_weights(&raw.iter().map(|p| p.0).collect::<Vec<_>>());
        let a = attrs(&raw.iter().map(|p| p.1).collect::<Vec<_>>());
        let chosen = select_spurious(&a, &weights, &ThresholdPolicy::adaptive());
        let min_core = a.iter().zip(&weights).filter(|(x, _)| x.kind == AttributeKind::Core).map(|(_, &w)| w).reduce(f64::min);
        for &i in &chosen {
            prop_assert!(a[i].kind != AttributeKind::Core);
            if let Some(m) = min_core {
                prop_assert!(weights[i] >= m);
            }
        }
        if let Some(m) = min_core {
            for (i, x) in a.iter().enumerate() {
                if x.kind != AttributeKind::Core && weights[i] >= m {
                    prop_assert!(chosen.contains(&i));
                }
            }
        }
    }

    #[test]
    fn scr_of_every_attribute_is_one(raw in prop::collection::vec(0.01f64..1.0, 1..10)) {
        let w = normalize_weights(&raw);
        let all: Vec<usize> = (0..w.len()).collect();
        prop_assert!((compute_scr(&w, &all) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gap_is_average_minus_worst(accs in prop::collection::vec(0.0f64..=1.0, 1..12)) {
        let m = group_metrics_from_accuracies(&accs).unwrap();
        prop_assert_eq!(m.gap, m.avg - m.worst);
        prop_assert!((0.0..=1.0).contains(&m.worst) && m.worst <= m.avg);
    }

    #[test]
    fn group_metrics_from_predictions(
        rows in prop::collection::vec((0usize..3, 0usize..3, 0usize..4), 1..60),
    ) {
        let pred: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let groups: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let m = group_metrics(&pred, &labels, &groups, 4).unwrap();
        prop_assert_eq!(m.gap, m.avg - m.worst);
        let total: usize = m.per_group.values().map(|v| v.1).sum();
        prop_assert_eq!(total, rows.len());
    }

    #[test]
    fn counter_group_is_a_subset_and_everything_above_one(
        sims in prop::collection::vec(prop::option::of(-1.0f64..=1.0), 0..40),
        threshold in -1.0f64..1.0,
    ) {
        let kept = filter_by_similarity(&sims, threshold);
        prop_assert!(kept.iter().all(|&i| i < sims.len()));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let all = filter_by_similarity(&sims, 1.0 + 1e-9);
        prop_assert_eq!(all, (0..sims.len()).collect::<Vec<_>>());
    }

    #[test]
    fn prediction_distribution_sums_to_one(
        sims in prop::collection::vec(-1.0f64..=1.0, 1..12),
        tau in 0.01f64..2.0,
        k in 0.1f64..10.0,
    ) {
        let p = distribution_from_similarities(&sims, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let scaled: Vec<f64> = sims.iter().map(|s| s * k).collect();
        let q = distribution_from_similarities(&scaled, tau * k);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dedup_leaves_no_duplicate_text(words in prop::collection::vec(0usize..6, 0..20)) {
        let input: Vec<Attribute> = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                // alternate case so text equality is checked case-insensitively
                let t = if i % 2 == 0 { format!("word {w}") } else { format!("Word {w}") };
                Attribute::new(t, AttributeKind::NonCore, AttributeOrigin::Manual).unwrap()
            })
            .collect();
        let kept = dedup_attributes(&input, &FixtureSimilarity::new(), 0.9).unwrap();
        let mut keys: Vec<String> = kept.iter().map(|a| a.text.to_lowercase()).collect();
        let n = keys.len();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys.len(), n);
        let mut distinct = words.clone();
        distinct.sort();
        distinct.dedup();
        prop_assert_eq!(n, distinct.len());
    }

    #[test]
    fn scr_selection_takes_the_highest_ratios(
        scr in prop::collection::vec(0.0f64..3.0, 1..25),
        fraction in 0.01f64..=1.0,
    ) {
        let pairs: Vec<(usize, f64)> = scr.iter().copied().enumerate().collect();
        let chosen = select_categories_by_scr(&pairs, fraction).unwrap();
        prop_assert!(!chosen.is_empty() && chosen.len() <= scr.len());
        let floor = chosen.iter().map(|&c| scr[c]).fold(f64::INFINITY, f64::min);
        for (c, &s) in scr.iter().enumerate() {
            if !chosen.contains(&c) {
                prop_assert!(s <= floor);
            }
        }
    }
}

#[test]
fn scr_from_reported_averages() {
    // Two attributes per side chosen so the means are 77.34% and 46.73%.
    let spurious = [0.7734, 0.7734];
    let rest = [0.1612, 0.1612];
    let weights: Vec<f64> = spurious.iter().chain(&rest).copied().collect();
    let scr = compute_scr(&weights, &[0, 1]);
    assert!((scr - 0.7734 / 0.4673).abs() < 1e-9);
    assert!((scr - 1.655).abs() < 1e-3);
}
