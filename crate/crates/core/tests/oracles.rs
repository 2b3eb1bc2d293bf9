mod common;

use attrshield::cbm::{fit_head, CbmConfig, CbmProbe};
use attrshield::sas::{pseudo_loss, subsidiary_loss};
use attrshield::vlm::{distribution_from_similarities, SubsidiaryGroup};
use attrshield::ClassPrompt;
use rand::Rng;

/// A probe whose concepts are the raw input columns.
fn free_probe(k: usize, n: usize) -> CbmProbe {
    CbmProbe {
        bottleneck: vec![vec![0.0]; n],
        index: (0..n).map(|j| (0, j)).collect(),
        ranges: (0..k).map(|c| if c == 0 { 0..n } else { n..n }).collect(),
        categories: (0..k).map(|c| format!("c{c}")).collect(),
        head: vec![vec![0.0; n]; k],
        scaling: None,
    }
}

fn exact_cfg() -> CbmConfig {
    CbmConfig {
        standardize: false,
        max_iterations: 200_000,
        tolerance: 1e-10,
        ..CbmConfig::default()
    }
}

#[test]
fn probe_head_matches_newton_solution() {
    let mut r = common::rng(21);
    for _ in 0..8 {
        let k = r.random_range(2..=4);
        let n = r.random_range(2..=8);
        let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for i in 0..5 * k {
            let c = i % k;
            x.push(centers[c].iter().map(|v| v + r.random_range(-0.8..0.8)).collect::<Vec<f64>>());
            y.push(c);
        }
        let cfg = exact_cfg();
        let mut probe = free_probe(k, n);
        fit_head(&mut probe, &x, &y, &cfg).unwrap();
        let w = common::logistic_regression_newton(&x, &y, k, cfg.l2);
        for (row, oracle) in probe.head.iter().zip(&w) {
            for (a, b) in row.iter().zip(oracle) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
        for _ in 0..30 {
            let q: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
            let logits: Vec<f64> = w.iter().map(|row| row.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
            assert_eq!(probe.predict(&q), common::argmax(&logits));
        }
    }
}

#[test]
fn one_hot_pair_has_dominant_diagonal() {
    let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let y = vec![0, 1];
    let mut probe = free_probe(2, 2);
    fit_head(&mut probe, &x, &y, &exact_cfg()).unwrap();
    assert_eq!(probe.predict(&x[0]), 0);
    assert_eq!(probe.predict(&x[1]), 1);
    assert!(probe.head[0][0] > probe.head[0][1] && probe.head[0][0] > probe.head[1][0]);
    assert!(probe.head[1][1] > probe.head[1][0] && probe.head[1][1] > probe.head[0][1]);
}

#[test]
fn concept_scores_match_row_dot_products() {
    let mut r = common::rng(4);
    let unit = |r: &mut rand_chacha::ChaCha8Rng| {
        let v: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / n).collect::<Vec<f64>>()
    };
    let mut probe = free_probe(2, 6);
    probe.bottleneck = (0..6).map(|_| unit(&mut r)).collect();
    let e = unit(&mut r);
    let got = probe.concept_scores(&e).unwrap();
    for (j, row) in probe.bottleneck.iter().enumerate() {
        let mut s = 0.0;
        for i in 0..64 {
            s += row[i] * e[i];
        }
        assert!((got[j] - s).abs() < 1e-12);
    }
    let own = probe.concept_scores(&probe.bottleneck[3].clone()).unwrap();
    assert!((own[3] - 1.0).abs() < 1e-6);
    assert!(probe.concept_scores(&e[..10]).is_err());
}

#[test]
fn softmax_hand_values() {
    let p = distribution_from_similarities(&[2.0, 1.0], 1.0);
    assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
    let p = distribution_from_similarities(&[0.3, -0.1, 0.5], 0.07);
    let hand = [0.054303537511567926, 0.0001791205310497612, 0.9455173419573824];
    for (a, b) in p.iter().zip(hand) {
        assert!((a - b).abs() < 1e-6);
    }
    let p = distribution_from_similarities(&[0.4, 0.4], 0.07);
    assert!((p[0] - 0.5).abs() < 1e-12);
}

#[test]
fn subsidiary_loss_matches_encoder_reference() {
    let model = common::toy_model(9);
    let prompts = common::toy_prompts();
    let mut r = common::rng(10);
    let imgs: Vec<_> = (0..6).map(|_| common::random_image(model.config.image_size, &mut r)).collect();
    let refs: Vec<_> = imgs.iter().collect();
    let g1 = SubsidiaryGroup { prompts: prompts.clone(), images: refs[..4].to_vec(), targets: vec![0, 1, 2, 0] };
    let g2 = SubsidiaryGroup { prompts: prompts[1..].to_vec(), images: refs[4..].to_vec(), targets: vec![1, 0] };
    let one = subsidiary_loss(&model, &g1).unwrap();
    let hand_one = common::reference_cross_entropy(&model, &refs[..4], &[0, 1, 2, 0], &prompts);
    assert!((one - hand_one).abs() < 1e-4);
    let both = pseudo_loss(&model, &[g1, g2]).unwrap();
    let hand_two = common::reference_cross_entropy(&model, &refs[4..], &[1, 0], &prompts[1..]);
    assert!((both - 0.5 * (hand_one + hand_two)).abs() < 1e-4);
}

#[test]
fn gradients_match_finite_differences() {
    let model = common::toy_model(12);
    let prompts = common::toy_prompts();
    let mut r = common::rng(13);
    let imgs: Vec<_> = (0..4).map(|_| common::random_image(model.config.image_size, &mut r)).collect();
    let refs: Vec<_> = imgs.iter().collect();
    let err = common::gradient_check(&model, &refs, &[0, 2, 1, 2], &prompts, 8, 1);
    assert!(err < 1e-4, "main loss relative error {err:.2e}");
    let pse = vec![
        prompts[1].clone(),
        ClassPrompt::new(10, "a photo of green").unwrap(),
        ClassPrompt::new(11, "a photo of dots").unwrap(),
    ];
    let err = common::gradient_check(&model, &refs, &[0, 1, 2, 0], &pse, 8, 2);
    assert!(err < 1e-4, "subsidiary loss relative error {err:.2e}");
}
