use al2lab::analysis::{
    ablated_accuracy, ablation_mask, cca_coefficients, cumulative_ablation, default_rates, trapezoid_auc, Granularity,
    RepresentationMatrix,
};
use al2lab::data::LabeledDataset;
use al2lab::model::{DatasetKind, Regularizer};
use al2lab::train::{evaluate, train, TrainConfig};
use al2lab::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{correlated_pair, gaussian, near_identity, oracle_2x2, transform};

#[test]
fn two_by_five_matches_direct_optimization() {
    for seed in 0..6 {
        let r1 = gaussian(2, 5, seed);
        let r2 = gaussian(2, 5, seed + 50);
        let rho = cca_coefficients(&r1, &r2).unwrap().rho;
        let oracle = oracle_2x2(&r1, &r2);
        assert_eq!(rho.len(), 2);
        for k in 0..2 {
            assert!((rho[k] - oracle[k]).abs() < 1e-4, "seed {seed}: {rho:?} vs {oracle:?}");
        }
    }
}

#[test]
fn independent_white_noise_is_uncorrelated() {
    let r1 = gaussian(10, 10_000, 1);
    let r2 = gaussian(10, 10_000, 2);
    let rho = cca_coefficients(&r1, &r2).unwrap().rho;
    assert_eq!(rho.len(), 10);
    assert!(rho.iter().all(|&r| r < 0.1), "{rho:?}");
}

#[test]
fn self_similarity_is_one() {
    let r = gaussian(50, 2000, 3);
    let rho = cca_coefficients(&r, &r).unwrap().rho;
    assert!(rho.iter().all(|&v| (v - 1.0).abs() < 1e-8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coefficients_sorted_and_bounded(a in 1usize..7, b in 1usize..7, seed in 0u64..1000) {
        let (r1, r2) = correlated_pair(a, b, 60, seed);
        let rho = cca_coefficients(&r1, &r2).unwrap().rho;
        prop_assert_eq!(rho.len(), a.min(b));
        prop_assert!(rho.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert!(rho.iter().all(|&v| (-1e-8..=1.0 + 1e-8).contains(&v)));
    }

    #[test]
    fn self_similarity(a in 1usize..8, seed in 0u64..1000) {
        let r = gaussian(a, 80, seed);
        let rho = cca_coefficients(&r, &r).unwrap().rho;
        prop_assert!(rho.iter().all(|&v| (v - 1.0).abs() < 1e-8), "{:?}", rho);
    }

    #[test]
    fn positive_scale_invariance(scale in 1e-3f64..1e3, seed in 0u64..1000) {
        let (r1, r2) = correlated_pair(4, 5, 70, seed);
        let scaled = RepresentationMatrix::new(r1.rows, r1.cols, r1.data.iter().map(|v| v * scale).collect());
        let a = cca_coefficients(&r1, &r2).unwrap().rho;
        let b = cca_coefficients(&scaled, &r2).unwrap().rho;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn invertible_transform_invariance(seed in 0u64..1000) {
        let (r1, r2) = correlated_pair(5, 4, 90, seed);
        let t = transform(&near_identity(5, seed + 7), 5, &r1);
        let a = cca_coefficients(&r1, &r2).unwrap().rho;
        let b = cca_coefficients(&t, &r2).unwrap().rho;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6, "{:?} vs {:?}", a, b);
        }
        let same = cca_coefficients(&r1, &t).unwrap().rho;
        prop_assert!(same.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn symmetric_in_its_arguments(a in 1usize..7, b in 1usize..7, seed in 0u64..1000) {
        let (r1, r2) = correlated_pair(a, b, 50, seed);
        let x = cca_coefficients(&r1, &r2).unwrap().rho;
        let y = cca_coefficients(&r2, &r1).unwrap().rho;
        prop_assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p - q).abs() < 1e-8);
        }
    }

    #[test]
    fn extra_rows_never_lower_the_top_correlation(seed in 0u64..1000) {
        let (r1, r2) = correlated_pair(3, 3, 60, seed);
        let extra = gaussian(2, 60, seed + 9);
        let mut d = r2.data.clone();
        d.extend_from_slice(&extra.data);
        let wider = RepresentationMatrix::new(5, 60, d);
        let a = cca_coefficients(&r1, &r2).unwrap().rho[0];
        let b = cca_coefficients(&r1, &wider).unwrap().rho[0];
        prop_assert!(b >= a - 1e-10);
    }
}

#[test]
fn mismatched_sample_counts_are_rejected() {
    assert!(cca_coefficients(&gaussian(3, 10, 1), &gaussian(3, 11, 2)).is_err());
}

fn toy(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let mut data = vec![0.0; n * 784];
    for (i, &y) in labels.iter().enumerate() {
        for p in 0..784 {
            let quadrant = (p / 28 / 14) * 2 + (p % 28) / 14;
            data[i * 784 + p] = if quadrant == y { 0.8 } else { 0.1 } + 0.1 * rng.random::<f64>();
        }
    }
    LabeledDataset::new(DatasetKind::Mnist, Tensor::new(vec![n, 1, 28, 28], data).unwrap(), labels).unwrap()
}

fn trained(reg: Regularizer) -> (al2lab::model::Model, LabeledDataset) {
    let data = toy(40, 1);
    let cfg = TrainConfig { epochs: 8, batch_size: 10, regularizer: reg, ..TrainConfig::default() };
    (train(&cfg, &data, &toy(8, 2), &mut ()).unwrap().model, data)
}

#[test]
fn rate_zero_is_plain_accuracy_and_rate_one_is_closed_form() {
    let (model, data) = trained(Regularizer::Bare);
    let curve = cumulative_ablation(&model, data.images(), data.labels(), &[0, 1, 2], Granularity::Channel, 16).unwrap();
    assert_eq!(curve.accuracy[0], evaluate(&model, &data, 200).unwrap());

    // Zero features: hidden = relu(b1), logits = hidden · W2 + b2.
    let p = |n: &str| model.param(n).unwrap().value.data().to_vec();
    let (b1, w2, b2) = (p("head.fc1.bias"), p("head.fc2.weight"), p("head.fc2.bias"));
    let logits: Vec<f64> = (0..10).map(|k| b2[k] + (0..128).map(|j| b1[j].max(0.0) * w2[j * 10 + k]).sum::<f64>()).collect();
    let winner = (0..10).fold(0, |best, k| if logits[k] > logits[best] { k } else { best });
    let expect = 100.0 * data.labels().iter().filter(|&&l| l == winner).count() as f64 / data.len() as f64;
    assert_eq!(*curve.accuracy.last().unwrap(), expect);
    assert!((curve.auc - trapezoid_auc(&default_rates(), &curve.accuracy)).abs() < 1e-12);
}

#[test]
fn ablation_accuracy_falls_with_rate_on_average() {
    let (model, data) = trained(Regularizer::Bare);
    let seeds: Vec<u64> = (0..20).collect();
    let curve = cumulative_ablation(&model, data.images(), data.labels(), &seeds, Granularity::Channel, 40).unwrap();
    for w in curve.accuracy.windows(2) {
        assert!(w[1] <= w[0] + 2.0, "{:?}", curve.accuracy);
    }
}

#[test]
fn unit_granularity_masks_individual_activations() {
    let (model, data) = trained(Regularizer::Bare);
    let features = model.features(data.images()).unwrap();
    let units = features.len() / data.len();
    assert_eq!(units, 800);
    let none = ablated_accuracy(&model, &features, data.labels(), &vec![false; units], Granularity::Unit, 7).unwrap();
    assert_eq!(none, evaluate(&model, &data, 200).unwrap());
    let mask = ablation_mask(units, 0.3, 4, 3);
    assert_eq!(mask.iter().filter(|&&m| m).count(), 240);
    assert_eq!(mask, ablation_mask(units, 0.3, 4, 3));
    assert_ne!(mask, ablation_mask(units, 0.3, 4, 2));
}
