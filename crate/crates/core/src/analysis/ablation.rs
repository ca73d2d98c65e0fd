//! Cumulative ablation of the feature representation.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, FEATURE_CHANNELS};
use crate::tensor::Tensor;
use crate::train::accuracy;

/// Which labels ablation accuracy is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AblationLabels {
    /// The uncorrupted training labels.
    #[default]
    Pristine,
    /// The labels the network was trained on.
    Current,
}

/// What an ablated "unit" is.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Granularity {
    /// Whole feature channels (50 units).
    #[default]
    Channel,
    /// Individual scalar activations of φ(x).
    Unit,
}

/// Ablation rates 0, 0.1, …, 1.0.
pub fn default_rates() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCurve {
    pub rates: Vec<f64>,
    /// Accuracy (%) per rate, averaged over mask seeds.
    pub accuracy: Vec<f64>,
    pub auc: f64,
}

/// Trapezoidal area under `values` over `xs`.
pub fn trapezoid_auc(xs: &[f64], values: &[f64]) -> f64 {
    assert_eq!(xs.len(), values.len());
    xs.windows(2)
        .zip(values.windows(2))
        .map(|(x, v)| (x[1] - x[0]) * (v[0] + v[1]) / 2.0)
        .sum()
}

/// Units to zero for one (rate, seed): `round(rate · units)` drawn without
/// replacement from stream `rate_index` of the seeded generator.
pub fn ablation_mask(units: usize, rate: f64, seed: u64, rate_index: u64) -> Vec<bool> {
    let count = (rate * units as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rate_index);
    let mut mask = vec![false; units];
    for i in index::sample(&mut rng, units, count.min(units)) {
        mask[i] = true;
    }
    mask
}

/// Head accuracy over precomputed features `[N, 50, s, s]` with some units zeroed.
pub fn ablated_accuracy(
    model: &Model,
    features: &Tensor,
    labels: &[usize],
    zeroed: &[bool],
    granularity: Granularity,
    chunk: usize,
) -> Result<f64> {
    let n = features.shape()[0];
    let per_sample = features.len() / n;
    let spatial = per_sample / FEATURE_CHANNELS;
    let mut logits = Vec::with_capacity(n * crate::model::NUM_CLASSES);
    let mut start = 0;
    while start < n {
        let count = chunk.min(n - start);
        let mut f = features.slice_rows(start, count)?;
        if zeroed.iter().any(|&z| z) {
            for sample in f.data_mut().chunks_exact_mut(per_sample) {
                for (j, v) in sample.iter_mut().enumerate() {
                    let unit = match granularity {
                        Granularity::Channel => j / spatial,
                        Granularity::Unit => j,
                    };
                    if zeroed[unit] {
                        *v = 0.0;
                    }
                }
            }
        }
        logits.extend_from_slice(model.head_logits(&f)?.data());
        start += count;
    }
    let logits = Tensor::new(vec![n, crate::model::NUM_CLASSES], logits)?;
    Ok(accuracy(&logits, labels))
}

/// Accuracy vs. ablation rate, each rate averaged over `mask_seeds`.
pub fn cumulative_ablation(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    mask_seeds: &[u64],
    granularity: Granularity,
    chunk: usize,
) -> Result<AblationCurve> {
    if mask_seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one mask seed".into()));
    }
    let features = super::features_in_chunks(model, images, chunk)?;
    let units = match granularity {
        Granularity::Channel => FEATURE_CHANNELS,
        Granularity::Unit => features.len() / features.shape()[0],
    };
    let rates = default_rates();
    let mut acc = Vec::with_capacity(rates.len());
    for (ri, &rate) in rates.iter().enumerate() {
        let mut total = 0.0;
        for &seed in mask_seeds {
            let mask = ablation_mask(units, rate, seed, ri as u64);
            total += ablated_accuracy(model, &features, labels, &mask, granularity, chunk)?;
        }
        acc.push(total / mask_seeds.len() as f64);
    }
    let auc = trapezoid_auc(&rates, &acc);
    Ok(AblationCurve {
        rates,
        accuracy: acc,
        auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_curve_auc_is_the_constant() {
        let r = default_rates();
        for c in [0.0, 37.5, 100.0] {
            assert!((trapezoid_auc(&r, &[c; 11]) - c).abs() < 1e-12);
        }
        // Linear decline from 100 to 0 has area 50.
        let lin: Vec<f64> = r.iter().map(|x| 100.0 * (1.0 - x)).collect();
        assert!((trapezoid_auc(&r, &lin) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn mask_counts() {
        for (i, rate) in default_rates().into_iter().enumerate() {
            let m = ablation_mask(50, rate, 3, i as u64);
            assert_eq!(m.iter().filter(|&&z| z).count(), 5 * i);
        }
        assert_eq!(ablation_mask(50, 0.3, 1, 3), ablation_mask(50, 0.3, 1, 3));
        assert_ne!(ablation_mask(50, 0.3, 1, 3), ablation_mask(50, 0.3, 2, 3));
    }
}
