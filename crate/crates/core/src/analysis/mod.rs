//! Representation analysis: CCA ρ-sequences and cumulative ablation curves.

mod ablation;
mod cca;

pub use ablation::{
    ablated_accuracy, ablation_mask, cumulative_ablation, default_rates, trapezoid_auc, AblationCurve,
    AblationLabels, Granularity,
};
pub use cca::{cca_coefficients, CcaResult, RIDGE_SCALE};

use crate::error::{Error, Result};
use crate::model::{Model, FEATURE_CHANNELS};
use crate::tensor::Tensor;

/// An `a × n` matrix (row-major): rows are neurons/channels, columns samples.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RepresentationMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "representation {rows}x{cols} over {} values", data.len());
        RepresentationMatrix { rows, cols, data }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// Rearranges features `[N, C, s, s]` into `C × (N·s²)`; column
    /// `i·s² + p` holds sample `i` at spatial position `p`.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 4 {
            return Err(Error::shape("representation", format!("expected [N,C,H,W], got {shape:?}")));
        }
        let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let cols = n * spatial;
        let mut data = vec![0.0; c * cols];
        for (i, sample) in features.data().chunks_exact(c * spatial).enumerate() {
            for (ch, plane) in sample.chunks_exact(spatial).enumerate() {
                data[ch * cols + i * spatial..ch * cols + (i + 1) * spatial].copy_from_slice(plane);
            }
        }
        Ok(RepresentationMatrix::new(c, cols, data))
    }
}

pub(crate) fn features_in_chunks(model: &Model, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::new();
    let mut start = 0;
    while start < n {
        let count = chunk.max(1).min(n - start);
        data.extend(model.features(&images.slice_rows(start, count)?)?.into_data());
        start += count;
    }
    let s = model.dataset().feature_side();
    Tensor::new(vec![n, FEATURE_CHANNELS, s, s], data)
}

/// Eval-mode φ(x) of `images` as a channels × (samples·spatial) matrix.
pub fn extract_representation(model: &Model, images: &Tensor) -> Result<RepresentationMatrix> {
    RepresentationMatrix::from_features(&features_in_chunks(model, images, 200)?)
}

/// ρ-sequence of each model against `reference` on the same images.
pub fn cca_trajectory(reference: &Model, models: &[&Model], images: &Tensor) -> Result<Vec<CcaResult>> {
    let base = extract_representation(reference, images)?;
    models
        .iter()
        .map(|m| cca_coefficients(&base, &extract_representation(m, images)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DatasetKind, InitSeed, Regularizer};

    #[test]
    fn columns_index_sample_and_position() {
        let model = Model::build(DatasetKind::Mnist, Regularizer::Bare, InitSeed(5)).unwrap();
        let images = Tensor::from_fn(&[2, 1, 28, 28], |i| ((i * 31) % 97) as f64 / 97.0);
        let rep = extract_representation(&model, &images).unwrap();
        assert_eq!((rep.rows, rep.cols), (50, 32));
        let feats = model.features(&images).unwrap();
        for i in 0..2 {
            for ch in 0..50 {
                for p in 0..16 {
                    assert_eq!(rep.get(ch, i * 16 + p), feats.data()[i * 800 + ch * 16 + p]);
                }
            }
        }
    }

    #[test]
    fn trajectory_against_itself_is_all_ones() {
        let model = Model::build(DatasetKind::Mnist, Regularizer::Bare, InitSeed(5)).unwrap();
        let images = Tensor::from_fn(&[8, 1, 28, 28], |i| ((i * 7919) % 101) as f64 / 101.0);
        let t = cca_trajectory(&model, &[&model], &images).unwrap();
        assert_eq!(t[0].rho.len(), 50);
    }
}
