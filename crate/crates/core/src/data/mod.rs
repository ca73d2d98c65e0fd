//! Datasets, symmetric label corruption and seeded batching.

mod formats;
pub mod sidecar;

use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use formats::{parse_cifar_batch, parse_idx_images, parse_idx_labels, RawImages};

use crate::error::{Error, Result};
use crate::model::{DatasetKind, NUM_CLASSES};
use crate::tensor::Tensor;

/// Environment variable naming the dataset root.
pub const DATA_ROOT_ENV: &str = "AL2LAB_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Directory under the data root that holds a dataset's files.
pub fn dataset_dir(root: &Path, kind: DatasetKind) -> PathBuf {
    root.join(match kind {
        DatasetKind::Mnist => "mnist",
        DatasetKind::FashionMnist => "fashion-mnist",
        DatasetKind::Cifar10 => "cifar-10-batches-bin",
    })
}

/// Files `load_dataset` reads for a split, in order.
pub fn dataset_files(root: &Path, kind: DatasetKind, split: Split) -> Vec<PathBuf> {
    let dir = dataset_dir(root, kind);
    match (kind, split) {
        (DatasetKind::Cifar10, Split::Train) => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        (DatasetKind::Cifar10, Split::Test) => vec![dir.join("test_batch.bin")],
        (_, split) => {
            let stem = if split == Split::Train { "train" } else { "t10k" };
            vec![
                dir.join(format!("{stem}-images-idx3-ubyte")),
                dir.join(format!("{stem}-labels-idx1-ubyte")),
            ]
        }
    }
}

/// Images with current and pristine labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    kind: DatasetKind,
    images: Tensor,
    labels: Vec<usize>,
    pristine_labels: Vec<usize>,
    corrupted_mask: Vec<bool>,
    corruption_fraction: f64,
    corruption_seed: u64,
}

impl LabeledDataset {
    /// Clean dataset from images `[N, C, H, W]` in [0, 1] and labels.
    pub fn new(kind: DatasetKind, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let [c, h, w] = kind.image_shape();
        let s = images.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape("dataset", format!("{kind} images must be [N,{c},{h},{w}], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::shape("dataset", format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
        let n = labels.len();
        Ok(LabeledDataset {
            kind,
            images,
            pristine_labels: labels.clone(),
            labels,
            corrupted_mask: vec![false; n],
            corruption_fraction: 0.0,
            corruption_seed: 0,
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pristine_labels(&self) -> &[usize] {
        &self.pristine_labels
    }

    pub fn corrupted_mask(&self) -> &[bool] {
        &self.corrupted_mask
    }

    pub fn corruption_fraction(&self) -> f64 {
        self.corruption_fraction
    }

    pub fn corruption_seed(&self) -> u64 {
        self.corruption_seed
    }

    pub fn num_corrupted(&self) -> usize {
        self.corrupted_mask.iter().filter(|&&m| m).count()
    }

    /// The first `n` samples (clean; corrupt afterwards).
    pub fn take_first(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!("cannot take {n} of {} samples", self.len())));
        }
        LabeledDataset::new(
            self.kind,
            self.images.slice_rows(0, n)?,
            self.pristine_labels[..n].to_vec(),
        )
    }

    /// Images and current labels at `indices`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Replaces exactly `round(fraction · N)` labels, chosen uniformly without
    /// replacement, with a uniform draw over the other nine classes. Always
    /// starts from the pristine labels, so the result depends only on
    /// `(pristine labels, fraction, seed)`.
    pub fn corrupt(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("corruption fraction {fraction} outside [0, 1]")));
        }
        let n = self.len();
        let count = (fraction * n as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = index::sample(&mut rng, n, count).into_vec();
        chosen.sort_unstable();

        let mut labels = self.pristine_labels.clone();
        let mut mask = vec![false; n];
        for i in chosen {
            let r = rng.random_range(0..NUM_CLASSES - 1);
            labels[i] = if r >= self.pristine_labels[i] { r + 1 } else { r };
            mask[i] = true;
        }
        Ok(LabeledDataset {
            labels,
            corrupted_mask: mask,
            corruption_fraction: fraction,
            corruption_seed: seed,
            ..self.clone()
        })
    }

    /// Installs explicit current labels (from a sidecar). The mask is derived
    /// from disagreement with the pristine labels.
    pub fn with_labels(&self, labels: Vec<usize>, fraction: f64, seed: u64) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::shape("labels", format!("{} labels for {} samples", labels.len(), self.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
        let corrupted_mask = labels.iter().zip(&self.pristine_labels).map(|(a, b)| a != b).collect();
        Ok(LabeledDataset {
            labels,
            corrupted_mask,
            corruption_fraction: fraction,
            corruption_seed: seed,
            ..self.clone()
        })
    }

    /// Seeded permutation of batches for one epoch.
    pub fn batches<'a>(&'a self, plan: &BatchPlan) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
        let order = plan.index_batches(self.len())?;
        Ok(order.into_iter().map(move |indices| {
            let (images, labels) = self.gather(&indices)?;
            Ok(Batch {
                indices,
                images,
                labels,
            })
        }))
    }
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub epoch: u64,
}

impl BatchPlan {
    /// Permutation of `0..n` for this (seed, epoch). Each epoch reads its
    /// own stream of the seeded generator.
    pub fn permutation(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        rng.set_stream(self.epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// The permutation cut into batches; the last one may be short.
    pub fn index_batches(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::InvalidArgument(format!(
                "batch size {} must be in 1..={n}",
                self.batch_size
            )));
        }
        Ok(self.permutation(n).chunks(self.batch_size).map(<[usize]>::to_vec).collect())
    }
}

fn to_tensor(raw: RawImages) -> Result<Tensor> {
    let data = raw.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::new(vec![raw.count, raw.channels, raw.rows, raw.cols], data)
}

/// Loads a split from `root` (see [`dataset_files`] for the layout).
pub fn load_dataset(kind: DatasetKind, split: Split, root: &Path) -> Result<LabeledDataset> {
    let files = dataset_files(root, kind, split);
    let (images, labels) = match kind {
        DatasetKind::Cifar10 => {
            let mut pixels = Vec::new();
            let mut labels = Vec::new();
            let mut count = 0;
            for path in &files {
                let (img, l) = parse_cifar_batch(&formats::read_file(path)?, path, NUM_CLASSES)?;
                count += img.count;
                pixels.extend(img.pixels);
                labels.extend(l);
            }
            let raw = RawImages {
                count,
                channels: 3,
                rows: formats::CIFAR_SIDE,
                cols: formats::CIFAR_SIDE,
                pixels,
            };
            (raw, labels)
        }
        _ => {
            let img = parse_idx_images(&formats::read_file(&files[0])?, &files[0])?;
            let labels = parse_idx_labels(&formats::read_file(&files[1])?, &files[1], NUM_CLASSES)?;
            if img.count != labels.len() {
                return Err(Error::Format {
                    path: files[1].clone(),
                    offset: 4,
                    detail: format!("{} labels for {} images", labels.len(), img.count),
                });
            }
            let side = kind.image_side();
            if (img.rows, img.cols) != (side, side) {
                return Err(Error::Format {
                    path: files[0].clone(),
                    offset: 8,
                    detail: format!("images are {}x{}, expected {side}x{side}", img.rows, img.cols),
                });
            }
            (img, labels)
        }
    };
    LabeledDataset::new(kind, to_tensor(images)?, labels.into_iter().map(usize::from).collect())
}
