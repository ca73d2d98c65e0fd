//! Corrupted-label sidecar file.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "AL2CORR\0"
//! 8       4     version (u32) = 1
//! 12      8     corruption seed (u64)
//! 20      8     corruption fraction (f64)
//! 28      8     N (u64)
//! 36      2N    N records of (current label u8, pristine label u8)
//! ```

use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AL2CORR\0";
pub const VERSION: u32 = 1;
const HEADER: usize = 36;

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionRecord {
    pub seed: u64,
    pub fraction: f64,
    pub current: Vec<u8>,
    pub pristine: Vec<u8>,
}

impl CorruptionRecord {
    pub fn of(dataset: &LabeledDataset) -> Self {
        CorruptionRecord {
            seed: dataset.corruption_seed(),
            fraction: dataset.corruption_fraction(),
            current: dataset.labels().iter().map(|&l| l as u8).collect(),
            pristine: dataset.pristine_labels().iter().map(|&l| l as u8).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 2 * self.current.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.fraction.to_le_bytes());
        out.extend_from_slice(&(self.current.len() as u64).to_le_bytes());
        for (&c, &p) in self.current.iter().zip(&self.pristine) {
            out.push(c);
            out.push(p);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, detail: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail,
        };
        if bytes.len() < HEADER {
            return Err(err(bytes.len(), "truncated header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(err(0, "not a corruption sidecar (bad magic)".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(err(8, format!("unsupported version {version}")));
        }
        let seed = u64_at(12);
        let fraction = f64::from_bits(u64_at(20));
        let n = u64_at(28) as usize;
        if bytes.len() != HEADER + 2 * n {
            return Err(err(
                bytes.len().min(HEADER + 2 * n),
                format!("expected {} label pairs, file holds {} bytes of records", n, bytes.len() - HEADER),
            ));
        }
        let (current, pristine) = bytes[HEADER..].chunks_exact(2).map(|p| (p[0], p[1])).unzip();
        Ok(CorruptionRecord {
            seed,
            fraction,
            current,
            pristine,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&super::formats::read_file(path)?, path)
    }

    /// Applies the stored labels to `dataset`, whose pristine labels must match.
    pub fn apply(&self, dataset: &LabeledDataset) -> Result<LabeledDataset> {
        let pristine: Vec<u8> = dataset.pristine_labels().iter().map(|&l| l as u8).collect();
        if pristine != self.pristine {
            return Err(Error::InvalidArgument(
                "sidecar pristine labels do not match the dataset".into(),
            ));
        }
        dataset.with_labels(
            self.current.iter().map(|&l| l as usize).collect(),
            self.fraction,
            self.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DatasetKind;
    use crate::tensor::Tensor;

    fn dataset() -> LabeledDataset {
        let images = Tensor::zeros(&[30, 1, 28, 28]);
        LabeledDataset::new(DatasetKind::Mnist, images, (0..30).map(|i| (i * 7) % 10).collect()).unwrap()
    }

    #[test]
    fn round_trip_restores_dataset() {
        let d = dataset();
        let c = d.corrupt(0.4, 17).unwrap();
        let rec = CorruptionRecord::of(&c);
        let bytes = rec.encode();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), 36 + 60);
        let back = CorruptionRecord::decode(&bytes, Path::new("s")).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.apply(&d).unwrap(), c);
    }

    #[test]
    fn rejects_damage() {
        let rec = CorruptionRecord::of(&dataset().corrupt(0.5, 1).unwrap());
        let bytes = rec.encode();
        assert!(CorruptionRecord::decode(&bytes[..40], Path::new("s")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CorruptionRecord::decode(&bad, Path::new("s")).is_err());

        let other = LabeledDataset::new(DatasetKind::Mnist, Tensor::zeros(&[30, 1, 28, 28]), vec![0; 30]).unwrap();
        assert!(rec.apply(&other).is_err());
    }
}
