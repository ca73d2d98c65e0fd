//! Portable binary checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic            8   "AL2CKPT\0"
//! version          u32 = 1
//! epoch            u64
//! dataset          u8   0 mnist, 1 fashion-mnist, 2 cifar10
//! regularizer      u8   0 bare, 1 batchnorm, 2 dropout, 3 weight decay
//! strength         f64  dropout rate / decay coefficient (0 otherwise)
//! al2 enabled      u8
//! penalty          u8   0 norm, 1 squared norm
//! schedule         5 x f64: lambda0, low factor, high factor, threshold, current
//! schedule epoch   u64
//! dropout rng      32-byte ChaCha8 seed, u64 stream, u128 word position
//! entry count      u32
//! name table       per entry: u16 name length, UTF-8 name, u8 rank, rank x u64 dims
//! payloads         per entry in table order: prod(dims) x f64
//! ```
//!
//! Entries are the model parameters, batch-norm buffers, and SGD momentum
//! buffers named `momentum.<parameter name>`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::al2::{LambdaSchedule, Penalty};
use crate::error::{Error, Result};
use crate::model::{DatasetKind, InitSeed, Model, Regularizer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AL2CKPT\0";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: u64,
    pub model: Model,
    pub al2_enabled: bool,
    pub penalty: Penalty,
    pub schedule: LambdaSchedule,
    /// One velocity tensor per model parameter, in parameter order.
    pub momentum: Vec<Tensor>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err(format!("truncated: need {n} more bytes")))?;
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.epoch);
        w.u8(self.model.dataset().tag());
        let (reg, strength) = self.model.regularizer().tag();
        w.u8(reg);
        w.f64(strength);
        w.u8(self.al2_enabled as u8);
        w.u8(match self.penalty {
            Penalty::Norm => 0,
            Penalty::SquaredNorm => 1,
        });
        let s = &self.schedule;
        for v in [s.lambda0, s.low_factor, s.high_factor, s.threshold, s.current()] {
            w.f64(v);
        }
        w.u64(s.epoch());
        let rng = self.model.dropout_rng();
        w.0.extend_from_slice(&rng.get_seed());
        w.u64(rng.get_stream());
        w.0.extend_from_slice(&rng.get_word_pos().to_le_bytes());

        let entries = self.entries();
        w.u32(entries.len() as u32);
        for (name, t) in &entries {
            w.u16(name.len() as u16);
            w.0.extend_from_slice(name.as_bytes());
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u64(d as u64);
            }
        }
        for (_, t) in &entries {
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.0
    }

    fn entries(&self) -> Vec<(String, &Tensor)> {
        let params = self.model.params().iter().map(|p| (p.name.clone(), &p.value));
        let buffers = self.model.buffers().iter().map(|b| (b.name.clone(), &b.value));
        let momentum = self
            .model
            .params()
            .iter()
            .zip(&self.momentum)
            .map(|(p, m)| (format!("{MOMENTUM_PREFIX}{}", p.name), m));
        params.chain(buffers).chain(momentum).collect()
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            r.pos = 0;
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let epoch = r.u64()?;
        let dataset = DatasetKind::from_tag(r.u8()?).ok_or_else(|| r.err("unknown dataset tag"))?;
        let reg_tag = r.u8()?;
        let strength = r.f64()?;
        let regularizer = Regularizer::from_tag(reg_tag, strength).ok_or_else(|| r.err("unknown regularizer tag"))?;
        let al2_enabled = r.u8()? != 0;
        let penalty = match r.u8()? {
            0 => Penalty::Norm,
            1 => Penalty::SquaredNorm,
            t => return Err(r.err(format!("unknown penalty tag {t}"))),
        };
        let mut sched = [0.0; 5];
        for v in &mut sched {
            *v = r.f64()?;
        }
        let sched_epoch = r.u64()?;
        let schedule = LambdaSchedule::new(sched[0], sched[1], sched[2], sched[3])
            .and_then(|s| s.with_state(sched[4], sched_epoch))
            .map_err(|e| r.err(format!("bad schedule: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(r.array::<32>()?);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(r.u128()?);

        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("entry name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            table.push((name, dims));
        }

        let mut model = Model::build(dataset, regularizer, InitSeed(0))?;
        model.set_dropout_rng(rng);
        let mut momentum: Vec<Option<Tensor>> = vec![None; model.params().len()];
        let mut seen = std::collections::HashSet::new();
        for (name, dims) in table {
            let numel: usize = dims.iter().product();
            let start = r.pos;
            let raw = r.take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let tensor = Tensor::new(dims, data).map_err(|e| r.err(format!("{name}: {e}")))?;
            if !seen.insert(name.clone()) {
                return Err(r.err(format!("duplicate entry {name}")));
            }
            let slot = if let Some(pname) = name.strip_prefix(MOMENTUM_PREFIX) {
                let i = model.params().iter().position(|p| p.name == pname);
                i.map(|i| &mut momentum[i]).map(|m| m.insert(Tensor::scalar(0.0)))
            } else if let Some(p) = model.params_mut().iter_mut().find(|p| p.name == name) {
                Some(&mut p.value)
            } else {
                model.buffers_mut().iter_mut().find(|b| b.name == name).map(|b| &mut b.value)
            };
            let Some(slot) = slot else {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: start as u64,
                    detail: format!("unexpected entry {name}"),
                });
            };
            if slot.shape() != tensor.shape() && !name.starts_with(MOMENTUM_PREFIX) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: start as u64,
                    detail: format!("{name}: shape {:?}, model expects {:?}", tensor.shape(), slot.shape()),
                });
            }
            *slot = tensor;
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        let expected = names.len() + model.buffers().len();
        let loaded = seen.iter().filter(|n| !n.starts_with(MOMENTUM_PREFIX)).count();
        if loaded != expected {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                detail: format!("checkpoint holds {loaded} of {expected} model tensors"),
            });
        }
        let momentum = momentum
            .into_iter()
            .zip(model.params())
            .map(|(m, p)| match m {
                Some(m) if m.shape() == p.value.shape() => Ok(m),
                Some(_) => Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    detail: format!("momentum for {} has the wrong shape", p.name),
                }),
                None => Ok(Tensor::zeros(p.value.shape())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            epoch,
            model,
            al2_enabled,
            penalty,
            schedule,
            momentum,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// File name for the checkpoint of `epoch` inside a run directory.
pub fn checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}
