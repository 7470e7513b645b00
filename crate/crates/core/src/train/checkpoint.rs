//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "I8TRCKPT"
//! version    u32
//! arch       u32 length + UTF-8 bytes
//! epoch      u32      completed epochs
//! seed       u64
//! stream     u64      next random stream position
//! layers     u32      number of weighted layers
//! per layer: index u32, rank u32, dims u32 * rank, scale i8, weights i8 * numel
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::qtensor::QTensor;

pub const MAGIC: &[u8; 8] = b"I8TRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointLayer {
    pub index: usize,
    pub weights: QTensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub arch: String,
    pub epoch: usize,
    pub seed: u64,
    /// Random-stream position; streams are derived from `(seed, epoch,
    /// batch)`, so this is the first stream of the next epoch.
    pub stream: u64,
    pub layers: Vec<CheckpointLayer>,
}

impl Checkpoint {
    pub fn capture(spec: &NetworkSpec, epoch: usize, seed: u64, stream: u64) -> Self {
        let layers = spec
            .weighted_layers()
            .map(|(index, l)| CheckpointLayer {
                index,
                weights: l.weights.clone().expect("weighted layer"),
            })
            .collect();
        Self { arch: spec.name.clone(), epoch, seed, stream, layers }
    }

    /// Writes the stored weights into `spec`, which must be the same
    /// architecture.
    pub fn restore_into(&self, spec: &mut NetworkSpec) -> Result<()> {
        if spec.name != self.arch {
            return Err(Error::Config(format!(
                "checkpoint is for `{}`, not `{}`",
                self.arch, spec.name
            )));
        }
        let expected: Vec<usize> = spec.weighted_layers().map(|(i, _)| i).collect();
        let found: Vec<usize> = self.layers.iter().map(|l| l.index).collect();
        if expected != found {
            return Err(Error::Config(format!(
                "checkpoint weighted layers {found:?} do not match {expected:?}"
            )));
        }
        for l in &self.layers {
            let want = spec.layers[l.index].kind.weight_shape().expect("weighted");
            if l.weights.shape() != want.as_slice() {
                return Err(Error::shape("checkpoint layer", &want, l.weights.shape()));
            }
            spec.layers[l.index].weights = Some(l.weights.clone());
        }
        Ok(())
    }

    /// Preset network with the checkpoint's weights.
    pub fn to_spec(&self) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec::preset(&self.arch)?;
        self.restore_into(&mut spec)?;
        Ok(spec)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.arch.len() as u32).to_le_bytes());
        b.extend_from_slice(self.arch.as_bytes());
        b.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.stream.to_le_bytes());
        b.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            b.extend_from_slice(&(l.index as u32).to_le_bytes());
            b.extend_from_slice(&(l.weights.shape().len() as u32).to_le_bytes());
            for &d in l.weights.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            b.push(l.weights.scale() as u8);
            b.extend(l.weights.data().iter().map(|&v| v as u8));
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, 0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let arch = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, at, "architecture name is not UTF-8"))?
            .to_string();
        let epoch = r.u32()? as usize;
        let seed = r.u64()?;
        let stream = r.u64()?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let index = r.u32()? as usize;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::format(path, r.pos - 4, format!("implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let scale = r.take(1)?[0] as i8;
            let n: usize = shape.iter().product();
            let at = r.pos;
            let data: Vec<i8> = r.take(n)?.iter().map(|&v| v as i8).collect();
            let weights = QTensor::new(shape, data, scale)
                .map_err(|_| Error::format(path, at, "weight value -128 is not representable"))?;
            layers.push(CheckpointLayer { index, weights });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos, "trailing bytes"));
        }
        Ok(Self { arch, epoch, seed, stream, layers })
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never leaves a truncated checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, self.pos, format!("truncated: needed {n} more bytes")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_weights, InitScheme};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (NetworkSpec, Checkpoint) {
        let mut spec = NetworkSpec::preset("lenet-mnist").unwrap();
        init_weights(&mut spec, InitScheme::Uniform, &mut ChaCha8Rng::seed_from_u64(1));
        let ck = Checkpoint::capture(&spec, 3, 42, 7);
        (spec, ck)
    }

    #[test]
    fn round_trip() {
        let (spec, ck) = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_spec().unwrap(), spec);
    }

    #[test]
    fn rejects_corruption() {
        let (_, ck) = sample();
        let mut bytes = ck.to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT", Path::new("x")).is_err());
    }

    #[test]
    fn arch_mismatch() {
        let (_, ck) = sample();
        let mut other = NetworkSpec::preset("mlp-mnist").unwrap();
        assert!(ck.restore_into(&mut other).is_err());
    }
}
