//! MNIST (IDX) and CIFAR-10 (binary) loaders, input quantization and
//! shuffled batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::qtensor::QTensor;

/// Scale of quantized inputs: pixels map to `(p - 128) / 128`.
pub const INPUT_SCALE: i8 = -7;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Raw `u8` images in NCHW order with their labels.
#[derive(Clone, PartialEq, Eq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    sample_shape: [usize; 3],
    num_classes: usize,
    split: Split,
}

impl fmt::Debug for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dataset")
            .field("len", &self.len())
            .field("sample_shape", &self.sample_shape)
            .field("split", &self.split)
            .finish()
    }
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        sample_shape: [usize; 3],
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = sample_shape.iter().product::<usize>();
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::shape("Dataset images", &[labels.len() * per], &[images.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Usage(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self { images, labels, sample_shape, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { images, labels, ..self.clone_meta() }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            sample_shape: self.sample_shape,
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Quantized `[indices.len(), C, H, W]` batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> (QTensor, Vec<usize>) {
        let mut pixels = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.sample_shape;
        let x = quantize_input(&pixels, vec![indices.len(), c, h, w]);
        (x, indices.iter().map(|&i| self.label(i)).collect())
    }
}

/// `p - 128` clamped to `[-127, 127]` at scale `-7`.
pub fn quantize_input(pixels: &[u8], shape: Vec<usize>) -> QTensor {
    let data = pixels.iter().map(|&p| (p as i16 - 128).max(-127) as i8).collect();
    QTensor::from_parts(shape, data, INPUT_SCALE)
}

/// Floating-point value represented by a quantized pixel.
pub fn pixel_value(p: u8) -> f64 {
    (p as i16 - 128).max(-127) as f64 / 128.0
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(path, offset, "truncated header"))
}

/// Parses an IDX file with the given magic, returning its dimensions and body.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, rank: usize, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::format(
            path,
            0,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let dims = (0..rank)
        .map(|d| be_u32(bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let body = &bytes[start..];
    if body.len() < len {
        return Err(Error::format(
            path,
            bytes.len(),
            format!("truncated body: expected {len} bytes after offset {start}"),
        ));
    }
    if body.len() > len {
        return Err(Error::format(path, start + len, "trailing bytes after body"));
    }
    Ok((dims, body))
}

pub fn load_mnist(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let image_bytes = read(images_path)?;
    let label_bytes = read(labels_path)?;
    let (dims, pixels) = parse_idx(&image_bytes, IDX_IMAGES_MAGIC, 3, images_path)?;
    let (ldims, labels) = parse_idx(&label_bytes, IDX_LABELS_MAGIC, 1, labels_path)?;
    if dims[0] != ldims[0] {
        return Err(Error::format(
            labels_path,
            4,
            format!("{} labels for {} images", ldims[0], dims[0]),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::format(labels_path, 8 + pos, format!("label {} out of range", labels[pos])));
    }
    Dataset::new(pixels.to_vec(), labels.to_vec(), [1, dims[1], dims[2]], 10, split)
}

/// `train-*` or `t10k-*` IDX files under `dir`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_mnist(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

pub fn load_cifar10(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                bytes.len() - bytes.len() % CIFAR_RECORD,
                format!("size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        images.reserve(bytes.len());
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if record[0] >= 10 {
                return Err(Error::format(path, r * CIFAR_RECORD, format!("label {} out of range", record[0])));
            }
            labels.push(record[0]);
            images.extend_from_slice(&record[1..]);
        }
    }
    Dataset::new(images, labels, [3, 32, 32], 10, split)
}

/// `data_batch_{1..5}.bin` or `test_batch.bin` under `dir`.
pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let paths: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    load_cifar10(&paths, split)
}

/// Sample order for one epoch: identity, or a seeded Fisher–Yates shuffle.
pub fn epoch_order<R: Rng + ?Sized>(len: usize, shuffle: bool, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

/// Iterator over quantized batches; the last partial batch is kept.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (QTensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let item = self.ds.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(item)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batches<'a, R: Rng + ?Sized>(ds: &'a Dataset, batch_size: usize, rng: &mut R, shuffle: bool) -> Batches<'a> {
    assert!(batch_size > 0, "batch size must be positive");
    Batches { ds, order: epoch_order(ds.len(), shuffle, rng), batch_size, pos: 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_cases() {
        let q = quantize_input(&[128, 255, 0, 1], vec![4]);
        assert_eq!(q.data(), &[0, 127, -127, -127]);
        assert_eq!(q.scale(), -7);
        assert_eq!(pixel_value(255), 127.0 / 128.0);
    }

    #[test]
    fn batches_cover_everything_once() {
        let ds = Dataset::new((0..70).collect(), vec![0; 70], [1, 1, 1], 10, Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sizes: Vec<usize> = batches(&ds, 32, &mut rng, true).map(|(x, _)| x.shape()[0]).collect();
        assert_eq!(sizes, vec![32, 32, 6]);
        let a = epoch_order(70, true, &mut ChaCha8Rng::seed_from_u64(9));
        let b = epoch_order(70, true, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..70).collect::<Vec<_>>());
        assert_ne!(a, sorted);
        assert_eq!(epoch_order(5, false, &mut rng), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn subset_and_take() {
        let ds = Dataset::new(vec![1, 2, 3, 4, 5, 6], vec![0, 1, 2], [1, 1, 2], 3, Split::Test).unwrap();
        let s = ds.subset(&[2, 0]);
        assert_eq!(s.images(), &[5, 6, 1, 2]);
        assert_eq!(s.labels(), &[2, 0]);
        assert_eq!(ds.take(1).images(), &[1, 2]);
        assert!(Dataset::new(vec![1], vec![3], [1, 1, 1], 3, Split::Test).is_err());
    }
}
