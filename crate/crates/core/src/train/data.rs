use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated ({len} bytes, expected {expected})")]
    Truncated { path: PathBuf, len: usize, expected: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("sample {index} has label {label}, expected < {classes}")]
    Label { index: usize, label: usize, classes: usize },
    #[error("{path}: length {len} is not a multiple of the {CIFAR_RECORD}-byte record")]
    RecordLength { path: PathBuf, len: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("images must be [n, c, h, w], got {0:?}")]
    Shape(Vec<usize>),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

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

/// Normalized images `[n, c, h, w]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(DataError::Shape(images.shape().to_vec()));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::Label {
                index,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// `[c, h, w]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape"),
            labels,
        )
    }

    /// Samples in `indices` order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices);
        Self::new(images, labels, self.num_classes, self.split)
    }

    /// Keeps `floor(fraction * n_c)` samples of every class `c`, chosen
    /// uniformly under `seed`, in their original order.
    pub fn stratified_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(DataError::Fraction(fraction));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for class in 0..self.num_classes {
            let members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            let k = (fraction * members.len() as f64).floor() as usize;
            keep.extend(sample(&mut rng, members.len(), k).into_iter().map(|j| members[j]));
        }
        keep.sort_unstable();
        self.subset(&keep)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            len: bytes.len(),
            expected: header,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            len: bytes.len(),
            expected: header,
        });
    }
    let shape: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            len: bytes.len(),
            expected,
        });
    }
    Ok(shape)
}

/// Reads an IDX image/label file pair (optionally gzip-compressed). Pixels
/// are scaled to [0, 1] and normalized with the MNIST mean and deviation.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_file(ip)?;
    let labels = read_file(lp)?;
    let ishape = idx_header(ip, &images, IDX_IMAGES_MAGIC, 3)?;
    let lshape = idx_header(lp, &labels, IDX_LABELS_MAGIC, 1)?;
    if ishape[0] != lshape[0] {
        return Err(DataError::CountMismatch {
            images: ishape[0],
            labels: lshape[0],
        });
    }
    let n = ishape[0];
    let pixels = &images[16..16 + n * ishape[1] * ishape[2]];
    let data = pixels
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    let tensor = Tensor::new(vec![n, 1, ishape[1], ishape[2]], data).expect("idx payload size");
    let labels = labels[8..8 + n].iter().map(|&l| l as usize).collect();
    Dataset::new(tensor, labels, 10, Split::Train)
}

/// Reads CIFAR-10 binary batches and keeps a per-class `fraction` of them.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P], fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Fraction(fraction));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::RecordLength {
                path: path.to_path_buf(),
                len: bytes.len(),
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(DataError::Label {
                    index: labels.len(),
                    label,
                    classes: 10,
                });
            }
            labels.push(label);
            for (c, plane) in record[1..].chunks_exact(1024).enumerate() {
                data.extend(plane.iter().map(|&p| (p as f32 / 255.0 - CIFAR10_MEAN[c]) / CIFAR10_STD[c]));
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(DataError::Empty);
    }
    let images = Tensor::new(vec![n, 3, 32, 32], data).expect("cifar payload size");
    Dataset::new(images, labels, 10, Split::Train)?.stratified_fraction(fraction, seed)
}

/// Random horizontal flip and 4-pixel zero-pad random crop, per sample.
pub fn augment_batch(batch: &mut Tensor<f32>, rng: &mut impl Rng) {
    const PAD: isize = 4;
    let s = batch.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    for sample in batch.data_mut().chunks_exact_mut(per) {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(-PAD..=PAD);
        let dx = rng.gen_range(-PAD..=PAD);
        let src = sample.to_vec();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    };
                    sample[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
}
