//! Dataset ingestion: the CIFAR-10 binary format and a seeded synthetic
//! generator that keeps tests and the quickstart pipeline self-contained.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use crate::util::derive_seed;

/// One CIFAR-10 record: label byte + 3 x 32 x 32 channel-major pixel bytes.
const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: size {size} is not a multiple of the {record}-byte record")]
    BadFileSize {
        path: PathBuf,
        size: usize,
        record: usize,
    },
    #[error("{path}: record {record} has label {label} > 9")]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("cannot subsample {requested} from {available} samples")]
    BadSubsample { requested: usize, available: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images normalized to `[0, 1]` as `[n, c, h, w]` plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[c, h, w]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        [
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        ]
    }

    /// Sample `i` as a `[1, c, h, w]` batch.
    pub fn sample(&self, i: usize) -> Tensor {
        let per = self.images.len() / self.len();
        let mut shape = vec![1];
        shape.extend_from_slice(&self.images.shape()[1..]);
        Tensor::new(shape, self.images.data()[i * per..(i + 1) * per].to_vec())
            .expect("slice of validated dataset")
    }

    /// Rows `[start, end)` as a `[k, c, h, w]` batch.
    pub fn batch(&self, start: usize, end: usize) -> (Tensor, &[usize]) {
        let per = self.images.len() / self.len();
        let mut shape = vec![end - start];
        shape.extend_from_slice(&self.images.shape()[1..]);
        let t = Tensor::new(shape, self.images.data()[start * per..end * per].to_vec())
            .expect("slice of validated dataset");
        (t, &self.labels[start..end])
    }
}

fn parse_cifar_file(path: &Path) -> Result<(Vec<f32>, Vec<usize>), DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::BadFileSize {
            path: path.to_path_buf(),
            size: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        if rec[0] > 9 {
            return Err(DataError::BadLabel {
                path: path.to_path_buf(),
                record: r,
                label: rec[0],
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok((pixels, labels))
}

/// Load the standard CIFAR-10 binary batches from a directory:
/// `data_batch_1.bin` .. `data_batch_5.bin` for training and
/// `test_batch.bin` for testing. Pixels are scaled by 1/255.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let mut train_pixels = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let (p, l) = parse_cifar_file(&dir.join(format!("data_batch_{i}.bin")))?;
        train_pixels.extend(p);
        train_labels.extend(l);
    }
    let (test_pixels, test_labels) = parse_cifar_file(&dir.join("test_batch.bin"))?;
    let train_n = train_labels.len();
    let test_n = test_labels.len();
    Ok((
        Dataset {
            images: Tensor::new(vec![train_n, 3, 32, 32], train_pixels)?,
            labels: train_labels,
            split: Split::Train,
            classes: CIFAR_CLASSES,
        },
        Dataset {
            images: Tensor::new(vec![test_n, 3, 32, 32], test_pixels)?,
            labels: test_labels,
            split: Split::Test,
            classes: CIFAR_CLASSES,
        },
    ))
}

/// Load a single CIFAR-10-layout binary file (any record count).
pub fn load_cifar10_file(path: &Path, split: Split) -> Result<Dataset, DataError> {
    let (pixels, labels) = parse_cifar_file(path)?;
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        split,
        classes: CIFAR_CLASSES,
    })
}

/// Write images/labels back out in the CIFAR-10 binary layout. Values are
/// rounded to bytes; used for fixtures and the round-trip check.
pub fn write_cifar10_file(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let per = dataset.images.len() / dataset.len();
    assert_eq!(per, 3072, "CIFAR layout requires 3x32x32 images");
    let mut bytes = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for i in 0..dataset.len() {
        bytes.push(dataset.labels[i] as u8);
        for &v in &dataset.images.data()[i * per..(i + 1) * per] {
            bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1] to keep ln() finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Seeded Gaussian class-blob images: class `k` is its mean pattern plus
/// `noise`-scaled Gaussian perturbation, clamped to `[0, 1]`. Labels cycle
/// `0..classes`, so the class distribution is balanced. Zero noise collapses
/// each class onto its mean pattern.
pub fn synth_dataset(
    seed: u64,
    n: usize,
    classes: usize,
    shape: [usize; 3],
    noise: f32,
    split: Split,
) -> Result<Dataset, DataError> {
    if n == 0 || classes == 0 {
        return Err(DataError::Empty);
    }
    let per: usize = shape.iter().product();
    let [c, h, w] = shape;
    let spatial = h * w;
    // Class mean patterns come from a dedicated stream so that train/test
    // splits with different noise streams share the same blobs. Each class
    // gets a distinct per-channel base intensity plus per-pixel detail, so
    // the signal survives both spatial pooling and channel mixing.
    let mut mean_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x60a1));
    let means: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let bases: Vec<f32> = (0..c).map(|_| 0.2 + 0.6 * mean_rng.random::<f32>()).collect();
            (0..per)
                .map(|j| {
                    let base = bases[j / spatial];
                    (base + 0.15 * (mean_rng.random::<f32>() * 2.0 - 1.0)).clamp(0.05, 0.95)
                })
                .collect()
        })
        .collect();
    let noise_tag = match split {
        Split::Train => 0x7261,
        Split::Test => 0x7465,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, noise_tag));
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        for j in 0..per {
            let v = means[k][j] + noise * box_muller(&mut noise_rng) as f32;
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(&shape);
    Ok(Dataset {
        images: Tensor::new(full_shape, pixels)?,
        labels,
        split,
        classes,
    })
}

/// Seeded subsample without replacement, preserving the label distribution
/// within one sample per class (largest-remainder allocation). Selected
/// indices are emitted in their original order, so `n == len` reproduces the
/// dataset unchanged.
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || n > dataset.len() {
        return Err(DataError::BadSubsample {
            requested: n,
            available: dataset.len(),
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    // Proportional quota per class, remainders to the largest fractions.
    let total = dataset.len();
    let mut quota: Vec<usize> = Vec::with_capacity(dataset.classes);
    let mut fractions: Vec<(usize, f64)> = Vec::new();
    let mut assigned = 0usize;
    for (k, members) in by_class.iter().enumerate() {
        let exact = n as f64 * members.len() as f64 / total as f64;
        let base = exact.floor() as usize;
        quota.push(base.min(members.len()));
        assigned += quota[k];
        fractions.push((k, exact - base as f64));
    }
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut fi = 0;
    while assigned < n {
        let (k, _) = fractions[fi % fractions.len()];
        if quota[k] < by_class[k].len() {
            quota[k] += 1;
            assigned += 1;
        }
        fi += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5b5a));
    let mut picked = Vec::with_capacity(n);
    for (k, members) in by_class.iter().enumerate() {
        let mut pool = members.clone();
        // Fisher-Yates prefix selection.
        for t in 0..quota[k] {
            let j = t + (rng.random::<u64>() as usize) % (pool.len() - t);
            pool.swap(t, j);
            picked.push(pool[t]);
        }
    }
    picked.sort_unstable();
    let per = dataset.images.len() / dataset.len();
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for &i in &picked {
        pixels.extend_from_slice(&dataset.images.data()[i * per..(i + 1) * per]);
        labels.push(dataset.labels[i]);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&dataset.images.shape()[1..]);
    Ok(Dataset {
        images: Tensor::new(shape, pixels)?,
        labels,
        split: dataset.split,
        classes: dataset.classes,
    })
}
