//! Datasets: IDX loading, train/test splitting, client partitioning and
//! per-round subset sampling.
//!
//! Pixels are stored as raw bytes and scaled to `[0, 1]` only when a
//! [`Batch`] is materialised, which keeps a 70k-image dataset at ~55 MB.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Batch, Samples};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const FEATURES: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{path}: file ends before the declared payload")]
    TruncatedFile { path: PathBuf },
    #[error("label {label} out of range for {classes} classes")]
    OutOfRange { label: usize, classes: usize },
    #[error("subset of {k} requested from {len} samples")]
    SubsetTooLarge { k: usize, len: usize },
    #[error("dataset files not found in {dir}: missing {missing}")]
    DataNotFound { dir: PathBuf, missing: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Emnist,
    Fmnist,
    Synthetic,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Emnist => "emnist",
            DatasetKind::Fmnist => "fmnist",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "emnist" => Ok(DatasetKind::Emnist),
            "fmnist" | "fashion-mnist" => Ok(DatasetKind::Fmnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(format!("unknown dataset {other:?}")),
        }
    }
}

/// Labelled images with byte pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    features: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, features: usize, classes: usize) -> Result<Self, DataError> {
        if features == 0 || classes == 0 {
            return Err(DataError::InvalidArgument("dataset needs features and classes"));
        }
        if pixels.len() != labels.len() * features {
            return Err(DataError::DimensionMismatch(format!(
                "{} pixels for {} labels of {} features",
                pixels.len(),
                labels.len(),
                features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(DataError::OutOfRange {
                label: bad as usize,
                classes,
            });
        }
        Ok(Self {
            pixels,
            labels,
            features,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixel_row(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.features..(i + 1) * self.features]
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.pixel_row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            pixels,
            labels,
            features: self.features,
            classes: self.classes,
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.features].to_vec(),
            labels: self.labels[..n].to_vec(),
            features: self.features,
            classes: self.classes,
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DataError> {
        if self.features != other.features || self.classes != other.classes {
            return Err(DataError::DimensionMismatch(format!(
                "cannot concatenate {}x{} with {}x{}",
                self.features, self.classes, other.features, other.classes
            )));
        }
        let mut out = self.clone();
        out.pixels.extend_from_slice(&other.pixels);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Normalised inputs and one-hot targets for the given rows.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend(self.pixel_row(i).iter().map(|&p| p as f64 / 255.0));
            labels.push(self.labels[i] as usize);
        }
        Batch::from_labels(inputs, &labels, self.features, self.classes).expect("labels validated at construction")
    }

    pub fn to_batch(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

impl Samples for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn features(&self) -> usize {
        self.features
    }
    fn fill_input(&self, i: usize, out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(self.pixel_row(i)) {
            *o = p as f64 / 255.0;
        }
    }
    fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut raw = Vec::new();
    BufReader::new(File::open(path).map_err(io_err)?)
        .read_to_end(&mut raw)
        .map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX file into its dimension list and byte payload.
pub fn read_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let bytes = open_maybe_gz(path)?;
    let truncated = || DataError::TruncatedFile {
        path: path.to_path_buf(),
    };
    let word = |at: usize| -> Result<u32, DataError> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(truncated)
    };
    let magic = word(0)?;
    if magic != expected_magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: expected_magic,
            found: magic,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|d| word(4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let payload = bytes.get(start..start + len).ok_or_else(truncated)?;
    Ok((dims, payload.to_vec()))
}

/// Loads an image/label IDX pair, flattening each image row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let (idims, pixels) = read_idx(images_path, IMAGES_MAGIC)?;
    let (ldims, labels) = read_idx(labels_path, LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(DataError::DimensionMismatch(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    let features = idims[1..].iter().product();
    Dataset::new(pixels, labels, features, CLASSES)
}

fn transpose_images(ds: &mut Dataset) {
    let side = IMAGE_SIDE;
    let mut buf = vec![0u8; FEATURES];
    for img in ds.pixels.chunks_mut(FEATURES) {
        for r in 0..side {
            for c in 0..side {
                buf[c * side + r] = img[r * side + c];
            }
        }
        img.copy_from_slice(&buf);
    }
}

fn file_stems(kind: DatasetKind) -> [(&'static str, &'static str); 2] {
    match kind {
        DatasetKind::Emnist => [
            ("emnist-digits-train-images-idx3-ubyte", "emnist-digits-train-labels-idx1-ubyte"),
            ("emnist-digits-test-images-idx3-ubyte", "emnist-digits-test-labels-idx1-ubyte"),
        ],
        _ => [
            ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        ],
    }
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(DataError::DataNotFound {
        dir: dir.to_path_buf(),
        missing: stem.to_string(),
    })
}

/// Loads both shipped splits of a named dataset from `dir` and concatenates
/// them (training part first). Files may be gzip-compressed.
pub fn load_dir(kind: DatasetKind, dir: &Path) -> Result<Dataset, DataError> {
    if kind == DatasetKind::Synthetic {
        return Err(DataError::InvalidArgument("synthetic data is generated, not loaded"));
    }
    let mut parts = Vec::new();
    for (images, labels) in file_stems(kind) {
        let mut ds = load_idx(&locate(dir, images)?, &locate(dir, labels)?)?;
        if kind == DatasetKind::Emnist {
            transpose_images(&mut ds);
        }
        parts.push(ds);
    }
    parts[0].concat(&parts[1])
}

pub fn one_hot(label: usize, classes: usize) -> Result<Vec<f64>, DataError> {
    if label >= classes {
        return Err(DataError::OutOfRange { label, classes });
    }
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    Ok(v)
}

/// Seeded shuffle, then the first `floor(ratio * N)` samples train and the rest test.
pub fn split_train_test<R: Rng + ?Sized>(ds: &Dataset, ratio: f64, rng: &mut R) -> Result<(Dataset, Dataset), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidArgument("split ratio must lie strictly between 0 and 1"));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    let cut = ((ratio * ds.len() as f64) + 1e-9).floor() as usize;
    Ok((ds.select(&idx[..cut]), ds.select(&idx[cut..])))
}

/// Contiguous equal shares; the first `N mod m` clients get one extra sample.
pub fn partition_clients(train: &Dataset, m: usize) -> Result<Vec<Dataset>, DataError> {
    if m < 1 {
        return Err(DataError::InvalidArgument("client count must be at least 1"));
    }
    let (base, extra) = (train.len() / m, train.len() % m);
    let mut start = 0;
    Ok((0..m)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let part: Vec<usize> = (start..start + size).collect();
            start += size;
            train.select(&part)
        })
        .collect())
}

/// `k` samples without replacement under a fresh permutation.
pub fn choose_subset<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R, k: usize) -> Result<Batch, DataError> {
    if k < 1 || k > ds.len() {
        return Err(DataError::SubsetTooLarge { k, len: ds.len() });
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    Ok(ds.batch(&idx[..k]))
}

/// Draws successive disjoint blocks of `k` indices from one permutation,
/// re-permuting only when fewer than `k` unused indices remain.
#[derive(Clone, Debug)]
pub struct SubsetSampler {
    perm: Vec<usize>,
    pos: usize,
    k: usize,
}

impl SubsetSampler {
    pub fn new(len: usize, k: usize) -> Result<Self, DataError> {
        if k < 1 || k > len {
            return Err(DataError::SubsetTooLarge { k, len });
        }
        Ok(Self {
            perm: (0..len).collect(),
            pos: len,
            k,
        })
    }

    /// Sampler for `iter` rounds: block size `floor(len / iter)`.
    pub fn per_round(len: usize, iter: usize) -> Result<Self, DataError> {
        if iter < 1 {
            return Err(DataError::InvalidArgument("iteration count must be at least 1"));
        }
        Self::new(len, len / iter)
    }

    pub fn block_size(&self) -> usize {
        self.k
    }

    pub fn next_indices<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[usize] {
        if self.pos + self.k > self.perm.len() {
            self.perm.shuffle(rng);
            self.pos = 0;
        }
        let out = &self.perm[self.pos..self.pos + self.k];
        self.pos += self.k;
        out
    }
}

/// Gaussian class blobs in `FEATURES` dimensions, quantised to bytes.
///
/// Each class gets a random mean image with pixels in `[0.15, 0.85]`;
/// samples add per-pixel noise with standard deviation 0.15. Labels are
/// balanced to within one and appear in shuffled order.
pub fn synthetic_dataset(seed: u64, n: usize, classes: usize) -> Result<Dataset, DataError> {
    if classes < 1 || classes > u8::MAX as usize || n < classes {
        return Err(DataError::InvalidArgument("synthetic data needs n >= classes >= 1"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..FEATURES).map(|_| rng.gen_range(0.15..0.85)).collect())
        .collect();
    let mut labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, 0.15).expect("valid deviation");
    let mut pixels = Vec::with_capacity(n * FEATURES);
    for &l in &labels {
        for &mu in &means[l as usize] {
            let v: f64 = (mu + noise.sample(&mut rng)).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    Dataset::new(pixels, labels, FEATURES, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn tiny(n: usize) -> Dataset {
        let pixels = (0..n * 4).map(|i| i as u8).collect();
        let labels = (0..n).map(|i| (i % 3) as u8).collect();
        Dataset::new(pixels, labels, 4, 3).unwrap()
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(3, 10).unwrap(), vec![0., 0., 0., 1., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(one_hot(0, 2).unwrap(), vec![1., 0.]);
        assert!(matches!(one_hot(10, 10), Err(DataError::OutOfRange { .. })));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = tiny(10);
        let (tr, te) = split_train_test(&ds, 0.7, &mut rng(1)).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        // pixel rows are unique per sample, so compare their first bytes
        let mut firsts: Vec<u8> = tr.pixels.chunks(4).chain(te.pixels.chunks(4)).map(|r| r[0]).collect();
        firsts.sort();
        assert_eq!(firsts, (0..10).map(|i| (i * 4) as u8).collect::<Vec<_>>());
        let (tr2, _) = split_train_test(&ds, 0.7, &mut rng(1)).unwrap();
        assert_eq!(tr, tr2);
        assert!(split_train_test(&ds, 1.0, &mut rng(1)).is_err());
    }

    #[test]
    fn partition_examples() {
        let sizes = |n, m| {
            partition_clients(&tiny(n), m)
                .unwrap()
                .iter()
                .map(Dataset::len)
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(sizes(60, 3), vec![20, 20, 20]);
        assert_eq!(partition_clients(&tiny(5), 1).unwrap(), vec![tiny(5)]);
        let parts = partition_clients(&tiny(11), 4).unwrap();
        let mut joined = parts[0].clone();
        for p in &parts[1..] {
            joined = joined.concat(p).unwrap();
        }
        assert_eq!(joined, tiny(11));
    }

    #[test]
    fn subset_examples() {
        let ds = tiny(21);
        assert_eq!(SubsetSampler::per_round(21_000, 4).unwrap().block_size(), 5250);
        let all = choose_subset(&ds, &mut rng(2), 21).unwrap();
        assert_eq!(all.rows(), 21);
        assert_eq!(all, choose_subset(&ds, &mut rng(2), 21).unwrap());
        assert!(matches!(
            choose_subset(&ds, &mut rng(2), 22),
            Err(DataError::SubsetTooLarge { .. })
        ));
    }

    #[test]
    fn sampler_exhausts_before_repeating() {
        let mut s = SubsetSampler::new(10, 3).unwrap();
        let mut r = rng(4);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_indices(&mut r).to_vec()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let a = synthetic_dataset(3, 103, 10).unwrap();
        assert_eq!(a, synthetic_dataset(3, 103, 10).unwrap());
        assert_ne!(a, synthetic_dataset(4, 103, 10).unwrap());
        let counts = a.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(synthetic_dataset(0, 5, 10).is_err());
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(matches!(
            Dataset::new(vec![0; 4], vec![5], 4, 3),
            Err(DataError::OutOfRange { label: 5, .. })
        ));
        assert!(matches!(
            Dataset::new(vec![0; 5], vec![1], 4, 3),
            Err(DataError::DimensionMismatch(_))
        ));
    }
}
