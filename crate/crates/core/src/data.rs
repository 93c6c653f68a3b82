//! Dataset ingestion: bit-exact CIFAR-10 binary reader and a deterministic
//! synthetic blob dataset for fast property-level experiments.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::augment::Image;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: expected {expected} bytes ({records} records of {record_len}), got {actual}")]
    BadFileLength { path: String, expected: usize, records: usize, record_len: usize, actual: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("batch of {requested} origins exceeds dataset size {available}")]
    BatchTooLarge { requested: usize, available: usize },
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keep only the first `n` samples (reduced-scale experiments).
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }
}

const CIFAR_DIM: usize = 32;
/// Peak intensity of the synthetic class blob, relative to the 0.05 noise floor.
const BLOB_AMPLITUDE: f64 = 0.03;
const CIFAR_PIXELS: usize = CIFAR_DIM * CIFAR_DIM;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_PIXELS;
const CIFAR_RECORDS_PER_FILE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Read one CIFAR-10 binary batch file: records of 3073 bytes, 1 label byte
/// followed by 1024 red, 1024 green, 1024 blue row-major pixel bytes.
fn read_cifar_file(path: &Path, out: &mut Dataset) -> Result<(), DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() % CIFAR_RECORD != 0 || bytes.is_empty() {
        let records = bytes.len() / CIFAR_RECORD;
        return Err(DataError::BadFileLength {
            path: path.display().to_string(),
            expected: (records.max(1)) * CIFAR_RECORD,
            records: CIFAR_RECORDS_PER_FILE,
            record_len: CIFAR_RECORD,
            actual: bytes.len(),
        });
    }
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        out.labels.push(record[0] as usize);
        let mut img = Image::new(CIFAR_DIM, CIFAR_DIM);
        for (dst, &b) in img.data.iter_mut().zip(&record[1..]) {
            *dst = b as f64 / 255.0;
        }
        out.images.push(img);
    }
    Ok(())
}

/// Load the standard CIFAR-10 binary batches from `dir`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let mut ds = Dataset { images: Vec::new(), labels: Vec::new(), class_count: 10 };
    match split {
        Split::Train => {
            for i in 1..=5 {
                read_cifar_file(&dir.join(format!("data_batch_{i}.bin")), &mut ds)?;
            }
        }
        Split::Test => read_cifar_file(&dir.join("test_batch.bin"), &mut ds)?,
    }
    Ok(ds)
}

/// Serialize a dataset back to the CIFAR-10 record format. Pixels are
/// quantized with round(v * 255).
pub fn write_cifar10(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        bytes.push(label as u8);
        for &v in &img.data {
            bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(&bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Deterministic synthetic dataset: each class renders a Gaussian-intensity
/// blob with a class-specific hue and center on a uniform-noise floor.
pub fn gen_synthetic(classes: usize, per_class: usize, seed: u64) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::TooFewClasses(classes));
    }
    let dim = CIFAR_DIM;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut ds = Dataset { images: Vec::new(), labels: Vec::new(), class_count: classes };
    // Class prototypes: distinct base hue, blob center on a circle.
    let centers: Vec<(f64, f64)> = (0..classes)
        .map(|c| {
            let ang = c as f64 / classes as f64 * std::f64::consts::TAU;
            (dim as f64 / 2.0 + 8.0 * ang.sin(), dim as f64 / 2.0 + 8.0 * ang.cos())
        })
        .collect();
    for class in 0..classes {
        let base_hue = class as f64 / classes as f64;
        for _ in 0..per_class {
            let sigma = 5.0 * (1.0 + rng.gen_range(-0.2..0.2));
            let cy = centers[class].0 + rng.gen_range(-4.0..4.0);
            let cx = centers[class].1 + rng.gen_range(-4.0..4.0);
            let hue = base_hue + rng.gen_range(-0.05..0.05);
            let (r, g, b) = hue_to_rgb(hue);
            let mut img = Image::new(dim, dim);
            for y in 0..dim {
                for x in 0..dim {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    // Peak amplitude is deliberately close to the noise floor:
                    // a strong blob makes raw pixel neighbours solve the task
                    // outright, leaving nothing for representation learning to
                    // demonstrate.
                    let intensity =
                        BLOB_AMPLITUDE * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                    let noise = rng.gen_range(0.0..0.05);
                    img.set(0, y, x, (intensity * r + noise).clamp(0.0, 1.0));
                    img.set(1, y, x, (intensity * g + noise).clamp(0.0, 1.0));
                    img.set(2, y, x, (intensity * b + noise).clamp(0.0, 1.0));
                }
            }
            ds.images.push(img);
            ds.labels.push(class);
        }
    }
    Ok(ds)
}

fn hue_to_rgb(hue: f64) -> (f64, f64, f64) {
    let h6 = hue.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    }
}

/// One epoch of origin batches: a seeded permutation of the dataset chopped
/// into batches of `n` origins; the ragged tail is dropped.
pub struct EpochBatches {
    order: Vec<usize>,
    n: usize,
    cursor: usize,
}

impl EpochBatches {
    pub fn new(dataset_len: usize, n: usize, rng: &mut StdRng) -> Result<Self, DataError> {
        if n > dataset_len {
            return Err(DataError::BatchTooLarge { requested: n, available: dataset_len });
        }
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(rng);
        Ok(Self { order, n, cursor: 0 })
    }

    pub fn batch_count(&self) -> usize {
        self.order.len() / self.n
    }
}

impl Iterator for EpochBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor + self.n > self.order.len() {
            return None; // tail dropped
        }
        let batch = self.order[self.cursor..self.cursor + self.n].to_vec();
        self.cursor += self.n;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn cifar_fixture_roundtrip_and_exact_pixels() {
        let tmp = tempfile::tempdir().unwrap();
        // Hand-built fixture: 2 records with known bytes.
        let mut bytes = Vec::new();
        for rec in 0..2u8 {
            bytes.push(rec); // label
            for i in 0..3072usize {
                bytes.push(((i + rec as usize * 7) % 256) as u8);
            }
        }
        let path = tmp.path().join("test_batch.bin");
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10(tmp.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![0, 1]);
        // First record, first pixel of each channel.
        assert_eq!(ds.images[0].get(0, 0, 0), 0.0 / 255.0);
        assert_eq!(ds.images[0].get(1, 0, 0), 1024.0 % 256.0 / 255.0);
        assert_eq!(ds.images[0].get(2, 0, 0), 2048.0 % 256.0 / 255.0);
        // Row-major within a channel.
        assert_eq!(ds.images[0].get(0, 0, 5), 5.0 / 255.0);
        assert_eq!(ds.images[0].get(0, 1, 0), 32.0 / 255.0);

        let out = tmp.path().join("rewritten.bin");
        write_cifar10(&ds, &out).unwrap();
        assert_eq!(fs::read(&out).unwrap(), bytes, "byte-exact round trip");
    }

    #[test]
    fn cifar_wrong_length_errors_with_path() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("test_batch.bin");
        fs::write(&path, vec![0u8; 100]).unwrap();
        match load_cifar10(tmp.path(), Split::Test) {
            Err(DataError::BadFileLength { path: p, actual, .. }) => {
                assert!(p.contains("test_batch.bin"));
                assert_eq!(actual, 100);
            }
            other => panic!("expected BadFileLength, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_deterministic() {
        let a = gen_synthetic(4, 64, 0).unwrap();
        let b = gen_synthetic(4, 64, 0).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn synthetic_single_class_rejected() {
        assert!(matches!(gen_synthetic(1, 8, 0), Err(DataError::TooFewClasses(1))));
    }

    #[test]
    fn synthetic_classes_are_separable() {
        for seed in 0..10 {
            let ds = gen_synthetic(2, 16, seed).unwrap();
            let dist = |a: &Image, b: &Image| -> f64 {
                a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>()
            };
            let mut intra = (0.0, 0usize);
            let mut inter = (0.0, 0usize);
            for i in 0..ds.len() {
                for j in i + 1..ds.len() {
                    let d = dist(&ds.images[i], &ds.images[j]);
                    if ds.labels[i] == ds.labels[j] {
                        intra = (intra.0 + d, intra.1 + 1);
                    } else {
                        inter = (inter.0 + d, inter.1 + 1);
                    }
                }
            }
            let intra = intra.0 / intra.1 as f64;
            let inter = inter.0 / inter.1 as f64;
            assert!(inter > intra, "seed {seed}: inter {inter} !> intra {intra}");
        }
    }

    #[test]
    fn epoch_batching_counts_and_disjointness() {
        let mut rng = StdRng::seed_from_u64(0);
        let batches: Vec<_> = EpochBatches::new(50_000, 512, &mut rng).unwrap().collect();
        assert_eq!(batches.len(), 97, "tail dropped");
        let mut seen = HashSet::new();
        for b in &batches {
            for &i in b {
                assert!(seen.insert(i), "batches within an epoch must be disjoint");
            }
        }
    }

    #[test]
    fn epoch_order_deterministic_per_seed() {
        let a: Vec<_> = EpochBatches::new(100, 10, &mut StdRng::seed_from_u64(3)).unwrap().collect();
        let b: Vec<_> = EpochBatches::new(100, 10, &mut StdRng::seed_from_u64(3)).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_larger_than_dataset_rejected() {
        let mut rng = StdRng::seed_from_u64(0);
        assert!(EpochBatches::new(10, 11, &mut rng).is_err());
    }
}
