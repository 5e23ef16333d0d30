//! Dataset container, MNIST IDX ingestion (gzip-transparent), and the
//! deterministic synthetic-blobs generator used for fast tests.

use crate::error::{LapError, Result};
use crate::tensor::{Shape, Tensor};
use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

/// Labeled classification examples stored contiguously: `inputs` has shape
/// (N,) + per-example shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Dataset> {
        if inputs.rank() < 2 {
            return Err(LapError::Shape(
                "dataset inputs need shape (count,) + example shape".into(),
            ));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(LapError::CountMismatch {
                images: inputs.shape()[0],
                labels: labels.len(),
            });
        }
        if class_count == 0 || labels.iter().any(|&l| l >= class_count) {
            return Err(LapError::Data(format!(
                "labels must lie below class_count={class_count}"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Shape of a single example.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn example_len(&self) -> usize {
        self.example_shape().iter().product()
    }

    /// Copy of example `i`.
    pub fn example(&self, i: usize) -> Tensor {
        let n = self.example_len();
        let data = self.inputs.data()[i * n..(i + 1) * n].to_vec();
        Tensor::new(self.example_shape().to_vec(), data).expect("validated at construction")
    }

    /// Batch tensor for the given example indices, shape (len,) + example shape.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(LapError::InvalidArgument("empty batch".into()));
        }
        let n = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(LapError::InvalidArgument(format!(
                    "example index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.inputs.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        let mut shape: Shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// First `count` examples as a new dataset.
    pub fn take(&self, count: usize) -> Result<Dataset> {
        let count = count.min(self.len());
        let indices: Vec<usize> = (0..count).collect();
        let (inputs, labels) = self.gather(&indices)?;
        Dataset::new(inputs, labels, self.class_count)
    }
}

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Read a file, transparently decompressing when gzip-compressed.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| LapError::Data(format!("gzip decode of {}: {e}", path.display())))?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(LapError::Truncated {
            path: path.display().to_string(),
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[off],
        bytes[off + 1],
        bytes[off + 2],
        bytes[off + 3],
    ]))
}

/// Parse an IDX image/label pair into a dataset of (1, rows, cols) examples
/// with pixels scaled to [0,1]. Either file may be gzip-compressed.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(LapError::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_MAGIC_IMAGES,
            found: magic,
        });
    }
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let payload = count
        .checked_mul(rows * cols)
        .ok_or_else(|| LapError::Data("image header overflows".into()))?;
    if img.len() < 16 + payload {
        return Err(LapError::Truncated {
            path: images_path.display().to_string(),
            expected: 16 + payload,
            found: img.len(),
        });
    }

    let lab = read_maybe_gz(labels_path)?;
    let lmagic = be_u32(&lab, 0, labels_path)?;
    if lmagic != IDX_MAGIC_LABELS {
        return Err(LapError::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_MAGIC_LABELS,
            found: lmagic,
        });
    }
    let lcount = be_u32(&lab, 4, labels_path)? as usize;
    if lab.len() < 8 + lcount {
        return Err(LapError::Truncated {
            path: labels_path.display().to_string(),
            expected: 8 + lcount,
            found: lab.len(),
        });
    }
    if count != lcount {
        return Err(LapError::CountMismatch {
            images: count,
            labels: lcount,
        });
    }

    let data: Vec<f64> = img[16..16 + payload]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = lab[8..8 + lcount].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(LapError::Data(format!(
            "label {bad} out of MNIST range in {}",
            labels_path.display()
        )));
    }
    let inputs = Tensor::new(vec![count, 1, rows, cols], data)?;
    Dataset::new(inputs, labels, 10)
}

/// Environment variable overriding the MNIST directory.
pub const DATA_DIR_ENV: &str = "LAPNET_DATA_DIR";

/// MNIST file lookup order: `$LAPNET_DATA_DIR`, `./data/mnist`, then the
/// repository checkout relative to this crate.
pub fn mnist_dir() -> PathBuf {
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let cwd = PathBuf::from("data/mnist");
    if cwd.is_dir() {
        return cwd;
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(LapError::Data(format!(
        "{stem}[.gz] not found under {}; set {DATA_DIR_ENV} to the MNIST directory",
        dir.display()
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Load an MNIST split from [`mnist_dir`].
pub fn load_mnist(split: MnistSplit) -> Result<Dataset> {
    let dir = mnist_dir();
    let (images, labels) = match split {
        MnistSplit::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        MnistSplit::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    load_mnist_idx(&find_idx(&dir, images)?, &find_idx(&dir, labels)?)
}

/// Gaussian blobs around well-separated seeded centers: class c sits on
/// coordinate axis (c mod dim) at alternating sign, radius 6, unit noise,
/// plus a small seeded jitter so distinct seeds give distinct geometry.
pub fn synthetic_blobs(classes: usize, dim: usize, count: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(LapError::InvalidArgument(
            "synthetic blobs need at least 2 classes".into(),
        ));
    }
    if dim == 0 {
        return Err(LapError::InvalidArgument("blob dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![vec![0.0f64; dim]; classes];
    for (c, center) in centers.iter_mut().enumerate() {
        for v in center.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let axis = c % dim;
        let sign = if (c / dim).is_multiple_of(2) { 1.0 } else { -1.0 };
        center[axis] += 6.0 * sign;
    }
    let mut data = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let c = i % classes;
        for d in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(centers[c][d] + noise);
        }
        labels.push(c);
    }
    if count == 0 {
        // An empty dataset still carries its shape contract.
        return Ok(Dataset {
            inputs: Tensor::zeros(vec![1, dim]),
            labels: Vec::new(),
            class_count: classes,
        });
    }
    Dataset::new(Tensor::new(vec![count, dim], data)?, labels, classes)
}

#[cfg(test)]
pub(crate) fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize) {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        assert_eq!(img.len(), rows * cols);
        bytes.extend_from_slice(img);
    }
    std::fs::write(path, bytes).unwrap();
}

#[cfg(test)]
pub(crate) fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes).unwrap();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_round_trips_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lab_path = dir.path().join("labs");
        let a: Vec<u8> = (0..6).collect();
        let b: Vec<u8> = (0..6).map(|v| 255 - v).collect();
        write_idx_images(&img_path, &[a.clone(), b.clone()], 2, 3);
        write_idx_labels(&lab_path, &[7, 0]);
        let ds = load_mnist_idx(&img_path, &lab_path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.example_shape(), &[1, 2, 3]);
        assert_eq!(ds.labels(), &[7, 0]);
        let ex0 = ds.example(0);
        for (got, want) in ex0.data().iter().zip(&a) {
            assert_eq!(*got, f64::from(*want) / 255.0);
        }
        let ex1 = ds.example(1);
        for (got, want) in ex1.data().iter().zip(&b) {
            assert_eq!(*got, f64::from(*want) / 255.0);
        }
    }

    #[test]
    fn bad_magic_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lab_path = dir.path().join("labs");
        std::fs::write(&img_path, 0x0000_0999u32.to_be_bytes()).unwrap();
        write_idx_labels(&lab_path, &[1]);
        match load_mnist_idx(&img_path, &lab_path) {
            Err(LapError::BadMagic { found, .. }) => assert_eq!(found, 0x999),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lab_path = dir.path().join("labs");
        write_idx_images(&img_path, &[vec![1u8; 4]], 2, 2);
        let full = std::fs::read(&img_path).unwrap();
        std::fs::write(&img_path, &full[..full.len() - 2]).unwrap();
        write_idx_labels(&lab_path, &[1]);
        match load_mnist_idx(&img_path, &lab_path) {
            Err(LapError::Truncated { expected, found, .. }) => {
                assert_eq!(expected, 20);
                assert_eq!(found, 18);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lab_path = dir.path().join("labs");
        write_idx_images(&img_path, &[vec![0u8; 4], vec![0u8; 4]], 2, 2);
        write_idx_labels(&lab_path, &[1, 2, 3]);
        match load_mnist_idx(&img_path, &lab_path) {
            Err(LapError::CountMismatch { images, labels }) => {
                assert_eq!((images, labels), (2, 3));
            }
            other => panic!("expected CountMismatch, got {other:?}"),
        }
    }

    #[test]
    fn gzip_and_plain_agree() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lab_path = dir.path().join("labs");
        write_idx_images(&img_path, &[(0..9).collect()], 3, 3);
        write_idx_labels(&lab_path, &[4]);
        let plain = load_mnist_idx(&img_path, &lab_path).unwrap();

        let gz_img = dir.path().join("imgs.gz");
        let raw = std::fs::read(&img_path).unwrap();
        let mut enc =
            flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        std::io::Write::write_all(&mut enc, &raw).unwrap();
        std::fs::write(&gz_img, enc.finish().unwrap()).unwrap();
        let zipped = load_mnist_idx(&gz_img, &lab_path).unwrap();
        assert_eq!(plain, zipped);
    }

    #[test]
    fn blobs_deterministic_and_separated() {
        let a = synthetic_blobs(2, 10, 200, 9).unwrap();
        let b = synthetic_blobs(2, 10, 200, 9).unwrap();
        assert_eq!(a, b);
        let c = synthetic_blobs(2, 10, 200, 10).unwrap();
        assert_ne!(a, c);

        // Nearest-center classification should be perfect at this separation.
        let mut centers = vec![vec![0.0; 10]; 2];
        let mut counts = [0usize; 2];
        for i in 0..a.len() {
            let ex = a.example(i);
            let l = a.labels()[i];
            for d in 0..10 {
                centers[l][d] += ex.data()[d];
            }
            counts[l] += 1;
        }
        for (c, n) in centers.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut wrong = 0;
        for i in 0..a.len() {
            let ex = a.example(i);
            let dist = |c: &Vec<f64>| -> f64 {
                c.iter()
                    .zip(ex.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            };
            let pred = if dist(&centers[0]) <= dist(&centers[1]) { 0 } else { 1 };
            if pred != a.labels()[i] {
                wrong += 1;
            }
        }
        assert_eq!(wrong, 0);
    }

    #[test]
    fn empty_blobs_allowed() {
        let d = synthetic_blobs(3, 4, 0, 1).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.class_count(), 3);
    }

    #[test]
    fn committed_mnist_loads() {
        let test = load_mnist(MnistSplit::Test).unwrap();
        assert_eq!(test.len(), 10_000);
        assert_eq!(test.example_shape(), &[1, 28, 28]);
        assert_eq!(test.labels()[0], 7);
    }
}
