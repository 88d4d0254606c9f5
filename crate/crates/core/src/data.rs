//! Dataset ingestion (MNIST IDX, CIFAR-10 binary), deterministic splits and
//! class-balanced sampling of the trusted clean baseline set.

use std::collections::HashSet;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binfmt::read_file;
use crate::error::{Error, Result};
use crate::rng::{seeded, Stream};
use crate::tensor::Tensor;

/// Images in `[0, 1]` laid out as `[N, C, H, W]`, with labels and stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    images: Tensor,
    labels: Vec<usize>,
    ids: Vec<u64>,
    num_classes: usize,
}

impl ImageBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, ids: Vec<u64>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid(format!(
                "image batch must be rank 4, got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if labels.len() != n || ids.len() != n {
            return Err(Error::invalid(format!(
                "{n} images but {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        let mut seen = HashSet::with_capacity(n);
        if !ids.iter().all(|id| seen.insert(*id)) {
            return Err(Error::invalid("sample ids must be unique"));
        }
        Ok(Self {
            images,
            labels,
            ids,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        ImageBatch {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples (or all of them when `n >= len`).
    pub fn head(&self, n: usize) -> ImageBatch {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Consecutive sub-batches of at most `size` samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = ImageBatch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
            self.select(&idx)
        })
    }

    /// Same labels and ids with different pixels, e.g. after perturbation.
    pub fn with_images(&self, images: Tensor) -> Result<ImageBatch> {
        if images.shape() != self.images.shape() {
            return Err(Error::shape("with_images", images.shape(), self.images.shape()));
        }
        ImageBatch::new(images, self.labels.clone(), self.ids.clone(), self.num_classes)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// SHA-256 over ids, labels and pixel bytes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (&id, &label) in self.ids.iter().zip(&self.labels) {
            hasher.update(id.to_le_bytes());
            hasher.update((label as u32).to_le_bytes());
        }
        for v in self.images.data() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// A train/test pair as shipped by the dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: ImageBatch,
    pub test: ImageBatch,
}

/// Ids of test samples are offset so they never collide with training ids.
pub const TEST_ID_OFFSET: u64 = 1 << 32;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = read_file(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 16 + body.len().min(need) as u64,
            message: format!("expected {need} pixel bytes, found {}", body.len()),
        });
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8 + body.len().min(n) as u64,
            message: format!("expected {n} label bytes, found {}", body.len()),
        });
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn bytes_to_unit(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 255.0).collect()
}

/// Decodes an IDX image/label pair into a batch.
pub fn load_idx_pair(images: &Path, labels: &Path, num_classes: usize, id_offset: u64) -> Result<ImageBatch> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images)?, images)?;
    let label_bytes = parse_idx_labels(&read_maybe_gz(labels)?, labels)?;
    if label_bytes.len() != n {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            offset: 4,
            message: format!("{} labels for {n} images in {}", label_bytes.len(), images.display()),
        });
    }
    let tensor = Tensor::new(vec![n, 1, rows, cols], bytes_to_unit(&pixels))?;
    ImageBatch::new(
        tensor,
        label_bytes.iter().map(|&l| l as usize).collect(),
        (0..n as u64).map(|i| id_offset + i).collect(),
        num_classes,
    )
}

fn find_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for candidate in [stem.to_string(), format!("{stem}.gz")] {
            let p = dir.join(&candidate);
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::io(
        dir.join(stems[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    ))
}

/// Loads the four MNIST IDX files (raw or gzip) from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let train_images = find_file(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?;
    let train_labels = find_file(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?;
    let test_images = find_file(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?;
    let test_labels = find_file(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?;
    Ok(Dataset {
        train: load_idx_pair(&train_images, &train_labels, 10, 0)?,
        test: load_idx_pair(&test_images, &test_labels, 10, TEST_ID_OFFSET)?,
    })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Decodes CIFAR-10 binary records (one label byte + 3072 channel-major pixels).
pub fn parse_cifar10(bytes: &[u8], path: &Path, id_offset: u64) -> Result<ImageBatch> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            message: format!("file size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (i * CIFAR_RECORD) as u64,
                message: format!("label byte {} out of range", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    ImageBatch::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        (0..n as u64).map(|i| id_offset + i).collect(),
        10,
    )
}

/// Encodes a batch of 3×32×32 images back to CIFAR-10 records, quantizing to bytes.
pub fn encode_cifar10(batch: &ImageBatch) -> Result<Vec<u8>> {
    if batch.image_shape() != [3, 32, 32] {
        return Err(Error::shape("encode_cifar10", &batch.image_shape(), &[3, 32, 32]));
    }
    let mut out = Vec::with_capacity(batch.len() * CIFAR_RECORD);
    for i in 0..batch.len() {
        out.push(batch.labels()[i] as u8);
        out.extend(batch.image(i).iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut parts = Vec::new();
    let mut offset = 0u64;
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        let part = parse_cifar10(&read_file(&path)?, &path, offset)?;
        offset += part.len() as u64;
        parts.push(part);
    }
    let test_path = dir.join("test_batch.bin");
    let test = parse_cifar10(&read_file(&test_path)?, &test_path, TEST_ID_OFFSET)?;
    Ok(Dataset {
        train: concat(&parts)?,
        test,
    })
}

fn concat(parts: &[ImageBatch]) -> Result<ImageBatch> {
    let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
    let [c, h, w] = first.image_shape();
    let n: usize = parts.iter().map(ImageBatch::len).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for p in parts {
        data.extend_from_slice(p.images().data());
        labels.extend_from_slice(p.labels());
        ids.extend_from_slice(p.ids());
    }
    ImageBatch::new(Tensor::new(vec![n, c, h, w], data)?, labels, ids, first.num_classes())
}

/// How the shipped training set is divided.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    /// Training samples kept after the validation split; `None` keeps the rest.
    #[serde(default)]
    pub train_size: Option<usize>,
    pub validation_size: usize,
    pub baseline_per_class: usize,
    /// Sample the baseline per class; otherwise uniformly with the same total.
    #[serde(default = "default_true")]
    pub balanced: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_size: None,
            validation_size: 5000,
            baseline_per_class: 100,
            balanced: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: ImageBatch,
    pub validation: ImageBatch,
    /// The trusted clean set, a subset of `train`.
    pub baseline: ImageBatch,
}

/// Seeded disjoint train/validation split plus the clean baseline sample.
pub fn split(source: &ImageBatch, spec: &SplitSpec) -> Result<Splits> {
    let n = source.len();
    if spec.validation_size >= n {
        return Err(Error::invalid(format!(
            "validation size {} leaves no training data out of {n}",
            spec.validation_size
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(spec.seed, Stream::Split));
    let (val_idx, rest) = order.split_at(spec.validation_size);
    let train_len = spec.train_size.unwrap_or(rest.len());
    if train_len > rest.len() {
        return Err(Error::invalid(format!(
            "train size {train_len} exceeds the {} samples left after validation",
            rest.len()
        )));
    }
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = rest[..train_len].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let train = source.select(&train_idx);
    let validation = source.select(&val_idx);
    let baseline = sample_clean_baseline(&train, spec)?;
    Ok(Splits {
        train,
        validation,
        baseline,
    })
}

/// Draws `baseline_per_class` samples of every class from `train`.
pub fn sample_clean_baseline(train: &ImageBatch, spec: &SplitSpec) -> Result<ImageBatch> {
    let classes = train.num_classes();
    let per_class = spec.baseline_per_class;
    let mut rng = seeded(spec.seed, Stream::Baseline);
    let mut chosen = if spec.balanced {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &l) in train.labels().iter().enumerate() {
            by_class[l].push(i);
        }
        let mut chosen = Vec::with_capacity(per_class * classes);
        for (class, mut members) in by_class.into_iter().enumerate() {
            if members.len() < per_class {
                return Err(Error::InsufficientSamples {
                    class,
                    available: members.len(),
                    requested: per_class,
                });
            }
            members.shuffle(&mut rng);
            chosen.extend_from_slice(&members[..per_class]);
        }
        chosen
    } else {
        let total = per_class * classes;
        if total > train.len() {
            return Err(Error::invalid(format!(
                "baseline of {total} requested from {} training samples",
                train.len()
            )));
        }
        let mut all: Vec<usize> = (0..train.len()).collect();
        all.shuffle(&mut rng);
        all.truncate(total);
        all
    };
    chosen.sort_unstable();
    Ok(train.select(&chosen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize, classes: usize) -> ImageBatch {
        let images = Tensor::from_fn(&[n, 1, 2, 2], |i| (i % 7) as f32 / 7.0);
        ImageBatch::new(
            images,
            (0..n).map(|i| i % classes).collect(),
            (0..n as u64).collect(),
            classes,
        )
        .unwrap()
    }

    #[test]
    fn idx_zero_image_decodes_to_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        std::fs::write(&img, encode_idx_images(2, 28, 28, &[0u8; 2 * 784])).unwrap();
        std::fs::write(&lbl, encode_idx_labels(&[3, 9])).unwrap();
        let batch = load_idx_pair(&img, &lbl, 10, 0).unwrap();
        assert_eq!(batch.images().shape(), &[2, 1, 28, 28]);
        assert!(batch.images().data().iter().all(|&v| v == 0.0));
        assert_eq!(batch.labels(), &[3, 9]);
    }

    #[test]
    fn idx_gzip_is_transparent() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.gz");
        let lbl = dir.path().join("lbl");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&encode_idx_images(1, 2, 2, &[0, 255, 51, 102])).unwrap();
        std::fs::write(&img, enc.finish().unwrap()).unwrap();
        std::fs::write(&lbl, encode_idx_labels(&[1])).unwrap();
        let batch = load_idx_pair(&img, &lbl, 10, 0).unwrap();
        assert_eq!(batch.images().data(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn corrupted_magic_names_offset() {
        let mut bytes = encode_idx_images(1, 2, 2, &[0; 4]);
        bytes[3] = 0x04;
        let err = parse_idx_images(&bytes, Path::new("x")).unwrap_err();
        match err {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_images_rejected() {
        let mut bytes = encode_idx_images(2, 2, 2, &[0; 8]);
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(
            parse_idx_images(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn label_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        std::fs::write(&img, encode_idx_images(2, 2, 2, &[0; 8])).unwrap();
        std::fs::write(&lbl, encode_idx_labels(&[1, 2, 3])).unwrap();
        assert!(load_idx_pair(&img, &lbl, 10, 0).is_err());
    }

    #[test]
    fn cifar_record_length_checked() {
        let err = parse_cifar10(&vec![0u8; CIFAR_RECORD + 5], Path::new("c"), 0).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn cifar_label_and_round_trip() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 6;
        bytes[CIFAR_RECORD] = 2;
        for (i, b) in bytes.iter_mut().enumerate() {
            if i % CIFAR_RECORD != 0 {
                *b = (i % 251) as u8;
            }
        }
        let batch = parse_cifar10(&bytes, Path::new("c"), 0).unwrap();
        assert_eq!(batch.labels(), &[6, 2]);
        assert_eq!(batch.image_shape(), [3, 32, 32]);
        assert_eq!(encode_cifar10(&batch).unwrap(), bytes);
    }

    #[test]
    fn balanced_baseline_is_exact_and_deterministic() {
        let data = synthetic(400, 10);
        let spec = SplitSpec {
            seed: 3,
            train_size: None,
            validation_size: 50,
            baseline_per_class: 10,
            balanced: true,
        };
        let a = split(&data, &spec).unwrap();
        let b = split(&data, &spec).unwrap();
        assert_eq!(a.baseline.len(), 100);
        assert!(a.baseline.class_histogram().iter().all(|&c| c == 10));
        assert_eq!(a.baseline.ids(), b.baseline.ids());
        let val: HashSet<u64> = a.validation.ids().iter().copied().collect();
        assert!(a.baseline.ids().iter().all(|id| !val.contains(id)));
        assert!(a.train.ids().iter().all(|id| !val.contains(id)));
    }

    #[test]
    fn insufficient_class_samples() {
        let data = synthetic(30, 10);
        let spec = SplitSpec {
            baseline_per_class: 4,
            validation_size: 0,
            ..SplitSpec::default()
        };
        assert!(matches!(
            sample_clean_baseline(&data, &spec),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn pixel_range_enforced() {
        let images = Tensor::full(&[1, 1, 1, 1], 1.5);
        assert!(ImageBatch::new(images, vec![0], vec![0], 2).is_err());
    }
}
