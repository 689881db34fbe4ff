//! MNIST in the IDX format: parsing, loading, shuffling and batching.
//!
//! IDX layout (big-endian): a 4-byte magic (`0x00000803` for 3-D unsigned
//! byte images, `0x00000801` for 1-D labels), one `u32` extent per
//! dimension, then the raw bytes. Files may also be gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::objectives::one_hot;
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("unrecognised IDX magic {0:#010x}")]
    WrongMagic(u32),
    #[error("IDX data truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("empty dataset")]
    Empty,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl IdxError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            IdxError::WrongMagic(_) => 1,
            IdxError::Truncated { .. } => 2,
            IdxError::DimMismatch(_) => 3,
            IdxError::Empty => 4,
            IdxError::ZeroBatch => 5,
            IdxError::Io { .. } => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parses an uncompressed IDX buffer. The payload is returned untouched.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, IdxError> {
    let magic = read_u32(bytes, 0)?;
    let rank = match magic {
        IMAGE_MAGIC => 3,
        LABEL_MAGIC => 1,
        other => return Err(IdxError::WrongMagic(other)),
    };
    let dims = (0..rank)
        .map(|d| read_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let header = 4 + 4 * rank;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(IdxError::DimMismatch(format!(
            "header {dims:?} accounts for {expected} bytes but the file has {}",
            bytes.len()
        )));
    }
    Ok(IdxArray {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// Inverse of [`parse_idx`].
pub fn serialize_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * arr.dims.len() + arr.payload.len());
    out.extend_from_slice(&arr.magic.to_be_bytes());
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.payload);
    out
}

/// Reads a file, transparently inflating gzip content.
pub fn read_idx_file(path: &Path) -> Result<IdxArray, IdxError> {
    let io = |source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut inflated = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut inflated)
            .map_err(io)?;
        parse_idx(&inflated)
    } else {
        parse_idx(&raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn locate(dir: &Path, name: &str) -> Result<PathBuf, IdxError> {
    let candidates = [
        dir.join(name),
        dir.join(format!("{name}.gz")),
        dir.join(name.replacen("-idx", ".idx", 1)),
        dir.join(format!("{}.gz", name.replacen("-idx", ".idx", 1))),
    ];
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| IdxError::Io {
            path: dir.join(name),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such IDX file (raw or .gz)"),
        })
}

/// Grayscale images with class labels. Pixels stay as raw bytes and are
/// scaled to `[0, 1]` when batches are built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self, IdxError> {
        if labels.is_empty() {
            return Err(IdxError::Empty);
        }
        if pixels.len() != labels.len() * rows * cols {
            return Err(IdxError::DimMismatch(format!(
                "{} labels but {} pixels of {rows}x{cols} images",
                labels.len(),
                pixels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(IdxError::DimMismatch(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Dataset {
            pixels,
            labels,
            rows,
            cols,
        })
    }

    pub fn from_idx(images: IdxArray, labels: IdxArray) -> Result<Self, IdxError> {
        if images.magic != IMAGE_MAGIC || labels.magic != LABEL_MAGIC {
            return Err(IdxError::DimMismatch("expected an image file and a label file".into()));
        }
        if images.dims[0] != labels.dims[0] {
            return Err(IdxError::DimMismatch(format!(
                "{} images vs {} labels",
                images.dims[0], labels.dims[0]
            )));
        }
        Dataset::new(images.payload, labels.payload, images.dims[1], images.dims[2])
    }

    /// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`.
    pub fn load(dir: &Path, split: Split) -> Result<Self, IdxError> {
        let stem = split.stem();
        let images = read_idx_file(&locate(dir, &format!("{stem}-images-idx3-ubyte"))?)?;
        let labels = read_idx_file(&locate(dir, &format!("{stem}-labels-idx1-ubyte"))?)?;
        Dataset::from_idx(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.rows, self.cols]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// The first `limit` samples (all of them when `limit` is 0 or too big).
    pub fn head(&self, limit: usize) -> Dataset {
        let n = if limit == 0 { self.len() } else { limit.min(self.len()) };
        let px = self.rows * self.cols;
        Dataset {
            pixels: self.pixels[..n * px].to_vec(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Sample order for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub order: Vec<usize>,
}

impl BatchPlan {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self, IdxError> {
        if batch_size == 0 {
            return Err(IdxError::ZeroBatch);
        }
        if len == 0 {
            return Err(IdxError::Empty);
        }
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(BatchPlan {
            batch_size,
            seed,
            order,
        })
    }

    /// Unshuffled order, used for evaluation.
    pub fn sequential(len: usize, batch_size: usize) -> Result<Self, IdxError> {
        if batch_size == 0 {
            return Err(IdxError::ZeroBatch);
        }
        if len == 0 {
            return Err(IdxError::Empty);
        }
        Ok(BatchPlan {
            batch_size,
            seed: 0,
            order: (0..len).collect(),
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `(B, 1, rows, cols)` in `[0, 1]`.
    pub images: Tensor<T>,
    /// `(B, 10)` one-hot.
    pub labels: Tensor<T>,
    pub classes: Vec<usize>,
}

/// Random translation of up to `max_shift` pixels per axis, zero filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub max_shift: usize,
}

/// Builds every batch of `plan` in order; the last batch may be partial.
/// With `augment`, each image is shifted by offsets drawn from `rng`.
pub fn make_batches<T: Scalar>(
    data: &Dataset,
    plan: &BatchPlan,
    augment: Option<(Augment, &mut ChaCha8Rng)>,
) -> Result<Vec<Batch<T>>, IdxError> {
    if data.is_empty() {
        return Err(IdxError::Empty);
    }
    if plan.order.len() != data.len() {
        return Err(IdxError::DimMismatch(format!(
            "plan covers {} samples, dataset has {}",
            plan.order.len(),
            data.len()
        )));
    }
    let mut augment = augment;
    Ok(plan
        .order
        .chunks(plan.batch_size)
        .map(|idx| build_batch(data, idx, NUM_CLASSES, augment.as_mut().map(|(a, r)| (*a, &mut **r))))
        .collect())
}

/// Assembles the samples `idx` into one batch with `classes`-wide one-hot
/// labels.
pub fn build_batch<T: Scalar>(
    data: &Dataset,
    idx: &[usize],
    classes: usize,
    mut augment: Option<(Augment, &mut ChaCha8Rng)>,
) -> Batch<T> {
    let (rows, cols) = (data.rows, data.cols);
    let px = rows * cols;
    let inv = T::one() / T::lit(255.0);
    let mut images = Tensor::zeros(&[idx.len(), 1, rows, cols]);
    for (k, &i) in idx.iter().enumerate() {
        let src = data.raw_image(i);
        let dst = &mut images.data_mut()[k * px..(k + 1) * px];
        match augment.as_mut() {
            None => {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = T::from_u8(s).expect("byte") * inv;
                }
            }
            Some((a, rng)) => {
                let m = a.max_shift as i64;
                let dy = rng.random_range(-m..=m);
                let dx = rng.random_range(-m..=m);
                for y in 0..rows as i64 {
                    for x in 0..cols as i64 {
                        let (sy, sx) = (y - dy, x - dx);
                        if sy >= 0 && sx >= 0 && sy < rows as i64 && sx < cols as i64 {
                            let s = src[sy as usize * cols + sx as usize];
                            dst[y as usize * cols + x as usize] = T::from_u8(s).expect("byte") * inv;
                        }
                    }
                }
            }
        }
    }
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    Batch {
        images,
        labels: one_hot(&labels, classes),
        classes: labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 2x2 images built byte by byte.
    fn fixture() -> Vec<u8> {
        let mut b = vec![0x00, 0x00, 0x08, 0x03];
        b.extend_from_slice(&[0, 0, 0, 2]);
        b.extend_from_slice(&[0, 0, 0, 2]);
        b.extend_from_slice(&[0, 0, 0, 2]);
        b.extend_from_slice(&[0, 255, 7, 128, 1, 2, 3, 4]);
        b
    }

    #[test]
    fn parses_handcrafted_images() {
        let arr = parse_idx(&fixture()).unwrap();
        assert_eq!(arr.dims, vec![2, 2, 2]);
        assert_eq!(arr.payload, vec![0, 255, 7, 128, 1, 2, 3, 4]);
        assert_eq!(serialize_idx(&arr), fixture());
    }

    #[test]
    fn parses_labels() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 9, 0, 4];
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.magic, LABEL_MAGIC);
        assert_eq!(arr.dims, vec![3]);
        assert_eq!(arr.payload, vec![9, 0, 4]);
    }

    #[test]
    fn error_kinds_are_distinct() {
        let mut bad = fixture();
        bad[..4].copy_from_slice(&[0, 0, 0, 0]);
        let e1 = parse_idx(&bad).unwrap_err();
        assert!(matches!(e1, IdxError::WrongMagic(0)));

        let mut short = fixture();
        short[7] = 3; // header claims 3 images, payload holds 2
        let e2 = parse_idx(&short).unwrap_err();
        assert!(matches!(e2, IdxError::Truncated { .. }));

        let mut long = fixture();
        long.push(9);
        let e3 = parse_idx(&long).unwrap_err();
        assert!(matches!(e3, IdxError::DimMismatch(_)));

        let e4 = parse_idx(&fixture()[..6]).unwrap_err();
        assert!(matches!(e4, IdxError::Truncated { .. }));

        let codes = [e1.code(), e2.code(), e3.code()];
        assert!(codes[0] != codes[1] && codes[1] != codes[2] && codes[0] != codes[2]);
    }

    #[test]
    fn dataset_rejects_count_mismatch_and_bad_labels() {
        let images = parse_idx(&fixture()).unwrap();
        let three = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3]).unwrap();
        assert!(matches!(
            Dataset::from_idx(images.clone(), three),
            Err(IdxError::DimMismatch(_))
        ));
        let bad_label = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 2, 1, 10]).unwrap();
        assert!(Dataset::from_idx(images, bad_label).is_err());
        assert!(matches!(Dataset::new(vec![], vec![], 2, 2), Err(IdxError::Empty)));
    }

    #[test]
    fn gzip_files_are_inflated() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&fixture()).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(read_idx_file(&path).unwrap(), parse_idx(&fixture()).unwrap());
    }

    fn toy(n: usize) -> Dataset {
        let pixels = (0..n * 4).map(|i| if i % 4 == 0 { 255 } else { 0 }).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new(pixels, labels, 2, 2).unwrap()
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let d = toy(5);
        let plan = BatchPlan::new(5, 2, 1).unwrap();
        let batches = make_batches::<f32>(&d, &plan, None).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.classes.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.classes.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(batches[2].images.shape(), &[1, 1, 2, 2]);
        assert_eq!(batches[0].labels.shape(), &[2, 10]);
    }

    #[test]
    fn pixels_scale_to_unit_interval() {
        let d = toy(1);
        let b = build_batch::<f64>(&d, &[0], NUM_CLASSES, None);
        assert_eq!(b.images.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shuffling_is_seeded() {
        let a = BatchPlan::new(100, 8, 42).unwrap();
        assert_eq!(a, BatchPlan::new(100, 8, 42).unwrap());
        let mut sorted = a.order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        for s in 0..20 {
            let x = BatchPlan::new(100, 8, 1000 + s).unwrap();
            let y = BatchPlan::new(100, 8, 2000 + s).unwrap();
            assert_ne!(x.order, y.order);
        }
    }

    #[test]
    fn empty_and_zero_batch_rejected() {
        assert!(matches!(BatchPlan::new(0, 2, 0), Err(IdxError::Empty)));
        assert!(matches!(BatchPlan::new(3, 0, 0), Err(IdxError::ZeroBatch)));
    }

    #[test]
    fn augmentation_shifts_within_bounds() {
        let pixels: Vec<u8> = (0..16).map(|i| i as u8 + 1).collect();
        let d = Dataset::new(pixels, vec![3], 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let b = build_batch::<f32>(&d, &[0], NUM_CLASSES, Some((Augment { max_shift: 2 }, &mut rng)));
            let nonzero = b.images.data().iter().filter(|&&v| v > 0.0).count();
            // a shift of (dy, dx) keeps (4-|dy|)(4-|dx|) pixels
            assert!((4..=16).contains(&nonzero));
        }
    }
}
