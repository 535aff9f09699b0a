//! Dataset ingestion: MNIST IDX files and CIFAR-10 binary batches.

use std::fs::File;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const MNIST_PIXELS: usize = MNIST_SIDE * MNIST_SIDE;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Map an 8-bit pixel onto the signed integer grid used by the first layer:
/// p in [0, 255] -> 2p - 255 in [-255, 255]. The grid is odd-valued, so it
/// never lands on 0 and every value has a well-defined sign.
#[inline]
pub fn scale_pixel(p: u8) -> i32 {
    2 * p as i32 - 255
}

/// Inverse of [`scale_pixel`].
#[inline]
pub fn unscale_pixel(v: i32) -> u8 {
    ((v + 255) / 2) as u8
}

/// One split of a dataset: flat row-major u8 images plus labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    /// Bytes per image.
    pub image_len: usize,
    /// SHA-256 over images then labels, hex-encoded.
    pub checksum: String,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * self.image_len..(i + 1) * self.image_len]
    }

    /// Scaled integer pixels of items [start, end) as batch × features.
    pub fn scaled_flat(&self, start: usize, end: usize) -> Array2<i32> {
        let n = end - start;
        Array2::from_shape_fn((n, self.image_len), |(r, c)| {
            scale_pixel(self.images[(start + r) * self.image_len + c])
        })
    }

    /// Scaled integer pixels as batch × h × w × c images.
    pub fn scaled_images(&self, start: usize, end: usize, h: usize, w: usize, c: usize) -> Result<Array4<i32>> {
        if h * w * c != self.image_len {
            return Err(Error::Shape(format!(
                "{h}x{w}x{c} does not match image length {}",
                self.image_len
            )));
        }
        let n = end - start;
        Ok(Array4::from_shape_fn((n, h, w, c), |(i, y, x, ch)| {
            scale_pixel(self.images[(start + i) * self.image_len + (y * w + x) * c + ch])
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
}

fn checksum(images: &[u8], labels: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(images);
    hasher.update(labels);
    format!("{:x}", hasher.finalize())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(buf: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(buf[offset..offset + 4].try_into().unwrap())
}

fn check_len(path: &Path, buf: &[u8], expected: usize) -> Result<()> {
    if buf.len() < expected {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            expected: expected as u64,
            found: buf.len() as u64,
        });
    }
    Ok(())
}

/// Parse an IDX image file: big-endian magic 0x00000803, count, rows, cols,
/// then count*rows*cols pixel bytes.
pub fn parse_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let buf = read_file(path)?;
    check_len(path, &buf, 16)?;
    let magic = be_u32(&buf, 0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            offset: 0,
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(&buf, 4) as usize;
    let rows = be_u32(&buf, 8) as usize;
    let cols = be_u32(&buf, 12) as usize;
    check_len(path, &buf, 16 + count * rows * cols)?;
    Ok((buf[16..16 + count * rows * cols].to_vec(), count, rows, cols))
}

/// Parse an IDX label file: big-endian magic 0x00000801, count, then count
/// label bytes.
pub fn parse_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let buf = read_file(path)?;
    check_len(path, &buf, 8)?;
    let magic = be_u32(&buf, 0);
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            offset: 0,
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(&buf, 4) as usize;
    check_len(path, &buf, 8 + count)?;
    Ok(buf[8..8 + count].to_vec())
}

fn load_idx_split(images_path: &Path, labels_path: &Path) -> Result<Split> {
    let (images, count, rows, cols) = parse_idx_images(images_path)?;
    let labels = parse_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let sum = checksum(&images, &labels);
    Ok(Split {
        images,
        labels,
        image_len: rows * cols,
        checksum: sum,
    })
}

/// Load MNIST from a directory holding the four standard IDX files.
pub fn ingest_mnist(root: &Path) -> Result<Dataset> {
    let p = |name: &str| -> PathBuf { root.join(name) };
    let train = load_idx_split(&p("train-images-idx3-ubyte"), &p("train-labels-idx1-ubyte"))?;
    let test = load_idx_split(&p("t10k-images-idx3-ubyte"), &p("t10k-labels-idx1-ubyte"))?;
    Ok(Dataset {
        train,
        test,
        classes: 10,
    })
}

fn load_cifar_batch(path: &Path, images: &mut Vec<u8>, labels: &mut Vec<u8>) -> Result<()> {
    let buf = read_file(path)?;
    if buf.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::InvalidRecord {
            path: path.display().to_string(),
            reason: format!(
                "file size {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
                buf.len()
            ),
        });
    }
    for (i, rec) in buf.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::InvalidRecord {
                path: path.display().to_string(),
                reason: format!("record {i}: label {label} out of range 0..=9"),
            });
        }
        labels.push(label);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// Load CIFAR-10 binary batches: data_batch_1..5 as train, test_batch as
/// test. Each record is 1 label byte + 3072 pixel bytes (R, G, B planes of a
/// 32x32 image).
pub fn ingest_cifar10(root: &Path) -> Result<Dataset> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        load_cifar_batch(&root.join(format!("data_batch_{i}.bin")), &mut train_images, &mut train_labels)?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    load_cifar_batch(&root.join("test_batch.bin"), &mut test_images, &mut test_labels)?;
    let image_len = 3 * 32 * 32;
    let train_sum = checksum(&train_images, &train_labels);
    let test_sum = checksum(&test_images, &test_labels);
    Ok(Dataset {
        train: Split {
            images: train_images,
            labels: train_labels,
            image_len,
            checksum: train_sum,
        },
        test: Split {
            images: test_images,
            labels: test_labels,
            image_len,
            checksum: test_sum,
        },
        classes: 10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;
    use tempfile::TempDir;

    #[test]
    fn pixel_scaling_roundtrip_and_range() {
        for p in 0..=255u8 {
            let v = scale_pixel(p);
            assert!((-255..=255).contains(&v));
            assert_eq!(v % 2 != 0, true, "grid must be odd-valued");
            assert_eq!(unscale_pixel(v), p);
        }
        assert_eq!(scale_pixel(0), -255);
        assert_eq!(scale_pixel(255), 255);
        assert_eq!(scale_pixel(128), 1);
    }

    fn write_idx_images(path: &Path, images: &[u8], count: u32, rows: u32, cols: u32) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IDX_IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        f.write_all(images).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IDX_LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn synthetic_idx_roundtrip() {
        let dir = TempDir::new().unwrap();
        let images: Vec<u8> = (0..3 * 4).map(|i| i as u8 * 7).collect();
        write_idx_images(&dir.path().join("img"), &images, 3, 2, 2);
        write_idx_labels(&dir.path().join("lab"), &[4, 2, 9]);
        let split = load_idx_split(&dir.path().join("img"), &dir.path().join("lab")).unwrap();
        assert_eq!(split.len(), 3);
        assert_eq!(split.image_len, 4);
        assert_eq!(split.image(1), &images[4..8]);
        assert_eq!(split.labels, vec![4, 2, 9]);
    }

    #[test]
    fn bad_magic_reports_offset() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("img");
        let mut f = File::create(&path).unwrap();
        f.write_all(&0xdeadbeefu32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 12]).unwrap();
        drop(f);
        match parse_idx_images(&path).unwrap_err() {
            Error::BadMagic { offset, expected, found, .. } => {
                assert_eq!(offset, 0);
                assert_eq!(expected, IDX_IMAGE_MAGIC);
                assert_eq!(found, 0xdeadbeef);
            }
            e => panic!("wrong error: {e}"),
        }
    }

    #[test]
    fn truncated_image_payload_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("img");
        // header claims 10 images of 4 bytes but only 5 bytes follow
        write_idx_images(&path, &[1, 2, 3, 4, 5], 10, 2, 2);
        assert!(matches!(parse_idx_images(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = TempDir::new().unwrap();
        write_idx_images(&dir.path().join("img"), &[0u8; 8], 2, 2, 2);
        write_idx_labels(&dir.path().join("lab"), &[1, 2, 3]);
        match load_idx_split(&dir.path().join("img"), &dir.path().join("lab")).unwrap_err() {
            Error::CountMismatch { images, labels } => assert_eq!((images, labels), (2, 3)),
            e => panic!("wrong error: {e}"),
        }
    }

    /// Deterministic synthetic CIFAR-10 fixture: 4 records whose pixels are
    /// a fixed byte pattern.
    fn synthetic_cifar(dir: &Path) {
        for b in 1..=5u8 {
            let mut f = File::create(dir.join(format!("data_batch_{b}.bin"))).unwrap();
            for r in 0..4u32 {
                f.write_all(&[(r % 10) as u8]).unwrap();
                let pixels: Vec<u8> =
                    (0..3072u32).map(|i| ((i * 31 + r * 7 + b as u32) % 251) as u8).collect();
                f.write_all(&pixels).unwrap();
            }
        }
        let mut f = File::create(dir.join("test_batch.bin")).unwrap();
        for r in 0..4u32 {
            f.write_all(&[(r % 10) as u8]).unwrap();
            let pixels: Vec<u8> = (0..3072u32).map(|i| ((i * 13 + r) % 251) as u8).collect();
            f.write_all(&pixels).unwrap();
        }
    }

    #[test]
    fn cifar_fixture_loads_with_frozen_digest() {
        let dir = TempDir::new().unwrap();
        synthetic_cifar(dir.path());
        let ds = ingest_cifar10(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 20);
        assert_eq!(ds.test.len(), 4);
        assert_eq!(ds.train.image_len, 3072);
        // digest of the R,G,B-plane layout, frozen when the fixture was authored
        assert_eq!(
            ds.test.checksum,
            "ac5eb484f1d07f47c206a8eb8f11ef8845e89e7f037f0171ffeeede8e6c2ab91"
        );
    }

    #[test]
    fn cifar_bad_label_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("test_batch.bin");
        let mut f = File::create(&path).unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD_BYTES];
        rec[0] = 11;
        f.write_all(&rec).unwrap();
        drop(f);
        let mut imgs = Vec::new();
        let mut labs = Vec::new();
        assert!(matches!(
            load_cifar_batch(&path, &mut imgs, &mut labs),
            Err(Error::InvalidRecord { .. })
        ));
    }

    #[test]
    fn cifar_ragged_file_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("test_batch.bin");
        File::create(&path).unwrap().write_all(&[0u8; 100]).unwrap();
        let mut imgs = Vec::new();
        let mut labs = Vec::new();
        assert!(matches!(
            load_cifar_batch(&path, &mut imgs, &mut labs),
            Err(Error::InvalidRecord { .. })
        ));
    }

    #[test]
    fn cifar_record_arithmetic() {
        // 10,000 records -> 30,730,000 bytes
        assert_eq!(10_000 * CIFAR_RECORD_BYTES, 30_730_000);
    }

    #[test]
    fn real_mnist_if_present() {
        // full-corpus checks run only when the canonical files are checked in
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        if !root.join("train-images-idx3-ubyte").exists() {
            eprintln!("skipping: MNIST files not present");
            return;
        }
        let ds = ingest_mnist(&root).unwrap();
        assert_eq!(ds.train.len(), 60_000);
        assert_eq!(ds.test.len(), 10_000);
        assert_eq!(ds.train.image_len, MNIST_PIXELS);
        assert!(ds.train.labels.iter().all(|&l| l <= 9));
        // first training label of the canonical corpus
        assert_eq!(ds.train.labels[0], 5);
    }
}
