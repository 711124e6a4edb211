use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = SIDE * SIDE * CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    /// Label bytes preceding each image.
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + IMAGE_BYTES
    }

    pub fn class_count(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn mean(self) -> [f64; 3] {
        match self {
            CifarVariant::Cifar10 => [0.4914, 0.4822, 0.4465],
            CifarVariant::Cifar100 => [0.5071, 0.4865, 0.4409],
        }
    }

    pub fn std(self) -> [f64; 3] {
        match self {
            CifarVariant::Cifar10 => [0.2470, 0.2435, 0.2616],
            CifarVariant::Cifar100 => [0.2673, 0.2564, 0.2762],
        }
    }

    /// Standard file names of the binary distribution.
    pub fn files(self, split: Split) -> &'static [&'static str] {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, Split::Test) => &["test_batch.bin"],
            (CifarVariant::Cifar100, Split::Train) => &["train.bin"],
            (CifarVariant::Cifar100, Split::Test) => &["test.bin"],
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images stored as bytes in `(N, 32, 32, 3)` channel-last order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<usize>,
    pub variant: CifarVariant,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<usize>, variant: CifarVariant, split: Split) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_BYTES {
            return Err(Error::Data(format!(
                "{} image bytes for {} labels",
                images.len(),
                labels.len()
            )));
        }
        let classes = variant.class_count();
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            variant,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.variant.class_count()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    /// Channel-last bytes of image `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
            variant: self.variant,
            split: self.split,
        }
    }

    fn extend(&mut self, other: Dataset) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
    }
}

fn split_from_name(path: &Path) -> Split {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.contains("test") {
        Split::Test
    } else {
        Split::Train
    }
}

/// Parses a binary batch file. Pixels are stored channel-major per record
/// (1024 R, 1024 G, 1024 B, each row-major); CIFAR-100 records carry a coarse
/// then a fine label byte, and the fine label is used.
pub fn load_cifar(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let record = variant.record_len();
    if bytes.is_empty() || bytes.len() % record != 0 {
        let n = (bytes.len() / record).max(1);
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            expected: format!("a non-zero multiple of {record} (e.g. {})", n * record),
            actual: bytes.len() as u64,
        });
    }
    let n = bytes.len() / record;
    let plane = SIDE * SIDE;
    let mut images = vec![0u8; n * IMAGE_BYTES];
    let mut labels = Vec::with_capacity(n);
    for (rec, out) in bytes.chunks_exact(record).zip(images.chunks_exact_mut(IMAGE_BYTES)) {
        labels.push(rec[variant.label_bytes() - 1] as usize);
        let pixels = &rec[variant.label_bytes()..];
        for p in 0..plane {
            for ch in 0..CHANNELS {
                out[p * CHANNELS + ch] = pixels[ch * plane + p];
            }
        }
    }
    Dataset::new(images, labels, variant, split_from_name(path))
}

/// Loads every file of a split from a directory laid out like the official
/// binary archives.
pub fn load_cifar_dir(dir: impl AsRef<Path>, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut out: Option<Dataset> = None;
    for name in variant.files(split) {
        let path: PathBuf = dir.join(name);
        if !path.exists() {
            return Err(Error::Data(format!("missing {}", path.display())));
        }
        let mut part = load_cifar(&path, variant)?;
        part.split = split;
        match out.as_mut() {
            Some(d) => d.extend(part),
            None => out = Some(part),
        }
    }
    out.ok_or_else(|| Error::Data("no files for split".into()))
}

/// Writes `dataset` in the binary batch format. CIFAR-100 records get the
/// fine label in both label bytes.
pub fn write_cifar(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let variant = dataset.variant;
    let plane = SIDE * SIDE;
    let mut out = Vec::with_capacity(dataset.len() * variant.record_len());
    for i in 0..dataset.len() {
        let label = dataset.labels[i] as u8;
        for _ in 0..variant.label_bytes() {
            out.push(label);
        }
        let img = dataset.image(i);
        for ch in 0..CHANNELS {
            out.extend((0..plane).map(|p| img[p * CHANNELS + ch]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record10(label: u8, r0: u8) -> Vec<u8> {
        let mut rec = vec![label];
        let mut px = vec![0u8; IMAGE_BYTES];
        px[0] = r0;
        px[1] = 7; // R of pixel (0,1)
        px[1024] = 100; // G of pixel (0,0)
        px[2048 + 33] = 200; // B of pixel (1,1)
        rec.extend(px);
        rec
    }

    #[test]
    fn reads_channel_major_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let bytes: Vec<u8> = (0..10).flat_map(|i| record10(i, 10 + i)).collect();
        fs::write(&path, bytes).unwrap();
        let d = load_cifar(&path, CifarVariant::Cifar10).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.split, Split::Train);
        assert_eq!(d.labels()[3], 3);
        let img = d.image(3);
        assert_eq!(img[0], 13);
        assert_eq!(img[1], 100);
        assert_eq!(img[3], 7);
        assert_eq!(img[(SIDE + 1) * 3 + 2], 200);
    }

    #[test]
    fn fine_label_is_used() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.bin");
        let mut rec = vec![4u8, 57];
        rec.extend(vec![0u8; IMAGE_BYTES]);
        fs::write(&path, &rec).unwrap();
        let d = load_cifar(&path, CifarVariant::Cifar100).unwrap();
        assert_eq!(d.labels(), &[57]);
        assert_eq!(d.split, Split::Test);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let mut bytes = record10(1, 1);
        bytes.extend(record10(2, 2));
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        match load_cifar(&path, CifarVariant::Cifar10) {
            Err(Error::CorruptFile { actual, expected, .. }) => {
                assert_eq!(actual, 2 * 3073 - 1);
                assert!(expected.contains("3073"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<u8> = (0..2 * IMAGE_BYTES).map(|i| (i * 31 % 251) as u8).collect();
        let d = Dataset::new(images, vec![9, 42], CifarVariant::Cifar100, Split::Train).unwrap();
        let path = dir.path().join("train.bin");
        write_cifar(&path, &d).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 2 * 3074);
        let back = load_cifar(&path, CifarVariant::Cifar100).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.image(0)[0], d.image(0)[0]);
    }

    #[test]
    fn labels_out_of_range_are_rejected() {
        let r = Dataset::new(vec![0; IMAGE_BYTES], vec![10], CifarVariant::Cifar10, Split::Train);
        assert!(r.is_err());
    }
}
