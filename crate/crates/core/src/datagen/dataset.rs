use std::path::Path;

use rand::seq::SliceRandom;

use super::idx::{parse_idx_images, parse_idx_labels, zip_digits};
use super::render::{composite_into, Background, Pose};
use super::transform::{DigitMask, TransformKind};
use super::{RawDigit, FLAT_LEN, PIXELS};
use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ndmath::DenseMatrix;
use crate::rng::{derive_seed, stream, tag};

pub const CACHE_MAGIC: &[u8; 9] = b"LATOP-DS1";
pub const CACHE_VERSION: u32 = 1;
const RECORD_LEN: u32 = 1 + 4 + 1 + 8 + (PIXELS / 8) as u32;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// One source digit: its mask plus the background shared by all its views.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitRecord {
    pub split: Split,
    /// Index into the original MNIST file (train file for train/val).
    pub source_index: u32,
    pub mask: DigitMask,
    pub background: Background,
}

impl DigitRecord {
    pub fn label(&self) -> u8 {
        self.mask.label
    }

    pub fn render_into(&self, pose: Pose, out: &mut [f64]) -> Result<()> {
        super::render::render_into(&self.mask, &self.background, pose, out)
    }
}

/// Deterministic 80/20 partition of `digits` after dropping class 9.
/// Returns source indices; validation gets `floor(0.2 n)`.
pub fn split_train_val(digits: &[RawDigit], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut keep: Vec<usize> = (0..digits.len()).filter(|&i| digits[i].label != 9).collect();
    keep.shuffle(&mut stream(seed, &[tag::SPLIT]));
    let n_val = keep.len() / 5;
    let val = keep.split_off(keep.len() - n_val);
    (keep, val)
}

/// The corpus: masks and backgrounds for every digit, grouped by split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    /// Transform the cache was prepared for; `None` accepts any.
    pub transform: Option<TransformKind>,
    pub train: Vec<DigitRecord>,
    pub val: Vec<DigitRecord>,
    pub test: Vec<DigitRecord>,
}

fn record(split: Split, source_index: usize, digit: &RawDigit, seed: u64) -> Result<DigitRecord> {
    let split_tag = if split == Split::Test { 1 } else { 0 };
    let id = derive_seed(seed, &[tag::BACKGROUND, split_tag, source_index as u64]);
    Ok(DigitRecord {
        split,
        source_index: source_index as u32,
        mask: DigitMask::from_pixels(&digit.pixels, digit.label)?,
        background: Background::from_id(id),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Adds the file path to a format error's field so messages name the file.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format {
            field,
            offset,
            message,
        } => Error::Format {
            field: format!("{}:{field}", path.display()),
            offset,
            message,
        },
        other => other,
    })
}

impl Dataset {
    pub fn from_digits(
        train_digits: &[RawDigit],
        test_digits: &[RawDigit],
        seed: u64,
        transform: Option<TransformKind>,
    ) -> Result<Self> {
        let (train_idx, val_idx) = split_train_val(train_digits, seed);
        let build = |split, idx: &[usize], src: &[RawDigit]| -> Result<Vec<DigitRecord>> {
            idx.iter().map(|&i| record(split, i, &src[i], seed)).collect()
        };
        let test_idx: Vec<usize> = (0..test_digits.len())
            .filter(|&i| test_digits[i].label != 9)
            .collect();
        Ok(Dataset {
            seed,
            transform,
            train: build(Split::Train, &train_idx, train_digits)?,
            val: build(Split::Val, &val_idx, train_digits)?,
            test: build(Split::Test, &test_idx, test_digits)?,
        })
    }

    /// Loads the four uncompressed MNIST IDX files from `dir`.
    pub fn from_mnist_dir(dir: &Path, seed: u64, transform: Option<TransformKind>) -> Result<Self> {
        let load_pair = |images: &str, labels: &str| -> Result<Vec<RawDigit>> {
            let ip = dir.join(images);
            let lp = dir.join(labels);
            let imgs = in_file(&ip, parse_idx_images(&read_file(&ip)?))?;
            let labs = in_file(&lp, parse_idx_labels(&read_file(&lp)?))?;
            in_file(&lp, zip_digits(imgs, labs))
        };
        let train = load_pair(MNIST_FILES[0], MNIST_FILES[1])?;
        let test = load_pair(MNIST_FILES[2], MNIST_FILES[3])?;
        Self::from_digits(&train, &test, seed, transform)
    }

    pub fn split(&self, split: Split) -> &[DigitRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn accepts(&self, kind: TransformKind) -> bool {
        self.transform.is_none_or(|t| t == kind)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.train.len() + self.val.len() + self.test.len();
        let mut out = Vec::with_capacity(32 + n * (4 + RECORD_LEN as usize));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(transform_tag(self.transform));
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for r in self.train.iter().chain(&self.val).chain(&self.test) {
            out.extend_from_slice(&RECORD_LEN.to_le_bytes());
            out.push(r.split.tag());
            out.extend_from_slice(&r.source_index.to_le_bytes());
            out.push(r.mask.label);
            out.extend_from_slice(&r.background.id.to_le_bytes());
            out.extend_from_slice(&r.mask.bits.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(9, "magic")? != CACHE_MAGIC {
            return Err(Error::format("magic", 0, "not a LATOP-DS1 dataset cache"));
        }
        let version = cur.u32("version")?;
        if version != CACHE_VERSION {
            return Err(Error::format(
                "version",
                9,
                format!("unsupported version {version}"),
            ));
        }
        let seed = cur.u64("seed")?;
        let tpos = cur.pos as u64;
        let transform = transform_from_tag(cur.u8("transform")?)
            .ok_or_else(|| Error::format("transform", tpos, "unknown transform tag"))?;
        let count = cur.u32("count")?;
        let mut ds = Dataset {
            seed,
            transform,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for _ in 0..count {
            let start = cur.pos as u64;
            let len = cur.u32("record_length")?;
            if len != RECORD_LEN {
                return Err(Error::format(
                    "record_length",
                    start,
                    format!("expected {RECORD_LEN}, found {len}"),
                ));
            }
            let split = Split::from_tag(cur.u8("split")?)
                .ok_or_else(|| Error::format("split", start + 4, "unknown split tag"))?;
            let source_index = cur.u32("source_index")?;
            let lpos = cur.pos as u64;
            let label = cur.u8("label")?;
            if label > 8 {
                return Err(Error::format("label", lpos, format!("label {label} not in 0..=8")));
            }
            let bg = cur.u64("background_id")?;
            let bits: &[u8; PIXELS / 8] = cur.take(PIXELS / 8, "mask")?.try_into().expect("sized");
            let rec = DigitRecord {
                split,
                source_index,
                mask: DigitMask {
                    bits: super::transform::BitGrid::from_bytes(bits),
                    label,
                },
                background: Background::from_id(bg),
            };
            match split {
                Split::Train => ds.train.push(rec),
                Split::Val => ds.val.push(rec),
                Split::Test => ds.test.push(rec),
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::format("data", cur.pos as u64, "trailing bytes after records"));
        }
        Ok(ds)
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        in_file(path, Self::from_bytes(&read_file(path)?))
    }
}

fn transform_tag(t: Option<TransformKind>) -> u8 {
    match t {
        None => 0,
        Some(TransformKind::Rotation) => 1,
        Some(TransformKind::TranslateX) => 2,
        Some(TransformKind::TranslateY) => 3,
        Some(TransformKind::CompoundXY) => 4,
    }
}

fn transform_from_tag(t: u8) -> Option<Option<TransformKind>> {
    match t {
        0 => Some(None),
        1..=4 => Some(Some(TransformKind::ALL[t as usize - 1])),
        _ => None,
    }
}

/// Rows rendered per work item in [`render_batch`].
pub const RENDER_CHUNK: usize = 64;

/// Renders `(record, pose)` pairs into the rows of a `n x 2352` matrix.
pub fn render_batch(items: &[(&DigitRecord, Pose)], exec: Exec) -> Result<DenseMatrix> {
    let chunks = exec.map_chunks(items, RENDER_CHUNK, |_, chunk| -> Result<Vec<f64>> {
        let mut buf = vec![0.0; chunk.len() * FLAT_LEN];
        for (row, (rec, pose)) in buf.chunks_exact_mut(FLAT_LEN).zip(chunk) {
            rec.render_into(*pose, row)?;
        }
        Ok(buf)
    });
    let mut data = Vec::with_capacity(items.len() * FLAT_LEN);
    for c in chunks {
        data.extend(c?);
    }
    DenseMatrix::from_vec(items.len(), FLAT_LEN, data)
}

/// Plain composite of a record, used by tests that bypass poses.
pub fn render_identity(rec: &DigitRecord) -> Vec<f64> {
    let mut out = vec![0.0; FLAT_LEN];
    composite_into(&rec.mask.bits, &rec.background, &mut out);
    out
}
