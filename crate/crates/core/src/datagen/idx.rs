//! Minimal IDX reader for the MNIST image and label files.

use super::{RawDigit, PIXELS, SIDE};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, offset as u64, "stream truncated"))
}

fn expect_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != expected {
        return Err(Error::format(
            "magic",
            0,
            format!("expected {expected:#010x}, found {magic:#010x}"),
        ));
    }
    Ok(())
}

fn expect_len(bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        Err(Error::format(
            "data",
            bytes.len() as u64,
            format!("stream truncated: need {expected} bytes, have {}", bytes.len()),
        ))
    } else if bytes.len() > expected {
        Err(Error::format(
            "data",
            expected as u64,
            format!("{} trailing bytes", bytes.len() - expected),
        ))
    } else {
        Ok(())
    }
}

/// Parses an IDX3 image file of 28x28 grids.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<[u8; PIXELS]>> {
    expect_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4, "count")? as usize;
    let rows = read_u32(bytes, 8, "rows")?;
    if rows as usize != SIDE {
        return Err(Error::format("rows", 8, format!("expected 28, found {rows}")));
    }
    let cols = read_u32(bytes, 12, "cols")?;
    if cols as usize != SIDE {
        return Err(Error::format("cols", 12, format!("expected 28, found {cols}")));
    }
    expect_len(bytes, 16 + count * PIXELS)?;
    Ok(bytes[16..]
        .chunks_exact(PIXELS)
        .map(|c| c.try_into().expect("exact chunk"))
        .collect())
}

/// Parses an IDX1 label file; every label must be a digit.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    expect_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4, "count")? as usize;
    expect_len(bytes, 8 + count)?;
    let labels = bytes[8..].to_vec();
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(Error::format(
            "label",
            (8 + pos) as u64,
            format!("label {} out of range", labels[pos]),
        ));
    }
    Ok(labels)
}

/// Pairs parsed images and labels.
pub fn zip_digits(images: Vec<[u8; PIXELS]>, labels: Vec<u8>) -> Result<Vec<RawDigit>> {
    if images.len() != labels.len() {
        return Err(Error::format(
            "count",
            4,
            format!("{} images but {} labels", images.len(), labels.len()),
        ));
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(pixels, label)| RawDigit { pixels, label })
        .collect())
}
