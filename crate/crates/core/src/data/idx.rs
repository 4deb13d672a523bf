//! Big-endian IDX files (MNIST family): `u8` images and labels.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Malformed {
                what: self.what,
                detail: format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn expect_magic(cur: &mut Cursor<'_>, expected: u32) -> Result<()> {
    let actual = cur.u32()?;
    if actual != expected {
        return Err(Error::BadMagic {
            what: cur.what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Decodes an image file and a label file already in memory. Pixels are
/// scaled to `[0, 1]` and each image is flattened row-major.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = Cursor {
        bytes: images,
        pos: 0,
        what: "idx images",
    };
    expect_magic(&mut img, IDX_IMAGES_MAGIC)?;
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;

    let mut lab = Cursor {
        bytes: labels,
        pos: 0,
        what: "idx labels",
    };
    expect_magic(&mut lab, IDX_LABELS_MAGIC)?;
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(Error::Malformed {
            what: "idx labels",
            detail: format!("{label_count} labels for {count} images"),
        });
    }

    let input_dim = rows * cols;
    let pixels = img.take(count * input_dim)?;
    let raw_labels = lab.take(count)?;
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, labels, input_dim, num_classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels)
}
