//! The big-endian IDX container used by MNIST.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// A stack of 8-bit images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn read_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("IDX header is truncated".into()))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn parse_idx_images(buf: &[u8]) -> Result<IdxImages> {
    let magic = read_u32(buf, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let count = read_u32(buf, 4)? as usize;
    let rows = read_u32(buf, 8)? as usize;
    let cols = read_u32(buf, 12)? as usize;
    let body = &buf[16..];
    if body.len() != count * rows * cols {
        return Err(Error::Format(format!(
            "IDX image body has {} bytes, header announces {count}×{rows}×{cols}",
            body.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(buf, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let count = read_u32(buf, 4)? as usize;
    let body = &buf[8..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "IDX label body has {} bytes, header announces {count}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read_all(path)?)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_all(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(words: &[u32]) -> Vec<u8> {
        words.iter().flat_map(|w| w.to_be_bytes()).collect()
    }

    #[test]
    fn parses_images_and_labels() {
        let mut buf = header(&[0x803, 2, 2, 3]);
        buf.extend(0..12u8);
        let im = parse_idx_images(&buf).unwrap();
        assert_eq!((im.count, im.rows, im.cols), (2, 2, 3));
        assert_eq!(im.image(1), &[6, 7, 8, 9, 10, 11]);

        let mut buf = header(&[0x801, 3]);
        buf.extend([7, 1, 4]);
        assert_eq!(parse_idx_labels(&buf).unwrap(), vec![7, 1, 4]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(parse_idx_images(&header(&[0x801, 0, 0, 0])).is_err());
        assert!(parse_idx_images(&header(&[0x803, 1, 2, 2])).is_err());
        assert!(parse_idx_labels(&header(&[0x801])).is_err());
    }
}
