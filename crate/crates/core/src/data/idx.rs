//! IDX container files (the MNIST distribution format), unsigned-byte only.
//!
//! Layout: two zero bytes, a type byte (`0x08` for `u8`), a rank byte, then
//! `rank` big-endian `u32` dimensions and the row-major payload.

use std::fs;
use std::path::Path;

use super::LabeledSet;
use crate::error::{Error, Result};
use crate::layer::DomainTag;
use crate::tensor::Tensor;

const TYPE_U8: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "file shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(0, format!("bad magic {:02x} {:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != TYPE_U8 {
        return Err(format_err(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(format_err(3, "rank 0"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(bytes.len(), format!("truncated header for rank {rank}")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(4, "dimension product overflows"))?;
    let end = header
        .checked_add(count)
        .ok_or_else(|| format_err(4, "dimension product overflows"))?;
    if bytes.len() < end {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {count} bytes after offset {header}"),
        ));
    }
    if bytes.len() > end {
        return Err(format_err(end, "trailing bytes after payload"));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..end].to_vec(),
    })
}

pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    if array.dims.is_empty() || array.dims.len() > 255 {
        return Err(Error::Param(format!("IDX rank {} out of range", array.dims.len())));
    }
    if array.dims.iter().product::<usize>() != array.data.len() {
        return Err(Error::shape("IDX dims do not match payload length"));
    }
    let mut out = vec![0, 0, TYPE_U8, array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::Param(format!("IDX dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(array)?).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Combine an image file (rank 3, `n×h×w`) and a label file (rank 1) into
/// an `n×1×h×w` set scaled to `[0, 1]`, with labels 0–9.
pub fn images_and_labels(images: &IdxArray, labels: &IdxArray, domain: DomainTag) -> Result<LabeledSet> {
    let &[n, h, w] = images.dims.as_slice() else {
        return Err(format_err(
            3,
            format!("image file has rank {}, expected 3", images.dims.len()),
        ));
    };
    let &[nl] = labels.dims.as_slice() else {
        return Err(format_err(
            3,
            format!("label file has rank {}, expected 1", labels.dims.len()),
        ));
    };
    if n != nl {
        return Err(format_err(4, format!("image count {n} differs from label count {nl}")));
    }
    if let Some(pos) = labels.data.iter().position(|&l| l > 9) {
        return Err(format_err(8 + pos, format!("label {} outside 0–9", labels.data[pos])));
    }
    let pixels = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    LabeledSet::new(
        Tensor::new(vec![n, 1, h, w], pixels)?,
        labels.data.iter().map(|&l| l as usize).collect(),
        10,
        domain,
    )
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledSet> {
    images_and_labels(&read(images)?, &read(labels)?, DomainTag::Source)
}
