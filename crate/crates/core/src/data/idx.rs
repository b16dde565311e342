//! IDX container: `0x00 0x00 <type> <ndims>`, big-endian `u32` extents, then
//! the payload. Images are read from unsigned bytes (scaled by 1/255) or
//! big-endian `f32`; labels must be unsigned bytes.

use std::fs;
use std::path::Path;

use super::{Dataset, Extents};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;

struct Header {
    type_code: u8,
    dims: Vec<usize>,
    payload_offset: usize,
}

fn fmt_err(field: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::format("idx", field, detail)
}

fn read_u32_be(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| fmt_err(field, format!("truncated at byte offset {offset}")))
}

fn parse_header(bytes: &[u8], expected_dims: &[usize]) -> Result<Header> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic >> 16 != 0 {
        return Err(fmt_err(
            "magic",
            format!("bytes 0..2 must be zero, got {magic:#010x} at byte offset 0"),
        ));
    }
    let type_code = ((magic >> 8) & 0xFF) as u8;
    let ndims = (magic & 0xFF) as usize;
    if !expected_dims.contains(&ndims) {
        return Err(fmt_err(
            "magic",
            format!("{ndims} dimensions (magic {magic:#010x}) at byte offset 3, expected {expected_dims:?}"),
        ));
    }
    let dims = (0..ndims)
        .map(|i| read_u32_be(bytes, 4 + 4 * i, &format!("dim[{i}]")).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(Header {
        type_code,
        dims,
        payload_offset: 4 + 4 * ndims,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an image file and a label file into a [`Dataset`].
///
/// The class count is taken as one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read_file(images_path)?;
    let lb = read_file(labels_path)?;

    let ih = parse_header(&ib, &[3, 4])?;
    let (n, extents) = match ih.dims[..] {
        [n, h, w] => (n, Extents::new(1, h, w)),
        [n, c, h, w] => (n, Extents::new(c, h, w)),
        _ => unreachable!(),
    };
    if n == 0 || extents.numel() == 0 {
        return Err(fmt_err("dims", format!("empty image tensor {:?}", ih.dims)));
    }
    let d = extents.numel();
    let width = match ih.type_code {
        TYPE_U8 => 1,
        TYPE_F32 => 4,
        other => {
            return Err(fmt_err(
                "magic",
                format!("unsupported image type {other:#04x} at byte offset 2"),
            ))
        }
    };
    let need = ih.payload_offset + n * d * width;
    if ib.len() != need {
        return Err(fmt_err(
            "payload",
            format!(
                "image payload ends at byte offset {}, header implies {need}",
                ib.len()
            ),
        ));
    }
    let payload = &ib[ih.payload_offset..];
    let pixels: Vec<f32> = match ih.type_code {
        TYPE_U8 => payload.iter().map(|&b| f32::from(b) / 255.0).collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    if let Some(pos) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(fmt_err(
            "payload",
            format!(
                "pixel {} outside [0, 1] at byte offset {}",
                pixels[pos],
                ih.payload_offset + pos * width
            ),
        ));
    }

    let lh = parse_header(&lb, &[1])?;
    if lh.type_code != TYPE_U8 {
        return Err(fmt_err(
            "magic",
            format!("labels must be unsigned bytes, type {:#04x} at byte offset 2", lh.type_code),
        ));
    }
    if lh.dims[0] != n {
        return Err(Error::Data(format!(
            "{n} images ({}) but {} labels ({})",
            images_path.display(),
            lh.dims[0],
            labels_path.display()
        )));
    }
    if lb.len() != lh.payload_offset + n {
        return Err(fmt_err(
            "payload",
            format!(
                "label payload ends at byte offset {}, header implies {}",
                lb.len(),
                lh.payload_offset + n
            ),
        ));
    }
    let labels: Vec<usize> = lb[lh.payload_offset..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;

    Dataset::new(
        Tensor::new(vec![n, d], pixels)?,
        labels,
        extents,
        num_classes,
        format!("idx {} + {}", images_path.display(), labels_path.display()),
    )
}

/// Writes images as big-endian `f32` IDX so values round-trip exactly.
pub fn write_idx_images(path: impl AsRef<Path>, samples: &Tensor, extents: Extents) -> Result<()> {
    let path = path.as_ref();
    let n = samples.rows();
    let dims: Vec<usize> = if extents.channels == 1 {
        vec![n, extents.height, extents.width]
    } else {
        vec![n, extents.channels, extents.height, extents.width]
    };
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + samples.len() * 4);
    out.extend_from_slice(&[0, 0, TYPE_F32, dims.len() as u8]);
    for &d in &dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in samples.data() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&[0, 0, TYPE_U8, 1]);
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        let b = u8::try_from(y).map_err(|_| Error::Data(format!("label {y} exceeds a byte")))?;
        out.push(b);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
