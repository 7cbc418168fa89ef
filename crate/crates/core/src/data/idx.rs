use std::path::{Path, PathBuf};

use super::{normalize_u8, DatasetSpec, ImageSet};
use crate::error::{Result, YganError};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn ingest(file: &Path, reason: impl Into<String>) -> YganError {
    YganError::Ingest {
        file: file.to_path_buf(),
        reason: reason.into(),
    }
}

fn header(bytes: &[u8], file: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(ingest(file, format!("truncated header ({} bytes)", bytes.len())));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(ingest(file, format!("bad magic {:#010x}, expected {:#010x}", word(0), magic)));
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

/// Raw images of a big-endian IDX3 file: `(count, rows, cols, bytes)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| YganError::io(path, e))?;
    let dims = header(&bytes, path, IMAGE_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(ingest(
            path,
            format!("expected {} pixel bytes for {n}x{rows}x{cols}, found {}", n * rows * cols, body.len()),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| YganError::io(path, e))?;
    let n = header(&bytes, path, LABEL_MAGIC, 1)?[0];
    let body = &bytes[8..];
    if body.len() != n {
        return Err(ingest(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

pub(super) fn load_pair(images: &Path, labels: &Path, spec: &DatasetSpec) -> Result<ImageSet> {
    let mut set = ImageSet::new(spec.channels, spec.image_size);
    append_pair(&mut set, images, labels, spec)?;
    Ok(set)
}

fn append_pair(set: &mut ImageSet, images: &Path, labels: &Path, spec: &DatasetSpec) -> Result<()> {
    let (n, rows, cols, raw) = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    if y.len() != n {
        return Err(ingest(labels, format!("{} labels for {n} images", y.len())));
    }
    let plane = rows * cols;
    let offset = set.len();
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..n {
        let gray = &raw[i * plane..(i + 1) * plane];
        let image = if spec.channels == 3 {
            rgb.clear();
            for _ in 0..3 {
                rgb.extend_from_slice(gray);
            }
            normalize_u8(&rgb, 3, cols, rows, spec.image_size)
        } else {
            normalize_u8(gray, 1, cols, rows, spec.image_size)
        };
        set.push(&image, y[i] as usize, false, offset + i);
    }
    Ok(())
}

fn find(dir: &Path, stems: &[&str]) -> Option<PathBuf> {
    stems
        .iter()
        .flat_map(|s| [dir.join(s), dir.join(s.replacen("-idx", ".idx", 1))])
        .find(|p| p.is_file())
}

/// Loads `train-*` followed by `t10k-*` IDX files from `dir`; either pair may
/// be absent but not both.
pub(super) fn load_directory(dir: &Path, spec: &DatasetSpec) -> Result<ImageSet> {
    let mut set = ImageSet::new(spec.channels, spec.image_size);
    let mut found = false;
    for prefix in ["train", "t10k"] {
        let images = find(dir, &[&format!("{prefix}-images-idx3-ubyte")]);
        let labels = find(dir, &[&format!("{prefix}-labels-idx1-ubyte")]);
        if let (Some(images), Some(labels)) = (images, labels) {
            append_pair(&mut set, &images, &labels, spec)?;
            found = true;
        }
    }
    if !found {
        return Err(ingest(dir, "no train-/t10k- IDX image and label files found"));
    }
    Ok(set)
}
