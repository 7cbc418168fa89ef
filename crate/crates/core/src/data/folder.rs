use std::path::{Path, PathBuf};

use super::{normalize_u8, to_u8, ImageSet};
use crate::error::{Result, YganError};

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| YganError::io(dir, e))? {
        out.push(entry.map_err(|e| YganError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn decode(path: &Path, size: usize, channels: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| YganError::Ingest {
        file: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planar = if channels == 1 {
        img.to_luma8().into_raw()
    } else {
        let rgb = img.to_rgb8().into_raw();
        (0..3).flat_map(|c| rgb.iter().skip(c).step_by(3).copied().collect::<Vec<_>>()).collect()
    };
    Ok(normalize_u8(&planar, channels, w, h, size))
}

/// Loads `root/<class>/*.{png,jpg}` with labels assigned by sorted class
/// directory name. Files under `root/<class>/anomalous/` are flagged as
/// anomalous members of that class.
pub fn load_image_folder(root: &Path, size: usize, channels: usize) -> Result<(ImageSet, Vec<String>)> {
    let mut set = ImageSet::new(channels, size);
    let mut names = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = names.len();
        names.push(class_dir.file_name().unwrap().to_string_lossy().into_owned());
        for (dir, anomalous) in [(class_dir.clone(), false), (class_dir.join("anomalous"), true)] {
            if !dir.is_dir() {
                continue;
            }
            for file in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
                let image = decode(&file, size, channels)?;
                let id = set.len();
                set.push(&image, label, anomalous, id);
            }
        }
    }
    if names.is_empty() {
        return Err(YganError::Ingest {
            file: root.to_path_buf(),
            reason: "no class directories".into(),
        });
    }
    Ok((set, names))
}

/// Writes one channel-major `[-1, 1]` image as PNG (or any format implied by
/// the extension).
pub fn write_image(path: &Path, pixels: &[f32], channels: usize, width: usize, height: usize) -> Result<()> {
    let plane = width * height;
    let result = if channels == 1 {
        let raw: Vec<u8> = pixels.iter().map(|&v| to_u8(v)).collect();
        image::GrayImage::from_raw(width as u32, height as u32, raw)
            .expect("pixel count matches dimensions")
            .save(path)
    } else {
        let raw: Vec<u8> = (0..plane)
            .flat_map(|i| (0..3).map(move |c| (c, i)))
            .map(|(c, i)| to_u8(pixels[c * plane + i]))
            .collect();
        image::RgbImage::from_raw(width as u32, height as u32, raw)
            .expect("pixel count matches dimensions")
            .save(path)
    };
    result.map_err(YganError::from)
}
