use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSet;
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteColor {
    pub name: String,
    pub rgb: [u8; 3],
}

/// Red, green, blue, cyan, yellow, purple, violet, brown, dark green, orange.
pub fn default_palette() -> Vec<PaletteColor> {
    [
        ("red", [230, 0, 0]),
        ("green", [0, 230, 0]),
        ("blue", [0, 0, 230]),
        ("cyan", [0, 230, 230]),
        ("yellow", [240, 230, 0]),
        ("purple", [128, 0, 128]),
        ("violet", [238, 130, 238]),
        ("brown", [139, 69, 19]),
        ("dark_green", [0, 100, 0]),
        ("orange", [255, 140, 0]),
    ]
    .into_iter()
    .map(|(name, rgb)| PaletteColor {
        name: name.to_string(),
        rgb,
    })
    .collect()
}

/// Color-MNIST samples with both factor labels.
#[derive(Clone, Debug)]
pub struct ColorMnist {
    /// Three-channel images; `labels` hold the digit.
    pub set: ImageSet,
    pub colors: Vec<usize>,
}

/// Thresholds each grayscale digit at mid intensity, inverts it so the
/// stroke is black, and paints the background with a uniformly drawn
/// palette color.
pub fn make_color_mnist(source: &ImageSet, palette: &[PaletteColor], seed: u64) -> Result<ColorMnist> {
    ensure!(source.channels == 1, Input, "Color-MNIST needs grayscale input, got {} channels", source.channels);
    ensure!(!palette.is_empty(), Config, "palette is empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = source.size * source.size;
    let mut set = ImageSet::new(3, source.size);
    let mut colors = Vec::with_capacity(source.len());
    let mut out = vec![0f32; 3 * plane];
    for i in 0..source.len() {
        let color = rng.random_range(0..palette.len());
        let rgb = palette[color].rgb.map(|v| v as f32 / 127.5 - 1.0);
        for (p, &v) in source.image(i).iter().enumerate() {
            let stroke = v > 0.0;
            for c in 0..3 {
                out[c * plane + p] = if stroke { -1.0 } else { rgb[c] };
            }
        }
        set.push(&out, source.labels[i], source.anomalous[i], source.ids[i]);
        colors.push(color);
    }
    Ok(ColorMnist { set, colors })
}
