use image::{GrayImage, Luma};
use imageproc::contrast::equalize_histogram;
use imageproc::filter::filter3x3;
use imageproc::geometric_transformations::{warp, Interpolation, Projection};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{to_u8, ImageSet};
use crate::error::{ensure, Result};

const SHARPEN: [f32; 9] = [0.0, -1.0, 0.0, -1.0, 5.0, -1.0, 0.0, -1.0, 0.0];
const EMBOSS: [f32; 9] = [-2.0, -1.0, 0.0, -1.0, 1.0, 1.0, 0.0, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    /// Maximum additive brightness shift as a fraction of full range.
    pub brightness: f32,
    /// Maximum relative contrast change.
    pub contrast: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineRange {
    pub max_rotation_deg: f32,
    /// Maximum shift as a fraction of the image side.
    pub max_translate: f32,
    pub min_scale: f32,
    pub max_scale: f32,
}

impl Default for AffineRange {
    fn default() -> Self {
        AffineRange {
            max_rotation_deg: 15.0,
            max_translate: 0.1,
            min_scale: 0.9,
            max_scale: 1.1,
        }
    }
}

/// Per-operation application probabilities and parameter ranges. The
/// default disables everything; [`AugmentPolicy::conservative`] enables the
/// full set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub sharpen: f64,
    pub emboss: f64,
    pub equalize: f64,
    pub flip: f64,
    pub jitter: Option<Jitter>,
    pub affine: Option<AffineRange>,
    /// Augmented copies per source sample when enlarging a corpus.
    pub copies: usize,
}

impl AugmentPolicy {
    pub fn conservative() -> Self {
        AugmentPolicy {
            sharpen: 0.2,
            emboss: 0.1,
            equalize: 0.2,
            flip: 0.5,
            jitter: Some(Jitter {
                brightness: 0.1,
                contrast: 0.1,
            }),
            affine: Some(AffineRange::default()),
            copies: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("sharpen", self.sharpen),
            ("emboss", self.emboss),
            ("equalize", self.equalize),
            ("flip", self.flip),
        ] {
            ensure!((0.0..=1.0).contains(&p), Config, "{} probability {} outside [0, 1]", name, p);
        }
        if let Some(a) = &self.affine {
            ensure!(
                a.max_rotation_deg >= 0.0 && a.max_translate >= 0.0 && 0.0 < a.min_scale && a.min_scale <= a.max_scale,
                Config,
                "invalid affine range {:?}",
                a
            );
        }
        if let Some(j) = &self.jitter {
            ensure!(
                j.brightness >= 0.0 && (0.0..1.0).contains(&j.contrast),
                Config,
                "invalid jitter {:?}",
                j
            );
        }
        Ok(())
    }
}

fn planes(pixels: &[f32], channels: usize, size: usize) -> Vec<GrayImage> {
    let plane = size * size;
    (0..channels)
        .map(|c| {
            let raw = pixels[c * plane..(c + 1) * plane].iter().map(|&v| to_u8(v)).collect();
            GrayImage::from_raw(size as u32, size as u32, raw).unwrap()
        })
        .collect()
}

/// Mirrors a channel-major image left to right.
pub fn flip_horizontal(pixels: &[f32], channels: usize, size: usize) -> Vec<f32> {
    let mut out = pixels.to_vec();
    for c in 0..channels {
        for y in 0..size {
            let row = c * size * size + y * size;
            out[row..row + size].reverse();
        }
    }
    out
}

/// One random composition of the enabled operations. Pixel values stay in
/// `[-1, 1]`; the label is untouched by construction.
pub fn augment<R: Rng + ?Sized>(pixels: &[f32], channels: usize, size: usize, policy: &AugmentPolicy, rng: &mut R) -> Vec<f32> {
    let mut current = pixels.to_vec();
    if rng.random_bool(policy.flip) {
        current = flip_horizontal(&current, channels, size);
    }
    let mut images = None;
    let mut with_images = |current: &[f32], f: &mut dyn FnMut(&mut Vec<GrayImage>)| {
        let imgs = images.get_or_insert_with(|| planes(current, channels, size));
        f(imgs);
    };
    if rng.random_bool(policy.sharpen) {
        with_images(&current, &mut |imgs| imgs.iter_mut().for_each(|i| *i = filter3x3::<_, f32, u8>(i, &SHARPEN)));
    }
    if rng.random_bool(policy.emboss) {
        with_images(&current, &mut |imgs| imgs.iter_mut().for_each(|i| *i = filter3x3::<_, f32, u8>(i, &EMBOSS)));
    }
    if rng.random_bool(policy.equalize) {
        with_images(&current, &mut |imgs| imgs.iter_mut().for_each(|i| *i = equalize_histogram(i)));
    }
    if let Some(j) = policy.jitter {
        let shift = rng.random_range(-j.brightness..=j.brightness) * 255.0;
        let gain = rng.random_range(1.0 - j.contrast..=1.0 + j.contrast);
        with_images(&current, &mut |imgs| {
            for img in imgs.iter_mut() {
                for p in img.pixels_mut() {
                    p.0[0] = ((p.0[0] as f32 - 127.5) * gain + 127.5 + shift).round().clamp(0.0, 255.0) as u8;
                }
            }
        });
    }
    if let Some(a) = policy.affine {
        let s = size as f32;
        let theta = rng.random_range(-a.max_rotation_deg..=a.max_rotation_deg).to_radians();
        let scale = rng.random_range(a.min_scale..=a.max_scale);
        let tx = rng.random_range(-a.max_translate..=a.max_translate) * s;
        let ty = rng.random_range(-a.max_translate..=a.max_translate) * s;
        let c = s / 2.0;
        let projection = Projection::translate(c + tx, c + ty)
            * Projection::rotate(theta)
            * Projection::scale(scale, scale)
            * Projection::translate(-c, -c);
        with_images(&current, &mut |imgs| {
            for img in imgs.iter_mut() {
                let fill = *img.get_pixel(0, 0);
                *img = warp(img, &projection, Interpolation::Bilinear, Luma(fill.0));
            }
        });
    }
    match images {
        Some(imgs) => imgs
            .iter()
            .flat_map(|i| i.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect::<Vec<_>>())
            .collect(),
        None => current,
    }
}

/// The source set followed by `policy.copies` augmented copies of each
/// sample; copies keep the label, anomaly flag and id of their source.
pub fn augment_set<R: Rng + ?Sized>(set: &ImageSet, policy: &AugmentPolicy, rng: &mut R) -> ImageSet {
    let mut out = set.clone();
    for _ in 0..policy.copies {
        for i in 0..set.len() {
            let img = augment(set.image(i), set.channels, set.size, policy, rng);
            out.push(&img, set.labels[i], set.anomalous[i], set.ids[i]);
        }
    }
    out
}
