use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ImageSet;

/// Procedural corpus: class `k` is a bright bar at angle `k·π/N` through a
/// jittered center, on a dark background with mild pixel noise.
pub fn synthetic_shapes(num_classes: usize, per_class: usize, size: usize, channels: usize, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.05).unwrap();
    let mut set = ImageSet::new(channels, size);
    let plane = size * size;
    let mut image = vec![0f32; channels * plane];
    let width = size as f32 / 12.0;
    for i in 0..num_classes * per_class {
        let class = i % num_classes;
        let angle = class as f32 * std::f32::consts::PI / num_classes as f32;
        let (sin, cos) = angle.sin_cos();
        let jitter = size as f32 / 10.0;
        let cx = size as f32 / 2.0 + rng.random_range(-jitter..jitter);
        let cy = size as f32 / 2.0 + rng.random_range(-jitter..jitter);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let dist = (dx * sin - dy * cos).abs();
                let v = 2.0 * (-(dist / width).powi(2)).exp() - 1.0 + noise.sample(&mut rng);
                for c in 0..channels {
                    image[c * plane + y * size + x] = v.clamp(-1.0, 1.0);
                }
            }
        }
        set.push(&image, class, false, i);
    }
    set
}
