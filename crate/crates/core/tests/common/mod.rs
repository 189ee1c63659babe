#![allow(dead_code)]

use frame_core::image::{Image, ImageShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Image with entries uniform in `[-scale, scale]`.
pub fn random_image(shape: ImageShape, scale: f64, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::new(shape, (0..shape.len()).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// 32x32 (or `side x side`) texture of hashed +-0.3 pixels.
pub fn binary_texture(side: usize) -> Image {
    let shape = ImageShape::new(side, side, 1);
    let data = (0..shape.len())
        .map(|i| {
            let h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
            if h < 1 << 23 {
                -0.3
            } else {
                0.3
            }
        })
        .collect();
    Image::new(shape, data).unwrap()
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Outcome of a finite-difference comparison over many coordinates.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdTally {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: f64,
}

impl FdTally {
    pub fn merge(&mut self, other: FdTally) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self.worst = self.worst.max(other.worst);
    }
}

/// Compares `analytic[i]` with central differences of `f` along coordinate
/// `i` of `x`. Coordinates whose one-sided slopes disagree straddle a kink
/// and are skipped.
pub fn check_fd(x: &[f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> FdTally {
    let mut tally = FdTally::default();
    let f0 = f(x);
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
        if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
            tally.skipped_kinks += 1;
            continue;
        }
        let central = (fp - fm) / (2.0 * h);
        tally.worst = tally.worst.max(rel_err(analytic[i], central, 1e-2));
        tally.checked += 1;
    }
    tally
}
