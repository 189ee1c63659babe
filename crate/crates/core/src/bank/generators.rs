//! Classical linear filter banks (Gabor pairs, difference of Gaussians) and
//! random multi-layer banks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, ConvLayer, FilterBank, Padding, Pool};
use crate::error::{Error, Result};

/// Envelope aspect ratio: the Gaussian is twice as long along the stripes as across.
const GABOR_ASPECT: f64 = 0.5;
/// Surround-to-centre width ratio of the DoG.
const DOG_RATIO: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaborPhase {
    Even,
    Odd,
}

fn gabor_half_width(scale: f64) -> usize {
    (3.0 * scale / GABOR_ASPECT).ceil() as usize
}

fn dog_half_width(size: f64) -> usize {
    (3.0 * DOG_RATIO * size).ceil() as usize
}

/// Unnormalized Gabor function at `(x, y)` (x to the right, y down): carrier
/// of wavelength `2 * scale` along the rotated x axis, envelope with
/// `sigma = scale` across and `sigma / aspect` along the stripes.
pub(crate) fn gabor_value(scale: f64, theta: f64, phase: GaborPhase, x: f64, y: f64) -> f64 {
    let xr = x * theta.cos() + y * theta.sin();
    let yr = -x * theta.sin() + y * theta.cos();
    let sigma = scale;
    let wavelength = 2.0 * scale;
    let envelope =
        (-(xr * xr + GABOR_ASPECT * GABOR_ASPECT * yr * yr) / (2.0 * sigma * sigma)).exp();
    let arg = 2.0 * PI * xr / wavelength;
    envelope
        * match phase {
            GaborPhase::Even => arg.cos(),
            GaborPhase::Odd => arg.sin(),
        }
}

fn zero_mean_unit_norm(mut k: Vec<f64>) -> Vec<f64> {
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    k.iter_mut().for_each(|v| *v /= norm);
    k
}

/// Square Gabor kernel of side `2 * half + 1`, zero-mean and unit L2 norm.
/// Returns `(side, values row-major)`.
pub fn gabor_kernel(scale: f64, theta: f64, phase: GaborPhase) -> (usize, Vec<f64>) {
    let half = gabor_half_width(scale);
    let side = 2 * half + 1;
    let mut k = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let (x, y) = (col as f64 - half as f64, row as f64 - half as f64);
            k.push(gabor_value(scale, theta, phase, x, y));
        }
    }
    (side, zero_mean_unit_norm(k))
}

/// Centre-surround kernel `G(size) - G(1.6 size)`, zero-sum and unit L2 norm.
pub fn dog_kernel(size: f64) -> (usize, Vec<f64>) {
    let half = dog_half_width(size);
    let side = 2 * half + 1;
    let gauss = |r2: f64, s: f64| (-r2 / (2.0 * s * s)).exp() / (2.0 * PI * s * s);
    let mut k = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let (x, y) = (col as f64 - half as f64, row as f64 - half as f64);
            let r2 = x * x + y * y;
            k.push(gauss(r2, size) - gauss(r2, DOG_RATIO * size));
        }
    }
    (side, zero_mean_unit_norm(k))
}

/// Embeds a `side x side` kernel in the centre of a `target x target` grid.
fn embed(side: usize, k: &[f64], target: usize) -> Vec<f64> {
    let off = (target - side) / 2;
    let mut out = vec![0.0; target * target];
    for r in 0..side {
        out[(r + off) * target + off..(r + off) * target + off + side]
            .copy_from_slice(&k[r * side..(r + 1) * side]);
    }
    out
}

fn single_layer_bank(kernels: Vec<(usize, Vec<f64>)>) -> Result<FilterBank> {
    let side = kernels.iter().map(|(s, _)| *s).max().unwrap_or(1);
    let n = kernels.len();
    let mut flat = Vec::with_capacity(n * side * side);
    for (s, k) in &kernels {
        flat.extend(embed(*s, k, side));
    }
    let layer = ConvLayer::new(n, 1, (side, side), flat, vec![0.0; n])?
        .with_padding(Padding::Zero)
        .with_activation(Activation::Abs);
    FilterBank::new(1, vec![layer])
}

/// One-layer bank of even/odd Gabor pairs: for each scale, for each of the
/// `orientations` angles `pi * o / orientations`, the even then the odd kernel.
pub fn make_gabor_bank(scales: &[f64], orientations: usize) -> Result<FilterBank> {
    if scales.is_empty() || orientations == 0 {
        return Err(Error::InvalidArgument(
            "gabor bank needs at least one scale and one orientation".into(),
        ));
    }
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("gabor scales must be positive".into()));
    }
    let mut kernels = Vec::new();
    for &scale in scales {
        for o in 0..orientations {
            let theta = PI * o as f64 / orientations as f64;
            kernels.push(gabor_kernel(scale, theta, GaborPhase::Even));
            kernels.push(gabor_kernel(scale, theta, GaborPhase::Odd));
        }
    }
    single_layer_bank(kernels)
}

/// One-layer bank of difference-of-Gaussian kernels, one per size.
pub fn make_dog_bank(sizes: &[f64]) -> Result<FilterBank> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("dog bank needs at least one size".into()));
    }
    if sizes.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("dog sizes must be positive".into()));
    }
    single_layer_bank(sizes.iter().map(|&s| dog_kernel(s)).collect())
}

/// Layer shapes and options for a randomly initialized bank.
#[derive(Debug, Clone)]
pub struct RandomBankSpec {
    pub input_channels: usize,
    /// `(filters, kernel side)` per layer, bottom first.
    pub layers: Vec<(usize, usize)>,
    pub activation: Activation,
    pub padding: Padding,
    pub pool: Option<Pool>,
    pub seed: u64,
}

/// Kernels uniform in `+-sqrt(3 / fan_in)` (unit-variance responses to
/// unit-variance input), biases zero. The pool, if any, is applied after every layer.
pub fn make_random_bank(spec: &RandomBankSpec) -> Result<FilterBank> {
    if spec.layers.is_empty() {
        return Err(Error::InvalidArgument("random bank needs at least one layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut in_ch = spec.input_channels;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for &(filters, side) in &spec.layers {
        let fan_in = (in_ch * side * side) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let kernels = (0..filters * in_ch * side * side)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let layer = ConvLayer::new(filters, in_ch, (side, side), kernels, vec![0.0; filters])?
            .with_padding(spec.padding)
            .with_activation(spec.activation)
            .with_pool(spec.pool)?;
        layers.push(layer);
        in_ch = filters;
    }
    FilterBank::new(spec.input_channels, layers)
}
