//! Langevin dynamics with persistent parallel chains.
//!
//! One step is `I' = I - (eps^2 / 2) dU/dI + eps Z` with `Z` a fresh standard
//! normal image; there is no accept/reject correction.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::model::EnergyModel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StartMode {
    /// All-zero images.
    #[default]
    Zero,
    /// I.i.d. `N(0, sigma_sq)` pixels.
    Noise,
}

/// A set of chains with their random streams.
#[derive(Debug, Clone)]
pub struct ChainState {
    images: Vec<Image>,
    streams: Vec<ChaCha8Rng>,
    steps_taken: u64,
}

impl ChainState {
    /// Chains starting from given images, chain `i` drawing from stream `i`.
    pub fn from_images(images: Vec<Image>, master_seed: u64) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("at least one chain is required".into()))?
            .shape();
        if images.iter().any(|im| im.shape() != first) {
            return Err(Error::Geometry("chain images differ in shape".into()));
        }
        let streams = (0..images.len() as u64).map(|i| rng::stream(master_seed, i)).collect();
        Ok(Self {
            images,
            streams,
            steps_taken: 0,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn into_images(self) -> Vec<Image> {
        self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn shape(&self) -> ImageShape {
        self.images[0].shape()
    }

    /// Sets the display offset carried by every chain image.
    pub fn with_mean_offset(mut self, offset: f64) -> Self {
        self.images = self
            .images
            .into_iter()
            .map(|im| im.with_mean_offset(offset))
            .collect();
        self
    }

    /// Reorders chains (images together with their streams): chain `i` of the
    /// result is chain `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument("not a permutation of the chain indices".into()));
        }
        Ok(Self {
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
            streams: order.iter().map(|&i| self.streams[i].clone()).collect(),
            steps_taken: self.steps_taken,
        })
    }

    /// Redraws every chain from `mode`, continuing each chain's own stream.
    pub fn restart(&mut self, mode: StartMode, sigma_sq: f64) {
        let shape = self.shape();
        for (img, stream) in self.images.iter_mut().zip(&mut self.streams) {
            let offset = img.mean_offset();
            *img = start_image(mode, shape, sigma_sq, stream).with_mean_offset(offset);
        }
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Image], &mut [ChaCha8Rng]) {
        (&mut self.images, &mut self.streams)
    }

    pub(crate) fn add_steps(&mut self, n: u64) {
        self.steps_taken += n;
    }
}

fn start_image(mode: StartMode, shape: ImageShape, sigma_sq: f64, stream: &mut ChaCha8Rng) -> Image {
    let data = match mode {
        StartMode::Zero => vec![0.0; shape.len()],
        StartMode::Noise => {
            let sd = sigma_sq.sqrt();
            rng::normals(stream, shape.len()).into_iter().map(|z| sd * z).collect()
        }
    };
    Image::from_raw(shape, data, 0.0)
}

pub fn init_chains(
    mode: StartMode,
    count: usize,
    shape: ImageShape,
    sigma_sq: f64,
    master_seed: u64,
) -> Result<ChainState> {
    if count == 0 {
        return Err(Error::InvalidArgument("at least one chain is required".into()));
    }
    if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise variance must be positive, got {sigma_sq}")));
    }
    let mut state = ChainState::from_images(vec![Image::zeros(shape)?; count], master_seed)?;
    state.restart(mode, sigma_sq);
    Ok(state)
}

/// One unadjusted Langevin update of `img`.
pub fn langevin_step<M: EnergyModel + ?Sized>(
    img: &Image,
    model: &M,
    epsilon: f64,
    noise: &mut ChaCha8Rng,
) -> Result<Image> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be nonnegative, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(img.clone());
    }
    let grad = model.grad_energy_image(img)?;
    let half = 0.5 * epsilon * epsilon;
    let z = rng::normals(noise, img.data().len());
    let data = img
        .data()
        .iter()
        .zip(grad.data())
        .zip(z)
        .map(|((&x, &g), z)| x - half * g + epsilon * z)
        .collect();
    Ok(Image::from_raw(img.shape(), data, img.mean_offset()))
}

fn advance<M: EnergyModel + ?Sized>(
    img: &mut Image,
    stream: &mut ChaCha8Rng,
    model: &M,
    epsilon: f64,
    steps: usize,
) -> Result<()> {
    for step in 0..steps {
        let next = langevin_step(img, model, epsilon, stream)?;
        if !next.is_finite() {
            return Err(Error::Divergence(format!(
                "chain image became non-finite at step {step}; the step size {epsilon} is too large"
            )));
        }
        *img = next;
    }
    Ok(())
}

/// Advances every chain `steps` Langevin steps, in parallel across chains.
pub fn run_chains<M: EnergyModel + ?Sized>(
    mut state: ChainState,
    model: &M,
    epsilon: f64,
    steps: usize,
) -> Result<ChainState> {
    if state.shape() != model.image_shape() {
        return Err(Error::Geometry("chain images do not match the model geometry".into()));
    }
    let (images, streams) = state.parts_mut();
    let results: Vec<Result<()>> = images
        .par_iter_mut()
        .zip(streams.par_iter_mut())
        .map(|(img, stream)| advance(img, stream, model, epsilon, steps))
        .collect();
    results.into_iter().collect::<Result<()>>()?;
    state.add_steps(steps as u64);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{ConvLayer, FilterBank};
    use crate::model::NonStationaryFrame;
    use std::sync::Arc;

    fn reference_model(shape: ImageShape) -> NonStationaryFrame {
        let layer = ConvLayer::new(1, 1, (1, 1), vec![1.0], vec![0.0]).unwrap();
        let bank = Arc::new(FilterBank::new(1, vec![layer]).unwrap());
        NonStationaryFrame::zeros(bank, shape, 1.0).unwrap()
    }

    #[test]
    fn zero_step_size_is_identity() {
        let shape = ImageShape::new(4, 4, 1);
        let m = reference_model(shape);
        let state = init_chains(StartMode::Noise, 1, shape, 1.0, 1).unwrap();
        let img = &state.images()[0];
        let mut s = rng::stream(0, 0);
        assert_eq!(&langevin_step(img, &m, 0.0, &mut s).unwrap(), img);
    }

    #[test]
    fn reference_step_is_closed_form() {
        let shape = ImageShape::new(4, 5, 1);
        let m = reference_model(shape);
        let img = init_chains(StartMode::Noise, 1, shape, 1.0, 2).unwrap().images()[0].clone();
        let eps = 0.3;
        let next = langevin_step(&img, &m, eps, &mut rng::stream(9, 0)).unwrap();
        let z = rng::normals(&mut rng::stream(9, 0), shape.len());
        for ((a, x), z) in next.data().iter().zip(img.data()).zip(z) {
            let expect = (1.0 - eps * eps / 2.0) * x + eps * z;
            assert!((a - expect).abs() <= 4.0 * f64::EPSILON * expect.abs().max(1.0));
        }
    }

    #[test]
    fn zero_start_is_zero_and_noise_is_seeded() {
        let shape = ImageShape::new(3, 3, 1);
        let z = init_chains(StartMode::Zero, 2, shape, 1.0, 5).unwrap();
        assert!(z.images().iter().all(|im| im.data().iter().all(|&v| v == 0.0)));
        let a = init_chains(StartMode::Noise, 2, shape, 1.0, 5).unwrap();
        let b = init_chains(StartMode::Noise, 2, shape, 1.0, 5).unwrap();
        assert_eq!(a.images(), b.images());
        assert_ne!(a.images()[0], a.images()[1]);
    }

    #[test]
    fn noise_start_has_unit_moments() {
        let shape = ImageShape::new(64, 64, 1);
        let s = init_chains(StartMode::Noise, 16, shape, 1.0, 77).unwrap();
        let all: Vec<f64> = s.images().iter().flat_map(|im| im.data().to_vec()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((0.95..=1.05).contains(&var), "{var}");
    }

    #[test]
    fn zero_length_run_changes_nothing() {
        let shape = ImageShape::new(4, 4, 1);
        let m = reference_model(shape);
        let s = init_chains(StartMode::Noise, 3, shape, 1.0, 8).unwrap();
        let t = run_chains(s.clone(), &m, 0.1, 0).unwrap();
        assert_eq!(s.images(), t.images());
        assert_eq!(t.steps_taken(), 0);
    }

    #[test]
    fn identical_seeds_evolve_identically_and_chains_are_independent() {
        let shape = ImageShape::new(5, 5, 1);
        let m = reference_model(shape);
        let s = init_chains(StartMode::Noise, 4, shape, 1.0, 8).unwrap();
        let a = run_chains(s.clone(), &m, 0.2, 25).unwrap();
        let b = run_chains(s.clone(), &m, 0.2, 25).unwrap();
        assert_eq!(a.images(), b.images());
        assert_eq!(a.steps_taken(), 25);

        let order = [2, 0, 3, 1];
        let p = run_chains(s.permuted(&order).unwrap(), &m, 0.2, 25).unwrap();
        for (i, &j) in order.iter().enumerate() {
            assert_eq!(p.images()[i], a.images()[j]);
        }
    }

    #[test]
    fn huge_step_reports_divergence() {
        let shape = ImageShape::new(4, 4, 1);
        let m = reference_model(shape);
        let s = init_chains(StartMode::Noise, 1, shape, 1.0, 8).unwrap();
        assert!(matches!(run_chains(s, &m, 1e3, 200), Err(Error::Divergence(_))));
    }
}
