//! Statistics matching: synthesize images whose filter statistics match a
//! target, by annealed Langevin dynamics on `S = sum delta^2` or by plain
//! gradient descent.
//!
//! At temperature `T` the update is `I <- I - (eps^2 / 2) dS/dI + eps sqrt(T) Z`,
//! which samples `exp(-S / T)` with effective step `eps sqrt(T)`; `T = 0` is descent.

use rayon::prelude::*;

use crate::bank::FilterBank;
use crate::error::{Error, Result};
use crate::image::{FeatureStack, Image};
use crate::model::pool_features;
use crate::rng;
use crate::sampler::ChainState;

/// Which statistics are matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ensemble {
    /// Per filter and position (aligned objects).
    Object,
    /// Spatially pooled per filter (textures).
    Texture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    #[default]
    Langevin,
    Descent,
}

/// Geometric cooling `T_l = max(floor, t0 * decay^l)` for level `l`, held for
/// `steps_per_level` steps. Once `t0 * decay^l` falls within `1e-3 * t0` of the
/// floor the temperature snaps to the floor, so the floor is reached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub t0: f64,
    pub decay: f64,
    pub floor: f64,
    pub steps_per_level: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            t0: 1.0,
            decay: 0.95,
            floor: 0.0,
            steps_per_level: 100,
        }
    }
}

const SNAP_FRACTION: f64 = 1e-3;

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(Error::InvalidArgument("initial temperature must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidArgument("temperature decay must lie in (0, 1)".into()));
        }
        if !(self.floor >= 0.0 && self.floor <= self.t0) {
            return Err(Error::InvalidArgument("temperature floor must lie in [0, t0]".into()));
        }
        if self.steps_per_level == 0 {
            return Err(Error::InvalidArgument("steps per level must be at least 1".into()));
        }
        Ok(())
    }

    pub fn temperature(&self, step: usize) -> f64 {
        let level = (step / self.steps_per_level) as f64;
        let raw = self.t0 * self.decay.powf(level);
        if raw - self.floor <= SNAP_FRACTION * self.t0 {
            self.floor
        } else {
            raw
        }
    }
}

/// Statistics to be matched.
#[derive(Debug, Clone, PartialEq)]
pub struct JuleszTarget {
    pub ensemble: Ensemble,
    pub stats: Vec<f64>,
}

impl JuleszTarget {
    /// Average statistics of `images` under `bank`.
    pub fn from_images(ensemble: Ensemble, bank: &FilterBank, images: &[Image]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("target needs at least one image".into()));
        }
        let mut stats: Option<Vec<f64>> = None;
        for img in images {
            let s = statistics(ensemble, &bank.forward(img)?);
            match &mut stats {
                None => stats = Some(s),
                Some(acc) => {
                    if acc.len() != s.len() {
                        return Err(Error::Geometry("target images differ in geometry".into()));
                    }
                    acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
                }
            }
        }
        let mut stats = stats.unwrap();
        let m = images.len() as f64;
        stats.iter_mut().for_each(|v| *v /= m);
        Ok(Self { ensemble, stats })
    }
}

fn statistics(ensemble: Ensemble, features: &FeatureStack) -> Vec<f64> {
    match ensemble {
        Ensemble::Object => features.data().to_vec(),
        Ensemble::Texture => pool_features(features),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JuleszConfig {
    pub schedule: AnnealSchedule,
    pub epsilon: f64,
    pub mode: MatchMode,
    pub max_steps: usize,
    /// Stop as soon as `sum delta^2` is at or below this value.
    pub tolerance: f64,
}

impl Default for JuleszConfig {
    fn default() -> Self {
        Self {
            schedule: AnnealSchedule::default(),
            epsilon: 0.01,
            mode: MatchMode::Langevin,
            max_steps: 20_000,
            tolerance: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JuleszLogRow {
    pub step: usize,
    pub temperature: f64,
    pub sum_delta_sq: f64,
}

#[derive(Debug, Clone)]
pub struct JuleszOutcome {
    pub chains: ChainState,
    pub sum_delta_sq: f64,
    pub log: Vec<JuleszLogRow>,
}

/// Discrepancy `mean_m stats(I_m) - target` and the traces needed for its gradient.
fn discrepancy(
    target: &JuleszTarget,
    bank: &FilterBank,
    images: &[Image],
) -> Result<(Vec<f64>, Vec<crate::bank::ForwardTrace>)> {
    let traces = images
        .par_iter()
        .map(|im| bank.forward_trace(im))
        .collect::<Result<Vec<_>>>()?;
    let mut delta = vec![0.0; target.stats.len()];
    for t in &traces {
        let s = statistics(target.ensemble, t.output());
        if s.len() != delta.len() {
            return Err(Error::Geometry(format!(
                "target has {} statistics, bank produces {}",
                delta.len(),
                s.len()
            )));
        }
        delta.iter_mut().zip(&s).for_each(|(d, v)| *d += v);
    }
    let m = images.len() as f64;
    delta
        .iter_mut()
        .zip(&target.stats)
        .for_each(|(d, t)| *d = *d / m - t);
    Ok((delta, traces))
}

/// Cotangent of `S` with respect to one image's feature stack.
fn cotangent(target: &JuleszTarget, delta: &[f64], dims: (usize, usize, usize), chains: usize) -> FeatureStack {
    let (k, h, w) = dims;
    let scale = 2.0 / chains as f64;
    let data = match target.ensemble {
        Ensemble::Object => delta.iter().map(|d| scale * d).collect(),
        Ensemble::Texture => {
            let area = (h * w) as f64;
            let mut v = Vec::with_capacity(k * h * w);
            for d in delta {
                v.extend(std::iter::repeat_n(scale * d / area, h * w));
            }
            v
        }
    };
    FeatureStack::from_raw(k, h, w, data, false, Default::default())
}

/// Moves `chains` toward the target statistics. Returns the final chains,
/// the final `sum delta^2` and one log row per step taken.
pub fn julesz_synthesize(
    target: &JuleszTarget,
    bank: &FilterBank,
    mut chains: ChainState,
    config: &JuleszConfig,
) -> Result<JuleszOutcome> {
    config.schedule.validate()?;
    if !(config.epsilon >= 0.0 && config.epsilon.is_finite()) {
        return Err(Error::InvalidArgument("step size must be nonnegative".into()));
    }
    let m = chains.len();
    let half = 0.5 * config.epsilon * config.epsilon;
    let mut log = Vec::new();
    let mut step = 0;
    loop {
        let (delta, traces) = discrepancy(target, bank, chains.images())?;
        let sum_delta_sq: f64 = delta.iter().map(|d| d * d).sum();
        if !sum_delta_sq.is_finite() {
            return Err(Error::Divergence(format!(
                "sum of squared discrepancies became non-finite at step {step}; step size {} is too large",
                config.epsilon
            )));
        }
        let temperature = match config.mode {
            MatchMode::Langevin => config.schedule.temperature(step),
            MatchMode::Descent => 0.0,
        };
        log.push(JuleszLogRow {
            step,
            temperature,
            sum_delta_sq,
        });
        if sum_delta_sq <= config.tolerance || step >= config.max_steps {
            return Ok(JuleszOutcome {
                chains,
                sum_delta_sq,
                log,
            });
        }
        let cot = cotangent(target, &delta, traces[0].output().dims(), m);
        let noise_sd = config.epsilon * temperature.sqrt();
        let (images, streams) = chains.parts_mut();
        let results: Vec<Result<()>> = images
            .par_iter_mut()
            .zip(streams.par_iter_mut())
            .zip(traces.par_iter())
            .map(|((img, stream), trace)| {
                let grad = bank.backward_image_from_trace(trace, &cot)?;
                let data: Vec<f64> = if noise_sd > 0.0 {
                    let z = rng::normals(stream, img.data().len());
                    img.data()
                        .iter()
                        .zip(grad.data())
                        .zip(z)
                        .map(|((&x, &g), z)| x - half * g + noise_sd * z)
                        .collect()
                } else {
                    img.data().iter().zip(grad.data()).map(|(&x, &g)| x - half * g).collect()
                };
                *img = Image::from_raw(img.shape(), data, img.mean_offset());
                Ok(())
            })
            .collect();
        results.into_iter().collect::<Result<()>>()?;
        chains.add_steps(1);
        step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::ConvLayer;
    use crate::image::ImageShape;
    use crate::sampler::{init_chains, StartMode};

    #[test]
    fn schedule_is_nonincreasing_and_reaches_floor() {
        let s = AnnealSchedule::default();
        let temps: Vec<f64> = (0..20_000).step_by(50).map(|t| s.temperature(t)).collect();
        assert_eq!(temps[0], 1.0);
        assert!(temps.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*temps.last().unwrap(), 0.0);
        let f = AnnealSchedule { floor: 0.2, ..s };
        assert_eq!(f.temperature(1_000_000), 0.2);
        assert!(AnnealSchedule { decay: 1.0, ..s }.validate().is_err());
    }

    #[test]
    fn own_statistics_are_a_fixed_point() {
        let bank = crate::bank::make_gabor_bank(&[1.0], 2).unwrap();
        let chains = init_chains(StartMode::Noise, 2, ImageShape::new(8, 8, 1), 1.0, 3).unwrap();
        for ensemble in [Ensemble::Object, Ensemble::Texture] {
            let target = JuleszTarget::from_images(ensemble, &bank, chains.images()).unwrap();
            let out = julesz_synthesize(&target, &bank, chains.clone(), &JuleszConfig::default()).unwrap();
            assert_eq!(out.sum_delta_sq, 0.0);
            assert_eq!(out.log.len(), 1);
            assert_eq!(out.chains.images(), chains.images());
        }
    }

    #[test]
    fn identity_filter_descends_to_target_mean() {
        let layer = ConvLayer::new(1, 1, (1, 1), vec![1.0], vec![0.0]).unwrap();
        let bank = FilterBank::new(1, vec![layer]).unwrap();
        let shape = ImageShape::new(6, 6, 1);
        let chains = init_chains(StartMode::Noise, 1, shape, 1.0, 4).unwrap();
        let target = JuleszTarget {
            ensemble: Ensemble::Texture,
            stats: vec![0.3],
        };
        let config = JuleszConfig {
            // the mean contracts by 1 - eps^2 / 36 per step
            epsilon: 4.0,
            mode: MatchMode::Descent,
            max_steps: 200,
            ..Default::default()
        };
        let out = julesz_synthesize(&target, &bank, chains, &config).unwrap();
        let mean = out.chains.images()[0].data().iter().sum::<f64>() / 36.0;
        assert!((mean - 0.3).abs() < 1e-6, "{mean}");
    }

    #[test]
    fn mismatched_target_is_rejected() {
        let bank = crate::bank::make_gabor_bank(&[1.0], 1).unwrap();
        let chains = init_chains(StartMode::Zero, 1, ImageShape::new(5, 5, 1), 1.0, 0).unwrap();
        let target = JuleszTarget {
            ensemble: Ensemble::Texture,
            stats: vec![0.0; 3],
        };
        assert!(matches!(
            julesz_synthesize(&target, &bank, chains, &JuleszConfig::default()),
            Err(Error::Geometry(_))
        ));
    }
}
