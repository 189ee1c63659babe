//! Maximum-likelihood learning by stochastic gradient ascent.
//!
//! Every iteration compares the observed statistics with statistics estimated
//! under the current model (by Langevin chains, or exactly on tiny domains)
//! and moves the parameters along `observed - synthesized`.

mod layer;

pub use layer::{
    bias_from_alpha, detect, fit_layer, grad_generative_layer, init_layer, refine_all_layers, softplus,
    ComposedModel, Detections, GenerativeLayer, LayerGradient, LayerOptions,
};

use std::sync::Arc;

use rayon::prelude::*;

use crate::bank::FilterBank;
use crate::error::{Error, Result};
use crate::image::{FeatureStack, Image, ImageShape};
use crate::model::{EnergyModel, Learnable, NonStationaryFrame, StationaryFrame};
use crate::sampler::{init_chains, run_chains, ChainState, StartMode};

/// Lower bound on the observed variance used by variance-scaled rates.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RateSchedule {
    #[default]
    Constant,
    /// `gamma0 / (1 + t / t0)`.
    OneOverT,
    /// `gamma0 / (max(var, VARIANCE_FLOOR) * (1 + t / t0))`, per entry.
    VarianceScaled,
}

/// How chains are initialized at each learning iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChainStart {
    /// Chains start at zero once and persist across iterations.
    #[default]
    Warm,
    /// Chains restart from white noise every iteration.
    Cold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub gamma0: f64,
    pub schedule: RateSchedule,
    pub t0: usize,
    pub iterations: usize,
    pub langevin_steps: usize,
    pub chains: usize,
    pub epsilon: f64,
    pub start: ChainStart,
    pub master_seed: u64,
    /// Stop once `max |H_obs - H_syn|` falls below this; 0 disables the test.
    pub tolerance: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            gamma0: 0.01,
            schedule: RateSchedule::Constant,
            t0: 100,
            iterations: 100,
            langevin_steps: 100,
            chains: 16,
            epsilon: 0.01,
            start: ChainStart::Warm,
            master_seed: 0,
            tolerance: 0.0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return bad("learning rate must be positive and finite");
        }
        if self.t0 == 0 {
            return bad("schedule offset t0 must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iteration count must be at least 1");
        }
        if self.chains == 0 {
            return bad("chain count must be at least 1");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("Langevin step size must be nonnegative");
        }
        if !(self.tolerance >= 0.0) {
            return bad("convergence tolerance must be nonnegative");
        }
        Ok(())
    }

    /// Rate at iteration `t` before any per-entry variance scaling.
    pub fn base_rate(&self, t: usize) -> f64 {
        match self.schedule {
            RateSchedule::Constant => self.gamma0,
            RateSchedule::OneOverT | RateSchedule::VarianceScaled => {
                self.gamma0 / (1.0 + t as f64 / self.t0 as f64)
            }
        }
    }

    /// Per-entry rates at iteration `t`; `variance` is only read by the
    /// variance-scaled schedule.
    pub fn rates(&self, t: usize, variance: &[f64], len: usize) -> Vec<f64> {
        let base = self.base_rate(t);
        match self.schedule {
            RateSchedule::VarianceScaled => variance
                .iter()
                .map(|&v| base / v.max(VARIANCE_FLOOR))
                .collect(),
            _ => vec![base; len],
        }
    }
}

/// Observed and synthesized statistics of one learning iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsSnapshot {
    pub observed: Vec<f64>,
    pub synthesized: Vec<f64>,
    pub observed_variance: Vec<f64>,
}

impl StatsSnapshot {
    /// `observed - synthesized`, the likelihood ascent direction.
    pub fn ascent(&self) -> Vec<f64> {
        self.observed.iter().zip(&self.synthesized).map(|(o, s)| o - s).collect()
    }

    /// `synthesized - observed`.
    pub fn discrepancy(&self) -> Vec<f64> {
        self.synthesized.iter().zip(&self.observed).map(|(s, o)| s - o).collect()
    }

    pub fn max_abs_diff(&self) -> f64 {
        self.observed
            .iter()
            .zip(&self.synthesized)
            .map(|(o, s)| (o - s).abs())
            .fold(0.0, f64::max)
    }
}

/// `params + rate * (observed - synthesized)`; `rates` holds one value for
/// all entries or one per entry.
pub fn ascend<M: Learnable>(model: &M, snapshot: &StatsSnapshot, rates: &[f64]) -> Result<M> {
    let params = model.params();
    if snapshot.observed.len() != params.len() || snapshot.synthesized.len() != params.len() {
        return Err(Error::Geometry(format!(
            "statistics of length {}/{} for {} parameters",
            snapshot.observed.len(),
            snapshot.synthesized.len(),
            params.len()
        )));
    }
    if rates.len() != 1 && rates.len() != params.len() {
        return Err(Error::Geometry(format!("{} rates for {} parameters", rates.len(), params.len())));
    }
    if snapshot
        .observed
        .iter()
        .chain(&snapshot.synthesized)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("statistics".into()));
    }
    let next = params
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let rate = if rates.len() == 1 { rates[0] } else { rates[i] };
            p + rate * (snapshot.observed[i] - snapshot.synthesized[i])
        })
        .collect();
    model.with_params(next)
}

/// One step of `w <- w + gamma (H_obs - H_syn)` for per-position weights.
pub fn update_nonstationary(
    model: &NonStationaryFrame,
    snapshot: &StatsSnapshot,
    rates: &[f64],
) -> Result<NonStationaryFrame> {
    ascend(model, snapshot, rates)
}

/// One step of `w_k <- w_k + gamma (pooled H_obs - pooled H_syn)`.
pub fn update_stationary(
    model: &StationaryFrame,
    snapshot: &StatsSnapshot,
    rates: &[f64],
) -> Result<StationaryFrame> {
    ascend(model, snapshot, rates)
}

/// Mean of the model statistics over `images`, reduced in image order.
pub fn mean_statistics<M: Learnable>(model: &M, images: &[Image]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("need at least one image".into()));
    }
    let per_image = images
        .par_iter()
        .map(|im| model.statistics(im))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; per_image[0].len()];
    for s in &per_image {
        acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
    }
    let n = images.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

fn mean_energy<M: EnergyModel>(model: &M, images: &[Image]) -> Result<f64> {
    let energies = images
        .par_iter()
        .map(|im| model.energy(im).map(|r| r.energy))
        .collect::<Result<Vec<_>>>()?;
    Ok(energies.iter().sum::<f64>() / images.len() as f64)
}

pub(crate) fn check_images(images: &[Image]) -> Result<ImageShape> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one training image".into()))?
        .shape();
    if let Some(i) = images.iter().position(|im| im.shape() != first) {
        return Err(Error::Geometry(format!("training image {i} differs in shape from image 0")));
    }
    Ok(first)
}

/// Per-filter, per-position mean response `(1/M) sum_m [F_k * I_m](x)`.
pub fn observed_stats_object(bank: &FilterBank, images: &[Image]) -> Result<FeatureStack> {
    check_images(images)?;
    let stacks = images
        .par_iter()
        .map(|im| bank.forward(im))
        .collect::<Result<Vec<_>>>()?;
    let (k, h, w) = stacks[0].dims();
    let mut acc = vec![0.0; k * h * w];
    for s in &stacks {
        acc.iter_mut().zip(s.data()).for_each(|(a, v)| *a += v);
    }
    let n = images.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    FeatureStack::new(k, h, w, acc, false, stacks[0].origin())
}

/// Model expectations of the statistics at the current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub statistics: Vec<f64>,
    pub mean_energy: f64,
}

/// Source of the synthesized term of the gradient.
pub trait Estimator<M: Learnable> {
    fn estimate(&mut self, model: &M) -> Result<Estimate>;
}

/// Monte Carlo estimates from persistent (or restarted) Langevin chains.
#[derive(Debug, Clone)]
pub struct ChainEstimator {
    chains: ChainState,
    epsilon: f64,
    steps: usize,
    start: ChainStart,
    sigma_sq: f64,
}

impl ChainEstimator {
    pub fn new(shape: ImageShape, config: &LearnConfig, sigma_sq: f64, mean_offset: f64) -> Result<Self> {
        let mode = match config.start {
            ChainStart::Warm => StartMode::Zero,
            ChainStart::Cold => StartMode::Noise,
        };
        let chains = init_chains(mode, config.chains, shape, sigma_sq, config.master_seed)?
            .with_mean_offset(mean_offset);
        Ok(Self {
            chains,
            epsilon: config.epsilon,
            steps: config.langevin_steps,
            start: config.start,
            sigma_sq,
        })
    }

    pub fn chains(&self) -> &ChainState {
        &self.chains
    }

    pub fn into_chains(self) -> ChainState {
        self.chains
    }
}

impl<M: Learnable> Estimator<M> for ChainEstimator {
    fn estimate(&mut self, model: &M) -> Result<Estimate> {
        // the first cold iteration already starts from fresh noise
        if self.start == ChainStart::Cold && self.chains.steps_taken() > 0 {
            self.chains.restart(StartMode::Noise, self.sigma_sq);
        }
        self.chains = run_chains(self.chains.clone(), model, self.epsilon, self.steps)?;
        Ok(Estimate {
            statistics: mean_statistics(model, self.chains.images())?,
            mean_energy: mean_energy(model, self.chains.images())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    /// `max |H_obs - H_syn|` fell below the tolerance at this iteration.
    Converged { iteration: usize },
    IterationsExhausted,
    /// Non-finite weights, statistics or images; the model is the last finite one.
    Diverged { iteration: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub max_abs_diff: f64,
    pub mean_energy: f64,
    pub gamma_t: f64,
}

#[derive(Debug, Clone)]
pub struct Fit<M> {
    pub model: M,
    pub termination: Termination,
    pub log: Vec<LogRow>,
    /// Statistics of the last completed iteration.
    pub last_snapshot: Option<StatsSnapshot>,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Divergence(_) | Error::NonFinite(_))
}

/// Runs the learning loop from `initial`: estimate synthesized statistics,
/// compare with the observed ones, step the parameters.
pub fn learn<M: Learnable, E: Estimator<M>>(
    initial: M,
    observed: &[Image],
    config: &LearnConfig,
    estimator: &mut E,
) -> Result<Fit<M>> {
    learn_with(initial, observed, config, estimator, |_, _| Ok(()))
}

/// [`learn`] with `observer` called after every logged iteration, before the
/// parameter update, with that iteration's row and the estimator.
pub fn learn_with<M, E, F>(
    initial: M,
    observed: &[Image],
    config: &LearnConfig,
    estimator: &mut E,
    mut observer: F,
) -> Result<Fit<M>>
where
    M: Learnable,
    E: Estimator<M>,
    F: FnMut(&LogRow, &E) -> Result<()>,
{
    config.validate()?;
    let shape = check_images(observed)?;
    if shape != initial.image_shape() {
        return Err(Error::Geometry("training images do not match the model geometry".into()));
    }
    let variance = match config.schedule {
        RateSchedule::VarianceScaled => initial.observed_variance(observed)?,
        _ => Vec::new(),
    };
    let mut model = initial;
    let mut h_obs = mean_statistics(&model, observed)?;
    let mut log = Vec::with_capacity(config.iterations);
    let mut last_snapshot = None;
    for t in 0..config.iterations {
        if t > 0 && model.statistics_depend_on_params() {
            h_obs = mean_statistics(&model, observed)?;
        }
        let diverged = |reason: String| Termination::Diverged { iteration: t, reason };
        let estimate = match estimator.estimate(&model) {
            Ok(e) => e,
            Err(e) if is_divergence(&e) => {
                return Ok(Fit { model, termination: diverged(e.to_string()), log, last_snapshot });
            }
            Err(e) => return Err(e),
        };
        let snapshot = StatsSnapshot {
            observed: h_obs.clone(),
            synthesized: estimate.statistics,
            observed_variance: variance.clone(),
        };
        let diff = snapshot.max_abs_diff();
        let gamma_t = config.base_rate(t);
        log.push(LogRow {
            iteration: t,
            max_abs_diff: diff,
            mean_energy: estimate.mean_energy,
            gamma_t,
        });
        observer(log.last().unwrap(), estimator)?;
        if !diff.is_finite() || !estimate.mean_energy.is_finite() {
            let reason = "non-finite synthesized statistics or energy".to_string();
            return Ok(Fit { model, termination: diverged(reason), log, last_snapshot: Some(snapshot) });
        }
        if diff < config.tolerance {
            return Ok(Fit {
                model,
                termination: Termination::Converged { iteration: t },
                log,
                last_snapshot: Some(snapshot),
            });
        }
        let rates = config.rates(t, &variance, model.params().len());
        match ascend(&model, &snapshot, &rates) {
            Ok(next) => model = next,
            Err(e) if is_divergence(&e) => {
                return Ok(Fit { model, termination: diverged(e.to_string()), log, last_snapshot: Some(snapshot) });
            }
            Err(e) => return Err(e),
        }
        last_snapshot = Some(snapshot);
    }
    Ok(Fit {
        model,
        termination: Termination::IterationsExhausted,
        log,
        last_snapshot,
    })
}

pub(crate) fn fit_with_chains<M: Learnable>(
    initial: M,
    images: &[Image],
    config: &LearnConfig,
) -> Result<(Fit<M>, ChainState)> {
    config.validate()?;
    let shape = check_images(images)?;
    let mut estimator = ChainEstimator::new(shape, config, initial.sigma_sq(), images[0].mean_offset())?;
    let fit = learn(initial, images, config, &mut estimator)?;
    Ok((fit, estimator.into_chains()))
}

/// Learns per-position weights from aligned images.
pub fn fit_object(
    bank: Arc<FilterBank>,
    images: &[Image],
    config: &LearnConfig,
    sigma_sq: f64,
) -> Result<(Fit<NonStationaryFrame>, ChainState)> {
    let shape = check_images(images)?;
    fit_with_chains(NonStationaryFrame::zeros(bank, shape, sigma_sq)?, images, config)
}

/// Learns pooled per-filter weights from one or more texture images.
pub fn fit_texture(
    bank: Arc<FilterBank>,
    images: &[Image],
    config: &LearnConfig,
    sigma_sq: f64,
) -> Result<(Fit<StationaryFrame>, ChainState)> {
    let shape = check_images(images)?;
    fit_with_chains(StationaryFrame::zeros(bank, shape, sigma_sq)?, images, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{make_random_bank, Activation, ConvLayer, Padding, RandomBankSpec};
    use crate::sampler::init_chains;

    fn bank() -> Arc<FilterBank> {
        Arc::new(
            make_random_bank(&RandomBankSpec {
                input_channels: 1,
                layers: vec![(2, 3)],
                activation: Activation::Relu,
                padding: Padding::Circular,
                pool: None,
                seed: 4,
            })
            .unwrap(),
        )
    }

    fn noise_images(n: usize, shape: ImageShape, seed: u64) -> Vec<Image> {
        init_chains(StartMode::Noise, n, shape, 1.0, seed).unwrap().into_images()
    }

    #[test]
    fn identical_images_give_their_own_stack() {
        let b = bank();
        let img = noise_images(1, ImageShape::new(6, 6, 1), 1).remove(0);
        let h = observed_stats_object(&b, &[img.clone(), img.clone(), img.clone()]).unwrap();
        let f = b.forward(&img).unwrap();
        for (a, e) in h.data().iter().zip(f.data()) {
            assert!((a - e).abs() <= 1e-15 * e.abs().max(1.0));
        }
    }

    #[test]
    fn opposite_linear_responses_cancel() {
        let layer = ConvLayer::new(1, 1, (2, 2), vec![1.0, -2.0, 0.5, 1.0], vec![0.0]).unwrap();
        let b = FilterBank::new(1, vec![layer]).unwrap();
        let img = noise_images(1, ImageShape::new(5, 5, 1), 2).remove(0);
        let neg = Image::new(img.shape(), img.data().iter().map(|v| -v).collect()).unwrap();
        let h = observed_stats_object(&b, &[img, neg]).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn observed_stats_match_naive_average() {
        let b = bank();
        let imgs = noise_images(5, ImageShape::new(6, 7, 1), 3);
        let h = observed_stats_object(&b, &imgs).unwrap();
        let stacks: Vec<FeatureStack> = imgs.iter().map(|im| b.forward(im).unwrap()).collect();
        for k in 0..2 {
            for y in 0..6 {
                for x in 0..7 {
                    let naive = stacks.iter().map(|s| s.get(k, y, x)).sum::<f64>() / 5.0;
                    assert!((h.get(k, y, x) - naive).abs() < 1e-12);
                }
            }
        }
    }

    fn snapshot(observed: Vec<f64>, synthesized: Vec<f64>) -> StatsSnapshot {
        StatsSnapshot { observed, synthesized, observed_variance: Vec::new() }
    }

    #[test]
    fn matched_statistics_are_a_fixed_point() {
        let shape = ImageShape::new(5, 5, 1);
        let b = bank();
        let (k, h, w) = b.output_dims(5, 5).unwrap();
        let weights: Vec<f64> = (0..k * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = NonStationaryFrame::new(b.clone(), shape, weights.clone(), 1.0).unwrap();
        let stats: Vec<f64> = (0..weights.len()).map(|i| i as f64).collect();
        let next = update_nonstationary(&m, &snapshot(stats.clone(), stats), &[0.5]).unwrap();
        assert_eq!(next.weights(), &weights[..]);

        let s = StationaryFrame::new(b, shape, vec![0.1, -0.2], 1.0).unwrap();
        let next = update_stationary(&s, &snapshot(vec![3.0, 4.0], vec![3.0, 4.0]), &[1.0]).unwrap();
        assert_eq!(next.weights(), &[0.1, -0.2]);
    }

    #[test]
    fn unit_rate_from_zero_adds_the_difference() {
        let shape = ImageShape::new(5, 5, 1);
        let b = bank();
        let m = NonStationaryFrame::zeros(b.clone(), shape, 1.0).unwrap();
        let n = m.weights().len();
        let obs: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        let syn: Vec<f64> = (0..n).map(|i| i as f64 * 0.25).collect();
        let next = update_nonstationary(&m, &snapshot(obs.clone(), syn.clone()), &[1.0]).unwrap();
        for i in 0..n {
            assert_eq!(next.weights()[i], obs[i] - syn[i]);
        }
        let s = StationaryFrame::zeros(b, shape, 1.0).unwrap();
        let next = update_stationary(&s, &snapshot(vec![1.5, 0.0], vec![1.0, 0.25]), &[1.0]).unwrap();
        assert_eq!(next.weights(), &[0.5, -0.25]);
    }

    #[test]
    fn variance_scaled_rates() {
        let config = LearnConfig {
            gamma0: 0.2,
            schedule: RateSchedule::VarianceScaled,
            t0: 10,
            ..Default::default()
        };
        let r = config.rates(5, &[0.5, 0.0, 4.0], 3);
        let base = 0.2 / 1.5;
        assert!((r[0] - base / 0.5).abs() < 1e-15);
        assert!((r[1] - base / VARIANCE_FLOOR).abs() < 1e-15 * r[1]);
        assert!((r[2] - base / 4.0).abs() < 1e-15);
        let c = LearnConfig { schedule: RateSchedule::OneOverT, ..config.clone() };
        assert_eq!(c.base_rate(0), 0.2);
        assert!((c.base_rate(10) - 0.1).abs() < 1e-15);
        let c = LearnConfig { schedule: RateSchedule::Constant, ..config };
        assert_eq!(c.rates(1000, &[], 2), vec![0.2, 0.2]);
    }

    #[test]
    fn non_finite_statistics_are_rejected() {
        let s = StationaryFrame::zeros(bank(), ImageShape::new(5, 5, 1), 1.0).unwrap();
        let r = update_stationary(&s, &snapshot(vec![f64::NAN, 0.0], vec![0.0, 0.0]), &[1.0]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn shifted_texture_gives_identical_trajectory() {
        let shape = ImageShape::new(8, 8, 1);
        let img = noise_images(1, shape, 5).remove(0);
        let config = LearnConfig {
            gamma0: 0.05,
            iterations: 4,
            langevin_steps: 5,
            chains: 2,
            epsilon: 0.1,
            master_seed: 3,
            ..Default::default()
        };
        let (a, _) = fit_texture(bank(), &[img.clone()], &config, 1.0).unwrap();
        let (b, _) = fit_texture(bank(), &[img.circular_shift(3, -2)], &config, 1.0).unwrap();
        assert_eq!(a.model.weights(), b.model.weights());
    }

    #[test]
    fn empty_top_layer_keeps_the_reference_model() {
        let layer = ConvLayer::new(0, 1, (3, 3), vec![], vec![]).unwrap();
        let b = Arc::new(FilterBank::new(1, vec![layer]).unwrap());
        let shape = ImageShape::new(8, 8, 1);
        let imgs = noise_images(2, shape, 6);
        let config = LearnConfig {
            iterations: 3,
            langevin_steps: 20_000,
            chains: 16,
            epsilon: 0.1,
            master_seed: 1,
            ..Default::default()
        };
        let (fit, chains) = fit_object(b, &imgs, &config, 1.0).unwrap();
        assert!(fit.model.weights().is_empty());
        assert_eq!(fit.termination, Termination::IterationsExhausted);
        let all: Vec<f64> = chains.images().iter().flat_map(|im| im.data().to_vec()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // stationary variance of the discretized chain is 1 / (1 - eps^2 / 4)
        let target = 1.0 / (1.0 - 0.01 / 4.0);
        let se = (2.0 / n).sqrt() * target;
        assert!(mean.abs() < 3.0 * (target / n).sqrt(), "{mean}");
        assert!((var - target).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn divergence_keeps_last_good_model() {
        let shape = ImageShape::new(6, 6, 1);
        let imgs = noise_images(2, shape, 7);
        let config = LearnConfig {
            gamma0: 1.0,
            iterations: 50,
            langevin_steps: 50,
            chains: 2,
            epsilon: 5.0,
            ..Default::default()
        };
        let (fit, _) = fit_object(bank(), &imgs, &config, 1.0).unwrap();
        assert!(matches!(fit.termination, Termination::Diverged { .. }));
        assert!(fit.model.weights().iter().all(|w| w.is_finite()));
    }

    #[test]
    fn learning_is_reproducible() {
        let shape = ImageShape::new(6, 6, 1);
        let imgs = noise_images(3, shape, 8);
        let config = LearnConfig {
            gamma0: 0.05,
            iterations: 5,
            langevin_steps: 10,
            chains: 3,
            epsilon: 0.1,
            start: ChainStart::Cold,
            master_seed: 11,
            ..Default::default()
        };
        let (a, ca) = fit_object(bank(), &imgs, &config, 1.0).unwrap();
        let (b, cb) = fit_object(bank(), &imgs, &config, 1.0).unwrap();
        assert_eq!(a.model.weights(), b.model.weights());
        assert_eq!(ca.images(), cb.images());
        assert_eq!(a.log, b.log);
    }
}
