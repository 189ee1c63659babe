//! Exact computations on tiny quantized image spaces.
//!
//! Every image whose pixels take values in a short list of levels is
//! enumerated, so normalizing constants, expectations and divergences are
//! exact up to floating point. The density on the grid is
//! `p(I) = exp(feature_term(I)) q(I) / Z` where `q` is uniform on the grid or
//! the Gaussian reference evaluated on the grid and renormalized.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::learner::{mean_statistics, Estimate, Estimator};
use crate::model::Learnable;

/// Largest enumerable state count (3 levels on 16 pixels).
pub const STATE_CAP: u64 = 43_046_721;
const MAX_PIXELS: usize = 16;
const MAX_LEVELS: usize = 3;
const BLOCK: usize = 1 << 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reference {
    #[default]
    Uniform,
    /// `exp(-|I|^2 / (2 sigma_sq))` on the grid, renormalized.
    GaussianRestricted,
}

/// A grid of single-channel images.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSpec {
    height: usize,
    width: usize,
    levels: Vec<f64>,
    reference: Reference,
}

impl OracleSpec {
    pub fn new(height: usize, width: usize, levels: Vec<f64>, reference: Reference) -> Result<Self> {
        let pixels = height * width;
        if pixels == 0 || pixels > MAX_PIXELS {
            return Err(Error::InvalidArgument(format!(
                "oracle grids have 1 to {MAX_PIXELS} pixels, got {height}x{width}"
            )));
        }
        if levels.is_empty() || levels.len() > MAX_LEVELS {
            return Err(Error::InvalidArgument(format!(
                "oracle grids have 1 to {MAX_LEVELS} levels, got {}",
                levels.len()
            )));
        }
        if levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("oracle level".into()));
        }
        for (i, a) in levels.iter().enumerate() {
            if levels[..i].contains(a) {
                return Err(Error::InvalidArgument(format!("level {a} is listed twice")));
            }
        }
        let spec = Self {
            height,
            width,
            levels,
            reference,
        };
        let states = spec.state_count_u128();
        if states > STATE_CAP as u128 {
            return Err(Error::StateCapExceeded {
                states,
                cap: STATE_CAP,
            });
        }
        Ok(spec)
    }

    fn state_count_u128(&self) -> u128 {
        (self.levels.len() as u128).pow((self.height * self.width) as u32)
    }

    pub fn state_count(&self) -> usize {
        self.state_count_u128() as usize
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, 1)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn reference(&self) -> Reference {
        self.reference
    }

    /// Image number `index` in odometer order: the last pixel (row-major)
    /// cycles fastest through the levels, in the order given.
    pub fn state(&self, index: usize) -> Image {
        let n = self.height * self.width;
        let base = self.levels.len();
        let mut data = vec![0.0; n];
        let mut rest = index;
        for p in (0..n).rev() {
            data[p] = self.levels[rest % base];
            rest /= base;
        }
        Image::from_raw(self.shape(), data, 0.0)
    }

    /// Odometer index of an image on the grid, or `None` if a pixel is off-grid.
    pub fn index_of(&self, img: &Image) -> Option<usize> {
        if img.shape() != self.shape() {
            return None;
        }
        let mut index = 0;
        for &v in img.data() {
            let digit = self.levels.iter().position(|&l| l == v)?;
            index = index * self.levels.len() + digit;
        }
        Some(index)
    }

    /// `log q(I)` on the grid.
    pub fn log_reference(&self, img: &Image, sigma_sq: f64) -> f64 {
        let n = (self.height * self.width) as f64;
        match self.reference {
            Reference::Uniform => -n * (self.levels.len() as f64).ln(),
            Reference::GaussianRestricted => {
                let per_pixel = log_sum_exp(self.levels.iter().map(|v| -v * v / (2.0 * sigma_sq)));
                let norm: f64 = img.data().iter().map(|v| v * v).sum();
                -norm / (2.0 * sigma_sq) - n * per_pixel
            }
        }
    }

    fn check_model<M: Learnable>(&self, model: &M) -> Result<()> {
        if model.image_shape() != self.shape() {
            return Err(Error::Geometry(format!(
                "model is defined on {:?}, oracle grid is {}x{}x1",
                model.image_shape(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    fn log_weight<M: Learnable>(&self, model: &M, img: &Image) -> Result<f64> {
        Ok(model.energy(img)?.feature_term + self.log_reference(img, model.sigma_sq()))
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Max-shifted partial sums over a block of states.
#[derive(Debug, Clone)]
struct Partial {
    shift: f64,
    mass: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    energy: f64,
}

impl Partial {
    fn rescale(&mut self, shift: f64) {
        let f = (self.shift - shift).exp();
        self.mass *= f;
        self.energy *= f;
        self.first.iter_mut().for_each(|v| *v *= f);
        self.second.iter_mut().for_each(|v| *v *= f);
        self.shift = shift;
    }

    fn merge(mut self, mut other: Partial) -> Partial {
        if other.mass == 0.0 {
            return self;
        }
        if self.mass == 0.0 {
            return other;
        }
        let shift = self.shift.max(other.shift);
        self.rescale(shift);
        other.rescale(shift);
        self.mass += other.mass;
        self.energy += other.energy;
        self.first.iter_mut().zip(&other.first).for_each(|(a, b)| *a += b);
        self.second.iter_mut().zip(&other.second).for_each(|(a, b)| *a += b);
        self
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Order {
    None,
    First,
    Second,
}

fn enumerate<M: Learnable>(spec: &OracleSpec, model: &M, order: Order) -> Result<Partial> {
    spec.check_model(model)?;
    let states = spec.state_count();
    let dim = if order == Order::None { 0 } else { model.params().len() };
    let blocks: Vec<Result<Partial>> = (0..states.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let range = b * BLOCK..((b + 1) * BLOCK).min(states);
            let mut logw = Vec::with_capacity(range.len());
            let mut stats = Vec::with_capacity(if dim > 0 { range.len() } else { 0 });
            let mut energies = Vec::with_capacity(range.len());
            for i in range {
                let img = spec.state(i);
                let report = model.energy(&img)?;
                logw.push(report.feature_term + spec.log_reference(&img, model.sigma_sq()));
                energies.push(report.energy);
                if dim > 0 {
                    stats.push(model.statistics(&img)?);
                }
            }
            let shift = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut p = Partial {
                shift,
                mass: 0.0,
                first: vec![0.0; dim],
                second: vec![0.0; if order == Order::Second { dim * dim } else { 0 }],
                energy: 0.0,
            };
            for (i, &lw) in logw.iter().enumerate() {
                let e = (lw - shift).exp();
                p.mass += e;
                p.energy += e * energies[i];
                if dim > 0 {
                    let s = &stats[i];
                    p.first.iter_mut().zip(s).for_each(|(a, v)| *a += e * v);
                    if order == Order::Second {
                        for r in 0..dim {
                            for c in 0..dim {
                                p.second[r * dim + c] += e * s[r] * s[c];
                            }
                        }
                    }
                }
            }
            if !p.mass.is_finite() || p.mass == 0.0 {
                return Err(Error::NonFinite("unnormalized probability mass".into()));
            }
            Ok(p)
        })
        .collect();
    let mut total: Option<Partial> = None;
    for b in blocks {
        let b = b?;
        total = Some(match total {
            None => b,
            Some(t) => t.merge(b),
        });
    }
    Ok(total.expect("at least one state"))
}

/// `log Z` of the model on the grid.
pub fn exact_partition<M: Learnable>(spec: &OracleSpec, model: &M) -> Result<f64> {
    let p = enumerate(spec, model, Order::None)?;
    Ok(p.shift + p.mass.ln())
}

/// Exact moments of the model statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub log_z: f64,
    pub mean: Vec<f64>,
    /// Row-major covariance, when requested.
    pub covariance: Option<Vec<f64>>,
    pub mean_energy: f64,
}

fn moments<M: Learnable>(spec: &OracleSpec, model: &M, covariance: bool) -> Result<Moments> {
    let order = if covariance { Order::Second } else { Order::First };
    let p = enumerate(spec, model, order)?;
    let mean: Vec<f64> = p.first.iter().map(|v| v / p.mass).collect();
    let covariance = covariance.then(|| {
        let d = mean.len();
        let mut c: Vec<f64> = p.second.iter().map(|v| v / p.mass).collect();
        for r in 0..d {
            for col in 0..d {
                c[r * d + col] -= mean[r] * mean[col];
            }
        }
        c
    });
    Ok(Moments {
        log_z: p.shift + p.mass.ln(),
        mean,
        covariance,
        mean_energy: p.energy / p.mass,
    })
}

/// `E_p[statistics]` under the model.
pub fn exact_expectation<M: Learnable>(spec: &OracleSpec, model: &M) -> Result<Vec<f64>> {
    Ok(moments(spec, model, false)?.mean)
}

/// Mean, covariance and `log Z` in one enumeration.
pub fn exact_moments<M: Learnable>(spec: &OracleSpec, model: &M) -> Result<Moments> {
    moments(spec, model, true)
}

/// Normalized probability of every state, in odometer order.
pub fn probability_table<M: Learnable>(spec: &OracleSpec, model: &M) -> Result<Vec<f64>> {
    spec.check_model(model)?;
    let logw = (0..spec.state_count())
        .into_par_iter()
        .map(|i| spec.log_weight(model, &spec.state(i)))
        .collect::<Result<Vec<_>>>()?;
    let log_z = log_sum_exp(logw.iter().copied());
    Ok(logw.iter().map(|v| (v - log_z).exp()).collect())
}

/// The reference distribution `q` on the grid.
pub fn reference_table(spec: &OracleSpec, sigma_sq: f64) -> Vec<f64> {
    (0..spec.state_count())
        .map(|i| spec.log_reference(&spec.state(i), sigma_sq).exp())
        .collect()
}

/// `sum p log(p / q)` with `0 log 0 = 0`.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Geometry(format!("tables of {} and {} states", p.len(), q.len())));
    }
    for (name, t) in [("p", p), ("q", q)] {
        if t.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("{name} has negative or non-finite entries")));
        }
        let total: f64 = t.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("{name} sums to {total}, not 1")));
        }
    }
    let mut kl = 0.0;
    for (state, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Err(Error::InfiniteDivergence { state });
        }
        kl += a * (a / b).ln();
    }
    Ok(kl)
}

/// Independent draws of state indices from a probability table.
pub fn exact_sample<R: Rng + ?Sized>(table: &[f64], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(table)
        .map_err(|e| Error::InvalidArgument(format!("probability table: {e}")))?;
    Ok((0..count).map(|_| dist.sample(rng)).collect())
}

/// Exact expectations in place of Langevin chains.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    spec: OracleSpec,
}

impl OracleEstimator {
    pub fn new(spec: OracleSpec) -> Self {
        Self { spec }
    }
}

impl<M: Learnable> Estimator<M> for OracleEstimator {
    fn estimate(&mut self, model: &M) -> Result<Estimate> {
        let m = moments(&self.spec, model, false)?;
        Ok(Estimate {
            statistics: m.mean,
            mean_energy: m.mean_energy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Stop once `max |E_w[stats] - H_obs|` is at or below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Parameter norm beyond which a stalled fit is declared infeasible.
    pub divergence_norm: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 500,
            divergence_norm: 1e4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleFit<M> {
    pub model: M,
    /// Final `max |E_w[stats] - H_obs|`.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximizes the exact log-likelihood of `observed` (images on the grid),
/// starting from `initial`. Steps are Levenberg-damped Newton steps, i.e.
/// gradient ascent preconditioned by the exact Fisher information.
pub fn exact_fit<M: Learnable>(
    spec: &OracleSpec,
    initial: M,
    observed: &[Image],
    options: &FitOptions,
) -> Result<OracleFit<M>> {
    if let Some(i) = observed.iter().position(|im| spec.index_of(im).is_none()) {
        return Err(Error::InvalidArgument(format!("observed image {i} is not on the oracle grid")));
    }
    let target = mean_statistics(&initial, observed)?;
    exact_fit_target(spec, initial, &target, options)
}

/// [`exact_fit`] against given target statistics, which may lie outside
/// the achievable set; such targets end in [`Error::Infeasible`].
pub fn exact_fit_target<M: Learnable>(
    spec: &OracleSpec,
    initial: M,
    target: &[f64],
    options: &FitOptions,
) -> Result<OracleFit<M>> {
    if initial.statistics_depend_on_params() {
        return Err(Error::InvalidArgument(
            "exact fitting needs an exponential-family model".into(),
        ));
    }
    if target.len() != initial.params().len() {
        return Err(Error::Geometry(format!(
            "{} target statistics for {} parameters",
            target.len(),
            initial.params().len()
        )));
    }
    let scale = initial.statistic_scale();
    let d = target.len();
    // log-likelihood up to constants: scale <theta, H_obs> - log Z
    let objective = |theta: &[f64], log_z: f64| {
        scale * theta.iter().zip(target).map(|(a, b)| a * b).sum::<f64>() - log_z
    };
    let gap_of = |mean: &[f64]| {
        mean.iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };

    let mut model = initial;
    let mut m = exact_moments(spec, &model)?;
    let mut value = objective(model.params(), m.log_z);
    let mut gap = gap_of(&m.mean);
    let mut damping = 1e-3;
    let mut iterations = 0;
    while gap > options.tolerance && iterations < options.max_iterations {
        iterations += 1;
        let cov = DMatrix::from_row_slice(d, d, m.covariance.as_ref().expect("covariance requested"));
        let grad = DVector::from_iterator(d, target.iter().zip(&m.mean).map(|(t, e)| scale * (t - e)));
        let mut accepted = false;
        while damping < 1e12 {
            let system = &cov * (scale * scale) + DMatrix::identity(d, d) * damping;
            let Some(chol) = system.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&grad);
            let theta: Vec<f64> = model.params().iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let candidate = model.with_params(theta)?;
            let cm = exact_moments(spec, &candidate)?;
            let cv = objective(candidate.params(), cm.log_z);
            if cv.is_finite() && cv >= value {
                model = candidate;
                m = cm;
                value = cv;
                damping = (damping / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            damping *= 10.0;
        }
        gap = gap_of(&m.mean);
        let norm = model.params().iter().map(|v| v * v).sum::<f64>().sqrt();
        if gap > options.tolerance && norm > options.divergence_norm {
            return Err(Error::Infeasible {
                gap,
                weight_norm: norm,
            });
        }
        if !accepted {
            break;
        }
    }
    Ok(OracleFit {
        model,
        gap,
        iterations,
        converged: gap <= options.tolerance,
    })
}
