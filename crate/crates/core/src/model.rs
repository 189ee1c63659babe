//! FRAME probability models over a filter bank.
//!
//! Both models have density `p(I; w) = exp(sum w [F * I]) q(I) / Z(w)` with a
//! Gaussian white-noise reference `q` of variance `sigma_sq`, i.e. energy
//!
//! ```text
//! U(I, w) = -sum_{k,x} w_{k,x} [F_k * I](x) + |I|^2 / (2 sigma_sq)
//! ```
//!
//! The non-stationary model keeps one weight per filter and position; the
//! stationary model shares `w_k` across positions. `log Z` is never computed
//! here; see [`crate::oracle`] for exact values on tiny discrete domains.

use std::sync::Arc;

use crate::bank::FilterBank;
use crate::error::{Error, Result};
use crate::image::{image_norm_sq, FeatureStack, Image, ImageShape};

/// `energy = gaussian_term - feature_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub energy: f64,
    pub feature_term: f64,
    pub gaussian_term: f64,
}

impl EnergyReport {
    fn new(feature_term: f64, gaussian_term: f64) -> Self {
        Self {
            energy: gaussian_term - feature_term,
            feature_term,
            gaussian_term,
        }
    }
}

/// A Gibbs density over images of one fixed shape, defined by its energy.
pub trait EnergyModel: Sync {
    fn image_shape(&self) -> ImageShape;
    fn sigma_sq(&self) -> f64;
    fn energy(&self, img: &Image) -> Result<EnergyReport>;
    /// Exact gradient of [`EnergyModel::energy`] with respect to the image.
    fn grad_energy_image(&self, img: &Image) -> Result<Image>;
}

/// A model whose parameters can be fitted by maximum likelihood.
///
/// The log-likelihood gradient for a parameter vector `theta` is
/// `scale * (mean_obs statistics - E_theta statistics)` where
/// `scale = statistic_scale()`.
pub trait Learnable: EnergyModel + Clone + Send {
    fn params(&self) -> &[f64];
    /// Tensor dimensions of the parameter vector (for reporting and checkpoints).
    fn param_dims(&self) -> Vec<usize>;
    fn with_params(&self, params: Vec<f64>) -> Result<Self>;
    /// Sufficient statistics (or, for non-exponential-family models, the
    /// parameter gradient of the feature term) at `img`.
    fn statistics(&self, img: &Image) -> Result<Vec<f64>>;
    /// `d(feature_term)/d(theta) = statistic_scale() * statistics()`.
    fn statistic_scale(&self) -> f64 {
        1.0
    }
    /// False for exponential families, whose statistics ignore the parameters.
    fn statistics_depend_on_params(&self) -> bool {
        false
    }
    /// Observed variance of each statistic used by variance-scaled learning
    /// rates; defaults to the across-image variance.
    fn observed_variance(&self, images: &[Image]) -> Result<Vec<f64>> {
        let stats = images
            .iter()
            .map(|im| self.statistics(im))
            .collect::<Result<Vec<_>>>()?;
        Ok(variance_across(&stats))
    }
}

/// Per-entry population variance across a set of equally long vectors.
pub(crate) fn variance_across(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let len = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; len];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    var
}

fn check_sigma(sigma_sq: f64) -> Result<()> {
    if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "reference variance must be positive and finite, got {sigma_sq}"
        )));
    }
    Ok(())
}

fn check_shape(expected: ImageShape, img: &Image) -> Result<()> {
    if img.shape() != expected {
        return Err(Error::Geometry(format!(
            "model is defined on {}x{}x{} images, got {}x{}x{}",
            expected.height,
            expected.width,
            expected.channels,
            img.height(),
            img.width(),
            img.channels()
        )));
    }
    Ok(())
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// `img / sigma_sq - feature_grad`, pixel by pixel.
pub(crate) fn combine_gradient(img: &Image, feature_grad: Image, sigma_sq: f64) -> Image {
    let data = img
        .data()
        .iter()
        .zip(feature_grad.data())
        .map(|(&x, &g)| x / sigma_sq - g)
        .collect();
    Image::from_raw(img.shape(), data, 0.0)
}

/// Per-position weights `w[k][y][x]` over the bank's top-layer maps.
#[derive(Debug, Clone)]
pub struct NonStationaryFrame {
    bank: Arc<FilterBank>,
    shape: ImageShape,
    dims: (usize, usize, usize),
    weights: Vec<f64>,
    sigma_sq: f64,
}

impl NonStationaryFrame {
    pub fn new(
        bank: Arc<FilterBank>,
        shape: ImageShape,
        weights: Vec<f64>,
        sigma_sq: f64,
    ) -> Result<Self> {
        check_sigma(sigma_sq)?;
        if shape.channels != bank.input_channels() {
            return Err(Error::Geometry(format!(
                "bank takes {} channels, model shape has {}",
                bank.input_channels(),
                shape.channels
            )));
        }
        let dims = bank.output_dims(shape.height, shape.width)?;
        if weights.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Geometry(format!(
                "{} weights for feature geometry {dims:?}",
                weights.len()
            )));
        }
        check_finite(&weights, "model weights")?;
        Ok(Self {
            bank,
            shape,
            dims,
            weights,
            sigma_sq,
        })
    }

    /// The reference model `q` (all weights zero).
    pub fn zeros(bank: Arc<FilterBank>, shape: ImageShape, sigma_sq: f64) -> Result<Self> {
        let (k, h, w) = bank.output_dims(shape.height, shape.width)?;
        Self::new(bank, shape, vec![0.0; k * h * w], sigma_sq)
    }

    pub fn bank(&self) -> &Arc<FilterBank> {
        &self.bank
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(K, H', W')` of the weight tensor.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn weight_stack(&self) -> FeatureStack {
        let (k, h, w) = self.dims;
        FeatureStack::from_raw(k, h, w, self.weights.clone(), false, Default::default())
    }

    /// Unnormalized log-likelihood ratio against the reference,
    /// `sum w [F * I] = log(p / q) + log Z(w)`.
    pub fn log_score(&self, img: &Image) -> Result<f64> {
        check_shape(self.shape, img)?;
        let features = self.bank.forward(img)?;
        Ok(dot(&self.weights, features.data()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl EnergyModel for NonStationaryFrame {
    fn image_shape(&self) -> ImageShape {
        self.shape
    }

    fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    fn energy(&self, img: &Image) -> Result<EnergyReport> {
        let feature_term = self.log_score(img)?;
        Ok(EnergyReport::new(
            feature_term,
            image_norm_sq(img) / (2.0 * self.sigma_sq),
        ))
    }

    fn grad_energy_image(&self, img: &Image) -> Result<Image> {
        check_shape(self.shape, img)?;
        let g = self.bank.backward_image(img, &self.weight_stack())?;
        Ok(combine_gradient(img, g, self.sigma_sq))
    }
}

impl Learnable for NonStationaryFrame {
    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn param_dims(&self) -> Vec<usize> {
        vec![self.dims.0, self.dims.1, self.dims.2]
    }

    fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.bank.clone(), self.shape, params, self.sigma_sq)
    }

    fn statistics(&self, img: &Image) -> Result<Vec<f64>> {
        check_shape(self.shape, img)?;
        Ok(self.bank.forward(img)?.into_data())
    }
}

/// One weight per filter, shared across positions.
#[derive(Debug, Clone)]
pub struct StationaryFrame {
    bank: Arc<FilterBank>,
    shape: ImageShape,
    dims: (usize, usize, usize),
    weights: Vec<f64>,
    sigma_sq: f64,
}

impl StationaryFrame {
    pub fn new(
        bank: Arc<FilterBank>,
        shape: ImageShape,
        weights: Vec<f64>,
        sigma_sq: f64,
    ) -> Result<Self> {
        check_sigma(sigma_sq)?;
        if shape.channels != bank.input_channels() {
            return Err(Error::Geometry(format!(
                "bank takes {} channels, model shape has {}",
                bank.input_channels(),
                shape.channels
            )));
        }
        let dims = bank.output_dims(shape.height, shape.width)?;
        if weights.len() != dims.0 {
            return Err(Error::Geometry(format!(
                "{} weights for {} filters",
                weights.len(),
                dims.0
            )));
        }
        check_finite(&weights, "model weights")?;
        Ok(Self {
            bank,
            shape,
            dims,
            weights,
            sigma_sq,
        })
    }

    pub fn zeros(bank: Arc<FilterBank>, shape: ImageShape, sigma_sq: f64) -> Result<Self> {
        let k = bank.output_channels();
        Self::new(bank, shape, vec![0.0; k], sigma_sq)
    }

    pub fn bank(&self) -> &Arc<FilterBank> {
        &self.bank
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn feature_dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Spatially pooled response per filter: `(1/|D'|) sum_x [F_k * I](x)`.
    pub fn pooled_stats(&self, img: &Image) -> Result<Vec<f64>> {
        check_shape(self.shape, img)?;
        Ok(pool_features(&self.bank.forward(img)?))
    }
}

/// Mean of each feature map, summed in row-major order.
pub fn pool_features(features: &FeatureStack) -> Vec<f64> {
    let area = features.area() as f64;
    (0..features.channels())
        .map(|k| features.map(k).iter().sum::<f64>() / area)
        .collect()
}

impl EnergyModel for StationaryFrame {
    fn image_shape(&self) -> ImageShape {
        self.shape
    }

    fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    fn energy(&self, img: &Image) -> Result<EnergyReport> {
        check_shape(self.shape, img)?;
        let features = self.bank.forward(img)?;
        let feature_term = (0..features.channels())
            .map(|k| self.weights[k] * features.map(k).iter().sum::<f64>())
            .sum();
        Ok(EnergyReport::new(
            feature_term,
            image_norm_sq(img) / (2.0 * self.sigma_sq),
        ))
    }

    fn grad_energy_image(&self, img: &Image) -> Result<Image> {
        check_shape(self.shape, img)?;
        let (k, h, w) = self.dims;
        let mut cot = Vec::with_capacity(k * h * w);
        for &wk in &self.weights {
            cot.extend(std::iter::repeat_n(wk, h * w));
        }
        let cot = FeatureStack::from_raw(k, h, w, cot, false, Default::default());
        let g = self.bank.backward_image(img, &cot)?;
        Ok(combine_gradient(img, g, self.sigma_sq))
    }
}

impl Learnable for StationaryFrame {
    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn param_dims(&self) -> Vec<usize> {
        vec![self.dims.0]
    }

    fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.bank.clone(), self.shape, params, self.sigma_sq)
    }

    fn statistics(&self, img: &Image) -> Result<Vec<f64>> {
        self.pooled_stats(img)
    }

    fn statistic_scale(&self) -> f64 {
        (self.dims.1 * self.dims.2) as f64
    }

    /// Variance of individual responses over all images and positions, per filter.
    fn observed_variance(&self, images: &[Image]) -> Result<Vec<f64>> {
        let (k, h, w) = self.dims;
        let mut per_filter: Vec<Vec<f64>> = vec![Vec::with_capacity(images.len() * h * w); k];
        for im in images {
            check_shape(self.shape, im)?;
            let f = self.bank.forward(im)?;
            for (kk, dst) in per_filter.iter_mut().enumerate() {
                dst.extend_from_slice(f.map(kk));
            }
        }
        Ok(per_filter
            .iter()
            .map(|v| {
                let n = v.len() as f64;
                let m = v.iter().sum::<f64>() / n;
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
            })
            .collect())
    }
}
