//! A generative convolutional layer on top of a fixed bank, and joint
//! refinement of several layers.
//!
//! Expert `j` at position `y` contributes `relu(sum_{k,x} w_j[k][x] F_k(y + x) + b_j)`
//! to the feature term, where `F` is the base bank's output and `x` ranges
//! over the window. The whole model is the base bank with one appended valid,
//! stride-1 convolution; its density is a product of experts times the
//! Gaussian reference.

use std::sync::Arc;

use rand::Rng;

use super::{fit_with_chains, check_images, Fit, LearnConfig};
use crate::bank::{Activation, ConvLayer, FilterBank, Padding};
use crate::error::{Error, Result};
use crate::image::{FeatureStack, Image, ImageShape};
use crate::model::{combine_gradient, EnergyModel, EnergyReport, Learnable};
use crate::rng;
use crate::sampler::ChainState;

fn ones_like(stack: &FeatureStack) -> FeatureStack {
    let (k, h, w) = stack.dims();
    FeatureStack::filled(k, h, w, 1.0)
}

/// Energy `-sum(top outputs) + |I|^2 / (2 sigma_sq)` of a whole bank.
fn bank_energy(bank: &FilterBank, img: &Image, sigma_sq: f64) -> Result<EnergyReport> {
    let top = bank.forward(img)?;
    let feature_term: f64 = top.data().iter().sum();
    let gaussian_term = crate::image::image_norm_sq(img) / (2.0 * sigma_sq);
    Ok(EnergyReport {
        energy: gaussian_term - feature_term,
        feature_term,
        gaussian_term,
    })
}

fn bank_energy_grad(bank: &FilterBank, img: &Image, sigma_sq: f64) -> Result<Image> {
    let trace = bank.forward_trace(img)?;
    let cot = ones_like(trace.output());
    let g = bank.backward_image_from_trace(&trace, &cot)?;
    Ok(combine_gradient(img, g, sigma_sq))
}

fn check_shape(expected: ImageShape, img: &Image) -> Result<()> {
    if img.shape() != expected {
        return Err(Error::Geometry("image does not match the model geometry".into()));
    }
    Ok(())
}

/// Learned layer of `filters` experts with `window` support over the base maps.
#[derive(Debug, Clone)]
pub struct GenerativeLayer {
    base: Arc<FilterBank>,
    shape: ImageShape,
    base_dims: (usize, usize, usize),
    filters: usize,
    window: (usize, usize),
    /// `[J][K][h][w]` weights followed by `J` biases.
    params: Vec<f64>,
    forced_on: bool,
    sigma_sq: f64,
    composed: Arc<FilterBank>,
}

impl GenerativeLayer {
    pub fn new(
        base: Arc<FilterBank>,
        shape: ImageShape,
        window: (usize, usize),
        weights: Vec<f64>,
        biases: Vec<f64>,
        sigma_sq: f64,
    ) -> Result<Self> {
        let filters = biases.len();
        Self::build(base, shape, window, [weights, biases].concat(), filters, false, sigma_sq)
    }

    fn build(
        base: Arc<FilterBank>,
        shape: ImageShape,
        window: (usize, usize),
        params: Vec<f64>,
        filters: usize,
        forced_on: bool,
        sigma_sq: f64,
    ) -> Result<Self> {
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::InvalidArgument("reference variance must be positive".into()));
        }
        if filters == 0 {
            return Err(Error::InvalidArgument("a generative layer needs at least one filter".into()));
        }
        if shape.channels != base.input_channels() {
            return Err(Error::Geometry("base bank and image channels differ".into()));
        }
        let base_dims = base.output_dims(shape.height, shape.width)?;
        let (k, bh, bw) = base_dims;
        let (wh, ww) = window;
        if wh == 0 || ww == 0 || wh > bh || ww > bw {
            return Err(Error::Geometry(format!(
                "{wh}x{ww} window does not fit the {bh}x{bw} base maps"
            )));
        }
        if params.len() != filters * k * wh * ww + filters {
            return Err(Error::Geometry(format!(
                "{} parameters for {filters} filters of {k}x{wh}x{ww}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generative layer parameters".into()));
        }
        let split = filters * k * wh * ww;
        let top = ConvLayer::new(filters, k, window, params[..split].to_vec(), params[split..].to_vec())?
            .with_padding(Padding::Valid)
            .with_activation(if forced_on { Activation::Identity } else { Activation::Relu });
        let composed = Arc::new(base.with_layer(top)?);
        Ok(Self {
            base,
            shape,
            base_dims,
            filters,
            window,
            params,
            forced_on,
            sigma_sq,
            composed,
        })
    }

    /// Every detector permanently on: the layer becomes linear in the base
    /// responses (used to check reductions to the per-position model).
    pub fn with_forced_on(&self, forced_on: bool) -> Result<Self> {
        Self::build(
            self.base.clone(),
            self.shape,
            self.window,
            self.params.clone(),
            self.filters,
            forced_on,
            self.sigma_sq,
        )
    }

    pub fn base(&self) -> &Arc<FilterBank> {
        &self.base
    }

    /// The base bank with this layer appended.
    pub fn composed(&self) -> &Arc<FilterBank> {
        &self.composed
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    pub fn forced_on(&self) -> bool {
        self.forced_on
    }

    fn weight_len(&self) -> usize {
        self.filters * self.base_dims.0 * self.window.0 * self.window.1
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.weight_len()]
    }

    pub fn biases(&self) -> &[f64] {
        &self.params[self.weight_len()..]
    }

    /// Detector positions per filter.
    pub fn detector_dims(&self) -> (usize, usize) {
        (self.base_dims.1 - self.window.0 + 1, self.base_dims.2 - self.window.1 + 1)
    }

    /// `sum_{k,x} w_j[k][x] F_k(y + x)` plus `b_j` when `with_bias`, as `[J][Y][X]`.
    fn responses(&self, base: &FeatureStack, with_bias: bool) -> Result<Vec<f64>> {
        if base.dims() != self.base_dims {
            return Err(Error::Geometry(format!(
                "base stack is {:?}, layer expects {:?}",
                base.dims(),
                self.base_dims
            )));
        }
        let (k, _, bw) = self.base_dims;
        let (wh, ww) = self.window;
        let (oh, ow) = self.detector_dims();
        let weights = self.weights();
        let data = base.data();
        let area = base.area();
        let mut out = Vec::with_capacity(self.filters * oh * ow);
        for j in 0..self.filters {
            let bias = if with_bias { self.biases()[j] } else { 0.0 };
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias;
                    for kk in 0..k {
                        let kernel = &weights[(j * k + kk) * wh * ww..(j * k + kk + 1) * wh * ww];
                        for dy in 0..wh {
                            for dx in 0..ww {
                                acc += kernel[dy * ww + dx] * data[kk * area + (y + dy) * bw + x + dx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        Ok(out)
    }

    /// Detector-gated base responses for one image, `[J][K][h][w]` then `[J]`.
    fn image_statistics(&self, base: &FeatureStack) -> Result<Vec<f64>> {
        let on = detect(self, base)?;
        let (k, _, bw) = self.base_dims;
        let (wh, ww) = self.window;
        let (oh, ow) = self.detector_dims();
        let area = base.area();
        let data = base.data();
        let mut grad = vec![0.0; self.params.len()];
        let split = self.weight_len();
        for j in 0..self.filters {
            for y in 0..oh {
                for x in 0..ow {
                    if !on.get(j, y, x) {
                        continue;
                    }
                    for kk in 0..k {
                        let g = &mut grad[(j * k + kk) * wh * ww..(j * k + kk + 1) * wh * ww];
                        for dy in 0..wh {
                            for dx in 0..ww {
                                g[dy * ww + dx] += data[kk * area + (y + dy) * bw + x + dx];
                            }
                        }
                    }
                    grad[split + j] += 1.0;
                }
            }
        }
        Ok(grad)
    }
}

impl EnergyModel for GenerativeLayer {
    fn image_shape(&self) -> ImageShape {
        self.shape
    }

    fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    fn energy(&self, img: &Image) -> Result<EnergyReport> {
        check_shape(self.shape, img)?;
        bank_energy(&self.composed, img, self.sigma_sq)
    }

    fn grad_energy_image(&self, img: &Image) -> Result<Image> {
        check_shape(self.shape, img)?;
        bank_energy_grad(&self.composed, img, self.sigma_sq)
    }
}

impl Learnable for GenerativeLayer {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn param_dims(&self) -> Vec<usize> {
        vec![self.filters, self.base_dims.0, self.window.0, self.window.1]
    }

    fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::build(
            self.base.clone(),
            self.shape,
            self.window,
            params,
            self.filters,
            self.forced_on,
            self.sigma_sq,
        )
    }

    fn statistics(&self, img: &Image) -> Result<Vec<f64>> {
        check_shape(self.shape, img)?;
        self.image_statistics(&self.base.forward(img)?)
    }

    fn statistics_depend_on_params(&self) -> bool {
        true
    }
}

/// Binary detector maps `[J][Y][X]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detections {
    pub filters: usize,
    pub height: usize,
    pub width: usize,
    pub on: Vec<bool>,
}

impl Detections {
    pub fn get(&self, j: usize, y: usize, x: usize) -> bool {
        self.on[(j * self.height + y) * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.on.iter().filter(|&&b| b).count()
    }
}

/// `delta_{j,y} = 1` iff the expert's pre-activation is strictly positive
/// (always 1 for a forced-on layer).
pub fn detect(layer: &GenerativeLayer, base: &FeatureStack) -> Result<Detections> {
    let r = layer.responses(base, true)?;
    let (height, width) = layer.detector_dims();
    Ok(Detections {
        filters: layer.filters,
        height,
        width,
        on: r.iter().map(|&v| layer.forced_on || v > 0.0).collect(),
    })
}

/// Log-likelihood gradient of a generative layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    /// `[J][K][h][w]`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Mean detector-gated statistics over `observed` minus the same over `synthesized`.
pub fn grad_generative_layer(
    layer: &GenerativeLayer,
    observed: &[Image],
    synthesized: &[Image],
) -> Result<LayerGradient> {
    let obs = super::mean_statistics(layer, observed)?;
    let syn = super::mean_statistics(layer, synthesized)?;
    let diff: Vec<f64> = obs.iter().zip(&syn).map(|(o, s)| o - s).collect();
    let split = layer.weight_len();
    Ok(LayerGradient {
        weights: diff[..split].to_vec(),
        biases: diff[split..].to_vec(),
    })
}

/// `b = log(alpha / (1 - alpha)) - log Z`.
pub fn bias_from_alpha(alpha: f64, log_z: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok((alpha / (1.0 - alpha)).ln() - log_z)
}

/// `log(1 + e^r)` without overflow.
pub fn softplus(r: f64) -> f64 {
    r.max(0.0) + (-r.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerOptions {
    pub sigma_sq: f64,
    /// Biases start so that this quantile of observed pre-activations sits at 0.
    pub bias_quantile: f64,
    /// Weights start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            sigma_sq: 1.0,
            bias_quantile: 0.9,
            init_scale: 1e-3,
        }
    }
}

/// Initial layer: weights uniform in `[-init_scale, init_scale]` from the
/// seed's initialization stream, biases at minus the `bias_quantile` of each
/// expert's bias-free responses over `images` and positions.
pub fn init_layer(
    base: Arc<FilterBank>,
    images: &[Image],
    filters: usize,
    window: (usize, usize),
    master_seed: u64,
    options: &LayerOptions,
) -> Result<GenerativeLayer> {
    if !(options.bias_quantile > 0.0 && options.bias_quantile < 1.0) {
        return Err(Error::InvalidArgument("bias quantile must lie in (0, 1)".into()));
    }
    if !(options.init_scale >= 0.0 && options.init_scale.is_finite()) {
        return Err(Error::InvalidArgument("initial weight scale must be nonnegative".into()));
    }
    let shape = check_images(images)?;
    let (k, _, _) = base.output_dims(shape.height, shape.width)?;
    let mut init = rng::stream(master_seed, rng::INIT_STREAM);
    let s = options.init_scale;
    let weights: Vec<f64> = (0..filters * k * window.0 * window.1)
        .map(|_| if s > 0.0 { init.random_range(-s..=s) } else { 0.0 })
        .collect();
    let layer = GenerativeLayer::new(base.clone(), shape, window, weights, vec![0.0; filters], options.sigma_sq)?;

    let (oh, ow) = layer.detector_dims();
    let mut per_filter: Vec<Vec<f64>> = vec![Vec::with_capacity(images.len() * oh * ow); filters];
    for img in images {
        let r = layer.responses(&base.forward(img)?, false)?;
        for (j, dst) in per_filter.iter_mut().enumerate() {
            dst.extend_from_slice(&r[j * oh * ow..(j + 1) * oh * ow]);
        }
    }
    let mut params = layer.weights().to_vec();
    params.extend(per_filter.iter_mut().map(|v| -quantile(v, options.bias_quantile)));
    layer.with_params(params)
}

/// Learns `filters` experts with `window` support on top of `base`.
pub fn fit_layer(
    base: Arc<FilterBank>,
    images: &[Image],
    filters: usize,
    window: (usize, usize),
    config: &LearnConfig,
    options: &LayerOptions,
) -> Result<(Fit<GenerativeLayer>, ChainState)> {
    config.validate()?;
    let layer = init_layer(base, images, filters, window, config.master_seed, options)?;
    fit_with_chains(layer, images, config)
}

/// Nearest-rank quantile: the smallest value with at least `q n` values at or below it.
fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// A whole bank treated as one energy model whose feature term is the sum of
/// its top-layer outputs, with a chosen subset of layers trainable.
#[derive(Debug, Clone)]
pub struct ComposedModel {
    bank: Arc<FilterBank>,
    shape: ImageShape,
    trainable: Vec<bool>,
    params: Vec<f64>,
    sigma_sq: f64,
}

impl ComposedModel {
    pub fn new(bank: Arc<FilterBank>, shape: ImageShape, trainable: Vec<bool>, sigma_sq: f64) -> Result<Self> {
        if trainable.len() != bank.layers().len() {
            return Err(Error::InvalidArgument(format!(
                "{} trainable flags for {} layers",
                trainable.len(),
                bank.layers().len()
            )));
        }
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::InvalidArgument("reference variance must be positive".into()));
        }
        if shape.channels != bank.input_channels() {
            return Err(Error::Geometry("bank and image channels differ".into()));
        }
        bank.output_dims(shape.height, shape.width)?;
        let mut params = Vec::new();
        for (layer, &t) in bank.layers().iter().zip(&trainable) {
            if t {
                params.extend_from_slice(layer.kernels());
                params.extend_from_slice(layer.bias());
            }
        }
        Ok(Self {
            bank,
            shape,
            trainable,
            params,
            sigma_sq,
        })
    }

    pub fn bank(&self) -> &Arc<FilterBank> {
        &self.bank
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }
}

impl GenerativeLayer {
    /// The same density as a composed model with only the top layer trainable.
    pub fn to_composed(&self) -> Result<ComposedModel> {
        let mut trainable = vec![false; self.composed.layers().len()];
        *trainable.last_mut().unwrap() = true;
        ComposedModel::new(self.composed.clone(), self.shape, trainable, self.sigma_sq)
    }
}

impl EnergyModel for ComposedModel {
    fn image_shape(&self) -> ImageShape {
        self.shape
    }

    fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    fn energy(&self, img: &Image) -> Result<EnergyReport> {
        check_shape(self.shape, img)?;
        bank_energy(&self.bank, img, self.sigma_sq)
    }

    fn grad_energy_image(&self, img: &Image) -> Result<Image> {
        check_shape(self.shape, img)?;
        bank_energy_grad(&self.bank, img, self.sigma_sq)
    }
}

impl Learnable for ComposedModel {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn param_dims(&self) -> Vec<usize> {
        vec![self.params.len()]
    }

    fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::Geometry(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("composed model parameters".into()));
        }
        let mut layers = Vec::with_capacity(self.trainable.len());
        let mut pos = 0;
        for (layer, &t) in self.bank.layers().iter().zip(&self.trainable) {
            if t {
                let nk = layer.kernels().len();
                let nb = layer.bias().len();
                let kernels = params[pos..pos + nk].to_vec();
                let bias = params[pos + nk..pos + nk + nb].to_vec();
                pos += nk + nb;
                layers.push(layer.with_weights(kernels, bias)?);
            } else {
                layers.push(layer.clone());
            }
        }
        Ok(Self {
            bank: Arc::new(self.bank.with_layers(layers)?),
            shape: self.shape,
            trainable: self.trainable.clone(),
            params,
            sigma_sq: self.sigma_sq,
        })
    }

    /// Gradient of the summed top outputs with respect to the trainable layers.
    fn statistics(&self, img: &Image) -> Result<Vec<f64>> {
        check_shape(self.shape, img)?;
        let trace = self.bank.forward_trace(img)?;
        let cot = ones_like(trace.output());
        let grads = self.bank.backward_weights_from_trace(&trace, &cot)?;
        let mut out = Vec::with_capacity(self.params.len());
        for (g, &t) in grads.into_iter().zip(&self.trainable) {
            if t {
                out.extend(g.kernels);
                out.extend(g.bias);
            }
        }
        Ok(out)
    }

    fn statistics_depend_on_params(&self) -> bool {
        true
    }
}

/// Joint maximum-likelihood refinement of every trainable layer.
pub fn refine_all_layers(
    model: ComposedModel,
    images: &[Image],
    config: &LearnConfig,
) -> Result<(Fit<ComposedModel>, ChainState)> {
    fit_with_chains(model, images, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{make_random_bank, RandomBankSpec};
    use crate::learner::{fit_object, learn, ChainEstimator};
    use crate::sampler::{init_chains, StartMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base() -> Arc<FilterBank> {
        Arc::new(
            make_random_bank(&RandomBankSpec {
                input_channels: 1,
                layers: vec![(3, 3)],
                activation: Activation::Relu,
                padding: Padding::Zero,
                pool: None,
                seed: 12,
            })
            .unwrap(),
        )
    }

    const SHAPE: ImageShape = ImageShape { height: 7, width: 7, channels: 1 };

    fn images(n: usize, seed: u64) -> Vec<Image> {
        init_chains(StartMode::Noise, n, SHAPE, 1.0, seed).unwrap().into_images()
    }

    fn random_layer(seed: u64, filters: usize, window: (usize, usize)) -> GenerativeLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = filters * 3 * window.0 * window.1;
        let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..filters).map(|_| rng.random_range(-0.5..0.5)).collect();
        GenerativeLayer::new(base(), SHAPE, window, w, b, 1.0).unwrap()
    }

    #[test]
    fn constant_bias_detectors() {
        let b = base();
        let f = b.forward(&images(1, 1)[0]).unwrap();
        let off = GenerativeLayer::new(b.clone(), SHAPE, (2, 2), vec![0.0; 24], vec![-1.0, -1.0], 1.0).unwrap();
        assert_eq!(detect(&off, &f).unwrap().count(), 0);
        let on = GenerativeLayer::new(b, SHAPE, (2, 2), vec![0.0; 24], vec![1.0, 1.0], 1.0).unwrap();
        let d = detect(&on, &f).unwrap();
        assert_eq!(d.count(), d.on.len());
    }

    #[test]
    fn zero_preactivation_is_off() {
        let b = base();
        let f = b.forward(&images(1, 1)[0]).unwrap();
        let l = GenerativeLayer::new(b, SHAPE, (1, 1), vec![0.0; 3], vec![0.0], 1.0).unwrap();
        assert_eq!(detect(&l, &f).unwrap().count(), 0);
    }

    #[test]
    fn silent_detectors_give_zero_gradient() {
        let b = base();
        let l = GenerativeLayer::new(b, SHAPE, (2, 2), vec![0.1; 24], vec![-1e6, -1e6], 1.0).unwrap();
        let g = grad_generative_layer(&l, &images(3, 2), &images(3, 3)).unwrap();
        assert!(g.weights.iter().chain(&g.biases).all(|&v| v == 0.0));
    }

    #[test]
    fn single_detection_gradient() {
        let layer = ConvLayer::new(1, 1, (1, 1), vec![1.0], vec![0.0])
            .unwrap()
            .with_activation(Activation::Relu);
        let b = Arc::new(FilterBank::new(1, vec![layer]).unwrap());
        let shape = ImageShape::new(3, 3, 1);
        let mut data = vec![0.0; 9];
        data[4] = 2.0;
        data[8] = 0.25;
        let img = Image::new(shape, data).unwrap();
        // r(y) = F(y) - 0.5 fires only where the window's corner sits on the 2
        let l = GenerativeLayer::new(b.clone(), shape, (2, 2), vec![1.0, 0.0, 0.0, 0.0], vec![-0.5], 1.0).unwrap();
        let f = b.forward(&img).unwrap();
        let d = detect(&l, &f).unwrap();
        assert_eq!(d.count(), 1);
        assert!(d.get(0, 1, 1));
        let zero = Image::zeros(shape).unwrap();
        let m = 2.0;
        let g = grad_generative_layer(&l, &[img, zero.clone()], &[zero]).unwrap();
        for dy in 0..2 {
            for dx in 0..2 {
                assert_eq!(g.weights[dy * 2 + dx], f.get(0, 1 + dy, 1 + dx) / m);
            }
        }
        assert_eq!(g.biases, vec![1.0 / m]);
    }

    #[test]
    fn statistics_match_composed_backward_weights() {
        for seed in 0..10 {
            let l = random_layer(seed, 2, (3, 2));
            let img = &images(1, 100 + seed)[0];
            let trace = l.composed().forward_trace(img).unwrap();
            let near_kink = trace
                .pre_activations(0)
                .iter()
                .chain(trace.pre_activations(1))
                .any(|r| r.abs() < 1e-3);
            if near_kink {
                continue;
            }
            let ours = l.statistics(img).unwrap();
            let cot = ones_like(trace.output());
            let grads = l.composed().backward_weights_from_trace(&trace, &cot).unwrap();
            let top = grads.last().unwrap();
            let auto: Vec<f64> = top.kernels.iter().chain(&top.bias).copied().collect();
            for (a, b) in ours.iter().zip(&auto) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn detector_maps_are_binary_and_match_composed_preactivations() {
        let l = random_layer(3, 2, (2, 2));
        let img = &images(1, 5)[0];
        let d = detect(&l, &l.base().forward(img).unwrap()).unwrap();
        let trace = l.composed().forward_trace(img).unwrap();
        for (on, &r) in d.on.iter().zip(trace.pre_activations(1)) {
            assert_eq!(*on, r > 0.0);
        }
    }

    #[test]
    fn bias_formula() {
        assert_eq!(bias_from_alpha(0.5, 0.0).unwrap(), 0.0);
        assert!(bias_from_alpha(0.0, 0.0).is_err());
        assert!(bias_from_alpha(1.0, 0.0).is_err());
        let mut last = f64::NEG_INFINITY;
        for a in [1e-12, 1e-6, 0.01, 0.3, 0.7, 0.99] {
            let b = bias_from_alpha(a, 1.5).unwrap();
            assert!(b > last);
            last = b;
        }
        assert!(bias_from_alpha(1e-300, 0.0).unwrap() < -600.0);
    }

    #[test]
    fn softplus_stays_within_log_two_of_relu() {
        for i in -2000..=2000 {
            let r = i as f64 * 0.05;
            let gap = softplus(r) - r.max(0.0);
            assert!((0.0..=std::f64::consts::LN_2).contains(&gap), "{r}");
        }
        assert_eq!(softplus(1000.0), 1000.0);
    }

    #[test]
    fn quantile_initialization_activates_a_tenth() {
        let imgs = images(4, 9);
        let l = init_layer(base(), &imgs, 2, (2, 2), 5, &LayerOptions::default()).unwrap();
        assert!(l.weights().iter().all(|w| w.abs() <= 1e-3));
        assert!(l.weights().iter().any(|&w| w != 0.0));
        let mut on = [0usize; 2];
        let mut total = 0;
        for img in &imgs {
            let d = detect(&l, &l.base().forward(img).unwrap()).unwrap();
            for (j, count) in on.iter_mut().enumerate() {
                *count += (0..d.height)
                    .flat_map(|y| (0..d.width).map(move |x| (y, x)))
                    .filter(|&(y, x)| d.get(j, y, x))
                    .count();
            }
            total += d.height * d.width;
        }
        for count in on {
            let frac = count as f64 / total as f64;
            assert!((0.08..=0.11).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn layer_learning_is_seeded() {
        let imgs = images(2, 9);
        let config = LearnConfig { iterations: 3, langevin_steps: 5, chains: 2, epsilon: 0.1, ..Default::default() };
        let (a, _) = fit_layer(base(), &imgs, 2, (2, 2), &config, &LayerOptions::default()).unwrap();
        let (b, _) = fit_layer(base(), &imgs, 2, (2, 2), &config, &LayerOptions::default()).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_ne!(a.model.weights()[0], a.model.weights()[1]);
    }

    #[test]
    fn forced_on_whole_window_layer_matches_object_learning() {
        let b = base();
        let imgs = images(3, 21);
        let (k, h, w) = b.output_dims(7, 7).unwrap();
        let config = LearnConfig {
            gamma0: 0.05,
            iterations: 5,
            langevin_steps: 10,
            chains: 3,
            epsilon: 0.1,
            master_seed: 4,
            ..Default::default()
        };
        let (object, object_chains) = fit_object(b.clone(), &imgs, &config, 1.0).unwrap();
        let layer = GenerativeLayer::new(b, SHAPE, (h, w), vec![0.0; k * h * w], vec![0.0], 1.0)
            .unwrap()
            .with_forced_on(true)
            .unwrap();
        let mut est = ChainEstimator::new(SHAPE, &config, 1.0, imgs[0].mean_offset()).unwrap();
        let fit = learn(layer, &imgs, &config, &mut est).unwrap();
        assert_eq!(fit.model.weights(), object.model.weights());
        assert_eq!(fit.model.biases(), &[0.0]);
        assert_eq!(est.chains().images(), object_chains.images());
    }

    #[test]
    fn top_only_refinement_matches_layer_learning() {
        let imgs = images(3, 31);
        let config = LearnConfig {
            gamma0: 0.05,
            iterations: 4,
            langevin_steps: 8,
            chains: 2,
            epsilon: 0.1,
            master_seed: 6,
            ..Default::default()
        };
        let layer = random_layer(8, 2, (3, 3));
        let mut est = ChainEstimator::new(SHAPE, &config, 1.0, 0.0).unwrap();
        let a = learn(layer.clone(), &imgs, &config, &mut est).unwrap();
        let (b, chains) = refine_all_layers(layer.to_composed().unwrap(), &imgs, &config).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(est.chains().images(), chains.images());
    }

    #[test]
    fn zero_rate_leaves_weights_unchanged() {
        let l = random_layer(2, 1, (2, 2));
        let composed = l.to_composed().unwrap();
        let m = ComposedModel::new(composed.bank().clone(), SHAPE, vec![true, true], 1.0).unwrap();
        let snapshot = super::super::StatsSnapshot {
            observed: super::super::mean_statistics(&m, &images(2, 3)).unwrap(),
            synthesized: super::super::mean_statistics(&m, &images(2, 4)).unwrap(),
            observed_variance: Vec::new(),
        };
        let next = super::super::ascend(&m, &snapshot, &[0.0]).unwrap();
        assert_eq!(next.params(), m.params());
        assert_eq!(next.bank(), m.bank());
    }
}
