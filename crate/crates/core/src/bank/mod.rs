//! Multi-layer convolutional filter banks.
//!
//! A [`FilterBank`] is an ordered stack of [`ConvLayer`]s, each a
//! cross-correlation `[F * I](y) = sum_x F(x) I(y + x)` plus bias, followed by a
//! pointwise activation and an optional max pool. Besides the forward pass the
//! bank provides exact reverse-mode gradients with respect to the input image
//! and to every kernel entry and bias.
//!
//! Conventions that make gradients deterministic:
//! * relu and abs have derivative 0 at a pre-activation of exactly 0;
//! * max pooling routes the gradient to the first maximal element in
//!   row-major scan order.

pub(crate) mod format;
mod generators;

pub use format::{decode_bank, encode_bank, load_bank, save_bank, BANK_MAGIC};
pub use generators::{
    dog_kernel, gabor_kernel, make_dog_bank, make_gabor_bank, make_random_bank, GaborPhase,
    RandomBankSpec,
};

use crate::error::{Error, Result};
use crate::image::{FeatureStack, Image, ImageShape, Origin};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Only positions where the kernel fits inside the input.
    Valid,
    /// "Same"-style zero padding; output has `ceil(n / stride)` positions.
    Zero,
    /// Periodic boundary; output has `ceil(n / stride)` positions.
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Abs,
}

impl Activation {
    pub fn apply(self, r: f64) -> f64 {
        match self {
            Activation::Identity => r,
            Activation::Relu => r.max(0.0),
            Activation::Abs => r.abs(),
        }
    }

    pub fn derivative(self, r: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if r > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Abs => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// True when the activation has a kink (non-differentiable point) at 0.
    pub fn has_kink(self) -> bool {
        !matches!(self, Activation::Identity)
    }

    pub fn is_rectifying(self) -> bool {
        self.has_kink()
    }
}

/// Max pooling over `window x window` blocks taken every `stride` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pool {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    out_channels: usize,
    in_channels: usize,
    kernel_height: usize,
    kernel_width: usize,
    /// `[out][in][kh][kw]`
    kernels: Vec<f64>,
    bias: Vec<f64>,
    stride: usize,
    padding: Padding,
    activation: Activation,
    pool: Option<Pool>,
}

impl ConvLayer {
    /// A stride-1, zero-padded, linear layer without pooling.
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_size: (usize, usize),
        kernels: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let (kh, kw) = kernel_size;
        if in_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer needs at least one input channel and a nonempty kernel, got {in_channels} channels, {kh}x{kw}"
            )));
        }
        let expected = out_channels * in_channels * kh * kw;
        if kernels.len() != expected {
            return Err(Error::Geometry(format!(
                "kernel buffer holds {} values, [{out_channels}][{in_channels}][{kh}][{kw}] needs {expected}",
                kernels.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Geometry(format!(
                "{} biases for {out_channels} output channels",
                bias.len()
            )));
        }
        if kernels.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer weights".into()));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_height: kh,
            kernel_width: kw,
            kernels,
            bias,
            stride: 1,
            padding: Padding::Zero,
            activation: Activation::Identity,
            pool: None,
        })
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        self.stride = stride;
        Ok(self)
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_pool(mut self, pool: Option<Pool>) -> Result<Self> {
        if let Some(p) = pool {
            if p.window == 0 || p.stride == 0 {
                return Err(Error::InvalidArgument(
                    "pool window and stride must be positive".into(),
                ));
            }
        }
        self.pool = pool;
        Ok(self)
    }

    /// Same layer with new kernel and bias values.
    pub fn with_weights(&self, kernels: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let fresh = ConvLayer::new(
            self.out_channels,
            self.in_channels,
            (self.kernel_height, self.kernel_width),
            kernels,
            bias,
        )?;
        Ok(Self {
            kernels: fresh.kernels,
            bias: fresh.bias,
            ..self.clone()
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_height, self.kernel_width)
    }

    pub fn kernels(&self) -> &[f64] {
        &self.kernels
    }

    pub fn kernel(&self, o: usize, i: usize) -> &[f64] {
        let n = self.kernel_height * self.kernel_width;
        let start = (o * self.in_channels + i) * n;
        &self.kernels[start..start + n]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn pool(&self) -> Option<Pool> {
        self.pool
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    fn pad(&self) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Zero | Padding::Circular => {
                ((self.kernel_height - 1) / 2, (self.kernel_width - 1) / 2)
            }
        }
    }

    /// Geometry right after the convolution (before pooling).
    pub fn conv_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Valid => {
                if height < self.kernel_height || width < self.kernel_width {
                    return Err(Error::Geometry(format!(
                        "{height}x{width} input is smaller than the {}x{} kernel under valid padding",
                        self.kernel_height, self.kernel_width
                    )));
                }
                Ok((
                    (height - self.kernel_height) / self.stride + 1,
                    (width - self.kernel_width) / self.stride + 1,
                ))
            }
            Padding::Zero | Padding::Circular => {
                Ok((height.div_ceil(self.stride), width.div_ceil(self.stride)))
            }
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (ch, cw) = self.conv_size(height, width)?;
        match self.pool {
            None => Ok((ch, cw)),
            Some(p) => {
                if ch < p.window || cw < p.window {
                    return Err(Error::Geometry(format!(
                        "{ch}x{cw} map is smaller than the {0}x{0} pool window",
                        p.window
                    )));
                }
                Ok(((ch - p.window) / p.stride + 1, (cw - p.window) / p.stride + 1))
            }
        }
    }

    /// For each kernel tap, the `(output, input)` index pairs along one axis
    /// where the tap reads a real (non-padding) input position.
    fn taps(&self, out_len: usize, kernel_len: usize, pad: usize, in_len: usize) -> Vec<Vec<(usize, usize)>> {
        (0..kernel_len)
            .map(|t| {
                (0..out_len)
                    .filter_map(|o| {
                        let pos = (o * self.stride + t) as isize - pad as isize;
                        let pos = match self.padding {
                            Padding::Valid => Some(pos as usize),
                            Padding::Zero => (pos >= 0 && (pos as usize) < in_len).then_some(pos as usize),
                            Padding::Circular => Some(pos.rem_euclid(in_len as isize) as usize),
                        };
                        pos.map(|p| (o, p))
                    })
                    .collect()
            })
            .collect()
    }

    fn forward(&self, input: &Planes) -> Result<LayerTrace> {
        debug_assert_eq!(input.channels, self.in_channels);
        let (oh, ow) = self.conv_size(input.height, input.width)?;
        let (kh, kw) = (self.kernel_height, self.kernel_width);
        let (py, px) = self.pad();
        let rows = self.taps(oh, kh, py, input.height);
        let cols = self.taps(ow, kw, px, input.width);
        let in_area = input.height * input.width;
        // each output accumulates bias, then channels and taps in ascending order
        let mut pre = vec![0.0; self.out_channels * oh * ow];
        for o in 0..self.out_channels {
            let out = &mut pre[o * oh * ow..(o + 1) * oh * ow];
            out.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let kernel = self.kernel(o, i);
                let plane = &input.data[i * in_area..(i + 1) * in_area];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let k = kernel[ky * kw + kx];
                        for &(oy, iy) in &rows[ky] {
                            let row = &plane[iy * input.width..(iy + 1) * input.width];
                            let dst = &mut out[oy * ow..(oy + 1) * ow];
                            for &(ox, ix) in &cols[kx] {
                                dst[ox] += k * row[ix];
                            }
                        }
                    }
                }
            }
        }
        let pre = Planes {
            channels: self.out_channels,
            height: oh,
            width: ow,
            data: pre,
        };
        let activated = Planes {
            data: pre.data.iter().map(|&r| self.activation.apply(r)).collect(),
            ..pre.clone()
        };
        let (output, argmax) = match self.pool {
            None => (activated, None),
            Some(p) => {
                let (out, idx) = max_pool(&activated, p, self.output_size(input.height, input.width)?);
                (out, Some(idx))
            }
        };
        Ok(LayerTrace {
            input: input.clone(),
            pre,
            argmax,
            output,
        })
    }

    /// Propagates `d_out` (gradient w.r.t. this layer's output) backwards.
    /// Returns the gradient w.r.t. the layer input, and accumulates kernel and
    /// bias gradients into `grads` when given.
    fn backward(
        &self,
        trace: &LayerTrace,
        d_out: &[f64],
        want_input: bool,
        grads: Option<&mut LayerGrad>,
    ) -> Vec<f64> {
        let pre = &trace.pre;
        let input = &trace.input;
        let mut d_act = match &trace.argmax {
            None => d_out.to_vec(),
            Some(idx) => {
                let mut d = vec![0.0; pre.data.len()];
                for (&i, &g) in idx.iter().zip(d_out) {
                    d[i] += g;
                }
                d
            }
        };
        for (d, &r) in d_act.iter_mut().zip(&pre.data) {
            *d *= self.activation.derivative(r);
        }
        let d_pre = d_act;

        let (oh, ow) = (pre.height, pre.width);
        let (kh, kw) = (self.kernel_height, self.kernel_width);
        let (py, px) = self.pad();
        let rows = self.taps(oh, kh, py, input.height);
        let cols = self.taps(ow, kw, px, input.width);
        let in_area = input.height * input.width;

        if let Some(grads) = grads {
            for o in 0..self.out_channels {
                let d_o = &d_pre[o * oh * ow..(o + 1) * oh * ow];
                grads.bias[o] += d_o.iter().filter(|&&d| d != 0.0).sum::<f64>();
                for i in 0..self.in_channels {
                    let plane = &input.data[i * in_area..(i + 1) * in_area];
                    let base = (o * self.in_channels + i) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = grads.kernels[base + ky * kw + kx];
                            for &(oy, iy) in &rows[ky] {
                                let row = &plane[iy * input.width..(iy + 1) * input.width];
                                let d_row = &d_o[oy * ow..(oy + 1) * ow];
                                for &(ox, ix) in &cols[kx] {
                                    let d = d_row[ox];
                                    if d != 0.0 {
                                        acc += d * row[ix];
                                    }
                                }
                            }
                            grads.kernels[base + ky * kw + kx] = acc;
                        }
                    }
                }
            }
        }

        if !want_input {
            return Vec::new();
        }
        let mut d_in = vec![0.0; input.data.len()];
        for o in 0..self.out_channels {
            let d_o = &d_pre[o * oh * ow..(o + 1) * oh * ow];
            for i in 0..self.in_channels {
                let kernel = self.kernel(o, i);
                let plane = &mut d_in[i * in_area..(i + 1) * in_area];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let k = kernel[ky * kw + kx];
                        for &(oy, iy) in &rows[ky] {
                            let row = &mut plane[iy * input.width..(iy + 1) * input.width];
                            let d_row = &d_o[oy * ow..(oy + 1) * ow];
                            for &(ox, ix) in &cols[kx] {
                                row[ix] += k * d_row[ox];
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

fn max_pool(input: &Planes, pool: Pool, (oh, ow): (usize, usize)) -> (Planes, Vec<usize>) {
    let mut out = Vec::with_capacity(input.channels * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    let area = input.height * input.width;
    for c in 0..input.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_val = f64::NEG_INFINITY;
                for dy in 0..pool.window {
                    for dx in 0..pool.window {
                        let idx = c * area + (oy * pool.stride + dy) * input.width + ox * pool.stride + dx;
                        // strict comparison keeps the first maximum in scan order
                        if best == usize::MAX || input.data[idx] > best_val {
                            best = idx;
                            best_val = input.data[idx];
                        }
                    }
                }
                out.push(best_val);
                argmax.push(best);
            }
        }
    }
    (
        Planes {
            channels: input.channels,
            height: oh,
            width: ow,
            data: out,
        },
        argmax,
    )
}

/// Planar `[C][H][W]` buffer used between layers.
#[derive(Debug, Clone, PartialEq)]
struct Planes {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Planes {
    fn from_image(img: &Image) -> Self {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let mut data = vec![0.0; h * w * c];
        for (p, px) in img.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * h * w + p] = v;
            }
        }
        Self {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    fn into_image(self, shape: ImageShape) -> Image {
        let (h, w, c) = (shape.height, shape.width, shape.channels);
        let mut data = vec![0.0; h * w * c];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = self.data[ch * h * w + p];
            }
        }
        Image::from_raw(shape, data, 0.0)
    }
}

#[derive(Debug, Clone)]
struct LayerTrace {
    input: Planes,
    pre: Planes,
    argmax: Option<Vec<usize>>,
    output: Planes,
}

/// Intermediate values of one forward pass, kept for back-propagation and for
/// inspecting pre-activations (e.g. distance to relu kinks).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    image_shape: ImageShape,
    layers: Vec<LayerTrace>,
    output: FeatureStack,
}

impl ForwardTrace {
    pub fn output(&self) -> &FeatureStack {
        &self.output
    }

    pub fn into_output(self) -> FeatureStack {
        self.output
    }

    /// Pre-activation values of layer `i`, `[K_out][H][W]` before pooling.
    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.layers[layer].pre.data
    }

    /// Flat indices (into the activated map) selected by the max pool of layer `i`.
    pub fn pool_winners(&self, layer: usize) -> Option<&[usize]> {
        self.layers[layer].argmax.as_deref()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

/// Gradient of a scalar with respect to one layer's kernels and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros(layer: &ConvLayer) -> Self {
        Self {
            kernels: vec![0.0; layer.kernels.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    input_channels: usize,
    layers: Vec<ConvLayer>,
}

impl FilterBank {
    pub fn new(input_channels: usize, layers: Vec<ConvLayer>) -> Result<Self> {
        if input_channels == 0 {
            return Err(Error::InvalidArgument("bank needs input channels".into()));
        }
        let mut expected = input_channels;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_channels != expected {
                return Err(Error::ChannelChain {
                    layer: i,
                    expected,
                    found: layer.in_channels,
                });
            }
            expected = layer.out_channels;
        }
        Ok(Self {
            input_channels,
            layers,
        })
    }

    /// Appends a layer on top of this bank.
    pub fn with_layer(&self, layer: ConvLayer) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers.push(layer);
        Self::new(self.input_channels, layers)
    }

    pub fn with_layers(&self, layers: Vec<ConvLayer>) -> Result<Self> {
        Self::new(self.input_channels, layers)
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Number of top-layer feature maps.
    pub fn output_channels(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_channels, |l| l.out_channels)
    }

    /// `(K, H', W')` for an input of the given size.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = (height, width);
        for layer in &self.layers {
            (h, w) = layer.output_size(h, w)?;
        }
        Ok((self.output_channels(), h, w))
    }

    pub fn is_rectified(&self) -> bool {
        self.layers
            .last()
            .is_some_and(|l| l.activation.is_rectifying())
    }

    fn origin(&self) -> Origin {
        let mut stride = 1usize;
        let (mut oy, mut ox) = (0.0, 0.0);
        for layer in &self.layers {
            let (kh, kw) = layer.kernel_size();
            let (py, px) = layer.pad();
            oy += ((kh - 1) as f64 / 2.0 - py as f64) * stride as f64;
            ox += ((kw - 1) as f64 / 2.0 - px as f64) * stride as f64;
            stride *= layer.stride;
            if let Some(p) = layer.pool {
                oy += (p.window - 1) as f64 / 2.0 * stride as f64;
                ox += (p.window - 1) as f64 / 2.0 * stride as f64;
                stride *= p.stride;
            }
        }
        Origin {
            stride,
            offset: (oy, ox),
        }
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.channels() != self.input_channels {
            return Err(Error::Geometry(format!(
                "image has {} channels, bank expects {}",
                img.channels(),
                self.input_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, img: &Image) -> Result<FeatureStack> {
        Ok(self.forward_trace(img)?.output)
    }

    pub fn forward_trace(&self, img: &Image) -> Result<ForwardTrace> {
        self.check_image(img)?;
        let mut current = Planes::from_image(img);
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let trace = layer.forward(&current)?;
            current = trace.output.clone();
            traces.push(trace);
        }
        let output = FeatureStack::from_raw(
            current.channels,
            current.height,
            current.width,
            current.data,
            self.is_rectified(),
            self.origin(),
        );
        Ok(ForwardTrace {
            image_shape: img.shape(),
            layers: traces,
            output,
        })
    }

    fn check_cotangent(&self, trace: &ForwardTrace, cotangent: &FeatureStack) -> Result<()> {
        if cotangent.dims() != trace.output.dims() {
            return Err(Error::Geometry(format!(
                "cotangent is {:?}, forward output is {:?}",
                cotangent.dims(),
                trace.output.dims()
            )));
        }
        Ok(())
    }

    /// Gradient of `<cotangent, forward(img)>` with respect to the image.
    pub fn backward_image(&self, img: &Image, cotangent: &FeatureStack) -> Result<Image> {
        let trace = self.forward_trace(img)?;
        self.backward_image_from_trace(&trace, cotangent)
    }

    pub fn backward_image_from_trace(
        &self,
        trace: &ForwardTrace,
        cotangent: &FeatureStack,
    ) -> Result<Image> {
        self.check_cotangent(trace, cotangent)?;
        let mut grad = cotangent.data().to_vec();
        for (layer, lt) in self.layers.iter().zip(&trace.layers).rev() {
            grad = layer.backward(lt, &grad, true, None);
        }
        let planes = Planes {
            channels: self.input_channels,
            height: trace.image_shape.height,
            width: trace.image_shape.width,
            data: grad,
        };
        Ok(planes.into_image(trace.image_shape))
    }

    /// Gradient of `<cotangent, forward(img)>` with respect to every layer's
    /// kernels and biases, in layer order.
    pub fn backward_weights(&self, img: &Image, cotangent: &FeatureStack) -> Result<Vec<LayerGrad>> {
        let trace = self.forward_trace(img)?;
        self.backward_weights_from_trace(&trace, cotangent)
    }

    pub fn backward_weights_from_trace(
        &self,
        trace: &ForwardTrace,
        cotangent: &FeatureStack,
    ) -> Result<Vec<LayerGrad>> {
        self.check_cotangent(trace, cotangent)?;
        let mut grads: Vec<LayerGrad> = self.layers.iter().map(LayerGrad::zeros).collect();
        let mut d = cotangent.data().to_vec();
        for (i, (layer, lt)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            d = layer.backward(lt, &d, i > 0, Some(&mut grads[i]));
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
        let shape = ImageShape::new(h, w, c);
        Image::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> ConvLayer {
        let kernels = (0..out * inp * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = (0..out).map(|_| rng.random_range(-0.5..0.5)).collect();
        ConvLayer::new(out, inp, (k, k), kernels, bias).unwrap()
    }

    /// Direct quadruple loop, written independently of the table-driven layer code.
    fn naive_layer(layer: &ConvLayer, input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (kh, kw) = layer.kernel_size();
        let s = layer.stride() as isize;
        let (py, px, oh, ow) = match layer.padding() {
            Padding::Valid => (0, 0, (h - kh) / layer.stride() + 1, (w - kw) / layer.stride() + 1),
            _ => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize, h.div_ceil(layer.stride()), w.div_ceil(layer.stride())),
        };
        let mut out = vec![0.0; layer.out_channels() * oh * ow];
        for o in 0..layer.out_channels() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = layer.bias()[o];
                    for i in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut y = oy as isize * s + ky as isize - py;
                                let mut x = ox as isize * s + kx as isize - px;
                                match layer.padding() {
                                    Padding::Circular => {
                                        y = y.rem_euclid(h as isize);
                                        x = x.rem_euclid(w as isize);
                                    }
                                    Padding::Zero if y < 0 || x < 0 || y >= h as isize || x >= w as isize => continue,
                                    _ => {}
                                }
                                let v = input[(i * h + y as usize) * w + x as usize];
                                acc += layer.kernels()[((o * c + i) * kh + ky) * kw + kx] * v;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = layer.activation().apply(acc);
                }
            }
        }
        (out, oh, ow)
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 5, 4, 1);
        let bank = FilterBank::new(1, vec![ConvLayer::new(1, 1, (1, 1), vec![1.0], vec![0.0]).unwrap()]).unwrap();
        let out = bank.forward(&img).unwrap();
        assert_eq!(out.dims(), (1, 5, 4));
        assert_eq!(out.data(), img.data());
        assert!(!out.rectified());
    }

    #[test]
    fn relu_top_layer_is_nonnegative_and_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 7, 7, 3);
        let bank = FilterBank::new(3, vec![random_layer(&mut rng, 4, 3, 3).with_activation(Activation::Relu)]).unwrap();
        let out = bank.forward(&img).unwrap();
        assert!(out.rectified());
        assert!(out.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn two_layer_forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for padding in [Padding::Valid, Padding::Zero, Padding::Circular] {
            let img = random_image(&mut rng, 8, 8, 1);
            let l1 = random_layer(&mut rng, 3, 1, 3).with_padding(padding).with_activation(Activation::Relu);
            let l2 = random_layer(&mut rng, 2, 3, 2).with_padding(padding).with_stride(2).unwrap().with_activation(Activation::Abs);
            let bank = FilterBank::new(1, vec![l1.clone(), l2.clone()]).unwrap();
            let out = bank.forward(&img).unwrap();
            let (a, h1, w1) = naive_layer(&l1, img.data(), 1, 8, 8);
            let (b, h2, w2) = naive_layer(&l2, &a, 3, h1, w1);
            assert_eq!(out.dims(), (2, h2, w2));
            for (x, y) in out.data().iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn valid_padding_rejects_small_images() {
        let bank = FilterBank::new(1, vec![ConvLayer::new(1, 1, (5, 5), vec![0.0; 25], vec![0.0]).unwrap().with_padding(Padding::Valid)]).unwrap();
        let img = Image::zeros(ImageShape::new(4, 8, 1)).unwrap();
        assert!(matches!(bank.forward(&img), Err(Error::Geometry(_))));
    }

    #[test]
    fn channel_chain_is_checked() {
        let l1 = ConvLayer::new(2, 1, (1, 1), vec![0.0; 2], vec![0.0; 2]).unwrap();
        let l2 = ConvLayer::new(1, 3, (1, 1), vec![0.0; 3], vec![0.0]).unwrap();
        assert!(matches!(
            FilterBank::new(1, vec![l1, l2]),
            Err(Error::ChannelChain { layer: 1, expected: 2, found: 3 })
        ));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 6, 6, 1);
        let bank = FilterBank::new(1, vec![random_layer(&mut rng, 2, 1, 3).with_activation(Activation::Relu)]).unwrap();
        let (k, h, w) = bank.output_dims(6, 6).unwrap();
        let g = bank.backward_image(&img, &FeatureStack::filled(k, h, w, 0.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_adjoint_is_full_correlation() {
        // <cot, K * I> = <K^T cot, I>: the image gradient is the transposed
        // correlation, computed here by scattering each cotangent entry.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 6, 5, 1);
        let layer = random_layer(&mut rng, 2, 1, 3).with_padding(Padding::Valid);
        let bank = FilterBank::new(1, vec![layer.clone()]).unwrap();
        let (k, h, w) = bank.output_dims(6, 5).unwrap();
        let cot: Vec<f64> = (0..k * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = bank.backward_image(&img, &FeatureStack::new(k, h, w, cot.clone(), false, Origin::default()).unwrap()).unwrap();
        let mut expect = vec![0.0; 30];
        for o in 0..k {
            for y in 0..h {
                for x in 0..w {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            expect[(y + ky) * 5 + x + kx] += layer.kernel(o, 0)[ky * 3 + kx] * cot[(o * h + y) * w + x];
                        }
                    }
                }
            }
        }
        for (a, b) in g.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_relu_has_zero_kernel_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let kernels = (0..2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = ConvLayer::new(2, 1, (3, 3), kernels, vec![0.0; 2]).unwrap().with_activation(Activation::Relu);
        let bank = FilterBank::new(1, vec![layer]).unwrap();
        let img = Image::zeros(ImageShape::new(5, 5, 1)).unwrap();
        let g = bank.backward_weights(&img, &FeatureStack::filled(2, 5, 5, 1.0)).unwrap();
        assert!(g[0].kernels.iter().chain(&g[0].bias).all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_kernel_gradient_is_pixel_sum_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 4, 3, 3);
        let layer = random_layer(&mut rng, 1, 3, 1);
        let bank = FilterBank::new(3, vec![layer]).unwrap();
        let g = bank.backward_weights(&img, &FeatureStack::filled(1, 4, 3, 1.0)).unwrap();
        for c in 0..3 {
            let direct: f64 = img.data().iter().skip(c).step_by(3).sum();
            assert!((g[0].kernels[c] - direct).abs() < 1e-12);
        }
        assert_eq!(g[0].bias[0], 12.0);
    }

    #[test]
    fn max_pool_ties_route_to_first_element() {
        let layer = ConvLayer::new(1, 1, (1, 1), vec![1.0], vec![0.0])
            .unwrap()
            .with_pool(Some(Pool { window: 2, stride: 2 }))
            .unwrap();
        let bank = FilterBank::new(1, vec![layer]).unwrap();
        let img = Image::new(ImageShape::new(2, 2, 1), vec![3.0, 3.0, 1.0, 3.0]).unwrap();
        let g = bank.backward_image(&img, &FeatureStack::filled(1, 1, 1, 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn circular_forward_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 9, 7, 1);
        let bank = FilterBank::new(
            1,
            vec![
                random_layer(&mut rng, 3, 1, 3).with_padding(Padding::Circular).with_activation(Activation::Relu),
                random_layer(&mut rng, 2, 3, 2).with_padding(Padding::Circular).with_activation(Activation::Abs),
            ],
        )
        .unwrap();
        let base = bank.forward(&img).unwrap();
        let shifted = bank.forward(&img.circular_shift(2, -3)).unwrap();
        for k in 0..2 {
            for y in 0..9 {
                for x in 0..7 {
                    let sy = (y + 9 - 2) % 9;
                    let sx = (x + 3) % 7;
                    assert_eq!(shifted.get(k, y, x).to_bits(), base.get(k, sy, sx).to_bits());
                }
            }
        }
    }

    #[test]
    fn origin_tracks_stride_and_pool() {
        let layer = ConvLayer::new(1, 1, (3, 3), vec![0.0; 9], vec![0.0])
            .unwrap()
            .with_padding(Padding::Valid)
            .with_stride(2)
            .unwrap()
            .with_pool(Some(Pool { window: 2, stride: 2 }))
            .unwrap();
        let bank = FilterBank::new(1, vec![layer]).unwrap();
        let out = bank.forward(&Image::zeros(ImageShape::new(9, 9, 1)).unwrap()).unwrap();
        assert_eq!(out.origin(), Origin { stride: 4, offset: (2.0, 2.0) });
    }
}
