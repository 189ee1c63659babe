//! Real-valued images and filter-response stacks, plus 8-bit PNG / binary PGM I/O.
//!
//! Pixel data is stored row-major with channels last. Loading maps a byte `v`
//! to `v / 255 - mean_offset`; saving inverts the map, rounds half-to-even and
//! clamps to `[0, 255]`.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

/// Height, width and channel count of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How pixel bytes are mapped to reals on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalize {
    /// `v / 255 - 0.5`
    #[default]
    Centered,
    /// `v / 255`
    Raw,
}

impl Normalize {
    pub fn mean_offset(self) -> f64 {
        match self {
            Normalize::Centered => 0.5,
            Normalize::Raw => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    mean_offset: f64,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        Self::with_offset(shape, data, 0.0)
    }

    pub fn with_offset(shape: ImageShape, data: Vec<f64>, mean_offset: f64) -> Result<Self> {
        if shape.height == 0 || shape.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 1x1, got {}x{}",
                shape.height, shape.width
            )));
        }
        if shape.channels != 1 && shape.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {}",
                shape.channels
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::Geometry(format!(
                "pixel buffer holds {} values, shape {}x{}x{} needs {}",
                data.len(),
                shape.height,
                shape.width,
                shape.channels,
                shape.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel {i} is {}", data[i])));
        }
        if !mean_offset.is_finite() {
            return Err(Error::NonFinite("mean offset".into()));
        }
        Ok(Self {
            height: shape.height,
            width: shape.width,
            channels: shape.channels,
            data,
            mean_offset,
        })
    }

    pub fn zeros(shape: ImageShape) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.len()])
    }

    /// Builds an image from a buffer that is already known to be finite.
    pub(crate) fn from_raw(shape: ImageShape, data: Vec<f64>, mean_offset: f64) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self {
            height: shape.height,
            width: shape.width,
            channels: shape.channels,
            data,
            mean_offset,
        }
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn mean_offset(&self) -> f64 {
        self.mean_offset
    }

    pub fn with_mean_offset(mut self, mean_offset: f64) -> Self {
        self.mean_offset = mean_offset;
        self
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a copy whose pixel `(y, x)` is this image's pixel
    /// `((y - dy) mod H, (x - dx) mod W)`.
    pub fn circular_shift(&self, dy: isize, dx: isize) -> Image {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; self.data.len()];
        for y in 0..h {
            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                let dst = (y * w + x) * c;
                let src = (sy * w + sx) * c;
                data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Image::from_raw(self.shape(), data, self.mean_offset)
    }
}

/// Sum of squares of all entries.
pub fn image_norm_sq(img: &Image) -> f64 {
    img.data.iter().map(|v| v * v).sum()
}

/// Maps top-layer feature coordinates back to image coordinates: feature
/// position `(py, px)` is centred on image position
/// `(offset.0 + py * stride, offset.1 + px * stride)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Origin {
    pub stride: usize,
    pub offset: (f64, f64),
}

impl Default for Origin {
    fn default() -> Self {
        Self {
            stride: 1,
            offset: (0.0, 0.0),
        }
    }
}

/// A stack of `K` feature maps of size `H' x W'`, stored `[K][H'][W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    rectified: bool,
    origin: Origin,
}

impl FeatureStack {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        rectified: bool,
        origin: Origin,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Geometry(format!(
                "feature buffer holds {} values, [{channels}][{height}][{width}] needs {}",
                data.len(),
                channels * height * width
            )));
        }
        if rectified && data.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "rectified feature stack has negative entries".into(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            rectified,
            origin,
        })
    }

    /// A stack with the given geometry, filled with `value`, not flagged as rectified.
    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
            rectified: false,
            origin: Origin::default(),
        }
    }

    pub(crate) fn from_raw(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        rectified: bool,
        origin: Origin,
    ) -> Self {
        Self {
            channels,
            height,
            width,
            data,
            rectified,
            origin,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rectified(&self) -> bool {
        self.rectified
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> f64 {
        self.data[(k * self.height + y) * self.width + x]
    }

    pub fn map(&self, k: usize) -> &[f64] {
        let n = self.area();
        &self.data[k * n..(k + 1) * n]
    }
}

// ---------------------------------------------------------------------------
// File I/O

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Loads an 8-bit grayscale or RGB PNG, or a binary (P5) PGM.
pub fn load_image(path: &Path, normalize: Normalize) -> Result<Image> {
    let bytes = fsutil::read(path)?;
    decode_image(&bytes, normalize)
}

pub fn decode_image(bytes: &[u8], normalize: Normalize) -> Result<Image> {
    let (shape, pixels) = if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)?
    } else if bytes.starts_with(b"P5") {
        decode_pgm(bytes)?
    } else {
        return Err(Error::UnsupportedImage(
            "neither a PNG nor a binary PGM (P5) file".into(),
        ));
    };
    let offset = normalize.mean_offset();
    let data = pixels.iter().map(|&v| f64::from(v) / 255.0 - offset).collect();
    Image::with_offset(shape, data, offset)
}

fn decode_png(bytes: &[u8]) -> Result<(ImageShape, Vec<u8>)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::UnsupportedImage(format!("png: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedImage(format!(
            "png bit depth {:?}, only 8-bit is supported",
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::UnsupportedImage(format!(
                "png color type {other:?}, only grayscale and RGB are supported"
            )))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedImage("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::UnsupportedImage(format!("png: {e}")))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let row = w * channels;
    let mut pixels = Vec::with_capacity(h * row);
    for y in 0..h {
        pixels.extend_from_slice(&buf[y * frame.line_size..y * frame.line_size + row]);
    }
    Ok((ImageShape::new(h, w, channels), pixels))
}

fn decode_pgm(bytes: &[u8]) -> Result<(ImageShape, Vec<u8>)> {
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in header.iter_mut() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::UnsupportedImage("malformed PGM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedImage("malformed PGM header".into()))?;
    }
    let [width, height, maxval] = header;
    if maxval != 255 {
        return Err(Error::UnsupportedImage(format!(
            "PGM maxval {maxval}, only 8-bit (255) is supported"
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::UnsupportedImage("malformed PGM header".into()));
    }
    pos += 1;
    let n = width * height;
    let pixels = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::UnsupportedImage(format!("PGM payload shorter than {n} bytes")))?;
    Ok((ImageShape::new(height, width, 1), pixels.to_vec()))
}

/// Quantizes an image back to bytes: `(x + mean_offset) * 255`, rounded
/// half-to-even and clamped to `[0, 255]`.
pub fn to_bytes(img: &Image) -> Vec<u8> {
    img.data
        .iter()
        .map(|&x| ((x + img.mean_offset) * 255.0).round_ties_even().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes PNG or PGM depending on the file extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("png") => encode_png(img)?,
        Some("pgm") => encode_pgm(img)?,
        _ => {
            return Err(Error::UnsupportedImage(format!(
                "cannot infer format from {}; use .png or .pgm",
                path.display()
            )))
        }
    };
    fsutil::write_atomic(path, &bytes)
}

pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(Error::UnsupportedImage(
            "PGM output needs a single-channel image".into(),
        ));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(to_bytes(img));
    Ok(out)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(if img.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::UnsupportedImage(format!("png: {e}")))?;
        writer
            .write_image_data(&to_bytes(img))
            .map_err(|e| Error::UnsupportedImage(format!("png: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::UnsupportedImage(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Lays images out left-to-right, top-to-bottom in a grid with `cols` columns.
/// All images must share a shape; empty cells are filled with `-mean_offset`
/// (byte 0 after saving).
pub fn tile(images: &[Image], cols: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to tile".into()))?;
    let shape = first.shape();
    if images.iter().any(|im| im.shape() != shape) {
        return Err(Error::Geometry("tiled images differ in shape".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let out_shape = ImageShape::new(rows * h, cols * w, c);
    let mut data = vec![-first.mean_offset; out_shape.len()];
    for (i, im) in images.iter().enumerate() {
        let (r, col) = (i / cols, i % cols);
        for y in 0..h {
            let dst = ((r * h + y) * cols * w + col * w) * c;
            data[dst..dst + w * c].copy_from_slice(&im.data[y * w * c..(y + 1) * w * c]);
        }
    }
    Ok(Image::from_raw(out_shape, data, first.mean_offset))
}
