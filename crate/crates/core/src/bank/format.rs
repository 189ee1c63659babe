//! FBK1 filter-bank container.
//!
//! All integers are little-endian `u32`, all weights little-endian `f32`:
//!
//! ```text
//! "FBK1"  layer_count
//! per layer:
//!   type(1=conv) k_out k_in kh kw stride padding activation pool_window pool_stride
//!   k_out*k_in*kh*kw kernel values ([out][in][row][col])
//!   k_out bias values
//! ```
//!
//! padding: 0 valid, 1 zero, 2 circular. activation: 0 identity, 1 relu, 2 abs.
//! `pool_window == 0` means no pooling.

use std::path::Path;

use super::{Activation, ConvLayer, FilterBank, Padding, Pool};
use crate::error::{Error, Result};
use crate::fsutil;

pub const BANK_MAGIC: &[u8; 4] = b"FBK1";
const CONV_LAYER: u32 = 1;

pub fn encode_bank(bank: &FilterBank) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    put_u32(&mut out, bank.layers().len());
    for layer in bank.layers() {
        let (kh, kw) = layer.kernel_size();
        let (pool_window, pool_stride) = layer.pool().map_or((0, 0), |p| (p.window, p.stride));
        for field in [
            CONV_LAYER as usize,
            layer.out_channels(),
            layer.in_channels(),
            kh,
            kw,
            layer.stride(),
            padding_code(layer.padding()) as usize,
            activation_code(layer.activation()) as usize,
            pool_window,
            pool_stride,
        ] {
            put_u32(&mut out, field);
        }
        for &v in layer.kernels().iter().chain(layer.bias()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_bank(bytes: &[u8]) -> Result<FilterBank> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != BANK_MAGIC {
        return Err(Error::BadMagic { expected: "FBK1" });
    }
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let mut h = [0usize; 10];
        for v in h.iter_mut() {
            *v = r.u32("layer header")? as usize;
        }
        let [kind, k_out, k_in, kh, kw, stride, padding, activation, pool_window, pool_stride] = h;
        if kind != CONV_LAYER as usize {
            return Err(Error::InvalidArgument(format!("layer {i}: unknown layer type {kind}")));
        }
        let n = k_out
            .checked_mul(k_in)
            .and_then(|v| v.checked_mul(kh))
            .and_then(|v| v.checked_mul(kw))
            .ok_or_else(|| Error::Truncated(format!("layer {i}: absurd kernel dimensions")))?;
        let kernels = r.f32s(n, "kernels")?;
        let bias = r.f32s(k_out, "biases")?;
        let pool = (pool_window > 0).then_some(Pool {
            window: pool_window,
            stride: pool_stride,
        });
        let layer = ConvLayer::new(k_out, k_in, (kh, kw), kernels, bias)?
            .with_stride(stride)?
            .with_padding(padding_from(padding)?)
            .with_activation(activation_from(activation)?)
            .with_pool(pool)?;
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        )));
    }
    let input_channels = layers.first().map_or(1, |l| l.in_channels());
    FilterBank::new(input_channels, layers)
}

pub fn save_bank(bank: &FilterBank, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode_bank(bank))
}

pub fn load_bank(path: &Path) -> Result<FilterBank> {
    decode_bank(&fsutil::read(path)?)
}

pub(crate) fn padding_code(p: Padding) -> u32 {
    match p {
        Padding::Valid => 0,
        Padding::Zero => 1,
        Padding::Circular => 2,
    }
}

fn padding_from(code: usize) -> Result<Padding> {
    Ok(match code {
        0 => Padding::Valid,
        1 => Padding::Zero,
        2 => Padding::Circular,
        _ => return Err(Error::InvalidArgument(format!("unknown padding code {code}"))),
    })
}

pub(crate) fn activation_code(a: Activation) -> u32 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Abs => 2,
    }
}

fn activation_from(code: usize) -> Result<Activation> {
    Ok(match code {
        0 => Activation::Identity,
        1 => Activation::Relu,
        2 => Activation::Abs,
        _ => return Err(Error::InvalidArgument(format!("unknown activation code {code}"))),
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).unwrap_or(usize::MAX), what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{make_random_bank, RandomBankSpec};
    use crate::image::{Image, ImageShape};

    fn sample_bank() -> FilterBank {
        make_random_bank(&RandomBankSpec {
            input_channels: 3,
            layers: vec![(4, 3), (2, 2)],
            activation: Activation::Relu,
            padding: Padding::Circular,
            pool: Some(Pool { window: 2, stride: 1 }),
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_forward_outputs() {
        let bank = sample_bank();
        let back = decode_bank(&encode_bank(&bank)).unwrap();
        assert_eq!(back.layers().len(), 2);
        assert_eq!(back.layers()[0].pool(), bank.layers()[0].pool());
        let shape = ImageShape::new(9, 9, 3);
        let img = Image::new(shape, (0..shape.len()).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect()).unwrap();
        let a = bank.forward(&img).unwrap();
        let b = back.forward(&img).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn wrong_magic_is_reported() {
        let mut bytes = encode_bank(&sample_bank());
        bytes[3] = b'2';
        assert!(matches!(decode_bank(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode_bank(&sample_bank());
        for cut in [2, 6, 20, bytes.len() - 1] {
            assert!(
                matches!(decode_bank(&bytes[..cut]), Err(Error::Truncated(_)) | Err(Error::BadMagic { .. })),
                "cut at {cut}"
            );
        }
        assert!(matches!(decode_bank(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    }

    #[test]
    fn broken_channel_chain_is_reported() {
        let one = |inp, seed| {
            make_random_bank(&RandomBankSpec {
                input_channels: inp,
                layers: vec![(2, 3)],
                activation: Activation::Relu,
                padding: Padding::Zero,
                pool: None,
                seed,
            })
            .unwrap()
        };
        // splice a 1->2 layer and a 3->2 layer into one file
        let (a, b) = (encode_bank(&one(1, 1)), encode_bank(&one(3, 2)));
        let mut bytes = b"FBK1".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&a[8..]);
        bytes.extend_from_slice(&b[8..]);
        assert!(matches!(
            decode_bank(&bytes),
            Err(Error::ChannelChain { layer: 1, expected: 2, found: 3 })
        ));
    }
}
