//! FRM1 model checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "FRM1"
//! u32 kind        0 per-position frame, 1 stationary frame, 2 generative layer
//! u32 flags       bit 0: detectors forced on (kind 2 only)
//! f64 sigma_sq
//! u32 height, u32 width, u32 channels
//! u32 rank, rank x u32 dims     weight tensor shape ([K][H'][W'], [K] or [J][K][h][w])
//! u64 count, count x f64        weights (kind 2: weights then J biases)
//! u32 bank_len, bank_len bytes  the (base) filter bank as an FBK1 image
//! ```

use std::path::Path;
use std::sync::Arc;

use crate::bank::format::Reader;
use crate::bank::{decode_bank, encode_bank};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::image::ImageShape;
use crate::learner::GenerativeLayer;
use crate::model::{EnergyModel, Learnable, NonStationaryFrame, StationaryFrame};

pub const MODEL_MAGIC: &[u8; 4] = b"FRM1";
const FORCED_ON: u32 = 1;

/// Any model that can be checkpointed.
#[derive(Debug, Clone)]
pub enum Checkpoint {
    NonStationary(NonStationaryFrame),
    Stationary(StationaryFrame),
    Layer(GenerativeLayer),
}

impl Checkpoint {
    pub fn kind_code(&self) -> u32 {
        match self {
            Checkpoint::NonStationary(_) => 0,
            Checkpoint::Stationary(_) => 1,
            Checkpoint::Layer(_) => 2,
        }
    }

    pub fn model(&self) -> &dyn EnergyModel {
        match self {
            Checkpoint::NonStationary(m) => m,
            Checkpoint::Stationary(m) => m,
            Checkpoint::Layer(m) => m,
        }
    }
}

impl From<NonStationaryFrame> for Checkpoint {
    fn from(m: NonStationaryFrame) -> Self {
        Checkpoint::NonStationary(m)
    }
}

impl From<StationaryFrame> for Checkpoint {
    fn from(m: StationaryFrame) -> Self {
        Checkpoint::Stationary(m)
    }
}

impl From<GenerativeLayer> for Checkpoint {
    fn from(m: GenerativeLayer) -> Self {
        Checkpoint::Layer(m)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_model(checkpoint: &Checkpoint) -> Vec<u8> {
    let (shape, sigma_sq, dims, params, bank, flags) = match checkpoint {
        Checkpoint::NonStationary(m) => (m.image_shape(), m.sigma_sq(), m.param_dims(), m.params(), m.bank(), 0),
        Checkpoint::Stationary(m) => (m.image_shape(), m.sigma_sq(), m.param_dims(), m.params(), m.bank(), 0),
        Checkpoint::Layer(m) => (
            m.image_shape(),
            m.sigma_sq(),
            m.param_dims(),
            m.params(),
            m.base(),
            if m.forced_on() { FORCED_ON } else { 0 },
        ),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, checkpoint.kind_code() as usize);
    put_u32(&mut out, flags as usize);
    out.extend_from_slice(&sigma_sq.to_le_bytes());
    for v in [shape.height, shape.width, shape.channels] {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, dims.len());
    for &d in &dims {
        put_u32(&mut out, d);
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let bank_bytes = encode_bank(bank);
    put_u32(&mut out, bank_bytes.len());
    out.extend_from_slice(&bank_bytes);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::BadMagic { expected: "FRM1" });
    }
    let kind = r.u32("model kind")?;
    let flags = r.u32("flags")?;
    let sigma_sq = r.f64("sigma_sq")?;
    let shape = ImageShape::new(
        r.u32("height")? as usize,
        r.u32("width")? as usize,
        r.u32("channels")? as usize,
    );
    let rank = r.u32("rank")? as usize;
    if rank > 8 {
        return Err(Error::InvalidArgument(format!("weight tensor rank {rank} is not a model")));
    }
    let dims = (0..rank)
        .map(|_| r.u32("dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = usize::try_from(r.u64("weight count")?)
        .map_err(|_| Error::Truncated("weight count".into()))?;
    let params = r.f64s(count, "weights")?;
    let bank_len = r.u32("bank length")? as usize;
    let bank = Arc::new(decode_bank(r.take(bank_len, "bank")?)?);
    if r.pos != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after the bank",
            bytes.len() - r.pos
        )));
    }
    let expect_rank = |n: usize| {
        if rank != n {
            Err(Error::Geometry(format!("model kind {kind} stores rank-{n} weights, found rank {rank}")))
        } else {
            Ok(())
        }
    };
    let checkpoint = match kind {
        0 => {
            expect_rank(3)?;
            NonStationaryFrame::new(bank, shape, params, sigma_sq)?.into()
        }
        1 => {
            expect_rank(1)?;
            StationaryFrame::new(bank, shape, params, sigma_sq)?.into()
        }
        2 => {
            expect_rank(4)?;
            let (filters, window) = (dims[0], (dims[2], dims[3]));
            let split = params.len().checked_sub(filters).ok_or_else(|| {
                Error::Geometry("fewer weights than biases".into())
            })?;
            let layer = GenerativeLayer::new(
                bank,
                shape,
                window,
                params[..split].to_vec(),
                params[split..].to_vec(),
                sigma_sq,
            )?;
            layer.with_forced_on(flags & FORCED_ON != 0)?.into()
        }
        _ => return Err(Error::InvalidArgument(format!("unknown model kind {kind}"))),
    };
    let stored = match &checkpoint {
        Checkpoint::NonStationary(m) => m.param_dims(),
        Checkpoint::Stationary(m) => m.param_dims(),
        Checkpoint::Layer(m) => m.param_dims(),
    };
    if stored != dims {
        return Err(Error::Geometry(format!(
            "stored weight shape {dims:?} does not match the bank geometry {stored:?}"
        )));
    }
    Ok(checkpoint)
}

pub fn save_model(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode_model(checkpoint))
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    decode_model(&fsutil::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::make_gabor_bank;
    use crate::image::Image;

    fn bank() -> Arc<crate::bank::FilterBank> {
        Arc::new(make_gabor_bank(&[1.0], 2).unwrap())
    }

    const SHAPE: ImageShape = ImageShape { height: 6, width: 6, channels: 1 };

    fn img() -> Image {
        Image::new(SHAPE, (0..36).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect()).unwrap()
    }

    fn energy(c: &Checkpoint) -> f64 {
        c.model().energy(&img()).unwrap().energy
    }

    #[test]
    fn round_trips_every_kind() {
        let b = bank();
        let n = 4 * 36;
        let ns = NonStationaryFrame::new(b.clone(), SHAPE, (0..n).map(|i| i as f64 * 1e-3).collect(), 0.5).unwrap();
        let st = StationaryFrame::new(b.clone(), SHAPE, vec![0.1, -0.2, 0.3, 0.4], 2.0).unwrap();
        let layer = GenerativeLayer::new(b, SHAPE, (2, 3), (0..48).map(|i| (i as f64).cos()).collect(), vec![0.1, -0.3], 1.0)
            .unwrap();
        for c in [ns.into(), st.into(), layer.clone().into(), layer.with_forced_on(true).unwrap().into()] {
            let back = decode_model(&encode_model(&c)).unwrap();
            assert_eq!(back.kind_code(), c.kind_code());
            assert_eq!(encode_model(&back), encode_model(&c));
            // the bank is stored as f32, so energies agree to f32 precision
            assert!((energy(&back) - energy(&c)).abs() < 1e-5 * energy(&c).abs().max(1.0));
        }
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let c: Checkpoint = StationaryFrame::zeros(bank(), SHAPE, 1.0).unwrap().into();
        let bytes = encode_model(&c);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        let mut kind = bytes.clone();
        kind[4] = 7;
        assert!(decode_model(&kind).is_err());
        let mut sigma = bytes;
        sigma[12..20].copy_from_slice(&(-1.0f64).to_le_bytes());
        assert!(matches!(decode_model(&sigma), Err(Error::InvalidArgument(_))));
    }
}
