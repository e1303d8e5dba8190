use std::fs;
use std::path::Path;

use super::{Conv2d, Dense, ExtractorWeights, Layer};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VXEX";
const VERSION: u32 = 1;

pub(crate) fn encode(weights: &ExtractorWeights) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u64(weights.seed);
    let (h, wd, c) = weights.input;
    w.usize(h);
    w.usize(wd);
    w.usize(c);
    w.usize(weights.feature_dim);
    w.f64(weights.lipschitz_scale);
    w.u8(weights.normalized as u8);
    w.usize(weights.layers.len());
    for layer in &weights.layers {
        match layer {
            Layer::Scale(s) => {
                w.u8(0);
                w.f64(*s);
            }
            Layer::Conv(conv) => {
                w.u8(1);
                w.usize(conv.in_channels);
                w.usize(conv.out_channels);
                w.usize(conv.kernel);
                w.usize(conv.stride);
                w.usize(conv.padding);
                w.f64s(&conv.weights);
            }
            Layer::LeakyRelu(slope) => {
                w.u8(2);
                w.f64(*slope);
            }
            Layer::GlobalAvgPool => w.u8(3),
            Layer::Dense(dense) => {
                w.u8(4);
                w.usize(dense.rows);
                w.usize(dense.cols);
                w.f64s(&dense.weights);
            }
        }
    }
    w.finish()
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ExtractorWeights> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let seed = r.u64()?;
    let input = (r.usize()?, r.usize()?, r.usize()?);
    let feature_dim = r.usize()?;
    let lipschitz_scale = r.f64()?;
    let normalized = r.u8()? != 0;
    let n = r.usize()?;
    if n > 1024 {
        return Err(Error::Corrupt(format!("implausible layer count {n}")));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let layer = match r.u8()? {
            0 => Layer::Scale(r.f64()?),
            1 => Layer::Conv(Conv2d {
                in_channels: r.usize()?,
                out_channels: r.usize()?,
                kernel: r.usize()?,
                stride: r.usize()?,
                padding: r.usize()?,
                weights: r.f64s()?,
            }),
            2 => Layer::LeakyRelu(r.f64()?),
            3 => Layer::GlobalAvgPool,
            4 => Layer::Dense(Dense {
                rows: r.usize()?,
                cols: r.usize()?,
                weights: r.f64s()?,
            }),
            tag => return Err(Error::Corrupt(format!("unknown layer tag {tag}"))),
        };
        layers.push(layer);
    }
    r.expect_end()?;
    let mut weights = ExtractorWeights::from_layers(input, layers, seed)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    if weights.feature_dim != feature_dim {
        return Err(Error::Corrupt("feature dimension disagrees with layers".into()));
    }
    weights.lipschitz_scale = lipschitz_scale;
    weights.normalized = normalized;
    Ok(weights)
}

pub fn save_extractor(weights: &ExtractorWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(weights)).map_err(|e| Error::io(path, e))
}

pub fn load_extractor(path: impl AsRef<Path>) -> Result<ExtractorWeights> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
