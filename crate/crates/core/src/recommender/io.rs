//! Versioned model container: magic `VXRM`, version, kind, dims, then
//! row-major parameter blocks.

use std::fs;
use std::path::Path;

use super::{Hyperparams, ModelKind, RecModel};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VXRM";
const VERSION: u32 = 1;

pub(crate) fn encode(m: &RecModel) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u8(m.kind.tag());
    w.usize(m.num_users);
    w.usize(m.num_items);
    w.usize(m.latent_dim);
    w.usize(m.visual_dim);
    w.usize(m.feature_dim);
    w.usize(m.num_categories);
    let h = &m.hyper;
    w.usize(h.latent_dim);
    w.usize(h.visual_dim);
    w.f64(h.learning_rate);
    w.f64(h.l2_regularization);
    w.usize(h.epochs);
    w.usize(h.negative_samples);
    w.u64(h.seed);
    w.usizes(&m.category_of);
    for block in [
        &m.user_latent,
        &m.item_latent,
        &m.item_bias,
        &m.visual_user,
        &m.embedding,
        &m.visual_bias,
        &m.category_embed,
    ] {
        w.f64s(block);
    }
    w.finish()
}

pub(crate) fn decode(buf: &[u8]) -> Result<RecModel> {
    let mut r = Reader::open(buf, MAGIC, VERSION)?;
    let kind = ModelKind::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt("unknown model kind".into()))?;
    let num_users = r.usize()?;
    let num_items = r.usize()?;
    let latent_dim = r.usize()?;
    let visual_dim = r.usize()?;
    let feature_dim = r.usize()?;
    let num_categories = r.usize()?;
    let hyper = Hyperparams {
        latent_dim: r.usize()?,
        visual_dim: r.usize()?,
        learning_rate: r.f64()?,
        l2_regularization: r.f64()?,
        epochs: r.usize()?,
        negative_samples: r.usize()?,
        seed: r.u64()?,
    };
    let category_of = r.usizes()?;
    let m = RecModel {
        kind,
        num_users,
        num_items,
        latent_dim,
        visual_dim,
        feature_dim,
        hyper,
        category_of,
        num_categories,
        user_latent: r.f64s()?,
        item_latent: r.f64s()?,
        item_bias: r.f64s()?,
        visual_user: r.f64s()?,
        embedding: r.f64s()?,
        visual_bias: r.f64s()?,
        category_embed: r.f64s()?,
    };
    r.expect_end()?;
    let sizes_ok = m.category_of.len() == num_items
        && m.category_of.iter().all(|&c| c < num_categories.max(1))
        && m.user_latent.len() == num_users * latent_dim
        && m.item_latent.len() == num_items * latent_dim
        && m.item_bias.len() == num_items
        && match kind {
            ModelKind::Bpr => m.embedding.is_empty() && m.visual_user.is_empty(),
            ModelKind::Vbpr => {
                m.visual_user.len() == num_users * visual_dim
                    && m.embedding.len() == visual_dim * feature_dim
                    && m.visual_bias.len() == feature_dim
            }
            ModelKind::DeepStyle => {
                m.embedding.len() == latent_dim * feature_dim
                    && m.category_embed.len() == num_categories * latent_dim
            }
        };
    if !sizes_ok {
        return Err(Error::Corrupt("inconsistent parameter block sizes".into()));
    }
    Ok(m)
}

pub fn save_model(model: &RecModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RecModel> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
