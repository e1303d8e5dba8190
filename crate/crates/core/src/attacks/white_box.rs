//! Privileged attack with read access to the model parameters.

use super::{AttackConfig, AttackKind, AttackTrace, Probe, Recorder, Scenario};
use crate::error::{Error, Result};
use crate::extractor::ExtractorWeights;
use crate::imaging::{apply_signed_step, quantize_clamp, Image, PixelDirection};
use crate::oracle::QueryLedger;
use crate::recommender::{ModelKind, RecModel, UserRepr};

/// Sign of the exact pixel gradient of `user`'s score for `image`.
pub fn white_box_direction(
    model: &RecModel,
    extractor: &ExtractorWeights,
    user: &UserRepr,
    image: &Image,
) -> Result<PixelDirection> {
    let g = model.grad_repr(user)?;
    let pixel = extractor.vjp(image, g.as_slice())?;
    PixelDirection::from_gradient(image.shape(), &pixel)
}

/// Runs `config.max_steps` signed steps on the exact gradient. Nothing is
/// uploaded; the probe sees the quantized working image after each step.
pub fn run_white_box(
    model: &RecModel,
    extractor: &ExtractorWeights,
    user: &UserRepr,
    scenario: Scenario,
    genuine: &Image,
    config: &AttackConfig,
    probe: &mut dyn Probe,
) -> Result<AttackTrace> {
    config.validate()?;
    if model.kind() == ModelKind::Bpr {
        return Err(Error::Unsupported("white-box attack needs a visual model"));
    }
    let item = scenario.pushed_item;
    if item >= model.num_items() {
        return Err(Error::UnknownItem(item));
    }
    let mut rec = Recorder::start(AttackKind::WhiteBox, scenario, genuine, probe)?;
    let mut image = genuine.clone();
    for _ in 0..config.max_steps {
        let direction = white_box_direction(model, extractor, user, &image)?;
        image = apply_signed_step(&image, &direction, config.epsilon)?;
        let served = quantize_clamp(&image);
        let score = model.score_repr(user, item, &extractor.extract(&served)?)?;
        rec.record(&served, QueryLedger::default(), Some(score), true)?;
    }
    Ok(rec.finish(QueryLedger::default()))
}
