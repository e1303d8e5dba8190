//! Non-adversarial image baselines built from a popular peer's image.

use super::{AttackConfig, AttackKind, AttackTrace, Probe, Recorder, Scenario};
use crate::error::{Error, Result};
use crate::imaging::{shape_error, Image};
use crate::oracle::Oracle;

/// Blend factors tried by the sweep.
pub const BLEND_GRID: [f64; 10] = [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10];

/// `clamp(p + epsilon * p_pop)`.
pub fn blend_image(p: &Image, p_pop: &Image, epsilon: f64) -> Result<Image> {
    if p.shape() != p_pop.shape() {
        return Err(shape_error(p.shape(), p_pop.shape()));
    }
    let (h, w, c) = p.shape();
    Image::from_pixels(
        h,
        w,
        c,
        p.pixels()
            .iter()
            .zip(p_pop.pixels())
            .map(|(a, b)| a + epsilon * b)
            .collect(),
    )
}

fn popular_peer(oracle: &Oracle, item: usize) -> Result<Image> {
    let peer = oracle
        .catalog()
        .most_popular_peer(item)
        .ok_or_else(|| Error::InvalidArgument(format!("item {item} has no peer in its category")))?;
    Ok(oracle.current_image(peer)?.clone())
}

/// Uploads the most popular same-category item's image in place of the
/// pushed item's.
pub fn run_baseline_replace(oracle: &mut Oracle, scenario: Scenario, probe: &mut dyn Probe) -> Result<AttackTrace> {
    let item = scenario.pushed_item;
    let genuine = oracle.current_image(item)?.clone();
    let pop = popular_peer(oracle, item)?;
    let mut rec = Recorder::start(AttackKind::BaselineReplace, scenario, &genuine, probe)?;
    oracle.upload_image(item, &pop)?;
    rec.record_oracle(oracle, None, true)?;
    Ok(rec.finish(oracle.ledger()))
}

/// Uploads the blend of the pushed item's image with its popular peer's.
/// With `blend_sweep` every grid value is uploaded and probed, and the one
/// with the best mean rank is uploaded again as the final image.
pub fn run_baseline_blend(
    oracle: &mut Oracle,
    scenario: Scenario,
    config: &AttackConfig,
    probe: &mut dyn Probe,
) -> Result<AttackTrace> {
    config.validate()?;
    let item = scenario.pushed_item;
    let genuine = oracle.current_image(item)?.clone();
    let pop = popular_peer(oracle, item)?;
    let mut rec = Recorder::start(AttackKind::BaselineBlend, scenario, &genuine, probe)?;
    let mut eps = config.blend_epsilon;
    if config.blend_sweep {
        let mut best = f64::INFINITY;
        for &e in &BLEND_GRID {
            let blended = blend_image(&genuine, &pop, e)?;
            oracle.upload_image(item, &blended)?;
            let served = oracle.current_image(item)?.clone();
            let mean = rec.peek(&served)?.mean_rank();
            if mean < best {
                best = mean;
                eps = e;
            }
        }
    }
    oracle.upload_image(item, &blend_image(&genuine, &pop, eps)?)?;
    rec.set_blend_epsilon(eps);
    rec.record_oracle(oracle, None, true)?;
    Ok(rec.finish(oracle.ledger()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_bounds() {
        let p = Image::filled(2, 2, 3, 100.0);
        let white = Image::filled(2, 2, 3, 255.0);
        let b = blend_image(&p, &white, 0.1).unwrap();
        assert!(b.pixels().iter().all(|&v| (v - 125.5).abs() < 1e-12));
        let near_top = Image::filled(2, 2, 3, 250.0);
        assert!(blend_image(&near_top, &white, 0.1).unwrap().pixels().iter().all(|&v| v == 255.0));
        assert_eq!(blend_image(&p, &white, 0.0).unwrap(), p);
    }
}
