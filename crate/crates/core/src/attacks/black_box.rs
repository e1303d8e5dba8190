//! Attacks that only upload images and read feedback.
//!
//! One step costs `d' + 1` uploads: the `d'` perturbations and the updated
//! image, which also serves as the restore upload. Its base response is a
//! separate pre-step query.

use rand::Rng;

use super::{AttackConfig, AttackKind, AttackTrace, Outcome, Probe, Recorder, Scenario, SurrogateState};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorWeights, FeatureVector};
use crate::gradest::{collect_batches, observe, solve, GradientEstimate};
use crate::imaging::{apply_signed_step, Image, PixelDirection};
use crate::oracle::{Feedback, Oracle};

#[derive(Debug, Clone, PartialEq)]
pub struct BbStepInfo {
    /// Base response of the attacked user before the step.
    pub response: f64,
    /// False when every resample failed and the image was left unchanged.
    pub applied: bool,
    pub resamples: usize,
}

/// `((n + 1) g_surrogate - g_single) / n`: removes the contribution of the
/// extra history item from the surrogate user's gradient.
pub fn correct_surrogate_gradient(
    g_surrogate: &FeatureVector,
    g_single: &FeatureVector,
    n: usize,
) -> Result<FeatureVector> {
    if n == 0 {
        return Err(Error::EmptyHistory);
    }
    if g_surrogate.dim() != g_single.dim() {
        return Err(Error::DimensionMismatch {
            expected: g_surrogate.dim(),
            actual: g_single.dim(),
        });
    }
    let n = n as f64;
    Ok(FeatureVector(
        g_surrogate
            .0
            .iter()
            .zip(&g_single.0)
            .map(|(a, b)| ((n + 1.0) * a - b) / n)
            .collect(),
    ))
}

fn check_mode(oracle: &Oracle, kind: AttackKind) -> Result<()> {
    let want = match kind {
        AttackKind::BbScore => Feedback::Scores,
        AttackKind::BbRank | AttackKind::BbPartial => Feedback::Ranks,
        _ => return Ok(()),
    };
    if oracle.mode().feedback != want {
        return Err(Error::ModeViolation(match want {
            Feedback::Scores => "score attack needs a score-feedback oracle",
            Feedback::Ranks => "rank attack needs a rank-feedback oracle",
        }));
    }
    Ok(())
}

/// Estimates the feature gradient for every `(user, base_response)` from one
/// shared set of perturbation uploads, resampling singular systems. Returns
/// `None` once the retries are exhausted. The perturbations stay uploaded.
pub(crate) fn estimate_for<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    users: &[(usize, f64)],
    item: usize,
    image: &Image,
    config: &AttackConfig,
    rng: &mut R,
) -> Result<(Option<Vec<GradientEstimate>>, usize)> {
    let mut resamples = 0;
    loop {
        let batches = collect_batches(
            oracle,
            extractor,
            users,
            item,
            image,
            config.d_prime,
            config.delta_for(oracle.mode().feedback),
            config.rank_mapping,
            rng,
        )?;
        match batches.iter().map(solve).collect::<Result<Vec<_>>>() {
            Ok(estimates) => return Ok((Some(estimates), resamples)),
            Err(Error::Resample) if resamples < config.resample_retries => resamples += 1,
            Err(Error::Resample) => return Ok((None, resamples)),
            Err(e) => return Err(e),
        }
    }
}

/// Single-user gradient estimate around `image`, restoring `image` afterwards.
pub fn estimate_gradient<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    user: usize,
    item: usize,
    image: &Image,
    config: &AttackConfig,
    rng: &mut R,
) -> Result<Option<GradientEstimate>> {
    let base = observe(oracle, user, item, config.rank_mapping, true, true)?;
    let (est, _) = estimate_for(oracle, extractor, &[(user, base)], item, image, config, rng)?;
    oracle.upload_image(item, image)?;
    Ok(est.map(|mut e| e.remove(0)))
}

/// Moves `image` along the sign of the pixel gradient for feature gradient
/// `g` and uploads the result. With no gradient the image is re-uploaded
/// unchanged.
pub(crate) fn finish_step(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    item: usize,
    image: &Image,
    g: Option<&FeatureVector>,
    epsilon: f64,
) -> Result<Image> {
    let next = match g {
        Some(g) => {
            let pixel = extractor.vjp(image, g.as_slice())?;
            apply_signed_step(image, &PixelDirection::from_gradient(image.shape(), &pixel)?, epsilon)?
        }
        None => image.clone(),
    };
    oracle.upload_image(item, &next)?;
    Ok(next)
}

/// One black-box step against `user` from the working image `image`.
pub fn run_bb_step<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    user: usize,
    item: usize,
    image: &Image,
    config: &AttackConfig,
    rng: &mut R,
) -> Result<(Image, BbStepInfo)> {
    let base = observe(oracle, user, item, config.rank_mapping, true, true)?;
    step_from_base(oracle, extractor, user, base, item, image, config, rng)
}

#[allow(clippy::too_many_arguments)]
fn step_from_base<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    user: usize,
    base: f64,
    item: usize,
    image: &Image,
    config: &AttackConfig,
    rng: &mut R,
) -> Result<(Image, BbStepInfo)> {
    let (est, resamples) = estimate_for(oracle, extractor, &[(user, base)], item, image, config, rng)?;
    let g = est.map(|mut e| e.remove(0).x);
    let next = finish_step(oracle, extractor, item, image, g.as_ref(), config.epsilon)?;
    Ok((
        next,
        BbStepInfo {
            response: base,
            applied: g.is_some(),
            resamples,
        },
    ))
}

/// Runs black-box steps against one user the oracle already knows. Under
/// rank feedback a hidden pushed item on the first step is an error
/// (`NotVisible`), so the caller can switch to the surrogate procedure; later
/// it ends the trace.
#[allow(clippy::too_many_arguments)]
pub fn run_black_box<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    kind: AttackKind,
    user: usize,
    scenario: Scenario,
    config: &AttackConfig,
    probe: &mut dyn Probe,
    rng: &mut R,
) -> Result<AttackTrace> {
    config.validate()?;
    check_mode(oracle, kind)?;
    let item = scenario.pushed_item;
    let mut image = oracle.current_image(item)?.clone();
    let mut rec = Recorder::start(kind, scenario, &image, probe)?;
    for step in 0..config.max_steps {
        match run_bb_step(oracle, extractor, user, item, &image, config, rng) {
            Ok((next, info)) => {
                image = next;
                rec.record_oracle(oracle, Some(info.response), info.applied)?;
            }
            Err(Error::NotVisible(i)) if step == 0 => return Err(Error::NotVisible(i)),
            Err(Error::NotVisible(_)) => {
                rec.set_outcome(Outcome::NotVisible);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(rec.finish(oracle.ledger()))
}

/// Visible-rank response of `item` for `user` as a pre-step query, or
/// `None` when it is hidden.
fn visible_response(oracle: &mut Oracle, user: usize, item: usize, config: &AttackConfig) -> Result<Option<f64>> {
    match observe(oracle, user, item, config.rank_mapping, true, true) {
        Ok(s) => Ok(Some(s)),
        Err(Error::NotVisible(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Which user a surrogate-procedure step attacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Single,
    Surrogate,
    Direct,
}

/// Partial-ranking attack on `user` (whose history the attacker knows) via
/// injected helper users: `u(i)` picks a similar item `i'`, `u(i')` is
/// attacked until the pushed item surfaces for the surrogate `u' = history +
/// {i'}`, then `u'` is attacked with the `i'` contribution removed, and once
/// the pushed item is visible for `user` it is attacked directly.
#[allow(clippy::too_many_arguments)]
pub fn run_bb_partial<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    user: usize,
    history: &[usize],
    scenario: Scenario,
    config: &AttackConfig,
    probe: &mut dyn Probe,
    rng: &mut R,
) -> Result<AttackTrace> {
    config.validate()?;
    check_mode(oracle, AttackKind::BbPartial)?;
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let item = scenario.pushed_item;
    let mut image = oracle.current_image(item)?.clone();
    let mut rec = Recorder::start(AttackKind::BbPartial, scenario, &image, probe)?;

    let u_i = oracle.inject_user(&[item])?;
    let top = oracle.pre_step_ranking(u_i.user)?;
    let Some(i_prime) = top.top.iter().copied().find(|&j| j != item && !history.contains(&j)) else {
        rec.set_outcome(Outcome::NotSurfaced);
        return Ok(rec.finish(oracle.ledger()));
    };
    let u_ip = oracle.inject_user(&[i_prime])?;
    let mut surrogate_history = history.to_vec();
    surrogate_history.push(i_prime);
    let u_prime = oracle.inject_user(&surrogate_history)?;
    let state = SurrogateState {
        u_prime,
        u_of_i: u_i,
        u_of_iprime: u_ip,
        i_prime,
        n: history.len(),
    };

    let mut single_steps = 0;
    let mut surfaced = false;
    for _ in 0..config.max_steps {
        let (stage, base) = if let Some(s) = visible_response(oracle, user, item, config)? {
            (Stage::Direct, s)
        } else if let Some(s) = visible_response(oracle, state.u_prime.user, item, config)? {
            (Stage::Surrogate, s)
        } else if single_steps < config.surface_budget {
            let s = observe(oracle, state.u_of_iprime.user, item, config.rank_mapping, true, false)?;
            (Stage::Single, s)
        } else {
            rec.set_outcome(if surfaced { Outcome::NotVisible } else { Outcome::NotSurfaced });
            break;
        };
        let applied = match stage {
            Stage::Direct | Stage::Single => {
                let target = if stage == Stage::Direct {
                    surfaced = true;
                    user
                } else {
                    single_steps += 1;
                    state.u_of_iprime.user
                };
                let (next, info) = step_from_base(oracle, extractor, target, base, item, &image, config, rng)?;
                image = next;
                info.applied
            }
            Stage::Surrogate => {
                surfaced = true;
                let mut users = vec![(state.u_prime.user, base)];
                if let Some(s) = visible_response(oracle, state.u_of_iprime.user, item, config)? {
                    users.push((state.u_of_iprime.user, s));
                }
                let (est, _) = estimate_for(oracle, extractor, &users, item, &image, config, rng)?;
                let g = match est {
                    Some(e) if e.len() == 2 => Some(correct_surrogate_gradient(&e[0].x, &e[1].x, state.n)?),
                    Some(mut e) => Some(e.remove(0).x),
                    None => None,
                };
                image = finish_step(oracle, extractor, item, &image, g.as_ref(), config.epsilon)?;
                g.is_some()
            }
        };
        rec.record_oracle(oracle, Some(base), applied)?;
    }
    rec.set_surrogate(state);
    Ok(rec.finish(oracle.ledger()))
}
