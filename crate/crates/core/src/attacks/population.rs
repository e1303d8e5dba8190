//! Segment and general-population scenarios built from injected users.

use rand::seq::index::sample;
use rand::Rng;

use super::black_box::{estimate_for, finish_step};
use super::{run_black_box, AttackConfig, AttackKind, AttackTrace, Probe, Recorder, Scenario, Schedule, Target};
use crate::error::{Error, Result};
use crate::extractor::ExtractorWeights;
use crate::gradest::observe;
use crate::oracle::{Feedback, Oracle};

fn feedback_kind(oracle: &Oracle) -> AttackKind {
    match oracle.mode().feedback {
        Feedback::Scores => AttackKind::BbScore,
        Feedback::Ranks => AttackKind::BbRank,
    }
}

/// Attacks a single mock user whose history is the segment item.
pub fn run_segmented<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    scenario: Scenario,
    config: &AttackConfig,
    probe: &mut dyn Probe,
    rng: &mut R,
) -> Result<AttackTrace> {
    let Target::Segment(segment_item) = scenario.target else {
        return Err(Error::InvalidArgument("segmented attack needs a segment target".into()));
    };
    let item = scenario.pushed_item;
    let cat = oracle.catalog();
    if segment_item >= cat.num_items() || item >= cat.num_items() {
        return Err(Error::UnknownItem(segment_item.max(item)));
    }
    if cat.category_of[segment_item] != cat.category_of[item] || segment_item == item {
        return Err(Error::InvalidArgument(format!(
            "segment item {segment_item} must be another item of pushed item {item}'s category"
        )));
    }
    let mock = oracle.inject_user(&[segment_item])?;
    let mut trace = run_black_box(oracle, extractor, feedback_kind(oracle), mock.user, scenario, config, probe, rng)?;
    trace.kind = AttackKind::Segmented;
    Ok(trace)
}

/// Index into `responses` of the active user: the one at fraction `p` from
/// the best-responding end (ties toward the lower index).
pub fn population_order(responses: &[f64], p: f64) -> Option<usize> {
    if responses.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..responses.len()).collect();
    order.sort_by(|&a, &b| responses[b].total_cmp(&responses[a]).then(a.cmp(&b)));
    let at = (p.clamp(0.0, 1.0) * (responses.len() - 1) as f64).round() as usize;
    Some(order[at])
}

/// Injects `n_population` single-item users over distinct random items and,
/// each step, attacks the one selected by the schedule. Re-ranking the
/// population costs `n_population` pre-step queries per step.
pub fn run_general<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    scenario: Scenario,
    config: &AttackConfig,
    probe: &mut dyn Probe,
    rng: &mut R,
) -> Result<AttackTrace> {
    config.validate()?;
    let item = scenario.pushed_item;
    let num_items = oracle.num_items();
    if item >= num_items {
        return Err(Error::UnknownItem(item));
    }
    if config.n_population >= num_items {
        return Err(Error::InvalidArgument(format!(
            "n_population {} needs more than {} other items",
            config.n_population,
            num_items - 1
        )));
    }
    let mut image = oracle.current_image(item)?.clone();
    let mut rec = Recorder::start(AttackKind::General, scenario, &image, probe)?;
    let mut population = Vec::with_capacity(config.n_population);
    for j in sample(rng, num_items - 1, config.n_population) {
        let seed_item = if j >= item { j + 1 } else { j };
        population.push(oracle.inject_user(&[seed_item])?.user);
    }
    for step in 0..config.max_steps {
        let responses = population
            .iter()
            .map(|&u| observe(oracle, u, item, config.rank_mapping, true, false))
            .collect::<Result<Vec<f64>>>()?;
        let active = match config.schedule {
            Schedule::Percentile => population_order(&responses, config.percentile_p).unwrap_or(0),
            Schedule::RoundRobin => step % population.len(),
        };
        let users = [(population[active], responses[active])];
        let (est, _) = estimate_for(oracle, extractor, &users, item, &image, config, rng)?;
        let g = est.map(|mut e| e.remove(0).x);
        image = finish_step(oracle, extractor, item, &image, g.as_ref(), config.epsilon)?;
        rec.record_oracle(oracle, Some(responses[active]), g.is_some())?;
    }
    Ok(rec.finish(oracle.ledger()))
}
