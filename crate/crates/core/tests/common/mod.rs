#![allow(dead_code)]

use std::sync::OnceLock;

use visattack::attacks::{AttackConfig, AttackKind, AttackTrace, Scenario};
use visattack::catalog::SyntheticConfig;
use visattack::experiment::{OracleSettings, TargetFamily, World, WorldConfig};
use visattack::recommender::TrainReport;

pub const SCENARIO_SEED: u64 = 99;

pub fn run_seed(idx: usize) -> u64 {
    1000 + idx as u64
}

/// Default benchmark: 500 users, 1000 items, 10 categories, d = 64, VBPR.
pub fn benchmark() -> &'static (World, TrainReport) {
    static WORLD: OnceLock<(World, TrainReport)> = OnceLock::new();
    WORLD.get_or_init(|| World::build(&WorldConfig::default()).expect("benchmark world"))
}

/// A 120-user, 240-item world for cheaper checks.
pub fn small() -> &'static (World, TrainReport) {
    static WORLD: OnceLock<(World, TrainReport)> = OnceLock::new();
    WORLD.get_or_init(|| World::build(&small_config()).expect("small world"))
}

pub fn small_config() -> WorldConfig {
    WorldConfig {
        dataset: SyntheticConfig {
            num_users: 120,
            num_items: 240,
            ..SyntheticConfig::default()
        },
        ..WorldConfig::default()
    }
}

pub fn scenarios(world: &World, kind: AttackKind, count: usize) -> Vec<Scenario> {
    world
        .sample_scenarios(TargetFamily::of(kind), count, SCENARIO_SEED)
        .expect("scenarios")
}

pub fn run_all(world: &World, scenarios: &[Scenario], config: &AttackConfig, oracle: &OracleSettings) -> Vec<AttackTrace> {
    scenarios
        .iter()
        .enumerate()
        .map(|(idx, s)| world.run(*s, config, oracle, run_seed(idx)).expect("attack run"))
        .collect()
}

pub fn batch(world: &World, kind: AttackKind, count: usize) -> Vec<AttackTrace> {
    let config = AttackConfig::with_kind(kind);
    run_all(world, &scenarios(world, kind, count), &config, &OracleSettings::default())
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Rank correlation of two equal-length score vectors (no tie correction).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let m = (a.len() as f64 - 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
    let var: f64 = ra.iter().map(|x| (x - m).powi(2)).sum();
    cov / var
}
