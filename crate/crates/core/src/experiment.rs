//! End-to-end harness: a trained deployment, an evaluation probe and a
//! dispatcher that runs one scenario against a fresh oracle.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    run_baseline_blend, run_baseline_replace, run_bb_partial, run_black_box, run_general, run_segmented,
    run_white_box, AttackConfig, AttackKind, AttackTrace, EvalPoint, Probe, Scenario, Target,
};
use crate::catalog::{generate_synthetic, split_holdout, Dataset, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, ExtractorWeights, FeatureVector};
use crate::imaging::Image;
use crate::oracle::{Deployment, Feedback, OracleMode, PublicCatalog, DEFAULT_PARTIAL_VISIBILITY};
use crate::recommender::{train, Hyperparams, ModelKind, RecModel, TrainReport, UserRepr};

/// Upper bound on the general-population evaluation sample.
pub const GENERAL_EVAL_USERS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dataset: SyntheticConfig,
    pub extractor: ExtractorConfig,
    pub model: ModelKind,
    pub hyper: Hyperparams,
    pub split_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dataset: SyntheticConfig::default(),
            extractor: ExtractorConfig::default(),
            model: ModelKind::Vbpr,
            hyper: Hyperparams::default(),
            split_seed: 3,
        }
    }
}

/// Oracle settings per attack family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSettings {
    /// Visibility for `bb_rank`; a hidden pushed item switches to the
    /// surrogate procedure.
    pub rank_visibility: f64,
    /// Visibility for `bb_partial`.
    pub partial_visibility: f64,
    /// Feedback used by segmented and general-population attacks.
    pub population_feedback: Feedback,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            rank_visibility: 1.0,
            partial_visibility: DEFAULT_PARTIAL_VISIBILITY,
            population_feedback: Feedback::Scores,
        }
    }
}

impl OracleSettings {
    pub fn validate(&self) -> Result<()> {
        OracleMode::ranks(self.rank_visibility)?;
        OracleMode::ranks(self.partial_visibility)?;
        Ok(())
    }

    fn mode_for(&self, kind: AttackKind) -> Result<OracleMode> {
        match kind {
            AttackKind::BbRank => OracleMode::ranks(self.rank_visibility),
            AttackKind::BbPartial => OracleMode::ranks(self.partial_visibility),
            AttackKind::Segmented | AttackKind::General => match self.population_feedback {
                Feedback::Scores => Ok(OracleMode::scores()),
                Feedback::Ranks => OracleMode::ranks(self.rank_visibility),
            },
            _ => Ok(OracleMode::scores()),
        }
    }
}

/// Evaluation side of one scenario: true scores of a fixed user set, with
/// the pushed item re-scored from whatever image the service shows.
pub struct EvalProbe {
    model: Arc<RecModel>,
    extractor: Arc<ExtractorWeights>,
    users: Vec<usize>,
    reprs: Vec<UserRepr>,
    base_scores: Vec<Vec<f64>>,
}

impl EvalProbe {
    pub fn users(&self) -> &[usize] {
        &self.users
    }
}

impl Probe for EvalProbe {
    fn observe(&mut self, item: usize, served: &Image) -> Result<EvalPoint> {
        let f = self.extractor.extract(served)?;
        let mut ranks = Vec::with_capacity(self.users.len());
        let mut scores = Vec::with_capacity(self.users.len());
        for (repr, base) in self.reprs.iter().zip(&self.base_scores) {
            let s = self.model.score_repr(repr, item, &f)?;
            let rank = base
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != item && (v > s || (v == s && j < item)))
                .count();
            ranks.push(rank);
            scores.push(s);
        }
        Ok(EvalPoint { ranks, scores })
    }
}

/// Seeded generator for per-scenario randomness.
pub fn scenario_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// A trained, deployed recommender over one dataset.
pub struct World {
    dataset: Dataset,
    extractor: Arc<ExtractorWeights>,
    features: Vec<FeatureVector>,
    split: Split,
    model: Arc<RecModel>,
    deployment: Deployment,
    histories: Vec<Vec<usize>>,
}

impl World {
    /// Synthetic dataset, training and deployment from one config.
    pub fn build(config: &WorldConfig) -> Result<(World, TrainReport)> {
        let extractor = ExtractorWeights::new(&config.extractor)?;
        let dataset = generate_synthetic(&config.dataset, &extractor)?;
        let split = split_holdout(&dataset, config.split_seed);
        let features = extract_all(&extractor, dataset.images())?;
        let (model, report) = train(&dataset, &split, &features, &config.hyper, config.model)?;
        let world = World::assemble(dataset, extractor, features, split, model)?;
        Ok((world, report))
    }

    /// Deployment of an already trained model.
    pub fn from_parts(dataset: Dataset, extractor: ExtractorWeights, split: Split, model: RecModel) -> Result<World> {
        let features = extract_all(&extractor, dataset.images())?;
        World::assemble(dataset, extractor, features, split, model)
    }

    fn assemble(
        dataset: Dataset,
        extractor: ExtractorWeights,
        features: Vec<FeatureVector>,
        split: Split,
        model: RecModel,
    ) -> Result<World> {
        if model.num_users() != dataset.num_users() || model.num_items() != dataset.num_items() {
            return Err(Error::DimensionMismatch {
                expected: dataset.num_items(),
                actual: model.num_items(),
            });
        }
        let mut popularity = vec![0; dataset.num_items()];
        for it in &split.train {
            popularity[it.item] += 1;
        }
        let catalog = PublicCatalog {
            category_of: dataset.categories().to_vec(),
            popularity,
        };
        let extractor = Arc::new(extractor);
        let model = Arc::new(model);
        let deployment = Deployment::new(
            Arc::clone(&model),
            Arc::clone(&extractor),
            Arc::new(dataset.images().to_vec()),
            &features,
            catalog,
        )?;
        let histories = dataset.histories();
        Ok(World {
            dataset,
            extractor,
            features,
            split,
            model,
            deployment,
            histories,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn extractor(&self) -> &ExtractorWeights {
        &self.extractor
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn model(&self) -> &RecModel {
        &self.model
    }

    pub fn deployment(&self) -> &Deployment {
        &self.deployment
    }

    pub fn history(&self, user: usize) -> &[usize] {
        &self.histories[user]
    }

    /// Users who interacted with `item`.
    pub fn segment(&self, item: usize) -> Vec<usize> {
        (0..self.dataset.num_users())
            .filter(|&u| self.histories[u].contains(&item))
            .collect()
    }

    /// Users a scenario is judged on.
    pub fn eval_users(&self, target: Target, seed: u64) -> Result<Vec<usize>> {
        let n = self.dataset.num_users();
        match target {
            Target::SpecificUser(u) if u < n => Ok(vec![u]),
            Target::SpecificUser(u) => Err(Error::UnknownUser(u)),
            Target::Segment(item) => {
                let users = self.segment(item);
                if users.is_empty() {
                    return Err(Error::EmptyEvaluation);
                }
                Ok(users)
            }
            Target::GeneralPopulation => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7A1);
                let mut users = sample(&mut rng, n, GENERAL_EVAL_USERS.min(n)).into_vec();
                users.sort_unstable();
                Ok(users)
            }
        }
    }

    pub fn probe(&self, users: Vec<usize>) -> Result<EvalProbe> {
        let cache = self.deployment.cache();
        let mut reprs = Vec::with_capacity(users.len());
        let mut base_scores = Vec::with_capacity(users.len());
        for &u in &users {
            let repr = self.model.user_repr(u)?;
            base_scores.push(self.model.scores_for(&repr, cache));
            reprs.push(repr);
        }
        Ok(EvalProbe {
            model: Arc::clone(&self.model),
            extractor: Arc::clone(&self.extractor),
            users,
            reprs,
            base_scores,
        })
    }

    /// Standard deviation of `user`'s true item scores; the privileged input
    /// of the Gaussian rank mapping.
    pub fn score_sigma(&self, user: usize) -> Result<f64> {
        let scores = self.model.scores_for(&self.model.user_repr(user)?, self.deployment.cache());
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        Ok((scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt())
    }

    /// `count` seeded scenarios of the given target family. Specific users
    /// get a pushed item outside their history; segments use another item of
    /// the pushed item's category with at least one interacting user.
    pub fn sample_scenarios(&self, family: TargetFamily, count: usize, seed: u64) -> Result<Vec<Scenario>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nu, ni) = (self.dataset.num_users(), self.dataset.num_items());
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0;
        while out.len() < count {
            attempts += 1;
            if attempts > 100 * count.max(1) {
                return Err(Error::InvalidArgument("no valid scenarios for this dataset".into()));
            }
            let item = rng.random_range(0..ni);
            let target = match family {
                TargetFamily::SpecificUser => {
                    let u = rng.random_range(0..nu);
                    if self.histories[u].contains(&item) {
                        continue;
                    }
                    Target::SpecificUser(u)
                }
                TargetFamily::Segment => {
                    let peers: Vec<usize> = self
                        .dataset
                        .items_in_category(self.dataset.category_of(item))
                        .into_iter()
                        .filter(|&j| j != item)
                        .collect();
                    match peers.choose(&mut rng) {
                        Some(&s) if !self.segment(s).is_empty() => Target::Segment(s),
                        _ => continue,
                    }
                }
                TargetFamily::General => Target::GeneralPopulation,
            };
            out.push(Scenario {
                pushed_item: item,
                target,
            });
        }
        Ok(out)
    }

    /// Runs one scenario against a fresh oracle. A `bb_rank` attack whose
    /// pushed item is hidden on its first step continues with the surrogate
    /// procedure on the same oracle.
    pub fn run(
        &self,
        scenario: Scenario,
        config: &AttackConfig,
        oracle_settings: &OracleSettings,
        seed: u64,
    ) -> Result<AttackTrace> {
        config.validate()?;
        let item = scenario.pushed_item;
        if item >= self.dataset.num_items() {
            return Err(Error::UnknownItem(item));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probe = self.probe(self.eval_users(scenario.target, seed)?)?;
        let mut oracle = self.deployment.oracle(oracle_settings.mode_for(config.kind)?)?;
        let ex = self.extractor.as_ref();
        let user_of = |target: Target| match target {
            Target::SpecificUser(u) => Ok(u),
            _ => Err(Error::InvalidArgument(format!(
                "{} needs a specific-user target",
                config.kind.name()
            ))),
        };
        match config.kind {
            AttackKind::WhiteBox => {
                let repr = self.model.user_repr(user_of(scenario.target)?)?;
                let genuine = self.dataset.image(item);
                run_white_box(&self.model, ex, &repr, scenario, genuine, config, &mut probe)
            }
            AttackKind::BbScore => {
                let u = user_of(scenario.target)?;
                run_black_box(&mut oracle, ex, config.kind, u, scenario, config, &mut probe, &mut rng)
            }
            AttackKind::BbRank => {
                let u = user_of(scenario.target)?;
                match run_black_box(&mut oracle, ex, config.kind, u, scenario, config, &mut probe, &mut rng) {
                    Err(Error::NotVisible(_)) => {
                        let history = self.history(u).to_vec();
                        run_bb_partial(&mut oracle, ex, u, &history, scenario, config, &mut probe, &mut rng)
                    }
                    other => other,
                }
            }
            AttackKind::BbPartial => {
                let u = user_of(scenario.target)?;
                let history = self.history(u).to_vec();
                run_bb_partial(&mut oracle, ex, u, &history, scenario, config, &mut probe, &mut rng)
            }
            AttackKind::Segmented => run_segmented(&mut oracle, ex, scenario, config, &mut probe, &mut rng),
            AttackKind::General => run_general(&mut oracle, ex, scenario, config, &mut probe, &mut rng),
            AttackKind::BaselineReplace => run_baseline_replace(&mut oracle, scenario, &mut probe),
            AttackKind::BaselineBlend => run_baseline_blend(&mut oracle, scenario, config, &mut probe),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFamily {
    SpecificUser,
    Segment,
    General,
}

impl TargetFamily {
    pub fn of(kind: AttackKind) -> Self {
        match kind {
            AttackKind::Segmented => TargetFamily::Segment,
            AttackKind::General => TargetFamily::General,
            _ => TargetFamily::SpecificUser,
        }
    }
}

pub fn extract_all(extractor: &ExtractorWeights, images: &[Image]) -> Result<Vec<FeatureVector>> {
    images.iter().map(|im| extractor.extract(im)).collect()
}
