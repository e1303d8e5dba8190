//! The black-box boundary between an attacker and the deployed recommender.
//!
//! An [`Oracle`] owns the live state of one attack scenario: the currently
//! uploaded image of every item, the users injected so far and a
//! [`QueryLedger`]. Attackers see the public catalog, upload images, inject
//! users and read either score or (possibly truncated) rank feedback. Model
//! parameters and features never cross this boundary.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{ExtractorWeights, FeatureVector};
use crate::imaging::{quantize_clamp, shape_error, Image};
use crate::recommender::{fold_in, rank_scores, ItemVisualCache, RecModel, UserRepr};

pub const DEFAULT_PARTIAL_VISIBILITY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    Scores,
    Ranks,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleMode {
    pub feedback: Feedback,
    /// Fraction of the ranking revealed; only meaningful for rank feedback.
    #[serde(default = "full_visibility")]
    pub visibility_fraction: f64,
}

fn full_visibility() -> f64 {
    1.0
}

impl Default for OracleMode {
    fn default() -> Self {
        OracleMode::scores()
    }
}

impl OracleMode {
    pub fn scores() -> Self {
        OracleMode {
            feedback: Feedback::Scores,
            visibility_fraction: 1.0,
        }
    }

    pub fn ranks(visibility_fraction: f64) -> Result<Self> {
        let mode = OracleMode {
            feedback: Feedback::Ranks,
            visibility_fraction,
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.visibility_fraction > 0.0 && self.visibility_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "visibility_fraction {} outside (0, 1]",
                self.visibility_fraction
            )));
        }
        Ok(())
    }

    /// Number of visible ranking positions, `ceil(v * N)`.
    pub fn visible_count(&self, num_items: usize) -> usize {
        let m = (self.visibility_fraction * num_items as f64 - 1e-9).ceil() as usize;
        m.clamp(1, num_items.max(1))
    }
}

/// Costs charged to the attacker. Counters only ever increase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLedger {
    pub uploads: usize,
    pub score_queries: usize,
    pub rank_queries: usize,
    /// Queries made before a step without touching the image: the base
    /// response of each step and population re-ranking. Counted separately
    /// from the per-perturbation feedback queries.
    pub pre_step_queries: usize,
    pub injected_users: usize,
}

impl QueryLedger {
    pub fn feedback_queries(&self) -> usize {
        self.score_queries + self.rank_queries
    }

    pub fn total_queries(&self) -> usize {
        self.feedback_queries() + self.pre_step_queries
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedUser {
    pub user: usize,
    pub history: Vec<usize>,
}

/// Top of a ranking as revealed to the attacker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibleRanking {
    pub top: Vec<usize>,
    pub num_items: usize,
}

impl VisibleRanking {
    /// 0-based position of `item`, or `None` when it is NOT_VISIBLE.
    pub fn position(&self, item: usize) -> Option<usize> {
        self.top.iter().position(|&i| i == item)
    }

    pub fn cutoff(&self) -> usize {
        self.top.len()
    }

    pub fn is_complete(&self) -> bool {
        self.top.len() == self.num_items
    }
}

/// What every participant may know about the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicCatalog {
    pub category_of: Vec<usize>,
    /// Training interaction count per item.
    pub popularity: Vec<usize>,
}

impl PublicCatalog {
    pub fn num_items(&self) -> usize {
        self.category_of.len()
    }

    pub fn items_in_category(&self, category: usize) -> Vec<usize> {
        (0..self.num_items())
            .filter(|&i| self.category_of[i] == category)
            .collect()
    }

    /// Most popular item of `item`'s category other than `item` itself;
    /// ties go to the lower id.
    pub fn most_popular_peer(&self, item: usize) -> Option<usize> {
        let cat = *self.category_of.get(item)?;
        (0..self.num_items())
            .filter(|&j| j != item && self.category_of[j] == cat)
            .max_by(|&a, &b| self.popularity[a].cmp(&self.popularity[b]).then(b.cmp(&a)))
    }
}

/// Immutable deployment shared by all oracles of an experiment.
#[derive(Debug, Clone)]
pub struct Deployment {
    model: Arc<RecModel>,
    extractor: Arc<ExtractorWeights>,
    images: Arc<Vec<Image>>,
    cache: ItemVisualCache,
    catalog: Arc<PublicCatalog>,
}

impl Deployment {
    pub fn new(
        model: Arc<RecModel>,
        extractor: Arc<ExtractorWeights>,
        images: Arc<Vec<Image>>,
        features: &[FeatureVector],
        catalog: PublicCatalog,
    ) -> Result<Self> {
        if images.len() != model.num_items() || catalog.num_items() != model.num_items() {
            return Err(Error::DimensionMismatch {
                expected: model.num_items(),
                actual: images.len().min(catalog.num_items()),
            });
        }
        let cache = model.visual_cache(features)?;
        Ok(Deployment {
            model,
            extractor,
            images,
            cache,
            catalog: Arc::new(catalog),
        })
    }

    pub fn model(&self) -> &RecModel {
        &self.model
    }

    pub fn extractor(&self) -> &ExtractorWeights {
        &self.extractor
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn catalog(&self) -> &PublicCatalog {
        &self.catalog
    }

    pub fn cache(&self) -> &ItemVisualCache {
        &self.cache
    }

    /// A fresh oracle over the genuine images.
    pub fn oracle(&self, mode: OracleMode) -> Result<Oracle> {
        mode.validate()?;
        Ok(Oracle {
            model: Arc::clone(&self.model),
            extractor: Arc::clone(&self.extractor),
            base_images: Arc::clone(&self.images),
            uploaded: HashMap::new(),
            cache: self.cache.clone(),
            catalog: Arc::clone(&self.catalog),
            injected: Vec::new(),
            mode,
            ledger: QueryLedger::default(),
            trace: None,
        })
    }
}

pub struct Oracle {
    model: Arc<RecModel>,
    extractor: Arc<ExtractorWeights>,
    base_images: Arc<Vec<Image>>,
    uploaded: HashMap<usize, Image>,
    cache: ItemVisualCache,
    catalog: Arc<PublicCatalog>,
    injected: Vec<UserRepr>,
    mode: OracleMode,
    ledger: QueryLedger,
    trace: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for Oracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Oracle")
            .field("mode", &self.mode)
            .field("ledger", &self.ledger)
            .field("injected", &self.injected.len())
            .finish_non_exhaustive()
    }
}

impl Oracle {
    /// Appends one line per call (`op user item counter`) to `sink`.
    pub fn with_trace_log(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.trace = Some(sink);
        self
    }

    fn log(&mut self, op: &str, user: Option<usize>, item: Option<usize>, counter: usize) {
        if let Some(sink) = self.trace.as_mut() {
            let fmt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
            // audit logging is best effort and never fails a query
            let _ = writeln!(sink, "{op} {} {} {counter}", fmt(user), fmt(item));
        }
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn ledger(&self) -> QueryLedger {
        self.ledger
    }

    pub fn catalog(&self) -> &PublicCatalog {
        &self.catalog
    }

    pub fn num_items(&self) -> usize {
        self.model.num_items()
    }

    /// Number of users the service knows, including injected ones.
    pub fn num_users(&self) -> usize {
        self.model.num_users() + self.injected.len()
    }

    pub fn visible_count(&self) -> usize {
        self.mode.visible_count(self.num_items())
    }

    /// The image currently served for `item`.
    pub fn current_image(&self, item: usize) -> Result<&Image> {
        if item >= self.num_items() {
            return Err(Error::UnknownItem(item));
        }
        Ok(self.uploaded.get(&item).unwrap_or(&self.base_images[item]))
    }

    pub fn upload_image(&mut self, item: usize, image: &Image) -> Result<()> {
        if item >= self.num_items() {
            return Err(Error::UnknownItem(item));
        }
        let expected = self.base_images[item].shape();
        if image.shape() != expected {
            return Err(shape_error(expected, image.shape()));
        }
        let served = quantize_clamp(image);
        let feature = self.extractor.extract(&served)?;
        self.model.update_cache(&mut self.cache, item, &feature)?;
        self.uploaded.insert(item, served);
        self.ledger.uploads += 1;
        let n = self.ledger.uploads;
        self.log("upload", None, Some(item), n);
        Ok(())
    }

    fn repr(&self, user: usize) -> Result<UserRepr> {
        let real = self.model.num_users();
        if user < real {
            return self.model.user_repr(user);
        }
        self.injected
            .get(user - real)
            .cloned()
            .ok_or(Error::UnknownUser(user))
    }

    fn scores(&self, user: usize) -> Result<Vec<f64>> {
        Ok(self.model.scores_for(&self.repr(user)?, &self.cache))
    }

    fn ranking(&self, user: usize) -> Result<VisibleRanking> {
        let mut order = rank_scores(&self.scores(user)?);
        order.truncate(self.visible_count());
        Ok(VisibleRanking {
            top: order,
            num_items: self.num_items(),
        })
    }

    fn require(&self, feedback: Feedback) -> Result<()> {
        if self.mode.feedback != feedback {
            return Err(Error::ModeViolation(match feedback {
                Feedback::Scores => "score queries are refused by a rank-feedback oracle",
                Feedback::Ranks => "rank queries are refused by a score-feedback oracle",
            }));
        }
        Ok(())
    }

    pub fn query_scores(&mut self, user: usize) -> Result<Vec<f64>> {
        self.require(Feedback::Scores)?;
        let scores = self.scores(user)?;
        self.ledger.score_queries += 1;
        let n = self.ledger.score_queries;
        self.log("scores", Some(user), None, n);
        Ok(scores)
    }

    pub fn query_ranking(&mut self, user: usize) -> Result<VisibleRanking> {
        self.require(Feedback::Ranks)?;
        let ranking = self.ranking(user)?;
        self.ledger.rank_queries += 1;
        let n = self.ledger.rank_queries;
        self.log("ranks", Some(user), None, n);
        Ok(ranking)
    }

    /// Score query charged as a pre-step query.
    pub fn pre_step_scores(&mut self, user: usize) -> Result<Vec<f64>> {
        self.require(Feedback::Scores)?;
        let scores = self.scores(user)?;
        self.ledger.pre_step_queries += 1;
        let n = self.ledger.pre_step_queries;
        self.log("pre-scores", Some(user), None, n);
        Ok(scores)
    }

    /// Rank query charged as a pre-step query.
    pub fn pre_step_ranking(&mut self, user: usize) -> Result<VisibleRanking> {
        self.require(Feedback::Ranks)?;
        let ranking = self.ranking(user)?;
        self.ledger.pre_step_queries += 1;
        let n = self.ledger.pre_step_queries;
        self.log("pre-ranks", Some(user), None, n);
        Ok(ranking)
    }

    /// Adds a user with the given history; the service folds it in against
    /// the items as currently served.
    pub fn inject_user(&mut self, history: &[usize]) -> Result<InjectedUser> {
        if history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        if let Some(&bad) = history.iter().find(|&&i| i >= self.num_items()) {
            return Err(Error::UnknownItem(bad));
        }
        let repr = fold_in(&self.model, &self.cache, history)?;
        let user = self.model.num_users() + self.injected.len();
        self.injected.push(repr);
        self.ledger.injected_users += 1;
        let n = self.ledger.injected_users;
        self.log("inject", Some(user), None, n);
        Ok(InjectedUser {
            user,
            history: history.to_vec(),
        })
    }

    /// Representation of an injected user; evaluation-side helper.
    pub fn injected_repr(&self, user: &InjectedUser) -> Option<&UserRepr> {
        self.injected.get(user.user.checked_sub(self.model.num_users())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visible_count_uses_ceiling() {
        let m = OracleMode::ranks(0.01).unwrap();
        assert_eq!(m.visible_count(1000), 10);
        assert_eq!(m.visible_count(1001), 11);
        assert_eq!(m.visible_count(50), 1);
        assert_eq!(OracleMode::ranks(1.0).unwrap().visible_count(100), 100);
        assert!(OracleMode::ranks(0.0).is_err());
        assert!(OracleMode::ranks(1.5).is_err());
    }

    #[test]
    fn popularity_ties_go_to_lower_id() {
        let cat = PublicCatalog {
            category_of: vec![0, 1, 0, 0, 0, 0, 0, 0, 1, 0],
            popularity: vec![1, 9, 0, 0, 0, 0, 0, 5, 3, 5],
        };
        assert_eq!(cat.most_popular_peer(0), Some(7));
        assert_eq!(cat.most_popular_peer(7), Some(9));
        assert_eq!(cat.most_popular_peer(1), Some(8));
        let lonely = PublicCatalog {
            category_of: vec![0, 1],
            popularity: vec![1, 1],
        };
        assert_eq!(lonely.most_popular_peer(0), None);
    }

    #[test]
    fn visible_ranking_positions() {
        let r = VisibleRanking {
            top: vec![4, 2, 9],
            num_items: 10,
        };
        assert_eq!(r.position(2), Some(1));
        assert_eq!(r.position(5), None);
        assert!(!r.is_complete());
    }
}
