//! The attacked models: BPR, VBPR and a DeepStyle-style category-aware
//! variant, trained with the pairwise BPR criterion.
//!
//! Score forms, with `f` the item's current image feature:
//!
//! * BPR: `b_i + <g_u, g_i>`
//! * VBPR: `b_i + <g_u, g_i> + <t_u, E f> + <beta, f>`
//! * DeepStyle: `b_i + <g_u, g_i + E f - c_cat(i)>`
//!
//! Both visual models are affine in `f` for a fixed `(u, i)`.

mod io;
mod train;

pub use io::{load_model, save_model};
pub use train::{fold_in, train, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::Split;
use crate::error::{Error, Result};
use crate::extractor::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bpr,
    Vbpr,
    DeepStyle,
}

impl ModelKind {
    pub fn is_visual(self) -> bool {
        !matches!(self, ModelKind::Bpr)
    }

    fn tag(self) -> u8 {
        match self {
            ModelKind::Bpr => 0,
            ModelKind::Vbpr => 1,
            ModelKind::DeepStyle => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Bpr),
            1 => Some(ModelKind::Vbpr),
            2 => Some(ModelKind::DeepStyle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub latent_dim: usize,
    pub visual_dim: usize,
    pub learning_rate: f64,
    pub l2_regularization: f64,
    pub epochs: usize,
    pub negative_samples: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            latent_dim: 16,
            visual_dim: 16,
            learning_rate: 0.05,
            l2_regularization: 0.001,
            epochs: 40,
            negative_samples: 1,
            seed: 11,
        }
    }
}

impl Hyperparams {
    pub(crate) fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.latent_dim == 0 || self.visual_dim == 0 || self.epochs == 0 || self.negative_samples == 0 {
            return Err(Error::InvalidArgument("dimensions, epochs and negative_samples must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.l2_regularization >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive, l2 non-negative".into()));
        }
        if kind == ModelKind::DeepStyle && self.latent_dim != self.visual_dim {
            return Err(Error::InvalidArgument("DeepStyle requires latent_dim == visual_dim".into()));
        }
        Ok(())
    }
}

/// Latent representation of one user (trained or folded in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRepr {
    pub latent: Vec<f64>,
    /// Visual preference (`t_u`); empty for BPR and DeepStyle.
    pub visual: Vec<f64>,
}

/// Per-item quantities that depend on the current image feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemVisualCache {
    dim: usize,
    /// `E f_i`, row per item (empty rows for BPR).
    projection: Vec<f64>,
    /// `<beta, f_i>` (VBPR only).
    bias: Vec<f64>,
}

impl ItemVisualCache {
    pub fn projection(&self, item: usize) -> &[f64] {
        &self.projection[item * self.dim..(item + 1) * self.dim]
    }

    pub fn visual_bias(&self, item: usize) -> f64 {
        self.bias[item]
    }

    pub fn num_items(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecModel {
    pub(crate) kind: ModelKind,
    pub(crate) num_users: usize,
    pub(crate) num_items: usize,
    pub(crate) latent_dim: usize,
    pub(crate) visual_dim: usize,
    pub(crate) feature_dim: usize,
    pub(crate) hyper: Hyperparams,
    pub(crate) category_of: Vec<usize>,
    pub(crate) num_categories: usize,
    pub(crate) user_latent: Vec<f64>,
    pub(crate) item_latent: Vec<f64>,
    pub(crate) item_bias: Vec<f64>,
    pub(crate) visual_user: Vec<f64>,
    /// `visual_dim x feature_dim`, row-major.
    pub(crate) embedding: Vec<f64>,
    pub(crate) visual_bias: Vec<f64>,
    pub(crate) category_embed: Vec<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RecModel {
    /// Randomly initialised parameters.
    pub(crate) fn init(
        kind: ModelKind,
        num_users: usize,
        category_of: Vec<usize>,
        feature_dim: usize,
        hyper: &Hyperparams,
    ) -> Self {
        let num_items = category_of.len();
        let num_categories = category_of.iter().max().map_or(1, |m| m + 1);
        let (k, kv) = (hyper.latent_dim, hyper.visual_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let user_latent = draw(num_users * k);
        let item_latent = draw(num_items * k);
        let (visual_user, embedding, visual_bias, category_embed) = match kind {
            ModelKind::Bpr => (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
            ModelKind::Vbpr => (
                draw(num_users * kv),
                draw(kv * feature_dim).into_iter().map(|v| v * 0.1).collect(),
                vec![0.0; feature_dim],
                Vec::new(),
            ),
            ModelKind::DeepStyle => (
                Vec::new(),
                draw(k * feature_dim).into_iter().map(|v| v * 0.1).collect(),
                Vec::new(),
                draw(num_categories * k),
            ),
        };
        RecModel {
            kind,
            num_users,
            num_items,
            latent_dim: k,
            visual_dim: if kind == ModelKind::Bpr { 0 } else { kv },
            feature_dim: if kind == ModelKind::Bpr { 0 } else { feature_dim },
            hyper: hyper.clone(),
            category_of,
            num_categories,
            user_latent,
            item_latent,
            item_bias: vec![0.0; num_items],
            visual_user,
            embedding,
            visual_bias,
            category_embed,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn category_of(&self, item: usize) -> usize {
        self.category_of[item]
    }

    fn cache_dim(&self) -> usize {
        match self.kind {
            ModelKind::Bpr => 0,
            ModelKind::Vbpr => self.visual_dim,
            ModelKind::DeepStyle => self.latent_dim,
        }
    }

    pub(crate) fn check_user(&self, user: usize) -> Result<()> {
        if user >= self.num_users {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: user,
                limit: self.num_users,
            });
        }
        Ok(())
    }

    pub(crate) fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.num_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: item,
                limit: self.num_items,
            });
        }
        Ok(())
    }

    fn check_feature(&self, feature: &FeatureVector) -> Result<()> {
        if self.kind.is_visual() && feature.dim() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: feature.dim(),
            });
        }
        Ok(())
    }

    pub fn user_repr(&self, user: usize) -> Result<UserRepr> {
        self.check_user(user)?;
        let k = self.latent_dim;
        let kv = self.visual_dim;
        Ok(UserRepr {
            latent: self.user_latent[user * k..(user + 1) * k].to_vec(),
            visual: if self.kind == ModelKind::Vbpr {
                self.visual_user[user * kv..(user + 1) * kv].to_vec()
            } else {
                Vec::new()
            },
        })
    }

    pub(crate) fn user_latent(&self, user: usize) -> &[f64] {
        &self.user_latent[user * self.latent_dim..(user + 1) * self.latent_dim]
    }

    pub(crate) fn user_visual(&self, user: usize) -> &[f64] {
        match self.kind {
            ModelKind::Vbpr => &self.visual_user[user * self.visual_dim..(user + 1) * self.visual_dim],
            _ => &[],
        }
    }

    pub(crate) fn item_latent(&self, item: usize) -> &[f64] {
        &self.item_latent[item * self.latent_dim..(item + 1) * self.latent_dim]
    }

    /// Visual projection of one feature: `E f` and `<beta, f>`.
    pub(crate) fn project(&self, feature: &[f64]) -> (Vec<f64>, f64) {
        match self.kind {
            ModelKind::Bpr => (Vec::new(), 0.0),
            ModelKind::Vbpr => (
                self.embedding
                    .chunks_exact(self.feature_dim)
                    .map(|row| dot(row, feature))
                    .collect(),
                dot(&self.visual_bias, feature),
            ),
            ModelKind::DeepStyle => (
                self.embedding
                    .chunks_exact(self.feature_dim)
                    .map(|row| dot(row, feature))
                    .collect(),
                0.0,
            ),
        }
    }

    pub fn visual_cache(&self, features: &[FeatureVector]) -> Result<ItemVisualCache> {
        if features.len() != self.num_items && self.kind.is_visual() {
            return Err(Error::DimensionMismatch {
                expected: self.num_items,
                actual: features.len(),
            });
        }
        let dim = self.cache_dim();
        let mut cache = ItemVisualCache {
            dim,
            projection: Vec::with_capacity(self.num_items * dim),
            bias: Vec::with_capacity(self.num_items),
        };
        for item in 0..self.num_items {
            if self.kind.is_visual() {
                self.check_feature(&features[item])?;
                let (p, b) = self.project(features[item].as_slice());
                cache.projection.extend(p);
                cache.bias.push(b);
            } else {
                cache.bias.push(0.0);
            }
        }
        Ok(cache)
    }

    /// Replaces one item's cached visual terms after its image changed.
    pub fn update_cache(&self, cache: &mut ItemVisualCache, item: usize, feature: &FeatureVector) -> Result<()> {
        self.check_item(item)?;
        if !self.kind.is_visual() {
            return Ok(());
        }
        self.check_feature(feature)?;
        let (p, b) = self.project(feature.as_slice());
        let dim = cache.dim;
        cache.projection[item * dim..(item + 1) * dim].copy_from_slice(&p);
        cache.bias[item] = b;
        Ok(())
    }

    /// Score from a user representation and precomputed visual terms.
    #[inline]
    pub fn score_parts(&self, latent: &[f64], visual: &[f64], item: usize, projection: &[f64], vbias: f64) -> f64 {
        let gi = self.item_latent(item);
        match self.kind {
            ModelKind::Bpr => self.item_bias[item] + dot(latent, gi),
            ModelKind::Vbpr => self.item_bias[item] + dot(latent, gi) + dot(visual, projection) + vbias,
            ModelKind::DeepStyle => {
                let k = self.latent_dim;
                let c = &self.category_embed[self.category_of[item] * k..(self.category_of[item] + 1) * k];
                let mut acc = self.item_bias[item];
                for r in 0..k {
                    acc += latent[r] * (gi[r] + projection[r] - c[r]);
                }
                acc
            }
        }
    }

    pub fn score_cached(&self, user: &UserRepr, item: usize, cache: &ItemVisualCache) -> f64 {
        let proj = if self.kind.is_visual() { cache.projection(item) } else { &[] };
        self.score_parts(&user.latent, &user.visual, item, proj, cache.visual_bias(item))
    }

    /// All item scores for one user.
    pub fn scores_for(&self, user: &UserRepr, cache: &ItemVisualCache) -> Vec<f64> {
        (0..self.num_items)
            .map(|i| self.score_cached(user, i, cache))
            .collect()
    }

    pub fn score_repr(&self, user: &UserRepr, item: usize, feature: &FeatureVector) -> Result<f64> {
        self.check_item(item)?;
        self.check_feature(feature)?;
        let (projection, vbias) = self.project(feature.as_slice());
        Ok(self.score_parts(&user.latent, &user.visual, item, &projection, vbias))
    }

    /// `s(u, i, f)` for a trained user.
    pub fn score(&self, user: usize, item: usize, feature: &FeatureVector) -> Result<f64> {
        self.check_user(user)?;
        self.check_item(item)?;
        self.check_feature(feature)?;
        let (projection, vbias) = self.project(feature.as_slice());
        Ok(self.score_parts(self.user_latent(user), self.user_visual(user), item, &projection, vbias))
    }

    /// `ds/df` for a user representation; constant in `f`.
    pub fn grad_repr(&self, user: &UserRepr) -> Result<FeatureVector> {
        let d = self.feature_dim;
        match self.kind {
            ModelKind::Bpr => Err(Error::Unsupported("BPR has no visual pathway")),
            ModelKind::Vbpr => {
                let mut g = self.visual_bias.clone();
                for (row, &t) in self.embedding.chunks_exact(d).zip(&user.visual) {
                    for (gj, e) in g.iter_mut().zip(row) {
                        *gj += t * e;
                    }
                }
                Ok(FeatureVector(g))
            }
            ModelKind::DeepStyle => {
                let mut g = vec![0.0; d];
                for (row, &t) in self.embedding.chunks_exact(d).zip(&user.latent) {
                    for (gj, e) in g.iter_mut().zip(row) {
                        *gj += t * e;
                    }
                }
                Ok(FeatureVector(g))
            }
        }
    }

    /// `ds(u, i, f)/df`.
    pub fn grad_score_feature(&self, user: usize, item: usize) -> Result<FeatureVector> {
        if !self.kind.is_visual() {
            return Err(Error::Unsupported("BPR has no visual pathway"));
        }
        self.check_item(item)?;
        self.grad_repr(&self.user_repr(user)?)
    }
}

/// Items sorted by descending score; ties broken by ascending item id.
pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// 0-based position of `item` under the ranking rule of [`rank_scores`].
pub fn rank_of(scores: &[f64], item: usize) -> usize {
    let s = scores[item];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < item))
        .count()
}

pub fn rank_all(model: &RecModel, user: usize, features: &[FeatureVector]) -> Result<Vec<usize>> {
    let cache = model.visual_cache(features)?;
    Ok(rank_scores(&model.scores_for(&model.user_repr(user)?, &cache)))
}

/// Mean over held-out pairs of the fraction of non-interacted items scored
/// below the held-out item (ties count one half).
pub fn auc(model: &RecModel, split: &Split, features: &[FeatureVector]) -> Result<f64> {
    let cache = model.visual_cache(features)?;
    auc_cached(model, split, &cache)
}

pub(crate) fn auc_cached(model: &RecModel, split: &Split, cache: &ItemVisualCache) -> Result<f64> {
    if split.validation.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut interacted = vec![Vec::new(); model.num_users];
    for it in split.train.iter().chain(&split.validation) {
        interacted[it.user].push(it.item);
    }
    let mut mask = vec![false; model.num_items];
    let mut total = 0.0;
    for held in &split.validation {
        let repr = model.user_repr(held.user)?;
        let scores = model.scores_for(&repr, cache);
        for &i in &interacted[held.user] {
            mask[i] = true;
        }
        let s = scores[held.item];
        let (mut below, mut count) = (0.0, 0usize);
        for (j, &v) in scores.iter().enumerate() {
            if mask[j] {
                continue;
            }
            count += 1;
            if v < s {
                below += 1.0;
            } else if v == s {
                below += 0.5;
            }
        }
        for &i in &interacted[held.user] {
            mask[i] = false;
        }
        total += if count == 0 { 1.0 } else { below / count as f64 };
    }
    Ok(total / split.validation.len() as f64)
}

/// Relative AUC improvement of a visual model over its image-blind baseline.
pub fn visual_gain(auc_visual: f64, auc_plain: f64) -> Result<f64> {
    if !(auc_plain > 0.0) {
        return Err(Error::InvalidArgument("plain AUC must be positive".into()));
    }
    Ok(auc_visual / auc_plain - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Interaction;

    pub(crate) fn toy_model(kind: ModelKind) -> RecModel {
        let hyper = Hyperparams {
            latent_dim: 3,
            visual_dim: 3,
            ..Hyperparams::default()
        };
        let mut m = RecModel::init(kind, 4, vec![0, 1, 0, 1, 2], 5, &hyper);
        m.item_bias = vec![0.1, -0.2, 0.3, 0.0, 0.05];
        m
    }

    fn feature(seed: u64) -> FeatureVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        FeatureVector((0..5).map(|_| n.sample(&mut rng)).collect())
    }

    #[test]
    fn bpr_ignores_images() {
        let m = toy_model(ModelKind::Bpr);
        assert_eq!(m.score(1, 2, &feature(1)).unwrap(), m.score(1, 2, &feature(2)).unwrap());
        assert!(matches!(m.grad_score_feature(0, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn zero_model_scores_zero() {
        let mut m = toy_model(ModelKind::Vbpr);
        m.user_latent.fill(0.0);
        m.item_latent.fill(0.0);
        m.item_bias.fill(0.0);
        m.visual_user.fill(0.0);
        assert_eq!(m.score(0, 0, &FeatureVector::zeros(5)).unwrap(), 0.0);
        assert!(m.grad_score_feature(0, 0).unwrap().as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn vbpr_decomposition() {
        let mut m = toy_model(ModelKind::Vbpr);
        m.visual_bias = vec![0.3, -0.1, 0.2, 0.0, 0.5];
        let f = feature(3);
        let (u, i) = (2, 1);
        let full = m.score(u, i, &f).unwrap();
        let plain = m.item_bias[i] + dot(m.user_latent(u), m.item_latent(i));
        let (proj, vb) = m.project(f.as_slice());
        assert_eq!(full, plain + dot(m.user_visual(u), &proj) + vb);
    }

    #[test]
    fn visual_scores_are_affine_in_features() {
        for kind in [ModelKind::Vbpr, ModelKind::DeepStyle] {
            let m = toy_model(kind);
            let (f1, f2) = (feature(4), feature(5));
            let sum = FeatureVector(f1.0.iter().zip(&f2.0).map(|(a, b)| a + b).collect());
            let zero = FeatureVector::zeros(5);
            let lhs = m.score(1, 3, &sum).unwrap() - m.score(1, 3, &f2).unwrap();
            let rhs = m.score(1, 3, &f1).unwrap() - m.score(1, 3, &zero).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10, "{kind:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [ModelKind::Vbpr, ModelKind::DeepStyle] {
            let mut m = toy_model(kind);
            if kind == ModelKind::Vbpr {
                m.visual_bias = vec![0.2, 0.1, -0.4, 0.3, 0.0];
            }
            let f = feature(6);
            let g = m.grad_score_feature(2, 4).unwrap();
            let h = 1e-4;
            for j in 0..5 {
                let mut up = f.clone();
                let mut dn = f.clone();
                up.0[j] += h;
                dn.0[j] -= h;
                let fd = (m.score(2, 4, &up).unwrap() - m.score(2, 4, &dn).unwrap()) / (2.0 * h);
                assert!((fd - g.0[j]).abs() <= 1e-6, "{kind:?} component {j}: {fd} vs {}", g.0[j]);
            }
        }
    }

    #[test]
    fn doubling_visual_user_doubles_embedding_term() {
        let mut m = toy_model(ModelKind::Vbpr);
        m.visual_bias = vec![0.0; 5];
        let g1 = m.grad_score_feature(0, 0).unwrap();
        m.visual_user.iter_mut().for_each(|v| *v *= 2.0);
        let g2 = m.grad_score_feature(0, 0).unwrap();
        for (a, b) in g1.0.iter().zip(&g2.0) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_rules() {
        assert_eq!(rank_scores(&[0.5, 2.0, 1.0]), vec![1, 2, 0]);
        let mut tied = vec![0.0; 6];
        tied[3] = 1.0;
        tied[5] = 1.0;
        let order = rank_scores(&tied);
        assert_eq!(&order[..2], &[3, 5]);
        assert_eq!(rank_of(&tied, 3), 0);
        assert_eq!(rank_of(&tied, 5), 1);
    }

    #[test]
    fn index_errors() {
        let m = toy_model(ModelKind::Vbpr);
        assert!(m.score(9, 0, &feature(1)).is_err());
        assert!(m.score(0, 9, &feature(1)).is_err());
        assert!(m.score(0, 0, &FeatureVector::zeros(2)).is_err());
    }

    #[test]
    fn visual_gain_values() {
        assert!((visual_gain(0.79, 0.64).unwrap() - 0.234375).abs() < 1e-12);
        assert!((visual_gain(0.85, 0.83).unwrap() - 0.024096385542168).abs() < 1e-12);
        assert_eq!(visual_gain(0.7, 0.7).unwrap(), 0.0);
        assert!(visual_gain(0.7, 0.0).is_err());
    }

    #[test]
    fn perfect_model_has_unit_auc() {
        let mut m = toy_model(ModelKind::Bpr);
        m.user_latent.fill(0.0);
        m.item_bias = vec![0.0, 0.0, 5.0, 0.0, 0.0];
        let split = Split {
            train: vec![Interaction { user: 0, item: 1 }],
            validation: vec![Interaction { user: 0, item: 2 }, Interaction { user: 1, item: 2 }],
            ineligible_users: vec![],
            seed: 0,
        };
        assert_eq!(auc(&m, &split, &[]).unwrap(), 1.0);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let (users, items) = (200, 300);
        let m = RecModel::init(ModelKind::Bpr, users, vec![0; items], 1, &Hyperparams::default());
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pick = || Interaction { user: 0, item: rng.random_range(0..items) };
        let (mut train, mut validation) = (Vec::new(), Vec::new());
        for u in 0..users {
            for _ in 0..4 {
                train.push(Interaction { user: u, ..pick() });
            }
            validation.push(Interaction { user: u, ..pick() });
        }
        let split = Split { train, validation, ineligible_users: vec![], seed: 0 };
        let a = auc(&m, &split, &vec![FeatureVector::zeros(1); items]).unwrap();
        assert!((a - 0.5).abs() <= 0.05, "auc {a}");
    }
}
