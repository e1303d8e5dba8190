//! Pairwise BPR training and fold-in of new users.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{auc_cached, dot, Hyperparams, ItemVisualCache, ModelKind, RecModel, UserRepr};
use crate::catalog::{histories, Dataset, Split};
use crate::error::{Error, Result};
use crate::extractor::FeatureVector;

/// Passes over the history when folding in a new user.
pub const FOLD_IN_PASSES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: ModelKind,
    /// Mean BPR negative log-likelihood per epoch.
    pub epoch_loss: Vec<f64>,
    /// Validation AUC per epoch (empty without a validation set).
    pub epoch_auc: Vec<f64>,
    /// 0-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub best_auc: Option<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln sigmoid(x)`, stable for large |x|.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

struct Scratch {
    df: Vec<f64>,
    edf: Vec<f64>,
    gu: Vec<f64>,
}

impl RecModel {
    /// One SGD update on the triple (u, i, j); returns the pre-update loss.
    fn sgd_step(&mut self, u: usize, i: usize, j: usize, features: &[FeatureVector], s: &mut Scratch) -> f64 {
        let (k, kv, d) = (self.latent_dim, self.visual_dim, self.feature_dim);
        let lr = self.hyper.learning_rate;
        let reg = self.hyper.l2_regularization;

        if self.kind.is_visual() {
            for ((o, a), b) in s.df.iter_mut().zip(features[i].as_slice()).zip(features[j].as_slice()) {
                *o = a - b;
            }
            for (o, row) in s.edf.iter_mut().zip(self.embedding.chunks_exact(d)) {
                *o = dot(row, &s.df);
            }
        }

        let ci = self.category_of[i];
        let cj = self.category_of[j];
        let mut x = self.item_bias[i] - self.item_bias[j];
        {
            let gu = &self.user_latent[u * k..(u + 1) * k];
            let gi = &self.item_latent[i * k..(i + 1) * k];
            let gj = &self.item_latent[j * k..(j + 1) * k];
            for r in 0..k {
                let mut diff = gi[r] - gj[r];
                if self.kind == ModelKind::DeepStyle {
                    diff += s.edf[r] - self.category_embed[ci * k + r] + self.category_embed[cj * k + r];
                }
                s.gu[r] = diff;
                x += gu[r] * diff;
            }
        }
        if self.kind == ModelKind::Vbpr {
            x += dot(&self.visual_user[u * kv..(u + 1) * kv], &s.edf) + dot(&self.visual_bias, &s.df);
        }
        let loss = neg_log_sigmoid(x);
        let w = sigmoid(-x);

        self.item_bias[i] += lr * (w - reg * self.item_bias[i]);
        self.item_bias[j] += lr * (-w - reg * self.item_bias[j]);
        for r in 0..k {
            let gu = self.user_latent[u * k + r];
            self.user_latent[u * k + r] += lr * (w * s.gu[r] - reg * gu);
            let gi = self.item_latent[i * k + r];
            self.item_latent[i * k + r] += lr * (w * gu - reg * gi);
            let gj = self.item_latent[j * k + r];
            self.item_latent[j * k + r] += lr * (-w * gu - reg * gj);
            if self.kind == ModelKind::DeepStyle {
                if ci != cj {
                    let a = self.category_embed[ci * k + r];
                    self.category_embed[ci * k + r] += lr * (-w * gu - reg * a);
                    let b = self.category_embed[cj * k + r];
                    self.category_embed[cj * k + r] += lr * (w * gu - reg * b);
                }
                let row = &mut self.embedding[r * d..(r + 1) * d];
                for (e, &df) in row.iter_mut().zip(&s.df) {
                    *e += lr * (w * gu * df - reg * *e);
                }
            }
        }
        if self.kind == ModelKind::Vbpr {
            for r in 0..kv {
                let t = self.visual_user[u * kv + r];
                self.visual_user[u * kv + r] += lr * (w * s.edf[r] - reg * t);
                let row = &mut self.embedding[r * d..(r + 1) * d];
                for (e, &df) in row.iter_mut().zip(&s.df) {
                    *e += lr * (w * t * df - reg * *e);
                }
            }
            for (b, &df) in self.visual_bias.iter_mut().zip(&s.df) {
                *b += lr * (w * df - reg * *b);
            }
        }
        loss
    }
}

/// Trains `kind` on `split.train` and returns the epoch with the best
/// validation AUC (the last epoch when there is no validation set).
pub fn train(
    dataset: &Dataset,
    split: &Split,
    features: &[FeatureVector],
    hyper: &Hyperparams,
    kind: ModelKind,
) -> Result<(RecModel, TrainReport)> {
    hyper.validate(kind)?;
    if split.train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let feature_dim = if kind.is_visual() {
        if features.len() != dataset.num_items() {
            return Err(Error::DimensionMismatch {
                expected: dataset.num_items(),
                actual: features.len(),
            });
        }
        let d = features.first().map_or(0, FeatureVector::dim);
        if d == 0 || features.iter().any(|f| f.dim() != d || !f.is_finite()) {
            return Err(Error::InvalidArgument("features must be finite with one common dimension".into()));
        }
        d
    } else {
        0
    };
    let num_items = dataset.num_items();
    let mut model = RecModel::init(kind, dataset.num_users(), dataset.categories().to_vec(), feature_dim, hyper);
    let train_hist = histories(dataset.num_users(), &split.train);
    let mut member = vec![Vec::<usize>::new(); dataset.num_users()];
    for (u, h) in train_hist.iter().enumerate() {
        let mut sorted = h.clone();
        sorted.sort_unstable();
        member[u] = sorted;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x7EA1_0000);
    let mut order = split.train.clone();
    let mut scratch = Scratch {
        df: vec![0.0; feature_dim],
        edf: vec![0.0; model.cache_dim()],
        gu: vec![0.0; model.latent_dim],
    };

    let mut report = TrainReport {
        kind,
        epoch_loss: Vec::with_capacity(hyper.epochs),
        epoch_auc: Vec::new(),
        best_epoch: 0,
        best_auc: None,
    };
    let mut best: Option<RecModel> = None;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for it in &order {
            let hist = &member[it.user];
            if hist.len() >= num_items {
                continue;
            }
            for _ in 0..hyper.negative_samples {
                let j = loop {
                    let j = rng.random_range(0..num_items);
                    if hist.binary_search(&j).is_err() {
                        break j;
                    }
                };
                total += model.sgd_step(it.user, it.item, j, features, &mut scratch);
                count += 1;
            }
        }
        report.epoch_loss.push(if count == 0 { 0.0 } else { total / count as f64 });
        if !split.validation.is_empty() {
            let cache = model.visual_cache(features)?;
            let a = auc_cached(&model, split, &cache)?;
            report.epoch_auc.push(a);
            if report.best_auc.is_none_or(|b| a > b) {
                report.best_auc = Some(a);
                report.best_epoch = epoch;
                best = Some(model.clone());
            }
        }
    }
    match best {
        Some(m) => Ok((m, report)),
        None => {
            report.best_epoch = hyper.epochs - 1;
            Ok((model, report))
        }
    }
}

/// Representation for a new user with the given history, fitted to the BPR
/// objective with all item parameters frozen. Each pass visits the history
/// in order and uses the exact average over all non-history negatives, so
/// the result depends only on the history and the current item state.
pub fn fold_in(model: &RecModel, cache: &ItemVisualCache, history: &[usize]) -> Result<UserRepr> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    for &i in history {
        model.check_item(i)?;
    }
    let mut in_hist = vec![false; model.num_items];
    for &i in history {
        in_hist[i] = true;
    }
    let negatives: Vec<usize> = (0..model.num_items).filter(|&j| !in_hist[j]).collect();
    let k = model.latent_dim;
    let kv = if model.kind == ModelKind::Vbpr { model.visual_dim } else { 0 };
    let mut user = UserRepr {
        latent: vec![0.0; k],
        visual: vec![0.0; kv],
    };
    if negatives.is_empty() {
        return Ok(user);
    }
    // same per-item step budget as training
    let lr = model.hyper.learning_rate * model.hyper.epochs as f64 / FOLD_IN_PASSES as f64;
    let reg = model.hyper.l2_regularization;
    // Per-item effective latent (what multiplies the user latent) and base term.
    let item_vec = |i: usize, out: &mut [f64]| {
        let gi = model.item_latent(i);
        out.copy_from_slice(gi);
        if model.kind == ModelKind::DeepStyle {
            let c = model.category_of[i];
            let p = cache.projection(i);
            for r in 0..k {
                out[r] += p[r] - model.category_embed[c * k + r];
            }
        }
    };
    let mut eff = vec![0.0; model.num_items * k];
    for (i, chunk) in eff.chunks_exact_mut(k).enumerate() {
        item_vec(i, chunk);
    }
    let base: Vec<f64> = (0..model.num_items)
        .map(|i| model.item_bias[i] + if kv > 0 { cache.visual_bias(i) } else { 0.0 })
        .collect();
    let proj = |i: usize| -> &[f64] {
        if kv > 0 {
            cache.projection(i)
        } else {
            &[]
        }
    };

    let mut g_lat = vec![0.0; k];
    let mut g_vis = vec![0.0; kv];
    let inv = 1.0 / negatives.len() as f64;
    for _ in 0..FOLD_IN_PASSES {
        for &i in history {
            let ei = &eff[i * k..(i + 1) * k];
            let si = base[i] + dot(&user.latent, ei) + dot(&user.visual, proj(i));
            g_lat.fill(0.0);
            g_vis.fill(0.0);
            for &j in &negatives {
                let ej = &eff[j * k..(j + 1) * k];
                let sj = base[j] + dot(&user.latent, ej) + dot(&user.visual, proj(j));
                let w = sigmoid(-(si - sj));
                for r in 0..k {
                    g_lat[r] += w * (ei[r] - ej[r]);
                }
                if kv > 0 {
                    let (pi, pj) = (proj(i), proj(j));
                    for r in 0..kv {
                        g_vis[r] += w * (pi[r] - pj[r]);
                    }
                }
            }
            for r in 0..k {
                user.latent[r] += lr * (g_lat[r] * inv - reg * user.latent[r]);
            }
            for r in 0..kv {
                user.visual[r] += lr * (g_vis[r] * inv - reg * user.visual[r]);
            }
        }
    }
    Ok(user)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{split_holdout, Interaction};
    use crate::imaging::Image;

    fn toy_dataset(num_users: usize, histories: &[Vec<usize>], num_items: usize) -> Dataset {
        let interactions = histories
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| Interaction { user: u, item: i }))
            .collect();
        Dataset::new(
            num_users,
            num_items,
            (0..num_items).map(|i| i % 2).collect(),
            interactions,
            vec![Image::filled(2, 2, 3, 0.0); num_items],
        )
        .unwrap()
    }

    #[test]
    fn separable_toy_ranks_positive_first() {
        let ds = toy_dataset(1, &[vec![1]], 2);
        let split = split_holdout(&ds, 0);
        let (m, report) = train(&ds, &split, &[], &Hyperparams::default(), ModelKind::Bpr).unwrap();
        assert!(report.best_auc.is_none());
        let scores = m.scores_for(&m.user_repr(0).unwrap(), &m.visual_cache(&[]).unwrap());
        assert!(scores[1] > scores[0]);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let ds = toy_dataset(1, &[vec![0]], 2);
        let split = Split {
            train: vec![],
            validation: vec![],
            ineligible_users: vec![],
            seed: 0,
        };
        assert!(matches!(
            train(&ds, &split, &[], &Hyperparams::default(), ModelKind::Bpr),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn visual_kinds_require_features() {
        let ds = toy_dataset(1, &[vec![0, 1]], 3);
        let split = split_holdout(&ds, 0);
        assert!(train(&ds, &split, &[], &Hyperparams::default(), ModelKind::Vbpr).is_err());
    }

    #[test]
    fn fold_in_is_deterministic_and_validates() {
        let histories: Vec<Vec<usize>> = (0..6).map(|u| vec![u % 4, (u + 1) % 4, 4 + u % 2]).collect();
        let ds = toy_dataset(6, &histories, 8);
        let split = split_holdout(&ds, 1);
        let (m, _) = train(&ds, &split, &[], &Hyperparams::default(), ModelKind::Bpr).unwrap();
        let cache = m.visual_cache(&[]).unwrap();
        let a = fold_in(&m, &cache, &[2, 3]).unwrap();
        assert_eq!(a, fold_in(&m, &cache, &[2, 3]).unwrap());
        assert!(matches!(fold_in(&m, &cache, &[]), Err(Error::EmptyHistory)));
        assert!(fold_in(&m, &cache, &[99]).is_err());
    }

    #[test]
    fn stable_log_sigmoid() {
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(neg_log_sigmoid(800.0).is_finite());
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
        assert!((sigmoid(-800.0)).abs() < 1e-300 || sigmoid(-800.0) >= 0.0);
    }
}
