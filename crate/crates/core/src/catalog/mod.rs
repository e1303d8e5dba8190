//! Users, items, categories, interactions and item images.

mod load;
mod synthetic;

pub use load::{load_dataset, load_interactions, parse_interactions, InteractionTable, MissingImagePolicy};
pub use synthetic::{generate_synthetic, synthetic_image, GroundTruth, SyntheticConfig};

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
}

/// Immutable catalog plus feedback. Images are shared, so clones are cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_users: usize,
    num_items: usize,
    num_categories: usize,
    category_of: Vec<usize>,
    interactions: Vec<Interaction>,
    images: Arc<Vec<Image>>,
    ground_truth: Option<Arc<GroundTruth>>,
}

impl Dataset {
    pub fn new(
        num_users: usize,
        num_items: usize,
        category_of: Vec<usize>,
        interactions: Vec<Interaction>,
        images: Vec<Image>,
    ) -> Result<Self> {
        if category_of.len() != num_items {
            return Err(Error::DimensionMismatch {
                expected: num_items,
                actual: category_of.len(),
            });
        }
        if images.len() != num_items {
            return Err(Error::DimensionMismatch {
                expected: num_items,
                actual: images.len(),
            });
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::InvalidArgument("all item images must share one shape".into()));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(interactions.len());
        for it in &interactions {
            if it.user >= num_users {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: it.user,
                    limit: num_users,
                });
            }
            if it.item >= num_items {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: it.item,
                    limit: num_items,
                });
            }
            if !seen.insert(*it) {
                return Err(Error::InvalidArgument(format!("duplicate interaction {it:?}")));
            }
        }
        let num_categories = category_of.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            num_users,
            num_items,
            num_categories,
            category_of,
            interactions,
            images: Arc::new(images),
            ground_truth: None,
        })
    }

    pub(crate) fn with_ground_truth(mut self, truth: GroundTruth) -> Self {
        self.ground_truth = Some(Arc::new(truth));
        self
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn category_of(&self, item: usize) -> usize {
        self.category_of[item]
    }

    pub fn categories(&self) -> &[usize] {
        &self.category_of
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn image(&self, item: usize) -> &Image {
        &self.images[item]
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.ground_truth.as_deref()
    }

    /// Per-user item lists in interaction order.
    pub fn histories(&self) -> Vec<Vec<usize>> {
        histories(self.num_users, &self.interactions)
    }

    /// Interaction count per item.
    pub fn item_counts(&self) -> Vec<usize> {
        item_counts(self.num_items, &self.interactions)
    }

    pub fn items_in_category(&self, category: usize) -> Vec<usize> {
        (0..self.num_items)
            .filter(|&i| self.category_of[i] == category)
            .collect()
    }

    /// Canonical byte encoding, used for reproducibility checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(b"VXDS", 1);
        w.usize(self.num_users);
        w.usize(self.num_items);
        w.usizes(&self.category_of);
        w.usize(self.interactions.len());
        for it in &self.interactions {
            w.usize(it.user);
            w.usize(it.item);
        }
        for img in self.images.iter() {
            let (h, wd, c) = img.shape();
            w.usize(h);
            w.usize(wd);
            w.usize(c);
            w.f64s(img.pixels());
        }
        w.finish()
    }

    /// Inverse of [`Dataset::to_bytes`]; the ground truth is not stored.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, b"VXDS", 1)?;
        let num_users = r.usize()?;
        let num_items = r.usize()?;
        let category_of = r.usizes()?;
        let n = r.usize()?;
        let mut interactions = Vec::with_capacity(n.min(bytes.len()));
        for _ in 0..n {
            let user = r.usize()?;
            let item = r.usize()?;
            interactions.push(Interaction { user, item });
        }
        let mut images = Vec::with_capacity(num_items.min(bytes.len()));
        for _ in 0..num_items {
            let (h, w, c) = (r.usize()?, r.usize()?, r.usize()?);
            images.push(Image::from_pixels(h, w, c, r.f64s()?)?);
        }
        r.expect_end()?;
        Dataset::new(num_users, num_items, category_of, interactions, images)
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

pub(crate) fn histories(num_users: usize, interactions: &[Interaction]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_users];
    for it in interactions {
        out[it.user].push(it.item);
    }
    out
}

pub(crate) fn item_counts(num_items: usize, interactions: &[Interaction]) -> Vec<usize> {
    let mut counts = vec![0; num_items];
    for it in interactions {
        counts[it.item] += 1;
    }
    counts
}

/// Train/validation partition with one held-out interaction per eligible user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    /// Users with fewer than two interactions; they stay train-only.
    pub ineligible_users: Vec<usize>,
    pub seed: u64,
}

impl Split {
    pub fn train_histories(&self, num_users: usize) -> Vec<Vec<usize>> {
        histories(num_users, &self.train)
    }
}

pub fn split_holdout(dataset: &Dataset, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(dataset.interactions.len());
    let mut validation = Vec::new();
    let mut ineligible_users = Vec::new();
    for (user, items) in dataset.histories().into_iter().enumerate() {
        if items.len() < 2 {
            if !items.is_empty() {
                ineligible_users.push(user);
            }
            train.extend(items.into_iter().map(|item| Interaction { user, item }));
            continue;
        }
        let held = *items.choose(&mut rng).expect("non-empty");
        for item in items {
            let it = Interaction { user, item };
            if item == held {
                validation.push(it);
            } else {
                train.push(it);
            }
        }
    }
    Split {
        train,
        validation,
        ineligible_users,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(histories: &[&[usize]], num_items: usize) -> Dataset {
        let interactions = histories
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| Interaction { user: u, item: i }))
            .collect();
        Dataset::new(
            histories.len(),
            num_items,
            vec![0; num_items],
            interactions,
            vec![Image::filled(2, 2, 3, 0.0); num_items],
        )
        .unwrap()
    }

    #[test]
    fn byte_round_trip() {
        let d = toy(&[&[0, 2], &[1], &[2, 3, 0]], 4);
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        save_dataset(&d, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap().to_bytes(), d.to_bytes());
        assert!(Dataset::from_bytes(&d.to_bytes()[..20]).is_err());
    }

    #[test]
    fn holdout_one_per_eligible_user() {
        let ds = toy(&[&[0, 1, 2, 3, 4], &[5]], 6);
        let split = split_holdout(&ds, 3);
        let train = split.train_histories(2);
        assert_eq!(train[0].len(), 4);
        assert_eq!(train[1], vec![5]);
        assert_eq!(split.validation.len(), 1);
        assert_eq!(split.validation[0].user, 0);
        assert_eq!(split.ineligible_users, vec![1]);
        assert_eq!(split.train.len() + split.validation.len(), ds.interactions().len());
        assert_eq!(split_holdout(&ds, 3), split);
    }

    #[test]
    fn rejects_invalid_interactions() {
        let img = vec![Image::filled(2, 2, 3, 0.0); 2];
        let dup = vec![Interaction { user: 0, item: 1 }; 2];
        assert!(Dataset::new(1, 2, vec![0, 0], dup, img.clone()).is_err());
        let oob = vec![Interaction { user: 0, item: 2 }];
        assert!(Dataset::new(1, 2, vec![0, 0], oob, img.clone()).is_err());
        assert!(Dataset::new(1, 2, vec![0], vec![], img).is_err());
    }
}
