//! External interaction tables and per-item PPM images.
//!
//! Records are `user_id,item_id[,category][,timestamp]`, one per line, with an
//! optional header. Ids are arbitrary tokens re-indexed densely from 0 in
//! order of first appearance. Timestamps are accepted and ignored.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use super::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::imaging::read_ppm;

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTable {
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
    pub category_keys: Vec<String>,
    /// Category index per item (0 when the column is absent).
    pub category_of: Vec<usize>,
    pub interactions: Vec<Interaction>,
    pub duplicates_dropped: usize,
}

impl InteractionTable {
    pub fn num_users(&self) -> usize {
        self.user_keys.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }
}

fn intern(map: &mut HashMap<String, usize>, keys: &mut Vec<String>, token: &str) -> usize {
    if let Some(&idx) = map.get(token) {
        return idx;
    }
    let idx = keys.len();
    map.insert(token.to_string(), idx);
    keys.push(token.to_string());
    idx
}

pub fn parse_interactions(text: &str) -> Result<InteractionTable> {
    let mut users = HashMap::new();
    let mut items = HashMap::new();
    let mut cats = HashMap::new();
    let mut table = InteractionTable {
        user_keys: Vec::new(),
        item_keys: Vec::new(),
        category_keys: Vec::new(),
        category_of: Vec::new(),
        interactions: Vec::new(),
        duplicates_dropped: 0,
    };
    let mut seen = HashSet::new();
    let mut first_record = true;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if first_record {
            first_record = false;
            let looks_like_header = fields
                .first()
                .is_some_and(|f| f.eq_ignore_ascii_case("user_id") || f.eq_ignore_ascii_case("user"));
            if looks_like_header {
                continue;
            }
        }
        if !(2..=4).contains(&fields.len()) || fields[..2].iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected user_id,item_id[,category][,timestamp], got {line:?}"),
            });
        }
        if let Some(ts) = fields.get(3) {
            if ts.parse::<f64>().is_err() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("bad timestamp {ts:?}"),
                });
            }
        }
        let user = intern(&mut users, &mut table.user_keys, fields[0]);
        let item = intern(&mut items, &mut table.item_keys, fields[1]);
        if table.category_of.len() < table.item_keys.len() {
            let cat = fields.get(2).map_or(0, |c| intern(&mut cats, &mut table.category_keys, c));
            table.category_of.push(cat);
        }
        let it = Interaction { user, item };
        if seen.insert(it) {
            table.interactions.push(it);
        } else {
            table.duplicates_dropped += 1;
        }
    }
    if table.interactions.is_empty() {
        return Err(Error::NoInteractions);
    }
    if table.category_keys.is_empty() {
        table.category_keys.push("0".into());
    }
    Ok(table)
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingImagePolicy {
    /// Items without an image are removed together with their interactions.
    #[default]
    Drop,
    /// Any missing image is an error listing the missing item indices.
    Fail,
}

/// Attaches `<item_id>.ppm` images from `image_dir` and drops users left
/// with fewer than `min_interactions` interactions. Returns the dataset and
/// the original keys of dropped items.
pub fn load_dataset(
    table: &InteractionTable,
    image_dir: impl AsRef<Path>,
    policy: MissingImagePolicy,
    min_interactions: usize,
) -> Result<(Dataset, Vec<String>)> {
    let dir = image_dir.as_ref();
    let mut images = Vec::with_capacity(table.num_items());
    let mut missing = Vec::new();
    for (idx, key) in table.item_keys.iter().enumerate() {
        let path = dir.join(format!("{key}.ppm"));
        if path.exists() {
            images.push(Some(read_ppm(&path)?));
        } else {
            missing.push(idx);
            images.push(None);
        }
    }
    if policy == MissingImagePolicy::Fail && !missing.is_empty() {
        return Err(Error::MissingImages(missing));
    }
    let dropped: Vec<String> = missing.iter().map(|&i| table.item_keys[i].clone()).collect();

    let mut item_map = vec![usize::MAX; table.num_items()];
    let mut kept_images = Vec::new();
    let mut kept_categories = Vec::new();
    for (idx, img) in images.into_iter().enumerate() {
        if let Some(img) = img {
            item_map[idx] = kept_images.len();
            kept_images.push(img);
            kept_categories.push(table.category_of[idx]);
        }
    }
    let remaining: Vec<Interaction> = table
        .interactions
        .iter()
        .filter(|it| item_map[it.item] != usize::MAX)
        .map(|it| Interaction {
            user: it.user,
            item: item_map[it.item],
        })
        .collect();
    let mut counts = vec![0usize; table.num_users()];
    for it in &remaining {
        counts[it.user] += 1;
    }
    let mut user_map = vec![usize::MAX; table.num_users()];
    let mut next = 0;
    for (u, &c) in counts.iter().enumerate() {
        if c >= min_interactions.max(1) {
            user_map[u] = next;
            next += 1;
        }
    }
    let interactions: Vec<Interaction> = remaining
        .into_iter()
        .filter(|it| user_map[it.user] != usize::MAX)
        .map(|it| Interaction {
            user: user_map[it.user],
            item: it.item,
        })
        .collect();
    if interactions.is_empty() {
        return Err(Error::NoInteractions);
    }
    let num_items = kept_images.len();
    Ok((
        Dataset::new(next, num_items, kept_categories, interactions, kept_images)?,
        dropped,
    ))
}
