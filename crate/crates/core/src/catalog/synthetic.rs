//! Seeded synthetic catalogs with a controllable visual signal.
//!
//! Every item image is a category template (base colour plus two gratings)
//! overlaid with an item-specific grating, colour shift and pixel noise.
//! Ground-truth preference mixes a latent-factor affinity (plus an item
//! popularity term) with an affinity between a user's visual taste and the
//! standardized extractor features of the item image:
//!
//! `t(u,i) = (1 - w) * (latent(u,i) + pop(i)) + w * visual(u,i)`
//!
//! Each user's interactions are drawn without replacement from the softmax
//! of `t(u, .) / temperature` (Gumbel top-k).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::extractor::ExtractorWeights;
use crate::imaging::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub latent_dim: usize,
    pub interactions_per_user: usize,
    pub visual_weight: f64,
    pub seed: u64,
    pub image_side: usize,
    /// Softmax temperature of the preference sampler.
    pub temperature: f64,
    /// Scale of the item popularity term on the latent side.
    pub popularity_scale: f64,
    /// Share of the visual taste that is common to all users.
    pub shared_taste: f64,
    /// Per-pixel Gaussian noise added to each image.
    pub pixel_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 500,
            num_items: 1000,
            num_categories: 10,
            latent_dim: 8,
            interactions_per_user: 20,
            visual_weight: 0.8,
            seed: 7,
            image_side: 32,
            temperature: 0.25,
            popularity_scale: 0.2,
            shared_taste: 0.1,
            pixel_noise: 40.0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.num_users == 0
            || self.num_items == 0
            || self.num_categories == 0
            || self.interactions_per_user == 0
        {
            return Err(Error::InvalidArgument("all counts must be >= 1".into()));
        }
        if self.latent_dim < 2 {
            return Err(Error::InvalidArgument("latent_dim must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.visual_weight) {
            return Err(Error::InvalidArgument("visual_weight must lie in [0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_taste) {
            return Err(Error::InvalidArgument("shared_taste must lie in [0, 1]".into()));
        }
        if self.interactions_per_user > self.num_items {
            return Err(Error::Capacity(format!(
                "interactions_per_user {} exceeds num_items {}",
                self.interactions_per_user, self.num_items
            )));
        }
        Ok(())
    }
}

/// Generator-side parameters, kept for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// User-independent part of each item's preference score.
    pub item_popularity: Vec<f64>,
    /// Row-major `num_users x num_items` preference scores.
    pub preference: Vec<f64>,
}

#[derive(Clone)]
struct Grating {
    freq_x: f64,
    freq_y: f64,
    phase: f64,
    amplitude: [f64; 3],
}

impl Grating {
    fn random(rng: &mut ChaCha8Rng, cycles: (f64, f64), amplitude: (f64, f64)) -> Self {
        let theta = rng.random_range(0.0..PI);
        let cyc = rng.random_range(cycles.0..cycles.1);
        let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Grating {
            freq_x: cyc * theta.cos(),
            freq_y: cyc * theta.sin(),
            phase: rng.random_range(0.0..2.0 * PI),
            amplitude: [
                sign(rng) * rng.random_range(amplitude.0..amplitude.1),
                sign(rng) * rng.random_range(amplitude.0..amplitude.1),
                sign(rng) * rng.random_range(amplitude.0..amplitude.1),
            ],
        }
    }

    fn value(&self, y: f64, x: f64, side: f64, c: usize) -> f64 {
        self.amplitude[c] * (2.0 * PI * (self.freq_x * x + self.freq_y * y) / side + self.phase).sin()
    }
}

struct Template {
    base: [f64; 3],
    gratings: Vec<Grating>,
}

/// Deterministic image for one item given its category template parameters.
fn render(
    side: usize,
    template: &Template,
    item_grating: &Grating,
    shift: [f64; 3],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Image {
    let mut pixels = Vec::with_capacity(side * side * 3);
    let s = side as f64;
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = template.base[c] + shift[c] + item_grating.value(yf, xf, s, c);
                for g in &template.gratings {
                    v += g.value(yf, xf, s, c);
                }
                if noise > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    v += noise * z;
                }
                pixels.push(v.round_ties_even());
            }
        }
    }
    Image::from_pixels(side, side, 3, pixels).expect("valid shape")
}

fn random_template(rng: &mut ChaCha8Rng) -> Template {
    Template {
        base: [
            rng.random_range(90.0..165.0),
            rng.random_range(90.0..165.0),
            rng.random_range(90.0..165.0),
        ],
        gratings: vec![
            Grating::random(rng, (1.0, 3.0), (15.0, 30.0)),
            Grating::random(rng, (4.0, 9.0), (15.0, 30.0)),
        ],
    }
}

/// Image of item `item` of a synthetic catalog, reproducible from the seed.
pub fn synthetic_image(config: &SyntheticConfig, item: usize) -> Result<Image> {
    config.validate()?;
    let (images, _) = images_and_categories(config);
    images
        .into_iter()
        .nth(item)
        .ok_or(Error::UnknownItem(item))
}

fn images_and_categories(config: &SyntheticConfig) -> (Vec<Image>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1A4E_5EED);
    let templates: Vec<Template> = (0..config.num_categories)
        .map(|_| random_template(&mut rng))
        .collect();
    let mut images = Vec::with_capacity(config.num_items);
    let mut categories = Vec::with_capacity(config.num_items);
    for item in 0..config.num_items {
        // round-robin categories keep every category populated
        let category = item % config.num_categories;
        let grating = Grating::random(&mut rng, (2.0, 8.0), (10.0, 25.0));
        let shift = [
            rng.random_range(-25.0..25.0),
            rng.random_range(-25.0..25.0),
            rng.random_range(-25.0..25.0),
        ];
        images.push(render(
            config.image_side,
            &templates[category],
            &grating,
            shift,
            config.pixel_noise,
            &mut rng,
        ));
        categories.push(category);
    }
    (images, categories)
}

fn standardize_columns(rows: &mut [Vec<f64>]) {
    let n = rows.len() as f64;
    let dim = rows.first().map_or(0, Vec::len);
    for j in 0..dim {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in rows.iter_mut() {
            r[j] = (r[j] - mean) / sd;
        }
    }
}

fn unit_variance(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}

pub fn generate_synthetic(config: &SyntheticConfig, extractor: &ExtractorWeights) -> Result<Dataset> {
    config.validate()?;
    let (images, categories) = images_and_categories(config);
    if images[0].shape() != extractor.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", extractor.input_shape()),
            actual: format!("{:?}", images[0].shape()),
        });
    }
    let (nu, ni, k) = (config.num_users, config.num_items, config.latent_dim);
    let d = extractor.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };

    let user_latent = draw(nu * k, &mut rng);
    let item_latent = draw(ni * k, &mut rng);
    let popularity = draw(ni, &mut rng);
    let shared = draw(d, &mut rng);
    let projection = draw(k * d, &mut rng);
    let user_taste = draw(nu * k, &mut rng);

    let mut phi: Vec<Vec<f64>> = images
        .iter()
        .map(|im| extractor.extract(im).map(|f| f.0))
        .collect::<Result<_>>()?;
    standardize_columns(&mut phi);

    let (ws, wp) = (config.shared_taste.sqrt(), (1.0 - config.shared_taste).sqrt());
    let taste: Vec<Vec<f64>> = (0..nu)
        .map(|u| {
            (0..d)
                .map(|j| {
                    let personal: f64 = (0..k)
                        .map(|r| user_taste[u * k + r] * projection[r * d + j])
                        .sum::<f64>()
                        / (k as f64).sqrt();
                    ws * shared[j] + wp * personal
                })
                .collect()
        })
        .collect();

    let mut latent = vec![0.0; nu * ni];
    let mut visual = vec![0.0; nu * ni];
    for u in 0..nu {
        for i in 0..ni {
            latent[u * ni + i] = (0..k)
                .map(|r| user_latent[u * k + r] * item_latent[i * k + r])
                .sum::<f64>();
            visual[u * ni + i] = taste[u].iter().zip(&phi[i]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    unit_variance(&mut latent);
    unit_variance(&mut visual);
    // shared taste component of the visual score, in the same units
    let visual_sd_raw = {
        let n = (nu * ni) as f64;
        let raw: Vec<f64> = (0..nu)
            .flat_map(|u| {
                let t = &taste[u];
                phi.iter().map(move |p| t.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / n;
        (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    };

    let w = config.visual_weight;
    let mut preference = vec![0.0; nu * ni];
    for u in 0..nu {
        for i in 0..ni {
            preference[u * ni + i] = (1.0 - w)
                * (latent[u * ni + i] + config.popularity_scale * popularity[i])
                + w * visual[u * ni + i];
        }
    }
    let item_popularity: Vec<f64> = (0..ni)
        .map(|i| {
            let shared_visual = if visual_sd_raw > 0.0 {
                ws * shared.iter().zip(&phi[i]).map(|(a, b)| a * b).sum::<f64>() / visual_sd_raw
            } else {
                0.0
            };
            (1.0 - w) * config.popularity_scale * popularity[i] + w * shared_visual
        })
        .collect();

    let gumbel = Gumbel::new(0.0, 1.0).unwrap();
    let mut interactions = Vec::with_capacity(nu * config.interactions_per_user);
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(ni);
    for u in 0..nu {
        keys.clear();
        keys.extend((0..ni).map(|i| {
            let g: f64 = gumbel.sample(&mut rng);
            (preference[u * ni + i] / config.temperature + g, i)
        }));
        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        interactions.extend(
            keys[..config.interactions_per_user]
                .iter()
                .map(|&(_, item)| Interaction { user: u, item }),
        );
    }

    Ok(Dataset::new(nu, ni, categories, interactions, images)?.with_ground_truth(GroundTruth {
        item_popularity,
        preference,
    }))
}
