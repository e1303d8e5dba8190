//! Black-box estimation of `ds/df` from perturbation responses.
//!
//! For perturbed images with features `f^k` and responses `s^k` around a
//! base `(f, s)`, the score gradient `x` solves `dF x = ds` with rows
//! `f^k - f` and entries `s^k - s`. A square system is solved exactly; a
//! wide one (fewer perturbations than feature dimensions) by its
//! minimum-norm solution `x = dF^T (dF dF^T)^-1 ds`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::extractor::{ExtractorWeights, FeatureVector};
use crate::imaging::{quantize_clamp, sample_perturbation, Image};
use crate::oracle::{Feedback, Oracle};

/// Systems whose reciprocal condition number falls below this are resampled.
pub const RCOND_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBatch {
    pub base_feature: FeatureVector,
    pub base_response: f64,
    /// `d' x d`, row-major.
    pub delta_f: Vec<f64>,
    pub delta_s: Vec<f64>,
    pub dim: usize,
}

impl PerturbationBatch {
    /// Builds the deltas from raw perturbation features and responses.
    pub fn new(
        base_feature: FeatureVector,
        base_response: f64,
        features: &[FeatureVector],
        responses: &[f64],
    ) -> Result<Self> {
        if features.len() != responses.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                actual: responses.len(),
            });
        }
        let dim = base_feature.dim();
        let mut delta_f = Vec::with_capacity(features.len() * dim);
        for f in features {
            if f.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: f.dim(),
                });
            }
            delta_f.extend(f.0.iter().zip(&base_feature.0).map(|(a, b)| a - b));
        }
        let delta_s = responses.iter().map(|s| s - base_response).collect();
        Self::from_deltas(base_feature, base_response, delta_f, delta_s)
    }

    pub fn from_deltas(
        base_feature: FeatureVector,
        base_response: f64,
        delta_f: Vec<f64>,
        delta_s: Vec<f64>,
    ) -> Result<Self> {
        let dim = base_feature.dim();
        if delta_s.is_empty() || dim == 0 {
            return Err(Error::InvalidArgument("a batch needs at least one perturbation".into()));
        }
        if delta_f.len() != delta_s.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: delta_s.len() * dim,
                actual: delta_f.len(),
            });
        }
        if delta_f.iter().chain(&delta_s).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite batch entry".into()));
        }
        Ok(PerturbationBatch {
            base_feature,
            base_response,
            delta_f,
            delta_s,
            dim,
        })
    }

    pub fn rows(&self) -> usize {
        self.delta_s.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.delta_f[k * self.dim..(k + 1) * self.dim]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.dim, &self.delta_f)
    }

    /// Row-major text dump: a `rows cols` header, then one line per
    /// perturbation holding the feature delta followed by the response delta.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.rows(), self.dim);
        for k in 0..self.rows() {
            let mut fields: Vec<String> = self.row(k).iter().map(|v| format!("{v:e}")).collect();
            fields.push(format!("{:e}", self.delta_s[k]));
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Exact,
    MinNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub x: FeatureVector,
    pub method: SolveMethod,
    pub residual_norm: f64,
}

fn rcond(singular_values: &DVector<f64>) -> f64 {
    let max = singular_values.max();
    let min = singular_values.min();
    if max > 0.0 {
        min / max
    } else {
        0.0
    }
}

fn residual(a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a * x - b).norm()
}

/// Solves the square system `dF x = ds`.
pub fn solve_exact(batch: &PerturbationBatch) -> Result<GradientEstimate> {
    if batch.rows() != batch.dim {
        return Err(Error::DimensionMismatch {
            expected: batch.dim,
            actual: batch.rows(),
        });
    }
    let a = batch.matrix();
    let b = DVector::from_column_slice(&batch.delta_s);
    if rcond(&a.clone().singular_values()) < RCOND_THRESHOLD {
        return Err(Error::Resample);
    }
    let x = a.clone().lu().solve(&b).ok_or(Error::Resample)?;
    Ok(GradientEstimate {
        residual_norm: residual(&a, &x, &b),
        x: FeatureVector(x.as_slice().to_vec()),
        method: SolveMethod::Exact,
    })
}

/// Minimum-norm solution of the wide system `dF x = ds`, computed through a
/// QR factorization of `dF^T` rather than the normal equations.
pub fn solve_min_norm(batch: &PerturbationBatch) -> Result<GradientEstimate> {
    if batch.rows() >= batch.dim {
        return Err(Error::InvalidArgument(format!(
            "minimum-norm solve needs fewer rows than columns, got {}x{}",
            batch.rows(),
            batch.dim
        )));
    }
    let a = batch.matrix();
    let b = DVector::from_column_slice(&batch.delta_s);
    let qr = a.transpose().qr();
    let (q, r) = (qr.q(), qr.r());
    let r_diag = r.diagonal().abs();
    if rcond(&r_diag) < RCOND_THRESHOLD || rcond(&a.clone().singular_values()) < RCOND_THRESHOLD {
        return Err(Error::Resample);
    }
    // dF = R^T Q^T, so x = Q y with R^T y = ds.
    let y = r.transpose().solve_lower_triangular(&b).ok_or(Error::Resample)?;
    let x = q * y;
    Ok(GradientEstimate {
        residual_norm: residual(&a, &x, &b),
        x: FeatureVector(x.as_slice().to_vec()),
        method: SolveMethod::MinNorm,
    })
}

/// Exact solve for square batches, minimum-norm solve for wide ones.
pub fn solve(batch: &PerturbationBatch) -> Result<GradientEstimate> {
    if batch.rows() == batch.dim {
        solve_exact(batch)
    } else {
        solve_min_norm(batch)
    }
}

fn check_rank(rank: usize, num_items: usize) -> Result<()> {
    if rank >= num_items {
        return Err(Error::IndexOutOfRange {
            what: "rank",
            index: rank,
            limit: num_items,
        });
    }
    Ok(())
}

/// `s = 1 - r / N` for 0-based ranks.
pub fn ranks_to_scores_uniform(ranks: &[usize], num_items: usize) -> Result<Vec<f64>> {
    ranks
        .iter()
        .map(|&r| {
            check_rank(r, num_items)?;
            // (N - r) / N rounds once, so the top rank maps to exactly 1
            Ok((num_items - r) as f64 / num_items as f64)
        })
        .collect()
}

/// `s = sigma * Phi^-1((N - r - 0.5) / N)`; an evaluation baseline that
/// needs the (privileged) empirical score deviation.
pub fn ranks_to_scores_gaussian(ranks: &[usize], num_items: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let std_normal = Normal::standard();
    let n = num_items as f64;
    ranks
        .iter()
        .map(|&r| {
            check_rank(r, num_items)?;
            Ok(sigma * std_normal.inverse_cdf((n - r as f64 - 0.5) / n))
        })
        .collect()
}

/// How rank feedback is turned into pseudo-scores.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RankMapping {
    #[default]
    Uniform,
    Gaussian { sigma: f64 },
}

impl RankMapping {
    pub fn map(&self, ranks: &[usize], num_items: usize) -> Result<Vec<f64>> {
        match *self {
            RankMapping::Uniform => ranks_to_scores_uniform(ranks, num_items),
            RankMapping::Gaussian { sigma } => ranks_to_scores_gaussian(ranks, num_items, sigma),
        }
    }
}

/// Current response of `item` for `user`: its score, or its visible rank
/// mapped to a pseudo-score. Ranks below the visibility cutoff are imputed
/// as the cutoff itself unless `require_visible` is set.
pub(crate) fn observe(
    oracle: &mut Oracle,
    user: usize,
    item: usize,
    mapping: RankMapping,
    pre_step: bool,
    require_visible: bool,
) -> Result<f64> {
    match oracle.mode().feedback {
        Feedback::Scores => {
            let scores = if pre_step {
                oracle.pre_step_scores(user)?
            } else {
                oracle.query_scores(user)?
            };
            Ok(scores[item])
        }
        Feedback::Ranks => {
            let ranking = if pre_step {
                oracle.pre_step_ranking(user)?
            } else {
                oracle.query_ranking(user)?
            };
            let rank = match ranking.position(item) {
                Some(r) => r,
                None if require_visible => return Err(Error::NotVisible(item)),
                None => ranking.cutoff().min(ranking.num_items - 1),
            };
            Ok(mapping.map(&[rank], ranking.num_items)?[0])
        }
    }
}

/// Perturbation batch whose uploads are left in place; the caller decides
/// what to upload next.
pub(crate) fn collect_batch<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    user: usize,
    item: usize,
    base_image: &Image,
    base_response: f64,
    d_prime: usize,
    delta: f64,
    mapping: RankMapping,
    rng: &mut R,
) -> Result<PerturbationBatch> {
    let mut batches = collect_batches(
        oracle,
        extractor,
        &[(user, base_response)],
        item,
        base_image,
        d_prime,
        delta,
        mapping,
        rng,
    )?;
    Ok(batches.remove(0))
}

/// One set of perturbation uploads observed by several users, one batch per
/// `(user, base_response)`.
pub(crate) fn collect_batches<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    users: &[(usize, f64)],
    item: usize,
    base_image: &Image,
    d_prime: usize,
    delta: f64,
    mapping: RankMapping,
    rng: &mut R,
) -> Result<Vec<PerturbationBatch>> {
    if d_prime == 0 {
        return Err(Error::InvalidArgument("d' must be >= 1".into()));
    }
    let base_feature = extractor.extract(&quantize_clamp(base_image))?;
    let mut features = Vec::with_capacity(d_prime);
    let mut responses = vec![Vec::with_capacity(d_prime); users.len()];
    for _ in 0..d_prime {
        let perturbed = quantize_clamp(&sample_perturbation(base_image, delta, rng)?);
        features.push(extractor.extract(&perturbed)?);
        oracle.upload_image(item, &perturbed)?;
        for (&(user, _), out) in users.iter().zip(responses.iter_mut()) {
            out.push(observe(oracle, user, item, mapping, false, false)?);
        }
    }
    users
        .iter()
        .zip(&responses)
        .map(|(&(_, base), r)| PerturbationBatch::new(base_feature.clone(), base, &features, r))
        .collect()
}

/// Draws `d_prime` perturbations of `base_image` within the `delta` ball,
/// uploads each and records its response, then restores `base_image`.
/// Charges `d_prime + 1` uploads, `d_prime` feedback queries and one
/// pre-step query for the base response. Under rank feedback the pushed item
/// must be visible in the base ranking.
pub fn build_batch<R: Rng + ?Sized>(
    oracle: &mut Oracle,
    extractor: &ExtractorWeights,
    user: usize,
    item: usize,
    base_image: &Image,
    d_prime: usize,
    delta: f64,
    mapping: RankMapping,
    rng: &mut R,
) -> Result<PerturbationBatch> {
    let base_response = observe(oracle, user, item, mapping, true, true)?;
    let batch = collect_batch(
        oracle,
        extractor,
        user,
        item,
        base_image,
        base_response,
        d_prime,
        delta,
        mapping,
        rng,
    );
    oracle.upload_image(item, base_image)?;
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]], ds: &[f64]) -> PerturbationBatch {
        let dim = rows[0].len();
        PerturbationBatch::from_deltas(
            FeatureVector::zeros(dim),
            0.0,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            ds.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_diagonal_systems() {
        let x = solve_exact(&batch(&[&[1.0, 0.0], &[0.0, 1.0]], &[3.0, -1.0])).unwrap();
        assert_eq!(x.x.0, vec![3.0, -1.0]);
        let x = solve_exact(&batch(&[&[2.0, 0.0], &[0.0, 4.0]], &[2.0, 8.0])).unwrap();
        assert_eq!(x.x.0, vec![1.0, 2.0]);
        assert_eq!(x.method, SolveMethod::Exact);
    }

    #[test]
    fn singular_systems_resample() {
        assert!(matches!(
            solve_exact(&batch(&[&[1.0, 2.0], &[2.0, 4.0]], &[1.0, 2.0])),
            Err(Error::Resample)
        ));
        assert!(matches!(
            solve_exact(&batch(&[&[0.0, 0.0], &[0.0, 0.0]], &[0.0, 0.0])),
            Err(Error::Resample)
        ));
        assert!(matches!(
            solve_min_norm(&batch(&[&[1.0, 1.0, 0.0], &[2.0, 2.0, 0.0]], &[1.0, 2.0])),
            Err(Error::Resample)
        ));
        assert!(solve_exact(&batch(&[&[1.0, 0.0, 0.0]], &[1.0])).is_err());
    }

    #[test]
    fn min_norm_small_cases() {
        let x = solve_min_norm(&batch(&[&[1.0, 0.0, 0.0]], &[5.0])).unwrap();
        for (a, b) in x.x.0.iter().zip([5.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let x = solve_min_norm(&batch(&[&[1.0, 1.0]], &[2.0])).unwrap();
        assert!((x.x.0[0] - 1.0).abs() < 1e-12 && (x.x.0[1] - 1.0).abs() < 1e-12);
        assert_eq!(x.method, SolveMethod::MinNorm);
    }

    #[test]
    fn uniform_rank_mapping() {
        assert_eq!(ranks_to_scores_uniform(&[0, 250, 999], 1000).unwrap(), vec![1.0, 0.75, 0.001]);
        assert!(ranks_to_scores_uniform(&[1000], 1000).is_err());
    }

    #[test]
    fn gaussian_rank_mapping() {
        let s = ranks_to_scores_gaussian(&[50], 101, 2.0).unwrap();
        assert!(s[0].abs() < 1e-12);
        let s = ranks_to_scores_gaussian(&[3, 4, 90], 101, 1.0).unwrap();
        assert!(s[0] > s[1] && s[1] > s[2]);
        assert!(ranks_to_scores_gaussian(&[0], 10, 0.0).is_err());
    }

    #[test]
    fn text_dump_is_row_major() {
        let b = batch(&[&[1.0, 2.0], &[3.0, 4.0]], &[5.0, 6.0]);
        let text = b.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "2 2");
        assert_eq!(lines[1], "1e0 2e0 5e0");
        assert_eq!(lines[2], "3e0 4e0 6e0");
    }
}
