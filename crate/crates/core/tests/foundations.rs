//! Model-free checks: extractor derivatives, linear solves, rank mappings
//! and image operators.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visattack::extractor::{ExtractorConfig, ExtractorWeights, FeatureVector};
use visattack::gradest::{ranks_to_scores_uniform, solve, solve_exact, solve_min_norm, PerturbationBatch};
use visattack::imaging::{apply_signed_step, quantize_clamp, sample_perturbation, ssim, Image, PixelDirection, SsimParams};
use visattack::recommender::visual_gain;

fn random_image(rng: &mut impl Rng) -> Image {
    let px = (0..32 * 32 * 3).map(|_| rng.random_range(0.0..255.0)).collect();
    Image::from_pixels(32, 32, 3, px).unwrap()
}

fn random_batch(rng: &mut impl Rng, rows: usize, dim: usize) -> PerturbationBatch {
    let df = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ds = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    PerturbationBatch::from_deltas(FeatureVector::zeros(dim), 0.0, df, ds).unwrap()
}

fn extractor() -> ExtractorWeights {
    ExtractorWeights::new(&ExtractorConfig::default()).unwrap()
}

#[test]
fn vjp_matches_central_differences() {
    let ex = extractor();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-3;
    for _ in 0..3 {
        let img = random_image(&mut rng);
        let cot: Vec<f64> = (0..ex.feature_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = ex.vjp(&img, &cot).unwrap();
        let obj = |im: &Image| ex.extract(im).unwrap().dot(&cot);
        let mut err = 0.0;
        let mut norm = 0.0;
        for (k, &gk) in g.iter().enumerate().step_by(7) {
            let mut up = img.pixels().to_vec();
            let mut dn = img.pixels().to_vec();
            up[k] += h;
            dn[k] -= h;
            let fd = (obj(&Image::from_pixels(32, 32, 3, up).unwrap()) - obj(&Image::from_pixels(32, 32, 3, dn).unwrap()))
                / (2.0 * h);
            err += (fd - gk).powi(2);
            norm += gk.powi(2);
        }
        assert!(err.sqrt() <= 1e-4 * norm.sqrt(), "relative error {}", err.sqrt() / norm.sqrt());
    }
}

#[test]
fn sampled_lipschitz_ratio_respects_bound() {
    let ex = extractor();
    let bound = ex.lipschitz_bound();
    assert!((bound - ExtractorConfig::default().lipschitz_scale).abs() < 1e-6 * bound);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let a = random_image(&mut rng);
        let b = sample_perturbation(&a, rng.random_range(0.5..20.0), &mut rng).unwrap();
        let df = ex.extract(&a).unwrap().sub(&ex.extract(&b).unwrap()).norm();
        let dp: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(df <= bound * dp * (1.0 + 1e-6));
    }
}

#[test]
fn unit_perturbations_move_features_little() {
    let ex = extractor();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let a = quantize_clamp(&random_image(&mut rng));
        let b = sample_perturbation(&a, 1.0, &mut rng).unwrap();
        assert!(ex.extract(&a).unwrap().sub(&ex.extract(&b).unwrap()).max_abs() <= 1.0);
    }
}

#[test]
fn exact_solve_recovers_a_linear_scorer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let df: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ds: Vec<f64> = df.chunks(8).map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        let x = solve_exact(&PerturbationBatch::from_deltas(FeatureVector::zeros(8), 0.0, df, ds).unwrap()).unwrap();
        let err: f64 = x.x.0.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let wn: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= 1e-8 * wn);
    }
}

/// Projects `v` onto the null space of `a` via the normal equations; an
/// independent route from the estimator's QR solve.
fn null_space_component(a: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let gram = a * a.transpose();
    let y = gram.cholesky().unwrap().solve(&(a * v));
    v - a.transpose() * y
}

#[test]
fn min_norm_residual_and_minimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let batch = random_batch(&mut rng, 16, 64);
        let est = solve_min_norm(&batch).unwrap();
        let a = DMatrix::from_row_slice(16, 64, &batch.delta_f);
        let b = DVector::from_column_slice(&batch.delta_s);
        let x = DVector::from_column_slice(&est.x.0);
        assert!((&a * &x - &b).norm() <= 1e-8 * b.norm());
        for _ in 0..20 {
            let v = DVector::from_fn(64, |_, _| rng.random_range(-1.0..1.0));
            let n = null_space_component(&a, &v);
            assert!((&a * &n).norm() < 1e-9);
            assert!(x.norm() <= (&x + &n).norm());
        }
    }
}

#[test]
fn uniform_mapping_matches_one_based_convention_up_to_shift() {
    // 1-based s = 1 - r/N and 0-based (N - r)/N differ by exactly 1/N
    let n = 1000;
    let ours = ranks_to_scores_uniform(&[0, 9, 499], n).unwrap();
    for (s, r1) in ours.iter().zip([1.0, 10.0, 500.0]) {
        let one_based = 1.0 - r1 / n as f64;
        assert!((s - one_based - 1.0 / n as f64).abs() < 1e-15);
    }
}

#[test]
fn visual_gain_reference_values() {
    assert!((visual_gain(0.79, 0.64).unwrap() - 0.234375).abs() < 1e-12);
    assert!((visual_gain(0.85, 0.83).unwrap() - 0.024096).abs() < 1e-6);
}

#[test]
fn ssim_of_an_image_with_itself_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_image(&mut rng);
    assert_eq!(ssim(&a, &a, &SsimParams::default()).unwrap(), 1.0);
}

#[test]
fn perturbation_mean_offset_is_centered() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = Image::filled(1, 1, 1, 128.0);
    let mean: f64 = (0..10_000)
        .map(|_| sample_perturbation(&img, 1.0, &mut rng).unwrap().pixels()[0] - 128.0)
        .sum::<f64>()
        / 10_000.0;
    assert!(mean.abs() <= 0.05);
}

fn arb_rows(rows: usize, dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-1.0f64..1.0, rows * dim),
        prop::collection::vec(-1.0f64..1.0, rows),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shift_invariance_is_exact((df, ds) in arb_rows(6, 6), base_q in -512i32..512, c in -1000i32..1000) {
        // dyadic responses keep every sum and difference exact
        let base = f64::from(base_q) / 256.0;
        let resp: Vec<f64> = ds.iter().map(|v| (v * 256.0).round() / 256.0 + base).collect();
        let feats: Vec<FeatureVector> = df.chunks(6).map(|r| FeatureVector(r.to_vec())).collect();
        let zero = FeatureVector::zeros(6);
        let plain = PerturbationBatch::new(zero.clone(), base, &feats, &resp).unwrap();
        let shifted: Vec<f64> = resp.iter().map(|s| s + f64::from(c)).collect();
        let moved = PerturbationBatch::new(zero, base + f64::from(c), &feats, &shifted).unwrap();
        prop_assert_eq!(&plain.delta_s, &moved.delta_s);
        match (solve(&plain), solve(&moved)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.x, b.x),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "shift changed solvability"),
        }
    }

    #[test]
    fn positive_scaling_keeps_signs((df, ds) in arb_rows(4, 9), alpha in 0.01f64..100.0, e in -20i32..20) {
        let zero = FeatureVector::zeros(9);
        let a = PerturbationBatch::from_deltas(zero.clone(), 0.0, df.clone(), ds.clone()).unwrap();
        let Ok(xa) = solve(&a) else { return Ok(()) };
        let pow2 = 2f64.powi(e);
        let b = PerturbationBatch::from_deltas(zero.clone(), 0.0, df.clone(), ds.iter().map(|v| v * pow2).collect()).unwrap();
        let xb = solve(&b).unwrap();
        for (p, q) in xa.x.0.iter().zip(&xb.x.0) {
            prop_assert_eq!(p * pow2, *q);
        }
        let c = PerturbationBatch::from_deltas(zero, 0.0, df, ds.iter().map(|v| v * alpha).collect()).unwrap();
        let xc = solve(&c).unwrap();
        for (p, q) in xa.x.0.iter().zip(&xc.x.0) {
            if p.abs() > 1e-9 {
                prop_assert_eq!(p.signum(), q.signum());
            }
        }
    }

    #[test]
    fn ranks_and_scores_agree_on_affine_fixtures(
        df in prop::collection::vec(-1.0f64..1.0, 8 * 8),
        ranks in prop::sample::subsequence((0usize..400).collect::<Vec<_>>(), 9),
        slope in 0.01f64..3.0,
        offset in -5.0f64..5.0,
    ) {
        let n = 400;
        let mut ranks = ranks;
        // shuffle deterministically so rank order is unrelated to row order
        let third = ranks.len() / 3;
        ranks.rotate_left(third);
        let (base_rank, pert) = (ranks[0], &ranks[1..]);
        let score = |r: usize| offset - slope * r as f64;
        let feats: Vec<FeatureVector> = df.chunks(8).map(|r| FeatureVector(r.to_vec())).collect();
        let zero = FeatureVector::zeros(8);
        let true_s: Vec<f64> = pert.iter().map(|&r| score(r)).collect();
        let by_score = PerturbationBatch::new(zero.clone(), score(base_rank), &feats, &true_s).unwrap();
        let mapped = ranks_to_scores_uniform(pert, n).unwrap();
        let base_mapped = ranks_to_scores_uniform(&[base_rank], n).unwrap()[0];
        let by_rank = PerturbationBatch::new(zero, base_mapped, &feats, &mapped).unwrap();
        if let (Ok(a), Ok(b)) = (solve(&by_score), solve(&by_rank)) {
            for (p, q) in a.x.0.iter().zip(&b.x.0) {
                if p.abs() > 1e-9 * a.x.norm() {
                    prop_assert_eq!(p.signum(), q.signum());
                }
            }
        }
    }

    #[test]
    fn signed_steps_stay_in_range(px in prop::collection::vec(0.0f64..255.0, 48), signs in prop::collection::vec(-1i8..=1, 48), eps in 0.1f64..4.0) {
        let img = Image::from_pixels(4, 4, 3, px).unwrap();
        let dir = PixelDirection::from_signs((4, 4, 3), signs).unwrap();
        let out = quantize_clamp(&apply_signed_step(&img, &dir, eps).unwrap());
        let q = quantize_clamp(&img);
        for (a, b) in q.pixels().iter().zip(out.pixels()) {
            prop_assert!((0.0..=255.0).contains(b));
            prop_assert!((a - b).abs() <= eps.ceil());
        }
    }

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng);
        let b = sample_perturbation(&a, 30.0, &mut rng).unwrap();
        let p = SsimParams::default();
        prop_assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn perturbation_leaves_input_alone(seed in any::<u64>(), delta in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng);
        let copy = a.clone();
        let _ = sample_perturbation(&a, delta, &mut rng).unwrap();
        prop_assert_eq!(a, copy);
    }
}
