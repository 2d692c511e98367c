//! Property tests for the mask algebra, blending, the noise schedule and the
//! Fréchet distance, plus checks against independent closed forms.

use gradmask::diffusion::{q_sample, reverse_step, NoiseSchedule};
use gradmask::evalmetrics::{frechet_distance, FeatureStats};
use gradmask::maskops::{
    blur, dilate, gaussian_kernel, mask_intersect, mask_union, threshold_dynamic, BinaryMask, MaskParams,
    StructuringElement,
};
use gradmask::pipeline::blend;
use gradmask::{rng, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

const FIELD: [usize; 3] = [4, 8, 8];

fn field() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..10.0, 256).prop_map(|v| Tensor::new(FIELD.to_vec(), v).unwrap())
}

fn mask() -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(prop::bool::ANY, 256)
        .prop_map(|v| BinaryMask::new(Tensor::new(FIELD.to_vec(), v.into_iter().map(f64::from).collect()).unwrap()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_quantile_gives_all_ones(f in field(), sigma in 0.3f64..3.0, br in 1usize..3, dr in 1usize..3) {
        let m = MaskParams::new(0.0, sigma, br, dr).unwrap().build(&f).unwrap();
        prop_assert_eq!(m, BinaryMask::ones(&FIELD));
    }

    #[test]
    fn blur_preserves_constants(c in -5.0f64..50.0, sigma in 0.2f64..4.0, r in 1usize..4) {
        let c = c.max(0.0);
        let k = gaussian_kernel(sigma, r).unwrap();
        let out = blur(&Tensor::full(&FIELD, c), &k).unwrap();
        prop_assert!(out.data().iter().all(|&v| v == c));
    }

    #[test]
    fn dilation_is_extensive(f in field(), r in 0usize..4) {
        let out = dilate(&f, &StructuringElement::square(r).unwrap()).unwrap();
        prop_assert!(out.data().iter().zip(f.data()).all(|(d, v)| d >= v));
    }

    #[test]
    fn union_and_intersection_laws(a in mask(), b in mask()) {
        let ones = BinaryMask::ones(&FIELD);
        let zeros = BinaryMask::zeros(&FIELD);
        prop_assert_eq!(mask_union(&[a.clone(), a.clone()]).unwrap(), a.clone());
        prop_assert_eq!(mask_intersect(&[a.clone(), a.clone()]).unwrap(), a.clone());
        prop_assert_eq!(mask_union(&[a.clone(), a.complement()]).unwrap(), ones);
        prop_assert_eq!(mask_intersect(&[a.clone(), a.complement()]).unwrap(), zeros);
        prop_assert_eq!(a.complement().complement(), a.clone());
        let i = mask_intersect(&[a.clone(), b.clone()]).unwrap();
        let u = mask_union(&[a.clone(), b.clone()]).unwrap();
        prop_assert!(i.is_subset_of(&a) && a.is_subset_of(&u));
        // De Morgan.
        prop_assert_eq!(u.complement(), mask_intersect(&[a.complement(), b.complement()]).unwrap());
    }

    #[test]
    fn threshold_invariant_under_increasing_maps(
        ints in prop::collection::vec(0u32..60, 256),
        q in 0.0f64..0.99,
        which in 0usize..4,
    ) {
        let f = Tensor::new(FIELD.to_vec(), ints.iter().map(|&v| v as f64).collect()).unwrap();
        let g = f.map(|x| match which {
            0 => 2.0 * x + 1.0,
            1 => x * x * x,
            2 => (x / 10.0).exp(),
            _ => (x + 1.0).ln(),
        });
        prop_assert_eq!(threshold_dynamic(&f, q).unwrap(), threshold_dynamic(&g, q).unwrap());
    }

    #[test]
    fn blend_boundaries_are_exact(d in field(), r in field()) {
        prop_assert_eq!(blend(&d, &r, &BinaryMask::ones(&FIELD)).unwrap(), d.clone());
        prop_assert_eq!(blend(&d, &r, &BinaryMask::zeros(&FIELD)).unwrap(), r.clone());
    }

    #[test]
    fn blend_selects_per_element(d in field(), r in field(), m in mask()) {
        let out = blend(&d, &r, &m).unwrap();
        for i in 0..256 {
            let want = if m.values().data()[i] == 1.0 { d.data()[i] } else { r.data()[i] };
            prop_assert_eq!(out.data()[i], want);
        }
    }

    #[test]
    fn reverse_step_with_true_noise_recovers_clean_latent(seed in 0u64..1000) {
        let s = NoiseSchedule::default();
        let mut r = rng::stream(seed, "z");
        let z0 = rng::normal_tensor(&mut r, &[4, 8, 8]);
        let eps = rng::normal_tensor(&mut r, &[4, 8, 8]);
        let z1 = q_sample(&s, &z0, 0, &eps).unwrap();
        let back = reverse_step(&s, &z1, &eps, 0, &Tensor::zeros(&[4, 8, 8])).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn frechet_self_and_symmetry(seed in 0u64..500, d in 1usize..6) {
        let (a, b) = (random_stats(seed, d, 2 * d + 3), random_stats(seed + 7919, d, 2 * d + 3));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-8, "{} vs {}", ab, ba);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn frechet_one_dimensional_closed_form(m1 in -5.0f64..5.0, m2 in -5.0f64..5.0, s1 in 0.0f64..3.0, s2 in 0.0f64..3.0) {
        let st = |m: f64, s: f64| FeatureStats { count: 2, mean: vec![m], cov: vec![s * s] };
        let want = (m1 - m2).powi(2) + s1 * s1 + s2 * s2 - 2.0 * s1 * s2;
        let got = frechet_distance(&st(m1, s1), &st(m2, s2)).unwrap();
        prop_assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
    }
}

fn random_stats(seed: u64, d: usize, n: usize) -> FeatureStats {
    let mut r = rng::stream(seed, "features");
    let mix = rng::normal_tensor(&mut r, &[d, d]);
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z = rng::normal_tensor(&mut r, &[d]);
            (0..d).map(|i| (0..d).map(|j| mix.at(&[i, j]) * z.data()[j]).sum::<f64>() + 0.5).collect()
        })
        .collect();
    FeatureStats::from_features(&feats).unwrap()
}

/// Independent route: nalgebra eigendecomposition, with the roles of the two
/// covariances swapped (`√Σ₂ Σ₁ √Σ₂`).
fn nalgebra_frechet(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let d = a.dim();
    let s1 = DMatrix::from_row_slice(d, d, &a.cov);
    let s2 = DMatrix::from_row_slice(d, d, &b.cov);
    let e2 = SymmetricEigen::new(s2.clone());
    let root = &e2.eigenvectors
        * DMatrix::from_diagonal(&e2.eigenvalues.map(|v| v.max(0.0).sqrt()))
        * e2.eigenvectors.transpose();
    let m = &root * &s1 * &root;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    dmu + s1.trace() + s2.trace() - 2.0 * tr_sqrt
}

#[test]
fn frechet_matches_nalgebra_on_random_psd() {
    for seed in 0..40 {
        let d = 2 + seed as usize % 31;
        let (a, b) = (random_stats(seed, d, d + 40), random_stats(seed + 1000, d, d + 40));
        let ours = frechet_distance(&a, &b).unwrap();
        let oracle = nalgebra_frechet(&a, &b);
        assert!((ours - oracle).abs() / oracle.abs().max(1e-12) < 1e-6, "d={d}: {ours} vs {oracle}");
    }
}

#[test]
fn alpha_bar_is_cumulative_product() {
    let s = NoiseSchedule::default();
    let mut prod = 1.0;
    for t in 0..s.steps() {
        prod *= 1.0 - s.beta()[t];
        assert!((s.alpha_bar()[t] - prod).abs() < 1e-12);
        assert_eq!(s.alpha()[t], 1.0 - s.beta()[t]);
    }
}

#[test]
fn q_sample_variance_matches_schedule() {
    let s = NoiseSchedule::default();
    let z0 = Tensor::full(&[4, 8, 8], 0.7);
    let mut r = rng::stream(0, "mc");
    for t in [0, 9, 49, 99] {
        let draws: Vec<f64> = (0..80)
            .flat_map(|_| {
                let eps = rng::normal_tensor(&mut r, &[4, 8, 8]);
                q_sample(&s, &z0, t, &eps).unwrap().into_data()
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want = 1.0 - s.alpha_bar()[t];
        assert!((var - want).abs() / want < 0.05, "t={t}: {var} vs {want}");
        assert!((mean - s.alpha_bar()[t].sqrt() * 0.7).abs() < 4.0 * (want / n).sqrt());
    }
}
