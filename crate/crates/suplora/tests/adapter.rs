use proptest::prelude::*;
use suplora::adapter::{
    check_projection_identity, delta, init_adapter, init_baseline, merge_into, Layer, Variant,
};
use suplora::numerics::{norm, principal_subspace, svd, Matrix};
use suplora::rng::{gaussian_vec, stream};

fn random(rows: usize, cols: usize, seed: u64, label: &str) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        gaussian_vec(&mut stream(seed, label), rows * cols),
    )
    .unwrap()
}

fn seeded(seed: u64, r: usize) -> suplora::adapter::SuploraAdapter {
    let h_s = random(32, 16, seed, "test/h_s");
    let h_g = random(32, 24, seed, "test/h_g");
    init_adapter(&h_s, &h_g, 5, r, 16).unwrap()
}

#[test]
fn erased_samples_inside_the_supertype_span_are_rejected() {
    let h_s = random(32, 16, 1, "test/h_s");
    let s = principal_subspace(&h_s, 5).unwrap();
    // Every column of h_g is a combination of the supertype basis.
    let h_g = s
        .vectors
        .transpose()
        .matmul(&random(5, 10, 2, "test/coeffs"));
    let err = init_adapter(&h_s, &h_g, 5, 3, 16).unwrap_err();
    assert!(err.to_string().contains("r <= 0"), "{err}");
}

#[test]
fn rank_beyond_the_residual_suggests_a_smaller_rank() {
    let h_s = random(32, 16, 1, "test/h_s");
    let h_g = random(32, 2, 2, "test/h_g");
    let err = init_adapter(&h_s, &h_g, 5, 4, 16).unwrap_err();
    assert!(err.to_string().contains("r <= 2"), "{err}");
}

#[test]
fn fresh_adapter_has_zero_delta() {
    let ad = seeded(3, 5);
    assert_eq!(delta(&ad).max_abs(), 0.0);
    assert_eq!(ad.a.shape(), (16, 5));
    assert_eq!(ad.b.shape(), (5, 32));
}

#[test]
fn b_rows_are_orthonormal_and_orthogonal_to_the_supertype() {
    let ad = seeded(4, 5);
    assert!(ad.b_subspace_leak().unwrap() < 1e-10);
    assert!(ad.b_orthonormality_error() < 1e-10);
    let meta = ad.subspace.as_ref().unwrap();
    assert_eq!(meta.r_s, 5);
    for i in 0..5 {
        for k in 0..5 {
            let ip: f64 =
                ad.b.row(i)
                    .iter()
                    .zip(meta.basis.row(k))
                    .map(|(a, b)| a * b)
                    .sum();
            assert!(ip.abs() < 1e-10);
        }
    }
}

#[test]
fn delta_rank_is_at_most_r() {
    let mut ad = seeded(5, 3);
    ad.a = random(16, 3, 5, "test/a");
    let s = svd(&delta(&ad)).unwrap();
    let live = s.sigma.iter().filter(|x| **x > 1e-10 * s.sigma[0]).count();
    assert!(live <= 3);
}

#[test]
fn merging_zero_adapter_keeps_w() {
    let w = random(16, 32, 6, "test/w");
    let ad = seeded(6, 5);
    assert_eq!(merge_into(&w, &ad).unwrap(), w);
    assert!(merge_into(&random(4, 4, 1, "test/w"), &ad).is_err());
}

#[test]
fn merged_weight_matches_adapter_forward() {
    let w = random(16, 32, 7, "test/w");
    let mut ad = seeded(7, 5);
    ad.a = random(16, 5, 7, "test/a");
    let h = gaussian_vec(&mut stream(7, "test/h"), 32);
    let merged = merge_into(&w, &ad).unwrap().matvec(&h);
    let split: Vec<f64> = w
        .matvec(&h)
        .iter()
        .zip(ad.a.matvec(&ad.b.matvec(&h)))
        .map(|(x, y)| x + y)
        .collect();
    assert!(merged
        .iter()
        .zip(&split)
        .all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn identity_holds_for_a_hand_sized_case() {
    let w = Matrix::zeros(2, 3);
    let mut ad = init_baseline(Variant::FrozenRandomB, 3, 2, 1, 1, "test").unwrap();
    ad.b = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
    let rep = check_projection_identity(&w, &ad, &[2.0, 5.0, -1.0], &[1.0, -1.0], 0.5).unwrap();
    // −α·g·hᵀ·BᵀB keeps only the first input coordinate: −0.5·g·2.
    let want = Matrix::from_rows(&[vec![-1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(rep.lhs, want);
    assert_eq!(rep.rhs, want);
    assert_eq!(rep.rel_err, 0.0);
}

#[test]
fn identity_in_span_of_supertype_is_zero_on_both_sides() {
    let w = random(16, 32, 8, "test/w");
    let ad = seeded(8, 5);
    let basis = ad.subspace.as_ref().unwrap().basis.clone();
    let h = basis.tr_matvec(&gaussian_vec(&mut stream(8, "test/coeffs"), 5));
    let g = gaussian_vec(&mut stream(8, "test/g"), 16);
    let rep = check_projection_identity(&w, &ad, &h, &g, 0.1).unwrap();
    assert!(rep.lhs.max_abs() < 1e-12);
    assert!(rep.rhs.max_abs() < 1e-12);
}

#[test]
fn identity_holds_on_twenty_seeded_instances() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let w = random(16, 32, seed, "test/w");
        let mut ad = seeded(seed, 5);
        ad.a = random(16, 5, seed, "test/a");
        let h = gaussian_vec(&mut stream(seed, "test/h"), 32);
        let g = gaussian_vec(&mut stream(seed, "test/g"), 16);
        worst = worst.max(
            check_projection_identity(&w, &ad, &h, &g, 0.01)
                .unwrap()
                .rel_err,
        );
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn identity_rejects_mismatched_shapes() {
    let ad = seeded(9, 5);
    assert!(
        check_projection_identity(&Matrix::zeros(16, 32), &ad, &[0.0; 31], &[0.0; 16], 0.1)
            .is_err()
    );
}

#[test]
fn baselines_have_expected_b() {
    let frozen = init_baseline(Variant::FrozenRandomB, 32, 16, 5, 1, "x").unwrap();
    assert!(frozen.b_orthonormality_error() < 1e-12);
    assert!(frozen.b_subspace_leak().is_none());
    let vanilla = init_baseline(Variant::VanillaLora, 32, 16, 5, 1, "x").unwrap();
    assert!(vanilla.variant.trains_b());
    assert_eq!(
        vanilla,
        init_baseline(Variant::VanillaLora, 32, 16, 5, 1, "x").unwrap()
    );
    assert!(init_baseline(Variant::Suplora, 32, 16, 5, 1, "x").is_err());
}

#[test]
fn value_copy_keeps_b_and_changes_layer() {
    let key = seeded(10, 5);
    let value = key.for_layer(Layer::Value);
    assert_eq!(value.layer, Layer::Value);
    assert_eq!(value.b, key.b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_holds_for_random_instances(seed in any::<u64>(), r in 1usize..6, log_alpha in -6.0f64..0.0) {
        let w = random(16, 32, seed, "test/w");
        let mut ad = seeded(seed, r);
        ad.a = random(16, r, seed, "test/a");
        let h = gaussian_vec(&mut stream(seed, "test/h"), 32);
        let g = gaussian_vec(&mut stream(seed, "test/g"), 16);
        let rep = check_projection_identity(&w, &ad, &h, &g, 10f64.powf(log_alpha)).unwrap();
        prop_assert!(rep.rel_err < 1e-10);
    }

    #[test]
    fn supertype_preservation_bound_holds(seed in any::<u64>(), r in 1usize..6, mix in 0.0f64..1.0) {
        let mut ad = seeded(seed, r);
        ad.a = random(16, r, seed, "test/a");
        let basis = ad.subspace.as_ref().unwrap().basis.clone();
        let inside = basis.tr_matvec(&gaussian_vec(&mut stream(seed, "test/in"), 5));
        let outside = gaussian_vec(&mut stream(seed, "test/out"), 32);
        let h: Vec<f64> = inside.iter().zip(&outside).map(|(a, b)| a + mix * b).collect();
        let (lhs, rhs) = ad.preservation_bound(&h).unwrap();
        prop_assert!(lhs <= rhs + 1e-9);
        let (zero, _) = ad.preservation_bound(&inside).unwrap();
        prop_assert!(zero <= 1e-10 * norm(&inside).max(1.0));
    }
}
