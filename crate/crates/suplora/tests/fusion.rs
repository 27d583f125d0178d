use proptest::prelude::*;
use suplora::adapter::{init_baseline, Variant};
use suplora::fusion::{fuse, fusion_report, FusionProblem};
use suplora::numerics::{norm, Matrix};
use suplora::rng::{gaussian_vec, stream};

fn random(rows: usize, cols: usize, seed: u64, label: &str) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        gaussian_vec(&mut stream(seed, label), rows * cols),
    )
    .unwrap()
}

/// `d`-dimensional inputs, `d_out` 8, `k` adapters, `n_t` targets spread
/// over the groups and `n_g` general embeddings.
fn problem(seed: u64, d: usize, k: usize, n_t: usize, n_g: usize, trained: bool) -> FusionProblem {
    let adapters = (0..k)
        .map(|g| {
            let mut ad =
                init_baseline(Variant::FrozenRandomB, d, 8, 3, seed, &format!("g{g}")).unwrap();
            ad.group_id = g;
            if trained {
                ad.a = random(8, 3, seed, &format!("test/a{g}"));
            }
            ad
        })
        .collect();
    FusionProblem {
        w: random(8, d, seed, "test/w"),
        adapters,
        targets: random(d, n_t, seed, "test/targets"),
        target_groups: (0..n_t).map(|j| j % k).collect(),
        general: random(d, n_g, seed, "test/general"),
        general_weight: 1.0,
        ridge: 1e-6,
    }
}

#[test]
fn zero_adapters_fuse_to_w() {
    let p = problem(1, 16, 3, 12, 20, false);
    let w_star = fuse(&p).unwrap();
    assert!(w_star.sub(&p.w).max_abs() < 1e-8);
    let rep = fusion_report(&p, &w_star).unwrap();
    assert!(rep.general_consistency <= 1e-8);
    assert!(rep.mean_target_alignment() <= 1e-8);
}

#[test]
fn lone_orthogonal_target_is_matched_exactly() {
    let d = 6;
    let axis = |i: usize| Matrix::from_fn(d, 1, |r, _| f64::from(u8::from(r == i)));
    let mut ad = init_baseline(Variant::FrozenRandomB, d, 8, 2, 4, "x").unwrap();
    ad.a = random(8, 2, 4, "test/a");
    let general = Matrix::from_fn(d, d - 1, |r, c| f64::from(u8::from(r == c + 1)));
    let p = FusionProblem {
        w: random(8, d, 4, "test/w"),
        adapters: vec![ad.clone()],
        targets: axis(0),
        target_groups: vec![0],
        general,
        general_weight: 1.0,
        ridge: 1e-12,
    };
    let w_star = fuse(&p).unwrap();
    let e = axis(0).col(0);
    let want = p.w.add(&ad.a.matmul(&ad.b)).matvec(&e);
    let got = w_star.matvec(&e);
    assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-6));
    // The general directions keep W's action.
    for c in 1..d {
        let e = axis(c).col(0);
        let diff: Vec<f64> = w_star
            .matvec(&e)
            .iter()
            .zip(p.w.matvec(&e))
            .map(|(a, b)| a - b)
            .collect();
        assert!(norm(&diff) < 1e-6);
    }
}

#[test]
fn closed_form_beats_every_perturbation() {
    let p = problem(2, 16, 3, 12, 20, true);
    let w_star = fuse(&p).unwrap();
    let best = p.objective(&w_star).unwrap();
    assert!(best <= p.objective(&p.w).unwrap());
    for i in 0..100 {
        let scale = 10f64.powi(-(i % 6) - 1);
        let nudged = w_star.add(&random(8, 16, i as u64, "test/perturb").scale(scale));
        assert!(p.objective(&nudged).unwrap() >= best, "perturbation {i}");
    }
    assert!(p.normal_residual(&w_star).unwrap() < 1e-6);
}

fn squared_residual(w_star: &Matrix, w: &Matrix, cols: &Matrix) -> f64 {
    w_star.sub(w).matmul(cols).frobenius().powi(2)
}

#[test]
fn added_general_embeddings_are_matched_at_least_as_well() {
    // For nested general sets S ⊂ S', optimality of both solutions gives
    // Σ_{S'∖S} ‖(W_{S'} − W)e‖² ≤ Σ_{S'∖S} ‖(W_S − W)e‖².
    for seed in 0..20 {
        let base = problem(seed, 16, 3, 12, 40, true);
        let with = |n: usize| FusionProblem {
            general: base.general.select_cols(&(0..n).collect::<Vec<_>>()),
            ..base.clone()
        };
        let sizes = [10, 20, 40];
        let solved: Vec<Matrix> = sizes.iter().map(|n| fuse(&with(*n)).unwrap()).collect();
        for i in 0..sizes.len() {
            for j in i + 1..sizes.len() {
                let added = base
                    .general
                    .select_cols(&(sizes[i]..sizes[j]).collect::<Vec<_>>());
                let before = squared_residual(&solved[i], &base.w, &added);
                let after = squared_residual(&solved[j], &base.w, &added);
                assert!(
                    after <= before * (1.0 + 1e-9),
                    "seed {seed}, {} -> {}",
                    sizes[i],
                    sizes[j]
                );
            }
        }
    }
}

#[test]
fn rank_deficient_problem_without_ridge_is_singular() {
    let mut p = problem(4, 16, 2, 3, 4, true);
    p.ridge = 0.0;
    let err = fuse(&p).unwrap_err();
    assert!(err.is_numerical());
    assert!(err.to_string().contains("ridge"), "{err}");
}

#[test]
fn invalid_problems_are_rejected() {
    let mut p = problem(5, 16, 2, 4, 4, false);
    p.general = Matrix::zeros(16, 0);
    assert!(fuse(&p).is_err());
    let mut p = problem(5, 16, 2, 4, 4, false);
    p.target_groups[0] = 9;
    assert!(fuse(&p).is_err());
    let mut p = problem(5, 16, 2, 4, 4, false);
    p.target_groups.pop();
    assert!(fuse(&p).is_err());
}

#[test]
fn fusion_ignores_ordering() {
    let p = problem(6, 16, 3, 12, 20, true);
    let w_star = fuse(&p).unwrap();
    let mut q = p.clone();
    q.adapters.reverse();
    let rev_t: Vec<usize> = (0..12).rev().collect();
    q.targets = p.targets.select_cols(&rev_t);
    q.target_groups = rev_t.iter().map(|j| p.target_groups[*j]).collect();
    q.general = p.general.select_cols(&(0..20).rev().collect::<Vec<_>>());
    assert!(fuse(&q).unwrap().sub(&w_star).max_abs() < 1e-10);
}

#[test]
fn fusion_is_continuous_in_its_inputs() {
    let p = problem(7, 16, 3, 12, 20, true);
    let w_star = fuse(&p).unwrap();
    let mut q = p.clone();
    q.targets = p.targets.add(&random(16, 12, 7, "test/delta").scale(1e-6));
    let change = fuse(&q).unwrap().sub(&w_star).frobenius();
    assert!(change < 1e-3, "{change}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normal_equations_hold(seed in any::<u64>(), k in 1usize..4, n_t in 1usize..15, n_g in 1usize..25, log_w in -1.0f64..2.0) {
        let mut p = problem(seed, 10, k, n_t.max(k), n_g, true);
        p.general_weight = 10f64.powf(log_w);
        let w_star = fuse(&p).unwrap();
        prop_assert!(p.normal_residual(&w_star).unwrap() < 1e-6);
        prop_assert!(p.objective(&w_star).unwrap() <= p.objective(&p.w).unwrap() + 1e-12);
    }
}
