use proptest::prelude::*;
use suplora::adapter::{init_baseline, merge_into, Layer, Variant};
use suplora::checks::{gradient_case, gradient_error};
use suplora::config::{RegistryConfig, WorldConfig};
use suplora::denoiser::{
    backward, forward, pretrain, sample, DenoiserParams, OutputGrads, PretrainConfig,
};
use suplora::hierarchy::ConceptRegistry;
use suplora::numerics::Matrix;
use suplora::rng::{gaussian_vec, stream};
use suplora::world::{NoiseSchedule, World};

fn params(seed: u64) -> DenoiserParams {
    DenoiserParams::init(4, 3, 4, NoiseSchedule::linear(1e-4, 0.02, 10), seed)
}

fn text(seed: u64, tokens: usize) -> Matrix {
    Matrix::from_vec(
        3,
        tokens,
        gaussian_vec(&mut stream(seed, "test/text"), 3 * tokens),
    )
    .unwrap()
}

fn z(seed: u64) -> Vec<f64> {
    gaussian_vec(&mut stream(seed, "test/z"), 4)
}

fn adapter(seed: u64, layer: Layer) -> suplora::adapter::SuploraAdapter {
    let mut ad = init_baseline(Variant::FrozenRandomB, 3, 4, 2, seed, "test").unwrap();
    ad.layer = layer;
    ad
}

#[test]
fn zero_adapter_leaves_outputs_unchanged() {
    let p = params(1);
    let ad = adapter(1, Layer::Key);
    let plain = forward(&p, &[], &z(1), 5, &text(1, 2), false).unwrap();
    let with = forward(&p, &[&ad], &z(1), 5, &text(1, 2), false).unwrap();
    assert_eq!(plain.eps_pred, with.eps_pred);
    assert_eq!(plain.x0_pred, with.x0_pred);
    assert_eq!(plain.attn, with.attn);
}

#[test]
fn single_token_gets_all_attention() {
    let p = params(2);
    let tr = forward(&p, &[], &z(2), 3, &text(2, 1), false).unwrap();
    assert_eq!(tr.attn.cols(), 1);
    assert!(tr.attn.as_slice().iter().all(|a| *a == 1.0));
}

#[test]
fn adapter_forward_equals_merged_weights() {
    let p = params(3);
    let mut k = adapter(3, Layer::Key);
    k.a = Matrix::from_fn(4, 2, |i, j| 0.3 * (i as f64) - 0.2 * j as f64);
    let mut v = adapter(4, Layer::Value);
    v.a = Matrix::from_fn(4, 2, |i, j| 0.1 * (i + j) as f64);
    let mut merged = p.clone();
    merged.w_k = merge_into(&p.w_k, &k).unwrap();
    merged.w_v = merge_into(&p.w_v, &v).unwrap();
    let a = forward(&p, &[&k, &v], &z(3), 7, &text(3, 3), false).unwrap();
    let b = forward(&merged, &[], &z(3), 7, &text(3, 3), false).unwrap();
    for (x, y) in a.eps_pred.iter().zip(&b.eps_pred) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(a.attn.sub(&b.attn).max_abs() < 1e-12);
}

#[test]
fn shape_errors_name_the_operand() {
    let p = params(4);
    let err = forward(&p, &[], &[0.0; 3], 1, &text(4, 2), false).unwrap_err();
    assert!(err.to_string().contains("z_t"), "{err}");
    let err = forward(&p, &[], &z(4), 1, &Matrix::zeros(5, 2), false).unwrap_err();
    assert!(err.to_string().contains("text"), "{err}");
    let err = forward(&p, &[], &z(4), 11, &text(4, 2), false).unwrap_err();
    assert!(err.to_string().contains("timestep"), "{err}");
    let wrong = init_baseline(Variant::FrozenRandomB, 5, 4, 2, 1, "x").unwrap();
    let err = forward(&p, &[&wrong], &z(4), 1, &text(4, 2), false).unwrap_err();
    assert!(err.to_string().contains("adapter"), "{err}");
}

#[test]
fn backward_needs_a_cache() {
    let p = params(5);
    let tr = forward(&p, &[], &z(5), 2, &text(5, 2), false).unwrap();
    assert!(!tr.has_cache());
    assert!(backward(&p, &[], &tr, &OutputGrads::default()).is_err());
}

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..5 {
        let case = gradient_case(seed).unwrap();
        let err = gradient_error(&case, 1e-4).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn attention_only_loss_gives_values_no_gradient() {
    let p = params(6);
    let t = text(6, 3);
    let tr = forward(&p, &[], &z(6), 4, &t, true).unwrap();
    let g = OutputGrads {
        attn: Some(Matrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64 - 2.0)),
        ..Default::default()
    };
    let grads = backward(&p, &[], &tr, &g).unwrap();
    // Order: lift, pos, time_embed, w_q, w_k, w_v, w_out.
    assert!(grads.params[5].as_slice().iter().all(|x| *x == 0.0));
    assert!(grads.params[6].as_slice().iter().all(|x| *x == 0.0));
    assert!(grads.params[4].max_abs() > 0.0);
}

#[test]
fn adapter_gradient_is_the_weight_gradient_times_b_transpose() {
    // k_n = (W_k + A·B)·e_n, so ∂L/∂A = Σ_n (∂L/∂k_n)(B·e_n)ᵀ = (∂L/∂W_k)·Bᵀ.
    let p = params(7);
    let mut ad = adapter(7, Layer::Key);
    ad.a = Matrix::from_fn(4, 2, |i, j| 0.2 * i as f64 + 0.1 * j as f64);
    let t = text(7, 3);
    let tr = forward(&p, &[&ad], &z(7), 6, &t, true).unwrap();
    let mut rng = stream(7, "test/upstream");
    let g = OutputGrads {
        eps_pred: Some(gaussian_vec(&mut rng, 4)),
        x0_pred: Some(gaussian_vec(&mut rng, 4)),
        attn: Some(Matrix::from_vec(4, 3, gaussian_vec(&mut rng, 12)).unwrap()),
    };
    let grads = backward(&p, &[&ad], &tr, &g).unwrap();
    let oracle = grads.params[4].matmul(&ad.b.transpose());
    assert!(grads.adapters[0].a.sub(&oracle).max_abs() < 1e-12);
    assert!(grads.adapters[0].b.is_none());
}

#[test]
fn vanilla_adapter_also_gets_a_b_gradient() {
    let p = params(8);
    let mut ad = init_baseline(Variant::VanillaLora, 3, 4, 2, 8, "x").unwrap();
    ad.a = Matrix::from_fn(4, 2, |i, j| 0.1 * (i * j) as f64 + 0.05);
    let tr = forward(&p, &[&ad], &z(8), 6, &text(8, 2), true).unwrap();
    let g = OutputGrads {
        x0_pred: Some(vec![1.0; 4]),
        ..Default::default()
    };
    let grads = backward(&p, &[&ad], &tr, &g).unwrap();
    let gb = grads.adapters[0].b.as_ref().unwrap();
    // ∂L/∂B = Aᵀ·(∂L/∂W_k)
    assert!(gb.sub(&ad.a.transpose().matmul(&grads.params[4])).max_abs() < 1e-12);
}

fn small_world() -> World {
    let reg = ConceptRegistry::from_config(&RegistryConfig::default()).unwrap();
    World::build(&WorldConfig::default(), &reg).unwrap()
}

#[test]
fn zero_steps_leave_params_unchanged() {
    let world = small_world();
    let mut p = DenoiserParams::for_world(&world, 8, 1);
    let before = p.clone();
    let cfg = PretrainConfig {
        steps: 0,
        lr: 1e-3,
        batch: 4,
        seed: 1,
    };
    let rep = pretrain(&mut p, &world, &cfg).unwrap();
    assert!(rep.losses.is_empty());
    assert_eq!(p, before);
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let world = small_world();
    let mut p = DenoiserParams::for_world(&world, 8, 1);
    let cfg = PretrainConfig {
        steps: 50,
        lr: 1e6,
        batch: 2,
        seed: 1,
    };
    let err = pretrain(&mut p, &world, &cfg).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

#[test]
fn sampling_is_deterministic_and_clamped() {
    let p = params(9);
    let t = text(9, 2);
    let a = sample(&p, &[], &t, 5).unwrap();
    assert_eq!(a, sample(&p, &[], &t, 5).unwrap());
    assert_ne!(a, sample(&p, &[], &t, 6).unwrap());
    assert!(a.iter().all(|x| (0.0..=1.0).contains(x)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), tokens in 1usize..5, t in 1usize..=10) {
        let p = params(seed);
        let tr = forward(&p, &[], &z(seed), t, &text(seed, tokens), false).unwrap();
        for i in 0..tr.attn.rows() {
            let row = tr.attn.row(i);
            prop_assert!(row.iter().all(|a| *a >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
