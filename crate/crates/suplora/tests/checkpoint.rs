use proptest::prelude::*;
use suplora::adapter::{init_adapter, init_baseline, Variant};
use suplora::checkpoint::{
    adapter_checkpoint, adapter_from_checkpoint, denoiser_checkpoint, denoiser_from_checkpoint,
    Checkpoint, DType, ALIGN, MAGIC,
};
use suplora::denoiser::DenoiserParams;
use suplora::numerics::Matrix;
use suplora::rng::{gaussian_vec, stream};
use suplora::world::NoiseSchedule;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        gaussian_vec(&mut stream(seed, "test/ck"), rows * cols),
    )
    .unwrap()
}

fn sample() -> Checkpoint {
    let mut ck = Checkpoint::new("test", "abc", 7);
    ck.meta.insert("note".into(), "x".into());
    ck.push("a", DType::F64, &random(3, 5, 1));
    ck.push("b", DType::F32, &random(1, 9, 2));
    ck
}

#[test]
fn layout_starts_with_magic_and_aligns_tensors() {
    let bytes = sample().to_bytes();
    assert_eq!(&bytes[..5], MAGIC);
    assert_eq!(bytes.len() % ALIGN, 0);
    let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[13..13 + len]).unwrap();
    for t in manifest["tensors"].as_array().unwrap() {
        assert_eq!(t["offset"].as_u64().unwrap() as usize % ALIGN, 0);
    }
}

#[test]
fn f32_tensors_are_rounded_on_push() {
    let ck = sample();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back, ck);
    assert!(back
        .tensor("b")
        .unwrap()
        .as_slice()
        .iter()
        .all(|x| *x == *x as f32 as f64));
}

#[test]
fn corrupt_magic_is_rejected() {
    let mut bytes = sample().to_bytes();
    bytes[0] = b'X';
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("not a SUPL1 checkpoint"), "{err}");
}

#[test]
fn truncated_files_are_rejected() {
    let bytes = sample().to_bytes();
    for cut in [3, 12, 40, bytes.len() - ALIGN] {
        assert!(
            Checkpoint::from_bytes(&bytes[..cut]).is_err(),
            "cut at {cut}"
        );
    }
}

#[test]
fn unknown_manifest_keys_are_rejected() {
    let bytes = sample().to_bytes();
    let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[13..13 + len]).unwrap();
    manifest["extra"] = 1.into();
    let json = serde_json::to_vec(&manifest).unwrap();
    let mut forged = MAGIC.to_vec();
    forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
    forged.extend_from_slice(&json);
    let err = Checkpoint::from_bytes(&forged).unwrap_err();
    assert!(err.to_string().contains("unknown field"), "{err}");
}

#[test]
fn missing_tensor_is_an_error() {
    assert!(sample().tensor("nope").is_err());
}

#[test]
fn read_reports_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.supl");
    std::fs::write(&path, b"garbage").unwrap();
    let err = Checkpoint::read(&path).unwrap_err();
    assert!(err.to_string().contains("bad.supl"), "{err}");
}

#[test]
fn denoiser_round_trip_is_exact_after_f32_rounding() {
    let params = DenoiserParams::init(8, 6, 4, NoiseSchedule::linear(1e-4, 0.02, 10), 3);
    let ck = denoiser_checkpoint(&params, "h", 3);
    let back = denoiser_from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    let again = denoiser_checkpoint(&back, "h", 3);
    assert_eq!(again.to_bytes(), ck.to_bytes());
    assert_eq!(back.schedule, params.schedule);
    for (a, b) in back.tensors().iter().zip(params.tensors()) {
        assert!(a.sub(b).max_abs() < 1e-6);
    }
}

#[test]
fn adapter_round_trip_is_exact() {
    let ad = init_adapter(&random(32, 16, 4), &random(32, 24, 5), 5, 3, 16).unwrap();
    let back = adapter_from_checkpoint(
        &Checkpoint::from_bytes(&adapter_checkpoint(&ad, "h", 0).to_bytes()).unwrap(),
    )
    .unwrap();
    assert_eq!(back, ad);
    let plain = init_baseline(Variant::VanillaLora, 32, 16, 3, 1, "x").unwrap();
    let back = adapter_from_checkpoint(&adapter_checkpoint(&plain, "h", 0)).unwrap();
    assert_eq!(back, plain);
}

#[test]
fn kind_mismatch_is_rejected() {
    let params = DenoiserParams::init(8, 6, 4, NoiseSchedule::linear(1e-4, 0.02, 10), 3);
    assert!(adapter_from_checkpoint(&denoiser_checkpoint(&params, "h", 0)).is_err());
    let ad = init_baseline(Variant::VanillaLora, 8, 4, 2, 1, "x").unwrap();
    assert!(denoiser_from_checkpoint(&adapter_checkpoint(&ad, "h", 0)).is_err());
}

fn tensors() -> impl Strategy<Value = Vec<(usize, usize, bool, u64)>> {
    prop::collection::vec((0usize..6, 0usize..6, any::<bool>(), any::<u64>()), 0..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_read_write_is_byte_identical(specs in tensors(), seed in any::<u64>(), kind in "[a-z]{0,12}") {
        let mut ck = Checkpoint::new(&kind, "hash", seed);
        for (i, (r, c, f32, s)) in specs.into_iter().enumerate() {
            let dtype = if f32 { DType::F32 } else { DType::F64 };
            ck.push(&format!("t{i}"), dtype, &random(r, c, s));
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
