use proptest::prelude::*;
use taq::alloc::{BitPlan, LayerBits};
use taq::io::{
    cost_model, decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint,
};
use taq::linalg::SeededRng;
use taq::model::{gen_task, init_model, ModelConfig, TaskKind, ToyModel, Weight, WeightKind};
use taq::TaqError;

fn small_cfg(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 5,
        d_model: 16,
        n_heads: 2,
        vocab: 16,
        max_seq: 20,
        d_ff: 24,
        seed,
    }
}

fn perturbed(seed: u64) -> ToyModel {
    let mut m: ToyModel = init_model(&small_cfg(seed)).unwrap();
    let mut rng = SeededRng::new(seed ^ 77);
    for p in m.param_slices_mut().unwrap() {
        for x in p.iter_mut() {
            *x += 0.1 * rng.normal();
        }
    }
    m
}

fn mixed_plan(m: &ToyModel) -> BitPlan {
    let bits = [32, 16, 4, 8, 32]
        .map(|b| LayerBits::from_byte(b).unwrap())
        .to_vec();
    BitPlan::new(bits, vec![0, 4], Some(1 << 40), &cost_model(&m.cfg)).unwrap()
}

#[test]
fn dense_round_trip_is_bit_exact() {
    let m = perturbed(3);
    let bytes = encode_checkpoint(&m, None).unwrap();
    assert_eq!(&bytes[..4], b"TAQM");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    let ck = decode_checkpoint::<f64>(&bytes).unwrap();
    assert_eq!(ck.model, m);
    assert!(ck.plan.is_none());
    assert_eq!(encode_checkpoint(&ck.model, None).unwrap(), bytes);
}

#[test]
fn quantized_round_trip_keeps_codes_params_and_plan() {
    let m = perturbed(4);
    let plan = mixed_plan(&m);
    let q = m.quantized(plan.bits(), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.taqm");
    write_checkpoint(&path, &q, Some(&plan)).unwrap();
    let ck = read_checkpoint::<f64>(&path).unwrap();
    assert_eq!(ck.plan.as_ref(), Some(&plan));
    for l in 0..5 {
        for k in WeightKind::ALL {
            match (q.weight(l, k), ck.model.weight(l, k)) {
                (Weight::Dense(a), Weight::Dense(b)) => assert_eq!(a, b),
                (Weight::Quantized(a), Weight::Quantized(b)) => {
                    assert_eq!(a.codes(), b.codes());
                    assert_eq!(a.params(), b.params());
                    assert_eq!(a.group_size(), 7);
                    assert_eq!(a.cached(), b.cached());
                }
                _ => panic!("layer {l} {} changed storage mode", k.name()),
            }
        }
    }
    let tokens = [1, 4, 9, 2];
    assert_eq!(
        q.forward(&tokens, None).unwrap(),
        ck.model.forward(&tokens, None).unwrap()
    );
}

#[test]
fn quantized_payload_size_matches_packing() {
    let m = perturbed(5);
    let dense = encode_checkpoint(&m, None).unwrap().len();
    let bits = vec![LayerBits::Quantized(4); 5];
    let plan = BitPlan::new(bits.clone(), vec![], None, &cost_model(&m.cfg)).unwrap();
    let q = encode_checkpoint(&m.quantized(&bits, 128).unwrap(), Some(&plan))
        .unwrap()
        .len();
    // Per layer: 4·16² + 2·16·24 = 1792 weights, 14 groups of 128.
    // Dense: 1792·8 bytes; quantized: group size u32 per tensor, 17 bytes of params per group, 896 code bytes.
    let groups_per_layer: usize = [256, 256, 256, 256, 384, 384]
        .iter()
        .map(|n: &usize| n.div_ceil(128))
        .sum();
    let per_layer_dense = 1792 * 8;
    let per_layer_q = 6 * 4 + groups_per_layer * 17 + 1792 / 2;
    // The plan header adds 5 bits bytes and a budget flag after the shared presence flag.
    assert_eq!(dense - q, 5 * (per_layer_dense - per_layer_q) - (5 + 1));
}

#[test]
fn f32_models_store_their_values() {
    let m = perturbed(6).cast::<f32>();
    let ck = decode_checkpoint::<f32>(&encode_checkpoint(&m, None).unwrap()).unwrap();
    assert_eq!(ck.model, m);
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let m = perturbed(7);
    let good = encode_checkpoint(
        &m.quantized(&[LayerBits::Quantized(8); 5], 128).unwrap(),
        None,
    )
    .unwrap();
    let fmt = |b: &[u8]| matches!(decode_checkpoint::<f64>(b), Err(TaqError::Format(_)));

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(fmt(&bad_magic));

    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(fmt(&bad_version));

    for cut in [3, 10, 40, good.len() / 2, good.len() - 1] {
        assert!(fmt(&good[..cut]), "truncated at {cut}");
    }

    let mut trailing = good.clone();
    trailing.push(0);
    assert!(fmt(&trailing));

    // The config block starts at byte 6; n_heads = 3 does not divide d_model = 16.
    let mut bad_cfg = good.clone();
    bad_cfg[14..18].copy_from_slice(&3u32.to_le_bytes());
    assert!(fmt(&bad_cfg));
}

#[test]
fn plan_must_agree_with_tensors() {
    let m = perturbed(8);
    let plan = mixed_plan(&m);
    let wrong = m
        .quantized(
            &[
                LayerBits::Full,
                LayerBits::Quantized(16),
                LayerBits::Quantized(8),
                LayerBits::Quantized(8),
                LayerBits::Full,
            ],
            128,
        )
        .unwrap();
    let bytes = encode_checkpoint(&wrong, Some(&plan)).unwrap();
    assert!(matches!(
        decode_checkpoint::<f64>(&bytes),
        Err(TaqError::Format(_))
    ));
}

#[test]
fn missing_file_is_an_io_error() {
    let err =
        read_checkpoint::<f64>(std::path::Path::new("/definitely/not/here.taqm")).unwrap_err();
    assert!(matches!(err, TaqError::Io(_)));
    assert_eq!(err.exit_code(), 1);
    let err = taq::io::read_items(std::path::Path::new("/definitely/not/here.jsonl")).unwrap_err();
    assert!(matches!(err, TaqError::Io(_)));
}

#[test]
fn calibration_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let items = gen_task(TaskKind::ModAdd, 9, 16, 1);
    taq::io::write_items(&path, &items).unwrap();
    assert_eq!(taq::io::read_items(&path).unwrap(), items);
    std::fs::write(&path, "").unwrap();
    assert!(matches!(
        taq::io::read_items(&path),
        Err(TaqError::InsufficientData(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_plan_round_trips(levels in proptest::collection::vec(0usize..4, 5), group in 1usize..300, seed in 0u64..1000) {
        let m = perturbed(seed);
        let bits: Vec<LayerBits> = levels.iter().map(|&i| [LayerBits::Full, LayerBits::Quantized(4), LayerBits::Quantized(8), LayerBits::Quantized(16)][i]).collect();
        let pinned = bits.iter().enumerate().filter(|(_, b)| **b == LayerBits::Full).map(|(i, _)| i).collect();
        let plan = BitPlan::new(bits.clone(), pinned, None, &cost_model(&m.cfg)).unwrap();
        let q = m.quantized(&bits, group).unwrap();
        let bytes = encode_checkpoint(&q, Some(&plan)).unwrap();
        let ck = decode_checkpoint::<f64>(&bytes).unwrap();
        prop_assert_eq!(ck.plan.as_ref(), Some(&plan));
        prop_assert_eq!(encode_checkpoint(&ck.model, ck.plan.as_ref()).unwrap(), bytes);
        prop_assert_eq!(ck.model, q);
    }
}
