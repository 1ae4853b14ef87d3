use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use token_agg::aggregation::FeatureMap;
use token_agg::io::{
    decode_tkck, decode_tkfm, decode_tkgd, decode_tkpc, decode_tkpq, encode_tkck, encode_tkfm, encode_tkgd,
    encode_tkpc, encode_tkpq, read_tkfm, write_tkfm, CodeFile, DescriptorFile,
};
use token_agg::quantization::{pq_train, KMeansOptions};
use token_agg::{FormatError, ModelConfig, ModelParams};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tkfm_round_trips(c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1e3f32..1e3) as f64).collect();
        let f = FeatureMap::new(c, h, w, values).unwrap();
        let bytes = encode_tkfm(&f);
        prop_assert_eq!(bytes.len(), 20 + 4 * c * h * w);
        prop_assert_eq!(decode_tkfm(&bytes).unwrap(), f);
        let cut = bytes.len() - 1;
        let truncated = matches!(decode_tkfm(&bytes[..cut]), Err(FormatError::Truncated { .. }));
        prop_assert!(truncated);
    }

    #[test]
    fn tkgd_round_trips(n in 0usize..6, d in 1usize..8, data in proptest::collection::vec(any::<f32>(), 48)) {
        let ids: Vec<String> = (0..n).map(|i| format!("img-{i}-é")).collect();
        let file = DescriptorFile { ids, dim: d, data: data[..n * d].to_vec() };
        let back = decode_tkgd(&encode_tkgd(&file).unwrap()).unwrap();
        // compare bit patterns so NaN payloads count as equal
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(&back.ids, &file.ids);
        prop_assert_eq!(bits(&back.data), bits(&file.data));
    }

    #[test]
    fn tkpc_round_trips(count in 0usize..10, m in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = CodeFile { count, subquantizers: m, codes: (0..count * m).map(|_| rng.gen()).collect() };
        prop_assert_eq!(decode_tkpc(&encode_tkpc(&codes).unwrap()).unwrap(), codes);
    }
}

#[test]
fn checkpoints_round_trip_for_every_architecture() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = ModelConfig {
        dim: 6,
        ..ModelConfig::desk(6, 3)
    };
    let configs = [
        base.clone(),
        ModelConfig {
            lfsa: false,
            blocks: 0,
            ..base.clone()
        },
        ModelConfig {
            tokenizer: token_agg::aggregation::TokenizerMode::Learned,
            ..base.clone()
        },
        ModelConfig {
            head_bias: false,
            tokens: 1,
            ..base.clone()
        },
        ModelConfig {
            aggregator: token_agg::model::Aggregator::MeanPool,
            blocks: 0,
            ..base
        },
    ];
    for cfg in configs {
        let m = ModelParams::init(&cfg, &mut rng).unwrap();
        let bytes = encode_tkck(&m).unwrap();
        let back = decode_tkck(&bytes).unwrap();
        assert_eq!(back.named_tensors(), m.named_tensors());
        assert_eq!(encode_tkck(&back).unwrap(), bytes);
    }
}

#[test]
fn codebook_round_trip_is_bitwise() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<f32> = (0..400 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cb = pq_train(&data, 16, 8, &KMeansOptions { iters: 4, seed: 1 }).unwrap();
    let bytes = encode_tkpq(&cb).unwrap();
    assert_eq!(bytes.len(), 20 + 2 * 256 * 8 * 4);
    assert_eq!(encode_tkpq(&decode_tkpq(&bytes).unwrap()).unwrap(), bytes);
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.tkfm");
    let f = FeatureMap::new(2, 1, 3, vec![0.5, -1.0, 2.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap();
    write_tkfm(&p, &f).unwrap();
    assert_eq!(read_tkfm(&p).unwrap(), f);
}
