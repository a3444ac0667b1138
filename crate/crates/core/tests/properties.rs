use proptest::prelude::*;

use uqd_core::codec::{self, Container, Transform};
use uqd_core::entropy::{self, DensityFamily};
use uqd_core::quantizer::{dequantize, forward_quantize, hard_dequantize, hard_quantize};
use uqd_core::{LatentTensor, VarianceSchedule};

fn family() -> impl Strategy<Value = DensityFamily> {
    prop_oneof![Just(DensityFamily::Normal), Just(DensityFamily::Logistic)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coder_round_trips_fitted_models(
        fam in family(),
        channels in 1usize..4,
        per in 1usize..300,
        spread in 0i32..200,
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let symbols: Vec<i32> = (0..channels * per)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) % (2 * spread as u64 + 1)) as i32 - spread
            })
            .collect();
        let model = entropy::fit_model(&symbols, channels, fam).unwrap();
        let payload = entropy::encode(&symbols, &model).unwrap();
        prop_assert_eq!(entropy::decode(&payload, &model).unwrap(), symbols);
    }

    #[test]
    fn dithered_error_within_half_bin(
        values in prop::collection::vec(-50.0f64..50.0, 1..200),
        t in 1usize..=50,
        seed in any::<u64>(),
    ) {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let a = vs.alpha_bar(t).unwrap();
        let half = vs.delta_at(t).unwrap() / 2.0;
        let x = LatentTensor::from_flat(values.clone()).unwrap();
        let soft = dequantize(&forward_quantize(&x, &vs, t, seed).unwrap(), &vs).unwrap();
        let hard = hard_dequantize(&hard_quantize(&x, &vs, t).unwrap(), &vs).unwrap();
        for ((y, s), h) in values.iter().zip(soft.values()).zip(hard.values()) {
            let tol = half * (1.0 + 1e-9) + 1e-12;
            prop_assert!((s - a.sqrt() * y).abs() <= tol);
            prop_assert!((h - a.sqrt() * y).abs() <= tol);
        }
    }

    #[test]
    fn block_dct_preserves_energy_and_inverts(
        c in 1usize..3,
        bh in 1usize..4,
        bw in 1usize..4,
        block in prop_oneof![Just(2usize), Just(4), Just(8)],
        seed in any::<u64>(),
    ) {
        let shape = vec![c, bh * block, bw * block];
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) % 1000) as f64 / 500.0 - 1.0).collect();
        let x = LatentTensor::new(shape.clone(), vals).unwrap();
        let tr = Transform::BlockDct { block };
        let y = tr.analysis(&x).unwrap();
        prop_assert!((y.mean_square() - x.mean_square()).abs() <= 1e-12 * (1.0 + x.mean_square()));
        let back = tr.synthesis(&y, &shape).unwrap();
        prop_assert!(back.mse(&x).unwrap() < 1e-24);
    }

    #[test]
    fn schedule_text_round_trips(raw in prop::collection::vec(1e-6f64..1.0, 1..80)) {
        let mut alphas = raw;
        alphas.sort_by(|a, b| b.total_cmp(a));
        alphas.dedup();
        alphas.insert(0, 1.0);
        let vs = VarianceSchedule::from_alphas(alphas).unwrap();
        let back = VarianceSchedule::from_text(&vs.to_text()).unwrap();
        prop_assert_eq!(back.alphas(), vs.alphas());
        prop_assert_eq!(back.fingerprint(), vs.fingerprint());
    }

    #[test]
    fn corrupted_containers_never_parse_silently(
        n in 0usize..200,
        t in 1usize..=50,
        seed in any::<u64>(),
        cut in any::<prop::sample::Index>(),
        flip in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let vs = VarianceSchedule::cosine(50).unwrap();
        let vals: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37 + seed as f64 * 1e-19).sin()).collect();
        let x = LatentTensor::new(vec![1, n], vals).unwrap();
        let bytes = codec::compress(&x, t, &vs, Transform::Identity, seed).unwrap().to_bytes();
        prop_assert!(Container::from_bytes(&bytes).is_ok());
        prop_assert!(Container::from_bytes(&bytes[..cut.index(bytes.len())]).is_err());
        let mut bad = bytes.clone();
        bad[flip.index(bytes.len())] ^= 1 << bit;
        prop_assert!(Container::from_bytes(&bad).is_err());
    }
}
