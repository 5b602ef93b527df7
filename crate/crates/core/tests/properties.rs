use num_complex::Complex64;
use proptest::prelude::*;

use stnet_core::data::{read_container, split_indices, write_container};
use stnet_core::domain::{angular_delay_full, from_angular_delay, to_angular_delay};
use stnet_core::harness::metrics::{mse, nmse_db};
use stnet_core::harness::{count_flops, profile_flops};
use stnet_core::{DatasetContainer, DatasetMeta, FreqChannel, ModelConfig, Normalization, Scenario, Tensor};

fn channel(subcarriers: usize, antennas: usize, vals: &[(f64, f64)]) -> FreqChannel {
    let data = vals.iter().map(|&(re, im)| Complex64::new(re, im)).collect();
    FreqChannel::new(subcarriers, antennas, data).unwrap()
}

fn dims_and_values() -> impl Strategy<Value = (usize, usize, Vec<(f64, f64)>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(n, t)| {
        (Just(n), Just(t), prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), n * t))
    })
}

fn frob(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transform_round_trip_and_norm((n, t, vals) in dims_and_values()) {
        let h = channel(n, t, &vals);
        let ad = to_angular_delay(&h, n).unwrap();
        let back = from_angular_delay(&ad, n).unwrap();
        let scale = h.frobenius_sq().sqrt().max(1.0);
        for (a, b) in h.data.iter().zip(&back.data) {
            prop_assert!((a - b).norm() <= 1e-12 * scale);
        }
        let full = angular_delay_full(&h);
        prop_assert!((frob(&full) - h.frobenius_sq()).abs() <= 1e-10 * h.frobenius_sq().max(1.0));
    }

    #[test]
    fn truncation_drops_exactly_the_tail_rows((n, t, vals) in dims_and_values(), keep in 1usize..12) {
        let keep = keep.min(n);
        let h = channel(n, t, &vals);
        let full = angular_delay_full(&h);
        let kept = to_angular_delay(&h, keep).unwrap();
        let restored = from_angular_delay(&kept, n).unwrap();
        let loss: f64 = h.data.iter().zip(&restored.data).map(|(a, b)| (a - b).norm_sqr()).sum();
        let out_of_band = frob(&full[keep * t..]);
        prop_assert!((loss - out_of_band).abs() <= 1e-10 * h.frobenius_sq().max(1.0));
    }

    #[test]
    fn container_round_trip_is_bitwise(
        n_c in 1usize..5,
        n_t in 1usize..5,
        count in 0usize..4,
        seed in any::<u64>(),
        min in -2.0f64..0.0,
    ) {
        let per = 2 * n_c * n_t;
        let samples: Vec<f32> = (0..count * per)
            .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0x3f7f_ffff))
            .collect();
        let meta = DatasetMeta {
            normalization: Normalization::new(min, min + 1.5).unwrap(),
            scenario: Scenario::Outdoor,
            source: "prop".into(),
            seed: Some(seed),
            split: Some("val".into()),
        };
        let c = DatasetContainer::new(n_c, n_t, samples, meta).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csib");
        write_container(&c, &path).unwrap();
        let back = read_container(&path).unwrap();
        prop_assert_eq!(&back.meta, &c.meta);
        prop_assert_eq!((back.n_c, back.n_t), (n_c, n_t));
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.samples), bits(&c.samples));
    }

    #[test]
    fn normalization_inverts(min in -100.0f64..100.0, width in 1e-3f64..100.0, x in -200.0f64..200.0) {
        let n = Normalization::new(min, min + width).unwrap();
        let y = n.denormalize(n.normalize(x));
        prop_assert!((y - x).abs() <= 1e-9 * x.abs().max(width).max(min.abs()));
        prop_assert_eq!(n.normalize(min), 0.0);
        prop_assert!((n.normalize(min + width) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn mse_ignores_batch_duplication(
        vals in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40),
        copies in 1usize..4,
    ) {
        let n = vals.len();
        let h: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let g: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let one = mse(&Tensor::new([1, n], h.clone()).unwrap(), &Tensor::new([1, n], g.clone()).unwrap()).unwrap();
        let rep = |v: &[f64]| v.repeat(copies);
        let many = mse(
            &Tensor::new([copies, n], rep(&h)).unwrap(),
            &Tensor::new([copies, n], rep(&g)).unwrap(),
        ).unwrap();
        prop_assert!((one - many).abs() <= 1e-12 * one.max(1e-300));
    }

    #[test]
    fn nmse_of_scaled_estimate(vals in prop::collection::vec(-5.0f64..5.0, 2..50), eps in prop::sample::select(vec![0.5, 0.1, 0.01])) {
        prop_assume!(vals.iter().any(|v| v.abs() > 1e-3));
        let n = vals.len();
        let h = Tensor::new([1, n], vals.clone()).unwrap();
        let h_hat = h.map(|v| v * (1.0 - eps));
        let db = nmse_db(&h, &h_hat).unwrap().db;
        prop_assert!((db - 20.0 * eps.log10()).abs() <= 0.01, "{db} vs {}", 20.0 * eps.log10());
    }

    #[test]
    fn splits_are_disjoint(n in 0usize..200, a in 0usize..80, b in 0usize..80, seed in any::<u64>()) {
        prop_assume!(a + b <= n);
        let parts = split_indices(n, &[a, b, n - a - b], seed).unwrap();
        let mut seen = vec![false; n];
        for (p, want) in parts.iter().zip([a, b, n - a - b]) {
            prop_assert_eq!(p.len(), want);
            for &i in p {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert_eq!(parts, split_indices(n, &[a, b, n - a - b], seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn flops_do_not_depend_on_batch(batch in 1usize..4, gamma in prop::sample::select(vec![4u64, 8, 16])) {
        let config = ModelConfig {
            n_c: 16,
            n_t: 16,
            codeword: 512 / gamma as usize,
            ..ModelConfig::tiny()
        };
        let analytic = count_flops(&config).unwrap();
        let counted = profile_flops(&config, batch).unwrap();
        prop_assert_eq!(counted.total, analytic.total);
        prop_assert_eq!(counted.encoder, analytic.encoder);
        prop_assert_eq!(counted.layers, analytic.layers);
    }
}
