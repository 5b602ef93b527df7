use stnet_core::data::synth_channels;
use stnet_core::harness::{se_curve, train, SeConfig};
use stnet_core::{build_model, ModelConfig, SynthConfig, TrainConfig};

/// Over many user draws, ZF driven by perfect CSI beats ZF driven by a
/// trained model's reconstructions on average at every SNR.
#[test]
fn perfect_csi_wins_on_average() {
    let data = synth_channels(&SynthConfig {
        samples: 48,
        subcarriers: 32,
        n_c: 8,
        n_t: 8,
        max_delay: 6,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap()
    .container;
    let mut params = build_model(ModelConfig::tiny()).unwrap();
    let config = TrainConfig {
        batch_size: 8,
        max_steps: Some(150),
        lr: 5e-3,
        ..TrainConfig::default()
    };
    train(&mut params, &data, None, &config).unwrap();

    let snr = vec![0.0, 10.0, 20.0];
    let (mut perfect, mut model) = (vec![0.0; 3], vec![0.0; 3]);
    let draws = 120;
    for seed in 0..draws {
        let out = se_curve(
            Some(&params),
            &data,
            &SeConfig {
                users: 3,
                snr_db: snr.clone(),
                subcarriers: 32,
                seed,
            },
        )
        .unwrap();
        for r in &out.records {
            let i = snr.iter().position(|&s| s == r.snr_db).unwrap();
            match r.method.as_str() {
                "perfect" => perfect[i] += r.se_bits_per_hz,
                "stnet" => model[i] += r.se_bits_per_hz,
                m => panic!("unexpected method {m}"),
            }
        }
    }
    for i in 0..3 {
        assert!(perfect[i] >= model[i], "SNR {}: perfect {} < model {}", snr[i], perfect[i], model[i]);
    }
    // the gap widens with SNR as residual interference dominates
    assert!(perfect[2] - model[2] > perfect[0] - model[0]);
}

#[test]
fn se_rejects_impossible_user_counts() {
    let data = synth_channels(&SynthConfig {
        samples: 4,
        subcarriers: 16,
        n_c: 4,
        n_t: 4,
        max_delay: 2,
        ..SynthConfig::default()
    })
    .unwrap()
    .container;
    for users in [0, 5] {
        let cfg = SeConfig {
            users,
            subcarriers: 16,
            ..SeConfig::default()
        };
        assert!(se_curve(None, &data, &cfg).is_err(), "{users} users");
    }
    let ok = se_curve(None, &data, &SeConfig { users: 4, subcarriers: 16, ..SeConfig::default() }).unwrap();
    assert_eq!(ok.records.len(), SeConfig::default().snr_db.len());
    assert_eq!(ok.singular_subcarriers, vec![("perfect".to_string(), 0)]);
}
