use stnet_core::data::synth_channels;
use stnet_core::harness::{evaluate, load_checkpoint, save_checkpoint, train, StopReason, Trainer};
use stnet_core::{build_model, DatasetContainer, Error, ModelConfig, SynthConfig, Tensor, TrainConfig};

fn data(samples: usize, seed: u64) -> DatasetContainer {
    synth_channels(&SynthConfig {
        samples,
        subcarriers: 32,
        n_c: 8,
        n_t: 8,
        max_delay: 6,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .container
}

fn quick(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 100,
        max_steps: Some(steps),
        lr: 2e-3,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn reconstruct_shapes_and_range() {
    let params = build_model(ModelConfig::tiny()).unwrap();
    let x = data(3, 0).batch(&[0, 1, 2]).unwrap();
    let code = params.encode(&x).unwrap();
    assert_eq!(code.shape(), &[3, 32]);
    let y = params.decode(&code).unwrap();
    assert_eq!(y.shape(), &[3, 2, 8, 8]);
    assert!(y.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    assert_eq!(params.reconstruct(&x).unwrap(), y);
    assert!(params.reconstruct(&Tensor::zeros([1, 2, 8, 4])).is_err());
}

#[test]
fn seeds_control_initialization() {
    let a = build_model(ModelConfig::tiny()).unwrap();
    let b = build_model(ModelConfig::tiny()).unwrap();
    let c = build_model(ModelConfig::tiny().with_seed(1)).unwrap();
    assert_eq!(a.store, b.store);
    assert_ne!(a.store, c.store);
}

#[test]
fn untrained_model_gives_finite_nmse_near_zero_db() {
    let params = build_model(ModelConfig::tiny()).unwrap();
    let r = evaluate(&params, &data(24, 1)).unwrap();
    assert!(r.nmse_db.is_finite());
    // untrained output hovers near the centre value, i.e. near a zero channel
    assert!(r.nmse_db > -3.0 && r.nmse_db < 10.0, "{}", r.nmse_db);
    assert_eq!(r.samples, 24);
    assert_eq!(r.gamma, "1/4");
    assert_eq!(r.scenario, "synthetic");
}

#[test]
fn evaluate_is_deterministic() {
    let params = build_model(ModelConfig::tiny()).unwrap();
    let d = data(20, 2);
    let a = evaluate(&params, &d).unwrap();
    let b = evaluate(&params, &d).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.nmse_db.to_bits(), b.nmse_db.to_bits());
}

#[test]
fn dim_mismatch_is_rejected() {
    let params = build_model(ModelConfig::tiny()).unwrap();
    let wide = synth_channels(&SynthConfig {
        samples: 2,
        subcarriers: 32,
        n_c: 16,
        n_t: 16,
        max_delay: 6,
        ..SynthConfig::default()
    })
    .unwrap()
    .container;
    assert!(matches!(evaluate(&params, &wide), Err(Error::DimMismatch(_))));
    let mut p = params.clone();
    assert!(matches!(train(&mut p, &wide, None, &quick(1)), Err(Error::DimMismatch(_))));
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let mut params = build_model(ModelConfig::tiny()).unwrap();
    let before = params.store.clone();
    let h = train(&mut params, &data(12, 3), None, &TrainConfig { lr: 0.0, ..quick(6) }).unwrap();
    assert_eq!(params.store, before);
    assert_eq!(h.step_losses.len(), 6);
    // same parameters, so each sample's loss repeats every epoch (3 batches)
    let by_epoch: Vec<f64> = h.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(by_epoch.len(), 2);
    assert!((by_epoch[0] - by_epoch[1]).abs() <= 1e-6 * by_epoch[0]);
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let d = data(16, 4);
    let mut a = build_model(ModelConfig::tiny()).unwrap();
    let mut b = a.clone();
    let ha = train(&mut a, &d, None, &quick(60)).unwrap();
    let hb = train(&mut b, &d, None, &quick(60)).unwrap();
    assert!(ha.same_trajectory(&hb));
    assert_eq!(a.store, b.store);
    assert_eq!(ha.stop, StopReason::MaxSteps);
    let first: f64 = ha.step_losses[..4].iter().sum();
    let last: f64 = ha.step_losses[56..].iter().sum();
    assert!(last < first, "{first} -> {last}");

    let mut c = build_model(ModelConfig::tiny()).unwrap();
    let hc = train(&mut c, &d, None, &TrainConfig { seed: 10, ..quick(60) }).unwrap();
    assert!(!ha.same_trajectory(&hc));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let d = data(14, 5);
    let v = data(6, 6);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        checkpoint_every: Some(5),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..quick(23)
    };
    let params = build_model(ModelConfig::tiny()).unwrap();
    let mut full = Trainer::new(params.clone(), config.clone()).unwrap();
    full.run(&d, Some(&v)).unwrap();

    // step 10 falls mid-epoch (4 batches per epoch)
    let ck = dir.path().join("step-00000010.ckpt");
    let mut resumed = Trainer::resume(&ck, None).unwrap();
    assert_eq!(resumed.steps(), 10);
    let resume_dir = tempfile::tempdir().unwrap();
    let config2 = TrainConfig {
        checkpoint_dir: Some(resume_dir.path().to_path_buf()),
        ..config.clone()
    };
    resumed = Trainer::resume(&ck, Some(config2)).unwrap();
    resumed.run(&d, Some(&v)).unwrap();
    assert!(full.history.same_trajectory(&resumed.history));
    assert_eq!(full.params.store, resumed.params.store);

    let wrong_seed = TrainConfig { seed: 1, ..config };
    assert!(matches!(Trainer::resume(&ck, Some(wrong_seed)), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip() {
    let d = data(8, 7);
    let mut t = Trainer::new(build_model(ModelConfig::tiny()).unwrap(), quick(3)).unwrap();
    t.run(&d, None).unwrap();
    let ck = t.checkpoint(1.25);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn divergence_is_reported() {
    let mut params = build_model(ModelConfig::tiny()).unwrap();
    let err = train(&mut params, &data(8, 8), None, &TrainConfig { lr: 1e30, ..quick(5) }).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn invalid_training_configs() {
    let p = build_model(ModelConfig::tiny()).unwrap();
    for bad in [
        TrainConfig { batch_size: 0, ..quick(1) },
        TrainConfig { lr: -1.0, ..quick(1) },
        TrainConfig { lr: f64::NAN, ..quick(1) },
        TrainConfig { validate_every: 0, ..quick(1) },
    ] {
        assert!(matches!(Trainer::new(p.clone(), bad), Err(Error::Config(_))));
    }
    let empty = data(4, 0).subset(&[], None).unwrap();
    let mut t = Trainer::new(p, quick(1)).unwrap();
    assert!(t.run(&empty, None).is_err());
}

#[test]
fn patience_stops_early() {
    let d = data(8, 9);
    let v = data(4, 10);
    let mut p = build_model(ModelConfig::tiny()).unwrap();
    // a frozen model never improves after the first validation
    let h = train(
        &mut p,
        &d,
        Some(&v),
        &TrainConfig {
            lr: 0.0,
            patience: Some(2),
            max_steps: None,
            ..quick(0)
        },
    )
    .unwrap();
    assert_eq!(h.stop, StopReason::Patience);
    assert_eq!(h.epochs.len(), 3);
    assert!(h.epochs.iter().all(|e| e.val_nmse_db.is_some()));
}
