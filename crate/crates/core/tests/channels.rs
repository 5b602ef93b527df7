use std::f64::consts::PI;

use num_complex::Complex64;

use stnet_core::data::{
    export_cost2100, import_cost2100, multipath_channel, read_container, synth_channels, write_container, PathSpec,
};
use stnet_core::domain::{angular_delay_full, from_angular_delay, to_angular_delay};
use stnet_core::{AngularDelayChannel, Error, Scenario, SynthConfig};

fn energy_rows(v: &[Complex64], cols: usize) -> Vec<f64> {
    v.chunks(cols).map(|r| r.iter().map(|c| c.norm_sqr()).sum()).collect()
}

#[test]
fn single_path_lands_in_its_delay_row() {
    for delay in [0usize, 3, 7] {
        let h = multipath_channel(
            &[PathSpec {
                gain: Complex64::new(0.6, -0.8),
                delay: delay as f64,
                angle: 0.0,
            }],
            32,
            16,
        );
        let full = angular_delay_full(&h);
        let rows = energy_rows(&full, 16);
        let total: f64 = rows.iter().sum();
        assert!(rows[delay] / total >= 0.99, "delay {delay}: {:?}", rows);
        // zero angle is a constant across antennas: one angular bin
        assert!((full[delay * 16].norm_sqr() / total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn on_grid_angle_lands_in_one_column() {
    // sinθ = 2k/N_t puts the steering vector on a DFT bin
    let (t, k) = (16usize, 3usize);
    let angle = (2.0 * k as f64 / t as f64).asin();
    let h = multipath_channel(
        &[PathSpec {
            gain: Complex64::new(1.0, 0.0),
            delay: 0.0,
            angle,
        }],
        8,
        t,
    );
    let full = angular_delay_full(&h);
    let total: f64 = full.iter().map(|c| c.norm_sqr()).sum();
    let peak = full.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
    assert!((peak / total - 1.0).abs() < 1e-12);
    let col = full.iter().position(|c| c.norm_sqr() == peak).unwrap() % t;
    assert!(col == k || col == t - k, "column {col}");
}

#[test]
fn synthetic_channels_survive_truncation() {
    let config = SynthConfig {
        samples: 12,
        subcarriers: 64,
        n_c: 16,
        n_t: 8,
        max_delay: 12,
        ..SynthConfig::default()
    };
    let out = synth_channels(&config).unwrap();
    for (i, h) in out.truth.iter().enumerate() {
        let ad = to_angular_delay(h, config.n_c).unwrap();
        let back = from_angular_delay(&ad, config.subcarriers).unwrap();
        let err: f64 = h.data.iter().zip(&back.data).map(|(a, b)| (a - b).norm_sqr()).sum();
        assert!(err.sqrt() <= 1e-8 * h.frobenius_sq().sqrt(), "sample {i}: {err:e}");
        // and the stored sample is that channel up to f32 rounding
        let planes = out.container.channel(i).planes;
        let scale = ad.planes.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = planes.max_abs_diff(&ad.planes);
        assert!(diff <= 1e-6 * out.container.meta.normalization.max.max(scale), "sample {i}: {diff:e}");
    }
}

#[test]
fn off_grid_delay_leaks_but_mostly_stays() {
    let h = multipath_channel(
        &[PathSpec {
            gain: Complex64::new(1.0, 0.0),
            delay: 2.5,
            angle: 0.0,
        }],
        128,
        4,
    );
    let kept = to_angular_delay(&h, 32).unwrap();
    let kept_energy: f64 = kept.to_complex().iter().map(|c| c.norm_sqr()).sum();
    assert!(kept_energy / h.frobenius_sq() > 0.9);
    assert!(kept_energy / h.frobenius_sq() < 1.0);
}

#[test]
fn synth_is_reproducible_and_normalized() {
    let config = SynthConfig {
        samples: 5,
        subcarriers: 32,
        n_c: 8,
        n_t: 8,
        max_delay: 5,
        seed: 11,
        ..SynthConfig::default()
    };
    let a = synth_channels(&config).unwrap().container;
    let b = synth_channels(&config).unwrap().container;
    assert_eq!(a, b);
    let c = synth_channels(&SynthConfig { seed: 12, ..config.clone() }).unwrap().container;
    assert_ne!(a.samples, c.samples);
    assert!(a.samples.iter().all(|v| (0.0..=1.0).contains(v)));
    // symmetric range: the extreme value sits on one of the ends
    let lo = a.samples.iter().cloned().fold(f32::MAX, f32::min);
    let hi = a.samples.iter().cloned().fold(f32::MIN, f32::max);
    assert!(lo == 0.0 || hi == 1.0, "{lo} {hi}");
    assert_eq!(a.meta.normalization.min, -a.meta.normalization.max);
    assert_eq!(a.meta.scenario, Scenario::Synthetic);

    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.csib"), dir.path().join("b.csib"));
    write_container(&a, &pa).unwrap();
    write_container(&b, &pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
}

#[test]
fn import_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f32> = (0..3 * 2048).map(|i| ((i * 37) % 1000) as f32 / 999.0).collect();
    for name in ["h.csv", "h.bin"] {
        let raw = dir.path().join(name);
        if name.ends_with(".csv") {
            let rows: Vec<String> = values
                .chunks(2048)
                .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                .collect();
            std::fs::write(&raw, rows.join("\n")).unwrap();
        } else {
            std::fs::write(&raw, values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
        }
        let c = import_cost2100(&raw, "test", Scenario::Indoor).unwrap();
        assert_eq!((c.n_c, c.n_t, c.len()), (32, 32, 3));
        assert_eq!(c.samples, values);
        assert_eq!(c.meta.split.as_deref(), Some("test"));
        assert_eq!(c.meta.normalization.denormalize(0.5), 0.0);

        let csib = dir.path().join(format!("{name}.csib"));
        write_container(&c, &csib).unwrap();
        assert_eq!(read_container(&csib).unwrap(), c);

        let again = dir.path().join(format!("again-{name}"));
        export_cost2100(&c, &again).unwrap();
        assert_eq!(import_cost2100(&again, "test", Scenario::Indoor).unwrap().samples, values);
    }
}

#[test]
fn import_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.csv");
    std::fs::write(&short, "0.1,0.2,0.3\n").unwrap();
    assert!(import_cost2100(&short, "train", Scenario::Indoor).is_err());

    let mut row = vec!["0.5".to_string(); 2048];
    row[17] = "7.0".into();
    let wild = dir.path().join("wild.csv");
    std::fs::write(&wild, row.join(",")).unwrap();
    match import_cost2100(&wild, "train", Scenario::Outdoor) {
        Err(Error::Validation(msg)) => assert!(msg.contains("index 17"), "{msg}"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn steering_phase_matches_half_wavelength_array() {
    let angle = 0.3f64;
    let h = multipath_channel(
        &[PathSpec {
            gain: Complex64::new(1.0, 0.0),
            delay: 0.0,
            angle,
        }],
        1,
        4,
    );
    for t in 0..4 {
        let want = Complex64::from_polar(1.0, -PI * t as f64 * angle.sin());
        assert!((h.at(0, t) - want).norm() < 1e-15);
    }
}

#[test]
fn keeping_the_strongest_rows_minimizes_error() {
    let (n, t, keep) = (6usize, 3usize, 3usize);
    let paths: Vec<PathSpec> = (0..4)
        .map(|p| PathSpec {
            gain: Complex64::new(0.3 + p as f64 * 0.2, -0.1 * p as f64),
            delay: [0.7, 2.2, 4.9, 3.4][p],
            angle: 0.2 * p as f64 - 0.3,
        })
        .collect();
    let h = multipath_channel(&paths, n, t);
    let full = angular_delay_full(&h);
    let rows = energy_rows(&full, t);
    let error_of = |mask: u32| -> f64 {
        let kept: Vec<Complex64> = full
            .iter()
            .enumerate()
            .map(|(i, c)| if mask >> (i / t) & 1 == 1 { *c } else { Complex64::new(0.0, 0.0) })
            .collect();
        let back = from_angular_delay(&AngularDelayChannel::from_complex(n, t, &kept), n).unwrap();
        h.data.iter().zip(&back.data).map(|(a, b)| (a - b).norm_sqr()).sum()
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rows[b].total_cmp(&rows[a]));
    let strongest: u32 = order[..keep].iter().map(|&r| 1u32 << r).sum();
    let best = error_of(strongest);
    for mask in (0u32..1 << n).filter(|m| m.count_ones() as usize == keep) {
        let e = error_of(mask);
        // the error of a selection is exactly the energy it drops
        let dropped: f64 = (0..n).filter(|r| mask >> r & 1 == 0).map(|r| rows[r]).sum();
        assert!((e - dropped).abs() < 1e-10);
        assert!(best <= e + 1e-12);
    }
}
