use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_stnet");

fn stnet(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("STNET_THREADS").output().expect("spawn stnet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compare against the stored file; `STNET_UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("STNET_UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let want = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, want, "help text drifted from {}", path.display());
}

#[test]
fn help_matches_golden() {
    let o = stnet(&["--help"]);
    assert_eq!(code(&o), 0);
    check_golden("help.txt", &stdout(&o));
    for sub in ["synth", "import", "train", "eval", "flops", "se-curve", "gradcheck"] {
        let o = stnet(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        check_golden(&format!("help-{sub}.txt"), &stdout(&o));
    }
}

#[test]
fn help_lists_every_flag() {
    let mut all = stdout(&stnet(&["--help"]));
    for sub in ["train", "se-curve", "synth"] {
        all.push_str(&stdout(&stnet(&[sub, "--help"])));
    }
    for flag in [
        "--gamma",
        "--codeword",
        "--dataset",
        "--checkpoint",
        "--out",
        "--seed",
        "--config",
        "--steps",
        "--epochs",
        "--batch",
        "--lr",
        "--snr-list",
        "--users",
    ] {
        assert!(all.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&stnet(&[])), 1);
    assert_eq!(code(&stnet(&["bogus"])), 1);
    assert_eq!(code(&stnet(&["flops", "--no-such-flag"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = stnet(&["--out", out, "flops", "--gamma", "1/4", "--codeword", "128"]);
    assert_eq!(code(&o), 1);
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
    assert_eq!(code(&stnet(&["--out", out, "flops", "--gamma", "1/3"])), 1);

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    assert_eq!(code(&stnet(&["--config", cfg.to_str().unwrap(), "--out", out, "flops"])), 1);
    let o = Command::new(BIN).args(["--out", out, "flops"]).env("STNET_THREADS", "0").output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn version_exits_0() {
    let o = stnet(&["--version"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("stnet "));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let junk = dir.path().join("junk.csib");
    fs::write(&junk, b"not a container").unwrap();
    let j = junk.to_str().unwrap();
    assert_eq!(code(&stnet(&["--out", out, "train", "--dataset", j])), 2);
    assert_eq!(code(&stnet(&["--out", out, "eval", "--checkpoint", j, "--dataset", j])), 2);
    let missing = dir.path().join("missing.csib");
    assert_eq!(code(&stnet(&["--out", out, "se-curve", "--dataset", missing.to_str().unwrap()])), 2);
}

#[test]
fn flops_reports_total_and_share() {
    let dir = tempfile::tempdir().unwrap();
    let o = stnet(&["--out", dir.path().to_str().unwrap(), "flops", "--gamma", "1/4"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("M = 512"), "{text}");
    assert!(text.contains("5624832 MACs"), "{text}");
    assert!(text.contains("42.68%"), "{text}");
    assert!(text.contains("reference 5.22M"), "{text}");
    assert!(!text.contains("agree: false"), "{text}");
    let csv = fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    assert!(csv.starts_with("layer,part,macs,flops"));

    // --codeword alone gives the same model
    let o2 = stnet(&["--out", dir.path().to_str().unwrap(), "flops", "--codeword", "512"]);
    assert_eq!(stdout(&o2), text);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = stnet(&["--out", dir.path().to_str().unwrap(), "gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("0 failed"));
    assert!(!text.contains("FAIL"));
    assert!(text.contains("conv2d/strided/weight"));
    assert!(text.contains("model/input"));
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn synth_is_deterministic_and_splits() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    for d in [&a, &b] {
        let o = stnet(&[
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "3",
            "--out",
            d.path().to_str().unwrap(),
            "synth",
            "--split",
            "40,12,12",
        ]);
        assert_eq!(code(&o), 0);
    }
    for f in ["synth.csib", "train.csib", "val.csib", "test.csib"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // header: magic, version, count
    let train = fs::read(a.path().join("train.csib")).unwrap();
    assert_eq!(&train[..4], b"CSIB");
    assert_eq!(u64::from_le_bytes(train[8..16].try_into().unwrap()), 40);

    let c = tempfile::tempdir().unwrap();
    stnet(&["--config", cfg.to_str().unwrap(), "--seed", "4", "--out", c.path().to_str().unwrap(), "synth"]);
    assert_ne!(
        fs::read(a.path().join("synth.csib")).unwrap(),
        fs::read(c.path().join("synth.csib")).unwrap()
    );
}

#[test]
fn import_csv() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("h.csv");
    let rows: Vec<String> = (0..3)
        .map(|r| (0..2048).map(|i| format!("{}", ((r * 7 + i) % 101) as f32 / 100.0)).collect::<Vec<_>>().join(","))
        .collect();
    fs::write(&src, rows.join("\n")).unwrap();
    let o = stnet(&[
        "--out",
        dir.path().to_str().unwrap(),
        "import",
        "--src",
        src.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(dir.path().join("test.csib")).unwrap();
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);

    fs::write(&src, "0.5,0.5\n").unwrap();
    assert_eq!(code(&stnet(&["--out", dir.path().to_str().unwrap(), "import", "--src", src.to_str().unwrap()])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&stnet(&["--config", cfg, "--out", out, "synth", "--samples", "16"])), 0);
    let data = dir.path().join("synth.csib");
    let o = stnet(&["--config", cfg, "--out", out, "train", "--dataset", data.to_str().unwrap(), "--steps", "5", "--lr", "1e30"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn se_curve_perfect_csi() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    stnet(&["--config", cfg, "--out", out, "synth", "--samples", "8"]);
    let data = dir.path().join("synth.csib");
    let o = stnet(&[
        "--config",
        cfg,
        "--out",
        out,
        "se-curve",
        "--dataset",
        data.to_str().unwrap(),
        "--snr-list",
        "-10,0,10",
        "--users",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("se_curve.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "snr_db,se_bits_per_hz,method,gamma");
    assert_eq!(lines.len(), 4);
    assert!(dir.path().join("se_curve.svg").exists());
}

/// synth → train → eval with the smoke config reaches −20 dB on the
/// training set.
#[test]
fn smoke_pipeline_overfits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&stnet(&["--config", cfg, "--out", out, "synth"])), 0);
    let data = dir.path().join("synth.csib");
    let data = data.to_str().unwrap();
    let o = stnet(&["--config", cfg, "--out", out, "train", "--dataset", data, "--gamma", "1/4", "--steps", "2000"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = dir.path().join("checkpoints/final.ckpt");
    let o = stnet(&["--out", out, "eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", data]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("eval-synth.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "synthetic");
    assert_eq!(row[1], "1/4");
    let db: f64 = row[2].parse().unwrap();
    assert!(db <= -20.0, "train-set NMSE {db} dB");
    assert_eq!(row[3], "64");
}
