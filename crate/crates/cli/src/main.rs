//! `stnet`: synthesize or import CSI datasets, train and evaluate the
//! autoencoder, count FLOPs, draw ZF spectral-efficiency curves and run the
//! gradient-check suite.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use stnet_core::data::{import_cost2100, read_container, split_indices, synth_channels, write_container};
use stnet_core::gradcheck::suite::{full_suite, Measure};
use stnet_core::harness::flops::{REFERENCE_ENCODER_SHARE, REFERENCE_TOTAL_QUARTER, REFERENCE_TOTAL_SIXTYFOURTH};
use stnet_core::harness::{count_flops, emit_report, evaluate, load_checkpoint, se_curve, Report, Trainer};
use stnet_core::{build_model, DatasetContainer, Scenario};

use config::{resolve_codeword, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] stnet_core::Error),
    #[error("gradient check failed for {0} of {1} entries")]
    GradCheck(usize, usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use stnet_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::GradCheck(..) => 3,
            CliError::Core(e) => match e {
                E::Config(_) => 1,
                E::Divergence { .. } | E::Numerical(_) => 3,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stnet", version, about = "CSI feedback autoencoder with local and global windowed attention")]
struct Cli {
    /// Seed for every seeded stage (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run config with optional `model`, `train`, `synth` and `se` sections
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RatioArgs {
    /// Compression ratio as a fraction, e.g. 1/16
    #[arg(long, value_name = "NUM/DEN")]
    gamma: Option<String>,
    /// Codeword length M; must agree with --gamma when both are given
    #[arg(long, value_name = "M")]
    codeword: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training container
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Validation container
    #[arg(long, value_name = "FILE")]
    val: Option<PathBuf>,
    /// Resume from this checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    ratio: RatioArgs,
    /// Maximum optimizer steps
    #[arg(long)]
    steps: Option<u64>,
    /// Maximum passes over the training set
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Write a checkpoint every this many steps
    #[arg(long, value_name = "STEPS")]
    checkpoint_every: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multipath dataset
    Synth {
        /// Number of channels (overrides the config)
        #[arg(long)]
        samples: Option<usize>,
        /// Also write disjoint train/val/test containers of these sizes
        #[arg(long, value_name = "TRAIN,VAL,TEST", value_delimiter = ',')]
        split: Option<Vec<usize>>,
    },
    /// Convert flattened 2048-value vectors (CSV or raw f32) to a container
    Import {
        /// Source file (.csv, otherwise raw little-endian f32)
        #[arg(long, value_name = "FILE")]
        src: PathBuf,
        /// Split label stored in the metadata and used as the file name
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "indoor", value_parser = ["indoor", "outdoor"])]
        scenario: String,
    },
    /// Train a model; the grid is taken from the dataset
    Train(TrainArgs),
    /// NMSE of a checkpoint on one or more datasets
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Container to evaluate; repeat for several splits
        #[arg(long, value_name = "FILE", required = true)]
        dataset: Vec<PathBuf>,
    },
    /// Per-layer MAC and FLOP counts of the configured model
    Flops {
        #[command(flatten)]
        ratio: RatioArgs,
    },
    /// ZF spectral efficiency against SNR, perfect CSI and (with a checkpoint) reconstructed CSI
    SeCurve {
        /// Container supplying the user channels
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Add a curve for CSI reconstructed by this checkpoint
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// SNR points in dB
        #[arg(long, value_name = "DB,...", value_delimiter = ',', allow_hyphen_values = true)]
        snr_list: Option<Vec<f64>>,
        /// Users served by the precoder, drawn from distinct samples
        #[arg(long)]
        users: Option<usize>,
    },
    /// Finite-difference check of every op, the attention blocks and a tiny model
    Gradcheck,
}

fn log_config<T: Serialize>(what: &str, value: &T) {
    match serde_json::to_string(value) {
        Ok(s) => eprintln!("stnet: {what} {s}"),
        Err(e) => eprintln!("stnet: cannot render {what}: {e}"),
    }
}

fn out_path(out: &Path, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    Ok(out.join(name))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

fn synth(cfg: &mut RunConfig, out: &Path, samples: Option<usize>, split: Option<Vec<usize>>) -> Result<(), CliError> {
    if let Some(n) = samples {
        cfg.synth.samples = n;
    }
    log_config("synth config", &cfg.synth);
    let data = synth_channels(&cfg.synth)?.container;
    let path = out_path(out, "synth.csib")?;
    write_container(&data, &path)?;
    println!("{} ({} samples, {}×{})", path.display(), data.len(), data.n_c, data.n_t);
    if let Some(sizes) = split {
        if sizes.len() != 3 {
            return Err(CliError::Usage(format!("--split takes three sizes, got {}", sizes.len())));
        }
        let parts = split_indices(data.len(), &sizes, cfg.synth.seed)?;
        for (name, idx) in ["train", "val", "test"].iter().zip(&parts) {
            let sub = data.subset(idx, Some(name))?;
            let path = out.join(format!("{name}.csib"));
            write_container(&sub, &path)?;
            println!("{} ({} samples)", path.display(), sub.len());
        }
    }
    Ok(())
}

fn import(out: &Path, src: &Path, split: &str, scenario: &str) -> Result<(), CliError> {
    let scenario: Scenario = scenario.parse()?;
    let data = import_cost2100(src, split, scenario)?;
    let path = out_path(out, &format!("{split}.csib"))?;
    write_container(&data, &path)?;
    println!("{} ({} samples)", path.display(), data.len());
    Ok(())
}

fn train(cfg: &RunConfig, seed_given: bool, out: &Path, args: &TrainArgs) -> Result<(), CliError> {
    let data = read_container(&args.dataset)?;
    let val = args.val.as_deref().map(read_container).transpose()?;
    let resumed = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;

    let mut tc = match &resumed {
        // a different --seed is passed through so resume can reject it
        Some(ck) => stnet_core::TrainConfig {
            seed: if seed_given { cfg.train.seed } else { ck.train.seed },
            ..ck.train.clone()
        },
        None => cfg.train.clone(),
    };
    if let Some(s) = args.steps {
        tc.max_steps = Some(s);
    }
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    if let Some(b) = args.batch {
        tc.batch_size = b;
    }
    if let Some(l) = args.lr {
        tc.lr = l;
    }
    if args.checkpoint_every.is_some() {
        tc.checkpoint_every = args.checkpoint_every;
    }
    if tc.checkpoint_dir.is_none() {
        tc.checkpoint_dir = Some(out_path(out, "checkpoints")?);
    }
    if let Some(dir) = &tc.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }

    let ratio = &args.ratio;
    let mut trainer = match (&resumed, args.checkpoint.as_deref()) {
        (Some(ck), Some(path)) => {
            if ratio.gamma.is_some() || ratio.codeword.is_some() {
                let m = resolve_codeword(ratio.gamma.as_deref(), ratio.codeword, ck.model.n_c, ck.model.n_t)?;
                if m != Some(ck.model.codeword) {
                    return Err(CliError::Usage(format!(
                        "checkpoint was trained with M = {}; the ratio cannot change on resume",
                        ck.model.codeword
                    )));
                }
            }
            log_config("model config", &ck.model);
            log_config("train config", &tc);
            Trainer::resume(path, Some(tc))?
        }
        _ => {
            let mut mc = cfg.model.clone();
            let grid_changed = (mc.n_c, mc.n_t) != (data.n_c, data.n_t);
            (mc.n_c, mc.n_t) = (data.n_c, data.n_t);
            match resolve_codeword(ratio.gamma.as_deref(), ratio.codeword, mc.n_c, mc.n_t)? {
                Some(m) => mc.codeword = m,
                // keep the configured ratio when only the grid moved
                None if grid_changed => {
                    let g = cfg.model.gamma();
                    mc.codeword = stnet_core::CompressionRatio::codeword_for(g.num, g.den, mc.n_c, mc.n_t)?;
                }
                None => {}
            }
            log_config("model config", &mc);
            log_config("train config", &tc);
            Trainer::new(build_model(mc)?, tc)?
        }
    };
    trainer.run(&data, val.as_ref())?;
    let history = &trainer.history;
    let written = emit_report(Report::History(history), &out_path(out, "history.csv")?)?;
    for p in &written {
        println!("{}", p.display());
    }
    println!(
        "stopped: {:?} after {} steps, {} epochs; last train NMSE {} dB",
        history.stop,
        trainer.steps(),
        trainer.epochs_completed(),
        history.final_train_nmse_db().map_or("n/a".into(), |d| format!("{d:.2}"))
    );
    Ok(())
}

fn eval(out: &Path, checkpoint: &Path, datasets: &[PathBuf]) -> Result<(), CliError> {
    let params = load_checkpoint(checkpoint)?.model_params();
    log_config("model config", &params.config);
    for path in datasets {
        let data = read_container(path)?;
        let report = evaluate(&params, &data)?;
        let name = data.meta.split.clone().unwrap_or_else(|| stem(path));
        let csv = out_path(out, &format!("eval-{name}.csv"))?;
        emit_report(Report::Eval(std::slice::from_ref(&report)), &csv)?;
        println!(
            "{}: NMSE {:.2} dB ({:.4e}) over {} samples ({} excluded) -> {}",
            name,
            report.nmse_db,
            report.nmse_linear,
            report.samples,
            report.excluded,
            csv.display()
        );
    }
    Ok(())
}

fn flops(cfg: &RunConfig, out: &Path, ratio: &RatioArgs) -> Result<(), CliError> {
    let mut mc = cfg.model.clone();
    if let Some(m) = resolve_codeword(ratio.gamma.as_deref(), ratio.codeword, mc.n_c, mc.n_t)? {
        mc.codeword = m;
    }
    log_config("model config", &mc);
    let report = count_flops(&mc)?;
    let csv = out_path(out, "flops.csv")?;
    emit_report(Report::Flops(&report), &csv)?;
    println!(
        "γ = {} (M = {}): {} MACs, {} FLOPs; encoder {} MACs ({:.2}%), decoder {} MACs",
        report.gamma,
        report.codeword,
        report.total.macs,
        report.total.flops,
        report.encoder.macs,
        100.0 * report.encoder_share(),
        report.decoder.macs
    );
    let reference = match report.gamma.as_str() {
        "1/4" => Some(REFERENCE_TOTAL_QUARTER),
        "1/64" => Some(REFERENCE_TOTAL_SIXTYFOURTH),
        _ => None,
    };
    if let (Some(r), true) = (reference, (mc.n_c, mc.n_t) == (32, 32)) {
        println!(
            "reference {:.2}M: {:+.1}%{}",
            r / 1e6,
            100.0 * (report.total.macs as f64 / r - 1.0),
            if report.gamma == "1/4" {
                format!("; encoder share reference {:.2}%", 100.0 * REFERENCE_ENCODER_SHARE)
            } else {
                String::new()
            }
        );
    }
    for a in &report.attention {
        println!(
            "{}: counted {} MACs, analytic {} MACs, agree: {}",
            a.block,
            a.counted_macs,
            a.analytic.total_macs(),
            a.agrees()
        );
    }
    println!("{}", csv.display());
    Ok(())
}

fn se(
    cfg: &mut RunConfig,
    out: &Path,
    dataset: &Path,
    checkpoint: Option<&Path>,
    snr_list: Option<Vec<f64>>,
    users: Option<usize>,
) -> Result<(), CliError> {
    if let Some(s) = snr_list {
        cfg.se.snr_db = s;
    }
    if let Some(u) = users {
        cfg.se.users = u;
    }
    log_config("se config", &cfg.se);
    let data: DatasetContainer = read_container(dataset)?;
    let params = checkpoint.map(load_checkpoint).transpose()?.map(|c| c.model_params());
    let outcome = se_curve(params.as_ref(), &data, &cfg.se)?;
    for (method, n) in &outcome.singular_subcarriers {
        if *n > 0 {
            eprintln!("stnet: {method}: {n} sub-carriers used the pseudo-inverse");
        }
    }
    for r in &outcome.records {
        println!("{:>8} {:>7.1} dB {:.4} bits/s/Hz", r.method, r.snr_db, r.se_bits_per_hz);
    }
    let csv = out_path(out, "se_curve.csv")?;
    for p in emit_report(Report::SeCurve(&outcome.records), &csv)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn gradcheck(seed: u64, out: &Path) -> Result<(), CliError> {
    let entries = full_suite(seed)?;
    for e in &entries {
        let measure = match e.measure {
            Measure::Relative => "rel",
            Measure::Vanishing => "abs",
        };
        println!(
            "{:<4} {:<48} {:?} {measure} {:.2e} (< {:.0e}, {} entries)",
            if e.passed() { "ok" } else { "FAIL" },
            e.name,
            e.precision,
            e.error,
            e.threshold,
            e.entries
        );
    }
    let path = out_path(out, "gradcheck.json")?;
    let json = serde_json::to_string_pretty(&entries).map_err(stnet_core::Error::from)?;
    fs::write(&path, json).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    let failed = entries.iter().filter(|e| !e.passed()).count();
    println!("{} checks, {failed} failed -> {}", entries.len(), path.display());
    if failed > 0 {
        return Err(CliError::GradCheck(failed, entries.len()));
    }
    Ok(())
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("STNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("STNET_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth { samples, split } => synth(&mut cfg, out, samples, split),
        Command::Import { src, split, scenario } => import(out, &src, &split, &scenario),
        Command::Train(args) => train(&cfg, cli.seed.is_some(), out, &args),
        Command::Eval { checkpoint, dataset } => eval(out, &checkpoint, &dataset),
        Command::Flops { ratio } => flops(&cfg, out, &ratio),
        Command::SeCurve {
            dataset,
            checkpoint,
            snr_list,
            users,
        } => se(&mut cfg, out, &dataset, checkpoint.as_deref(), snr_list, users),
        Command::Gradcheck => gradcheck(cli.seed.unwrap_or(0), out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stnet: error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
