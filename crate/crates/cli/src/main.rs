//! Command-line workflow: degrade -> train -> restore -> evaluate, plus the
//! receptive-field report.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error,
//! 3 numeric fault.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use dmcnn_core::imaging::{atomic_write, load_luma, pad_to_block_multiple, save_luma};
use dmcnn_core::jpeg::{self, CoeffGrid, QuantTable};
use dmcnn_core::metrics::{evaluate_dataset, TestSource};
use dmcnn_core::net::{restore, Model, ModelCheckpoint, NetworkConfig};
use dmcnn_core::tensor::{impulse_footprint, receptive_field};
use dmcnn_core::trainer::{train, CurriculumStage, TrainConfig};
use dmcnn_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dmcnn",
    about = "Dual-domain JPEG artifact removal laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply baseline-JPEG luma degradation to an image.
    Degrade(DegradeArgs),
    /// Train the restoration network on a corpus directory.
    Train(TrainArgs),
    /// Restore a degraded image with a trained checkpoint.
    Restore(RestoreArgs),
    /// Evaluate PSNR/SSIM/PSNR-B over a dataset.
    Eval(EvalArgs),
    /// Print analytic and impulse-measured receptive fields per branch.
    RfReport(RfReportArgs),
}

#[derive(Args)]
struct DegradeArgs {
    /// Clean input image (PNG or PGM).
    #[arg(long)]
    input: PathBuf,
    /// Output PNG path for the degraded image.
    #[arg(long)]
    output: PathBuf,
    /// JPEG quality factor.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=100))]
    qf: u8,
    /// Also write the quantized coefficients and table for exact restoration.
    #[arg(long)]
    dump_coeffs: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of clean training images (.png/.pgm).
    #[arg(long)]
    corpus: PathBuf,
    /// TOML file with [network] and [training] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Warm-start checkpoint.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Append structured training log lines to this file (also on stderr).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Flag overrides for every TrainConfig field.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated stages as patch_size:qf:steps, e.g. 56:20:500,56:10:500
    #[arg(long)]
    curriculum: Option<String>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    val_interval: Option<u64>,
}

#[derive(Args)]
struct RestoreArgs {
    /// Degraded input image.
    #[arg(long)]
    input: PathBuf,
    /// Quality factor for re-quantizing the input's coefficients.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=100), conflicts_with = "coeffs")]
    qf: Option<u8>,
    /// Exact coefficient dump written by `degrade --dump-coeffs`.
    #[arg(long)]
    coeffs: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of clean reference images.
    #[arg(long)]
    clean_dir: PathBuf,
    /// Directory of test images with matching filenames.
    #[arg(long, conflicts_with_all = ["checkpoint", "qf"])]
    test_dir: Option<PathBuf>,
    /// Restore with this checkpoint before evaluating (needs --qf).
    #[arg(long, requires = "qf")]
    checkpoint: Option<PathBuf>,
    /// Degrade at this quality factor (JPEG baseline when no checkpoint).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=100))]
    qf: Option<u8>,
    /// Write the machine-readable report (CSV) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RfReportArgs {
    /// TOML file with a [network] section.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Declarative configuration file: both sections optional.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    network: NetworkConfig,
    training: TrainConfig,
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn verbosity() -> u8 {
    match std::env::var("DMCNN_LOG").as_deref() {
        Ok("quiet") => 0,
        Ok("debug") => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version are success paths
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let outcome = match cli.command {
        Command::Degrade(args) => cmd_degrade(args),
        Command::Train(args) => cmd_train(args),
        Command::Restore(args) => cmd_restore(args),
        Command::Eval(args) => cmd_eval(args),
        Command::RfReport(args) => cmd_rf_report(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::InvalidArgument(_) | Error::Config(_) => 1,
                Error::Decode { .. } | Error::Io { .. } | Error::Checkpoint(_) => 2,
                Error::Numeric(_) => 3,
            })
        }
    }
}

const COEFF_DUMP_MAGIC: &str = "DMCNN-COEFFS v1";

fn write_coeff_dump(
    path: &Path,
    width: usize,
    height: usize,
    qf: u8,
    table: &QuantTable,
    coeffs: &CoeffGrid,
) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(format!("{COEFF_DUMP_MAGIC}\n{width} {height} {qf}\n").as_bytes());
    bytes.extend_from_slice(table.to_text().as_bytes());
    coeffs
        .write_dump(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    atomic_write(path, &bytes)
}

struct CoeffDump {
    width: usize,
    height: usize,
    table: QuantTable,
    coeffs: CoeffGrid,
}

fn read_coeff_dump(path: &Path) -> Result<CoeffDump> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::decode(path, reason.to_string());
    // header: magic line, size line, 8 table lines, then binary
    let mut offset = 0usize;
    let mut lines = Vec::new();
    for _ in 0..10 {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("truncated header"))?;
        lines.push(
            std::str::from_utf8(&bytes[offset..offset + end])
                .map_err(|_| fail("non-utf8 header"))?
                .to_string(),
        );
        offset += end + 1;
    }
    if lines[0] != COEFF_DUMP_MAGIC {
        return Err(fail("bad magic string"));
    }
    let dims: Vec<usize> = lines[1]
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    if dims.len() != 3 {
        return Err(fail("bad size line"));
    }
    let table = QuantTable::from_text(&lines[2..10].join("\n"))?;
    let coeffs = CoeffGrid::read_dump(&bytes[offset..])?;
    Ok(CoeffDump {
        width: dims[0],
        height: dims[1],
        table,
        coeffs,
    })
}

fn cmd_degrade(args: DegradeArgs) -> Result<ExitCode> {
    let clean = load_luma(&args.input)?;
    let degraded = jpeg::degrade(&clean, args.qf)?;
    save_luma(&degraded.plane, &args.output)?;
    if let Some(dump) = &args.dump_coeffs {
        write_coeff_dump(
            dump,
            clean.width(),
            clean.height(),
            args.qf,
            &degraded.table,
            &degraded.coeffs,
        )?;
    }
    if verbosity() >= 1 {
        println!(
            "degraded {} ({}x{}) at qf={} -> {}",
            args.input.display(),
            clean.width(),
            clean.height(),
            args.qf,
            args.output.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_curriculum(text: &str) -> Result<Vec<CurriculumStage>> {
    text.split(',')
        .map(|stage| {
            let parts: Vec<&str> = stage.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "curriculum stage {stage:?} is not patch_size:qf:steps"
                )));
            }
            Ok(CurriculumStage {
                patch_size: parts[0]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad patch size in {stage:?}")))?,
                qf: parts[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad qf in {stage:?}")))?,
                steps: parts[2]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad step count in {stage:?}")))?,
            })
        })
        .collect()
}

fn apply_overrides(cfg: &mut TrainConfig, ov: &TrainOverrides) -> Result<()> {
    if let Some(v) = ov.lr_init {
        cfg.lr_init = v;
    }
    if let Some(v) = ov.lr_decay_factor {
        cfg.lr_decay_factor = v;
    }
    if let Some(v) = ov.plateau_patience {
        cfg.plateau_patience = v;
    }
    if let Some(v) = ov.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = &ov.curriculum {
        cfg.curriculum = parse_curriculum(v)?;
    }
    if let Some(v) = ov.adam_beta1 {
        cfg.adam_beta1 = v;
    }
    if let Some(v) = ov.adam_beta2 {
        cfg.adam_beta2 = v;
    }
    if let Some(v) = ov.adam_eps {
        cfg.adam_eps = v;
    }
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    if let Some(v) = ov.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(v) = ov.val_interval {
        cfg.val_interval = v;
    }
    Ok(())
}

/// Fans log lines out to stderr and an optional file.
struct LogSink {
    file: Option<std::fs::File>,
    stderr_on: bool,
}

impl Write for LogSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        if self.stderr_on {
            std::io::stderr().write_all(buf)?;
        }
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut run = load_run_config(args.config.as_deref())?;
    apply_overrides(&mut run.training, &args.overrides)?;
    let corpus = dmcnn_core::imaging::list_corpus(&args.corpus)?;
    let init = args
        .init_checkpoint
        .as_deref()
        .map(ModelCheckpoint::load)
        .transpose()?;
    let mut sink = LogSink {
        file: args
            .log
            .as_deref()
            .map(|p| std::fs::File::create(p).map_err(|e| Error::io(p, e)))
            .transpose()?,
        stderr_on: verbosity() >= 1,
    };
    let outcome = train(&corpus, &run.network, &run.training, init, &mut sink)?;
    outcome.checkpoint.save(&args.out)?;
    println!(
        "trained {} steps; train loss {:.6} -> {:.6}; validation {}; checkpoint {}",
        outcome.total_steps,
        outcome.initial_train_loss,
        outcome.final_train_loss,
        outcome
            .best_validation_loss
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "disabled".into()),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_restore(args: RestoreArgs) -> Result<ExitCode> {
    let model = Model::load_checkpoint(&args.checkpoint)?;
    let degraded = load_luma(&args.input)?;
    let (coeffs, table) = match (&args.coeffs, args.qf) {
        (Some(dump_path), None) => {
            let dump = read_coeff_dump(dump_path)?;
            if dump.width != degraded.width() || dump.height != degraded.height() {
                return Err(Error::decode(
                    dump_path,
                    format!(
                        "dump is for a {}x{} image but the input is {}x{}",
                        dump.width,
                        dump.height,
                        degraded.width(),
                        degraded.height()
                    ),
                ));
            }
            (dump.coeffs, dump.table)
        }
        (None, Some(qf)) => {
            // re-quantization assumption: exact for images produced by the
            // degrade command at the same qf
            let table = QuantTable::luminance(qf)?;
            let (padded, _) = pad_to_block_multiple(&degraded);
            let coeffs = jpeg::quantize(&jpeg::block_dct(&padded)?, &table);
            (coeffs, table)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "restore needs exactly one of --qf or --coeffs".into(),
            ))
        }
    };
    let restored = restore(&model, &degraded, &coeffs, &table)?;
    save_luma(&restored, &args.output)?;
    if verbosity() >= 1 {
        println!(
            "restored {} -> {} (r = {:.4})",
            args.input.display(),
            args.output.display(),
            model.mixing_r()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let model;
    let source = match (&args.test_dir, &args.checkpoint, args.qf) {
        (Some(dir), None, None) => TestSource::Directory(dir),
        (None, Some(ckpt), Some(qf)) => {
            model = Model::load_checkpoint(ckpt)?;
            TestSource::RestoredBy { model: &model, qf }
        }
        (None, None, Some(qf)) => TestSource::DegradedAt { qf },
        _ => {
            return Err(Error::InvalidArgument(
                "eval needs --test-dir, or --qf (JPEG baseline), or --checkpoint with --qf".into(),
            ))
        }
    };
    let report = evaluate_dataset(&args.clean_dir, source)?;
    print!("{}", report.to_table());
    if let Some(path) = &args.report {
        atomic_write(path, report.to_csv().as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_rf_report(args: RfReportArgs) -> Result<ExitCode> {
    let run = load_run_config(args.config.as_deref())?;
    run.network.validate()?;
    let mut disagreement = false;
    let branches = [
        ("pixel branch (units: pixels)", run.network.pixel_branch_layers()?),
        (
            "dct branch (units: coefficient-grid cells, one per 8x8 block)",
            run.network.dct_branch_layers()?,
        ),
    ];
    for (label, layers) in branches {
        let (rh, rw) = receptive_field(&layers);
        // probe input: analytic size plus margin, rounded for the stride path
        let side = (rh.max(rw) + 16).div_ceil(8) * 8;
        let (mh, mw) = impulse_footprint(&layers, (side, side))?;
        let ok = (mh, mw) == (rh, rw);
        disagreement |= !ok;
        println!(
            "{label}: analytic {rh}x{rw}, impulse oracle {mh}x{mw}{}",
            if ok { "" } else { "  <-- DISAGREE" }
        );
    }
    if disagreement {
        return Err(Error::Numeric(
            "analytic receptive field disagrees with the impulse oracle".into(),
        ));
    }
    Ok(ExitCode::SUCCESS)
}
