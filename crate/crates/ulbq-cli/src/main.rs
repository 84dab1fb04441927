//! Pipeline driver: pretrain, measure, quantize, calibrate, evaluate,
//! verify, and compare — one stage per invocation, one seed for the whole
//! experiment.
//!
//! Every command resolves its settings the same way: built-in defaults,
//! then the `--config` JSON document, then individual flags, later layers
//! winning. Commands read and write only inside the experiment's output
//! directory (plus the corpus and any artifact paths given explicitly),
//! exit 0 on success, and print a machine-readable JSON error record to
//! stderr otherwise. Reruns with identical inputs rewrite byte-identical
//! artifacts; wall-clock timings go to separate `timing-*.json` files so
//! everything else stays hashable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ulbq::calib::{attach_quantizers, calibrate_model, LoraPosition, QuantMethod, Variant};
use ulbq::checkpoint;
use ulbq::config::{ExperimentConfig, Overrides, SUPPORTED_BITS};
use ulbq::data::{TextDataset, Tokenizer};
use ulbq::error::{Error, Result};
use ulbq::eval::{compare, evaluate, EvalReport};
use ulbq::model::{pretrain, ToyTransformer};
use ulbq::quant::GroupSize;
use ulbq::rng::Rng;
use ulbq::saliency::model_saliency;

/// Identifier stamped into every artifact. Packagers can override it at
/// compile time with a `git describe` string; it never contains a
/// timestamp, so rebuilding the same sources reproduces the same
/// artifacts.
const BUILD_ID: &str = match option_env!("ULBQ_BUILD_ID") {
    Some(id) => id,
    None => concat!("ulbq-", env!("CARGO_PKG_VERSION")),
};

#[derive(Parser)]
#[command(
    name = "ulbq",
    version,
    about = "Saliency-aware partial retraining for ultra-low-bit weight quantization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision reference model on the corpus.
    Pretrain(Common),
    /// Measure per-weight sensitivity of the pretrained model.
    Saliency(Common),
    /// Attach quantizers without calibration and write the artifact.
    Quantize(Common),
    /// Calibrate quantizers block by block against the reference model.
    Calibrate(Common),
    /// Score an artifact's perplexity on the configured split.
    Eval(EvalArgs),
    /// Verify an artifact byte for byte and report its packed layout.
    Pack(PackArgs),
    /// Combine eval reports into a comparison table.
    Report(ReportArgs),
}

/// Settings shared by every command. Flags override `--config` keys,
/// which override defaults.
#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every stage of the experiment.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts and reports.
    #[arg(long)]
    out: Option<String>,
    /// Quantization width in bits.
    #[arg(long, value_parser = parse_bits)]
    bits: Option<u8>,
    /// Quantization group width, or 'matrix' for one group per matrix.
    #[arg(long, value_parser = parse_group_size)]
    group_size: Option<GroupSize>,
    /// Quantizer family: rtn, learnable_clip, dual_binary, or mos.
    #[arg(long, value_parser = parse_quantizer)]
    quantizer: Option<QuantMethod>,
    /// Regularizer weighting: none, naive, or saliency.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Regularizer target: before or after the low-rank correction.
    #[arg(long, value_parser = parse_lora_position)]
    lora_position: Option<LoraPosition>,
    /// Regularizer coefficient at block 0.
    #[arg(long)]
    coef: Option<f64>,
    /// Per-block regularizer coefficient growth factor.
    #[arg(long)]
    coef_mult: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Artifact to score (full-precision or quantized).
    artifact: PathBuf,
    /// Row label used in reports. Defaults to "fp" for full-precision
    /// checkpoints and the artifact's file stem otherwise.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct PackArgs {
    #[command(flatten)]
    common: Common,
    /// Artifact to verify and measure.
    artifact: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Eval report files (JSON) to combine.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Row label of the full-precision reference.
    #[arg(long, default_value = "fp")]
    fp: String,
    /// Row label of the uncalibrated baseline.
    #[arg(long, default_value = "rtn")]
    base: String,
}

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    let bits: u8 = s.parse().map_err(|_| format!("'{s}' is not a bit width"))?;
    if SUPPORTED_BITS.contains(&bits) {
        Ok(bits)
    } else {
        Err(format!("unsupported bit width {bits} (choose one of {SUPPORTED_BITS:?})"))
    }
}

fn parse_group_size(s: &str) -> std::result::Result<GroupSize, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_quantizer(s: &str) -> std::result::Result<QuantMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_lora_position(s: &str) -> std::result::Result<LoraPosition, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    match run(cli, started) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli, started: Instant) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => cmd_pretrain(&resolve(&c)?, started),
        Command::Saliency(c) => cmd_saliency(&resolve(&c)?, started),
        Command::Quantize(c) => cmd_quantize(&resolve(&c)?, started),
        Command::Calibrate(c) => cmd_calibrate(&resolve(&c)?, started),
        Command::Eval(a) => cmd_eval(&resolve(&a.common)?, &a, started),
        Command::Pack(a) => cmd_pack(&resolve(&a.common)?, &a),
        Command::Report(a) => cmd_report(&resolve(&a.common)?, &a),
    }
}

/// Defaults, then the config file, then flags.
fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        bits: common.bits,
        group_size: common.group_size,
        quantizer: common.quantizer,
        variant: common.variant,
        lora_position: common.lora_position,
        coef: common.coef,
        coef_mult: common.coef_mult,
        out: common.out.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(cfg.out_dir.clone(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Wall-clock timing lives in its own file, outside every hashed output.
fn write_timing(cfg: &ExperimentConfig, command: &str, started: Instant) -> Result<()> {
    let timing = serde_json::json!({
        "command": command,
        "wall_seconds": started.elapsed().as_secs_f64(),
    });
    write_file(&out_path(cfg, &format!("timing-{command}.json")), timing.to_string().as_bytes())
}

/// The provenance block embedded in artifacts and written beside reports:
/// build id, command, and the fully resolved configuration.
#[derive(Serialize)]
struct RunInfo<'a> {
    build: &'static str,
    command: &'a str,
    config: &'a ExperimentConfig,
}

fn run_info_bytes(cfg: &ExperimentConfig, command: &str) -> Vec<u8> {
    let info = RunInfo { build: BUILD_ID, command, config: cfg };
    let mut bytes = serde_json::to_vec_pretty(&info).expect("run info serializes");
    bytes.push(b'\n');
    bytes
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<TextDataset> {
    let path = Path::new(&cfg.dataset);
    if !path.exists() {
        return Err(Error::data(format!("corpus file '{}' does not exist", cfg.dataset)));
    }
    TextDataset::load(path)
}

/// Load the pretrained reference model, with an actionable error when the
/// pipeline is run out of order.
fn load_reference(cfg: &ExperimentConfig) -> Result<(ToyTransformer<f32>, Tokenizer)> {
    let path = out_path(cfg, "model.ulbq");
    if !path.exists() {
        return Err(Error::missing_artifact(
            format!("no pretrained model at {}", path.display()),
            "ulbq pretrain",
        ));
    }
    checkpoint::load_model(path)
}

/// The model must have been trained on the same alphabet the dataset
/// produces, or every token id would mean a different character.
fn check_alphabet(model_tok: &Tokenizer, ds: &TextDataset) -> Result<()> {
    if model_tok.alphabet() != ds.tokenizer.alphabet() {
        return Err(Error::config(format!(
            "checkpoint alphabet ({} chars) does not match the dataset alphabet ({} chars); \
             was the model trained on a different corpus?",
            model_tok.vocab(),
            ds.tokenizer.vocab()
        )));
    }
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig, started: Instant) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let mut rng = Rng::stream(cfg.seed, "init");
    let model: ToyTransformer<f32> =
        ToyTransformer::init(cfg.model_config(ds.tokenizer.vocab()), &mut rng)?;
    let report = pretrain(&model, &ds, &cfg.pretrain_config())?;

    ensure_out_dir(cfg)?;
    let model_path = out_path(cfg, "model.ulbq");
    checkpoint::save_model(&model, &ds.tokenizer, &model_path)?;

    #[derive(Serialize)]
    struct PretrainOutput<'a> {
        build: &'static str,
        config: &'a ExperimentConfig,
        steps_run: usize,
        final_train_loss: f64,
        valid_nll: f64,
    }
    let out = PretrainOutput {
        build: BUILD_ID,
        config: cfg,
        steps_run: report.steps_run,
        final_train_loss: report.final_train_loss,
        valid_nll: report.valid_nll,
    };
    write_file(
        &out_path(cfg, "pretrain.json"),
        serde_json::to_string_pretty(&out).expect("report serializes").as_bytes(),
    )?;
    write_timing(cfg, "pretrain", started)?;
    println!(
        "pretrained {} steps: train loss {:.4}, valid nll {:.4} -> {}",
        report.steps_run,
        report.final_train_loss,
        report.valid_nll,
        model_path.display()
    );
    Ok(())
}

fn cmd_saliency(cfg: &ExperimentConfig, started: Instant) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (model, tok) = load_reference(cfg)?;
    check_alphabet(&tok, &ds)?;
    let map = model_saliency(&model, &ds, cfg.saliency.samples, cfg.saliency.seq_len, cfg.seed)?;

    ensure_out_dir(cfg)?;
    let map_path = out_path(cfg, "saliency.ulbq");
    checkpoint::save_saliency(&map, &map_path)?;

    #[derive(Serialize)]
    struct SaliencyOutput<'a> {
        build: &'static str,
        config: &'a ExperimentConfig,
        samples_used: usize,
        dropped_samples: usize,
        layers: usize,
    }
    let out = SaliencyOutput {
        build: BUILD_ID,
        config: cfg,
        samples_used: map.samples_used,
        dropped_samples: map.dropped_samples,
        layers: map.entries().len(),
    };
    write_file(
        &out_path(cfg, "saliency.json"),
        serde_json::to_string_pretty(&out).expect("report serializes").as_bytes(),
    )?;
    write_timing(cfg, "saliency", started)?;
    println!(
        "sensitivity over {} layers from {} samples ({} dropped) -> {}",
        out.layers,
        map.samples_used,
        map.dropped_samples,
        map_path.display()
    );
    Ok(())
}

fn cmd_quantize(cfg: &ExperimentConfig, started: Instant) -> Result<()> {
    let (mut model, tok) = load_reference(cfg)?;
    let calib = cfg.calibration_config();
    attach_quantizers(&mut model, &calib)?;

    ensure_out_dir(cfg)?;
    let path = out_path(cfg, "quantized.ulbq");
    let extra = vec![("run_info".to_string(), run_info_bytes(cfg, "quantize"))];
    checkpoint::save_quantized(&model, &tok, &extra, &path)?;
    write_timing(cfg, "quantize", started)?;
    println!(
        "quantized {} layers ({} at {} bits, groups of {}) -> {}",
        model.quantizable_names().len(),
        calib.quantizer,
        calib.bits,
        calib.group,
        path.display()
    );
    Ok(())
}

fn cmd_calibrate(cfg: &ExperimentConfig, started: Instant) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (mut model, tok) = load_reference(cfg)?;
    check_alphabet(&tok, &ds)?;
    let calib = cfg.calibration_config();

    let map = if calib.variant == Variant::Saliency {
        let path = out_path(cfg, "saliency.ulbq");
        if !path.exists() {
            return Err(Error::missing_artifact(
                format!("variant 'saliency' needs a sensitivity map, none at {}", path.display()),
                "ulbq saliency",
            ));
        }
        Some(checkpoint::load_saliency(path)?)
    } else {
        None
    };

    let report = calibrate_model(&mut model, &ds, map.as_ref(), &calib)?;

    ensure_out_dir(cfg)?;
    let path = out_path(cfg, "calibrated.ulbq");
    let extra = vec![("run_info".to_string(), run_info_bytes(cfg, "calibrate"))];
    checkpoint::save_quantized(&model, &tok, &extra, &path)?;
    write_file(&out_path(cfg, "calibration.csv"), report.csv().as_bytes())?;
    write_file(&out_path(cfg, "calibration.json"), report.summary_json(&calib).as_bytes())?;
    write_timing(cfg, "calibrate", started)?;

    let rollbacks = report.blocks.iter().filter(|b| b.rolled_back).count();
    println!(
        "calibrated {} blocks ({} rolled back) in {:.1}s -> {}",
        report.blocks.len(),
        rollbacks,
        report.wall_seconds,
        path.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, args: &EvalArgs, started: Instant) -> Result<()> {
    let ds = load_dataset(cfg)?;
    if !args.artifact.exists() {
        return Err(Error::missing_artifact(
            format!("no artifact at {}", args.artifact.display()),
            "ulbq pretrain (or quantize/calibrate)",
        ));
    }
    let kind = checkpoint::artifact_kind(&args.artifact)?;
    let (model, tok): (ToyTransformer<f32>, Tokenizer) = match kind.as_str() {
        "model" => checkpoint::load_model(&args.artifact)?,
        "quantized" => {
            let (m, t, _) = checkpoint::load_quantized(&args.artifact)?;
            (m, t)
        }
        other => {
            return Err(Error::corrupt(format!(
                "cannot evaluate an artifact of kind '{other}'"
            )))
        }
    };
    check_alphabet(&tok, &ds)?;

    let split_tokens = match cfg.eval.split.as_str() {
        "train" => ds.train_tokens(),
        "valid" => ds.valid_tokens(),
        _ => ds.test_tokens(),
    };
    let tokens = if cfg.eval.max_tokens > 0 && cfg.eval.max_tokens < split_tokens.len() {
        &split_tokens[..cfg.eval.max_tokens]
    } else {
        split_tokens
    };

    let default_id = if kind == "model" {
        "fp".to_string()
    } else {
        args.artifact
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "artifact".to_string())
    };
    let id = args.id.clone().unwrap_or(default_id);
    let dataset_id = format!("{}#{}", cfg.dataset, cfg.eval.split);
    let report = evaluate(&model, tokens, &id, &dataset_id)?;

    ensure_out_dir(cfg)?;
    let path = out_path(cfg, &format!("eval-{id}.json"));
    write_file(
        &path,
        serde_json::to_string_pretty(&report).expect("report serializes").as_bytes(),
    )?;
    write_timing(cfg, &format!("eval-{id}"), started)?;
    println!(
        "{}: perplexity {:.4} over {} tokens of {} -> {}",
        id,
        report.perplexity,
        report.token_count,
        dataset_id,
        path.display()
    );
    Ok(())
}

fn cmd_pack(cfg: &ExperimentConfig, args: &PackArgs) -> Result<()> {
    if !args.artifact.exists() {
        return Err(Error::missing_artifact(
            format!("no artifact at {}", args.artifact.display()),
            "ulbq quantize (or calibrate)",
        ));
    }
    let original = std::fs::read(&args.artifact)
        .map_err(|e| Error::io(args.artifact.display().to_string(), e))?;
    let container = checkpoint::Container::from_bytes(&original)?;
    // Canonical-encoding check: parsing and re-serializing must reproduce
    // the file byte for byte, or the artifact was not written by this
    // toolchain in a reproducible way.
    if container.to_bytes() != original {
        return Err(Error::corrupt(
            "artifact is valid but not canonically encoded; re-serialization differs",
        ));
    }

    #[derive(Serialize)]
    struct RecordStat {
        name: String,
        bits: u8,
        payload_bytes: usize,
        numel: usize,
    }
    #[derive(Serialize)]
    struct PackOutput {
        build: &'static str,
        artifact: String,
        verified: bool,
        container_bytes: usize,
        dense_equivalent_bytes: usize,
        compression_ratio: f64,
        records: Vec<RecordStat>,
    }

    let mut dense_bytes = 0usize;
    let mut records = Vec::new();
    for rec in &container.records {
        let numel: usize = rec.shape.iter().product();
        // Raw metadata records have no dense counterpart.
        if rec.bits != 0 {
            dense_bytes += numel * 4;
        }
        records.push(RecordStat {
            name: rec.name.clone(),
            bits: rec.bits,
            payload_bytes: rec.payload.len(),
            numel,
        });
    }
    let out = PackOutput {
        build: BUILD_ID,
        artifact: args.artifact.display().to_string(),
        verified: true,
        container_bytes: original.len(),
        dense_equivalent_bytes: dense_bytes,
        compression_ratio: original.len() as f64 / dense_bytes.max(1) as f64,
        records,
    };

    ensure_out_dir(cfg)?;
    let path = out_path(cfg, "pack.json");
    write_file(&path, serde_json::to_string_pretty(&out).expect("report serializes").as_bytes())?;
    println!(
        "verified {} ({} bytes, {:.2}x the dense {} bytes) -> {}",
        args.artifact.display(),
        out.container_bytes,
        out.compression_ratio,
        out.dense_equivalent_bytes,
        path.display()
    );
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig, args: &ReportArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| Error::corrupt(format!("{} is not an eval report: {e}", path.display())))?;
        reports.push(report);
    }
    let csv = compare(&reports, &args.fp, &args.base)?;

    ensure_out_dir(cfg)?;
    let path = out_path(cfg, "report.csv");
    write_file(&path, csv.as_bytes())?;
    print!("{csv}");
    println!("-> {}", path.display());
    Ok(())
}
