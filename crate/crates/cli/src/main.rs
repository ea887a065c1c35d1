use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use tee_cnn::enclave::write_trace;
use tee_cnn::experiment::{
    emit_report, explain_plan, run_experiment, run_model, ExperimentConfig, ReportFormat, Scheme,
};
use tee_cnn::model::{load_architecture, WeightSource};
use tee_cnn::{zoo, Codec, EnclaveConfig};

const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CodecArg {
    Raw32,
    Fp16,
    Lossy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
}

/// Runs a CNN layer by layer inside a simulated secure-memory enclave and
/// reports paging behaviour per layer.
#[derive(Debug, Parser)]
#[command(name = "tee-bench", version)]
struct Args {
    /// Model description file, or one of: vgg16, vgg-large, vgg-large-desk.
    #[arg(long)]
    model: Option<String>,

    /// Secure memory in MiB [default: 7, or 28 with --full-scale].
    #[arg(long)]
    enclave_mb: Option<f64>,

    #[arg(long, default_value_t = 4096)]
    page_bytes: u64,

    /// unmodified, yplane, channel or hybrid.
    #[arg(long, default_value = "hybrid")]
    scheme: Scheme,

    #[arg(long, value_enum, default_value_t = CodecArg::Raw32)]
    fc_codec: CodecArg,

    /// Bits per weight for the lossy codec (2..=10).
    #[arg(long, default_value_t = 5)]
    bits: u8,

    /// Decode workers for streamed fully connected layers.
    #[arg(long, default_value_t = 2)]
    workers: usize,

    /// Seed for the input tensor.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,

    /// Print the partitioning plan for each conv layer and exit.
    #[arg(long)]
    explain: bool,

    /// Write the page access trace to this file.
    #[arg(long)]
    trace_out: Option<PathBuf>,

    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Use the full-size VGG-Large and a 28 MiB enclave by default.
    #[arg(long)]
    full_scale: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(args: &Args) -> Result<ExitCode> {
    let model = args
        .model
        .clone()
        .unwrap_or_else(|| if args.full_scale { "vgg-large" } else { "vgg-large-desk" }.to_string());
    let mib = args.enclave_mb.unwrap_or(if args.full_scale { 28.0 } else { 7.0 });
    if !(mib.is_finite() && mib > 0.0) {
        bail!("--enclave-mb must be positive, got {mib}");
    }
    let enclave = EnclaveConfig::new((mib * MIB).round() as u64, args.page_bytes);
    enclave.validate()?;

    let fc_codec = match args.fc_codec {
        CodecArg::Raw32 => Codec::Raw32,
        CodecArg::Fp16 => Codec::Fp16,
        CodecArg::Lossy => Codec::lossy(args.bits)?,
    };
    let cfg = ExperimentConfig {
        scheme: args.scheme,
        fc_codec,
        workers: args.workers,
        seed: args.seed,
        record_trace: args.trace_out.is_some(),
        ..ExperimentConfig::new(&model, enclave)
    };

    let builtin = zoo::builtin(&model).filter(|_| !Path::new(&model).exists());

    if args.explain {
        let arch = match &builtin {
            Some(arch) => arch.clone(),
            None => load_architecture(Path::new(&model)).with_context(|| format!("loading {model}"))?,
        };
        let text = explain_plan(&arch, enclave.secure_bytes, cfg.footprint_model())?;
        write_output(args.out.as_deref(), &text)?;
        return Ok(ExitCode::SUCCESS);
    }

    let experiment = match &builtin {
        Some(arch) => {
            let seed = match arch.weights {
                WeightSource::Random { seed } => seed,
                _ => 0,
            };
            run_model(&arch.materialize_random(seed)?, &cfg)?
        }
        None => run_experiment(&cfg).with_context(|| format!("running {model}"))?,
    };

    let format = match args.format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Markdown => ReportFormat::Markdown,
    };
    write_output(args.out.as_deref(), &emit_report(&experiment.layers, format))?;

    if let (Some(path), Some(trace)) = (&args.trace_out, &experiment.trace) {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        write_trace(&mut w, trace)?;
        w.flush()?;
    }

    eprintln!("{}", serde_json::to_string_pretty(&experiment.summary)?);
    if experiment.summary.infeasible_layers > 0 {
        eprintln!(
            "{} layer(s) do not fit in {mib} MiB; see required_bytes in the report",
            experiment.summary.infeasible_layers
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}
