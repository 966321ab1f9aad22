//! `sparseq`: train a dense desk ViT, prune it to 2:4, quantize it with
//! distillation, and inspect the results.
//!
//! Exit codes: 0 success, 1 usage or missing prerequisite, 2 malformed
//! file, 3 training divergence.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sparseq::data::{load_checkpoint, save_checkpoint, Dataset};
use sparseq::distill::LabelMode;
use sparseq::format::{storage_saving, ElementFormat, PackedSparseMatrix};
use sparseq::pipeline::{
    compression_report, evaluate, prune_workflow, qat_workflow, train_dense, CompressionArtifacts, MetricsLog,
    QuantArtifact,
};
use sparseq::quant::BitWidth;
use sparseq::sparsity::validate_mask;
use sparseq::vit::{ratio_f64, ViTModel};

use config::{CliConfig, Overrides, Workflow};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<sparseq::Error> for CliError {
    fn from(e: sparseq::Error) -> Self {
        use sparseq::Error as E;
        let code = match e {
            E::Format { .. } | E::Version { .. } | E::Io(_) => 2,
            E::Training(_) => 3,
            _ => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { code: 2, msg: e.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sparseq", version, about = "2:4 sparse + INT8/INT4 ViT compression on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    fmt: Option<FmtArg>,
    #[arg(long, global = true)]
    alpha: Option<f32>,
    #[arg(long, global = true)]
    beta: Option<f32>,
    #[arg(long, global = true)]
    gamma: Option<f32>,
    /// Weight every stage's QAT feature loss equally.
    #[arg(long, global = true)]
    no_weight_factor: bool,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Epochs for this command's workflow.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the dense FP32 baseline.
    TrainDense,
    /// Select masks and fine-tune the sparse model against the dense one.
    Prune,
    /// Quantization-aware fine-tuning of the sparse model.
    Qat,
    /// Top-1/top-5 of a checkpoint, or of every artifact in the output
    /// directory.
    Eval { checkpoint: Option<PathBuf> },
    /// Print the header, pattern check and storage saving of a packed
    /// weight file.
    InspectPack { file: PathBuf },
    /// Parameter/FLOP equivalents and accuracies of the artifacts.
    Report {
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FmtArg {
    Int8,
    Int4,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Supervised,
    Unsupervised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Tsv,
}

/// Pruning-stage feature losses, needed to weight the QAT stages.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PruneSummary {
    stages: Vec<usize>,
    stage_losses: Vec<f32>,
}

fn fmt_tag(b: BitWidth) -> &'static str {
    match b {
        BitWidth::Int8 => "int8",
        BitWidth::Int4 => "int4",
    }
}

struct Layout<'a>(&'a Path);

impl Layout<'_> {
    fn dense(&self) -> PathBuf {
        self.0.join("dense.ckpt")
    }
    fn sparse(&self, b: BitWidth) -> PathBuf {
        self.0.join(format!("sparse-{}.ckpt", fmt_tag(b)))
    }
    fn prune_summary(&self, b: BitWidth) -> PathBuf {
        self.0.join(format!("sparse-{}.json", fmt_tag(b)))
    }
    fn qat(&self, b: BitWidth) -> PathBuf {
        self.0.join(format!("qat-{}.ckpt", fmt_tag(b)))
    }
    fn packs(&self, b: BitWidth) -> PathBuf {
        self.0.join(format!("pack-{}", fmt_tag(b)))
    }
    fn metrics(&self, name: &str) -> PathBuf {
        self.0.join(format!("metrics-{name}.jsonl"))
    }
}

fn require(path: &Path, produced_by: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "missing artifact {}; run `sparseq {produced_by}` first",
            path.display()
        )))
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError {
        code: 2,
        msg: format!("cannot write {}: {e}", path.display()),
    })
}

fn load_model(path: &Path, cfg: &CliConfig) -> Result<ViTModel, CliError> {
    let m = load_checkpoint(path)?;
    if m.config() != &cfg.model {
        return Err(CliError::usage(format!(
            "{} was trained with a different model configuration",
            path.display()
        )));
    }
    Ok(m)
}

fn top1(m: &ViTModel, test: &Dataset) -> Result<f64, CliError> {
    Ok(evaluate(m, test, 256)?.top1)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let workflow = match cli.command {
        Command::TrainDense => Some(Workflow::Dense),
        Command::Prune => Some(Workflow::Prune),
        Command::Qat => Some(Workflow::Qat),
        _ => None,
    };
    if cli.epochs.is_some() && workflow.is_none() {
        return Err(CliError::usage("--epochs applies to train-dense, prune and qat"));
    }
    let overrides = Overrides {
        seed: cli.seed,
        fmt: cli.fmt.map(|f| match f {
            FmtArg::Int8 => BitWidth::Int8,
            FmtArg::Int4 => BitWidth::Int4,
        }),
        alpha: cli.alpha,
        beta: cli.beta,
        gamma: cli.gamma,
        no_weight_factor: cli.no_weight_factor,
        mode: cli.mode.map(|m| match m {
            ModeArg::Supervised => LabelMode::Supervised,
            ModeArg::Unsupervised => LabelMode::Unsupervised,
        }),
        epochs: workflow.zip(cli.epochs),
        out: cli.out.clone(),
    };
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    cfg.apply(&overrides);

    if let Command::InspectPack { file } = &cli.command {
        return inspect_pack(file);
    }
    cfg.validate()?;
    eprintln!(
        "effective config:\n{}",
        serde_json::to_string_pretty(&cfg).expect("config serializes")
    );
    let dir = Layout(&cfg.out);
    let fmt = cfg.pipeline.fmt;
    match &cli.command {
        Command::TrainDense => {
            std::fs::create_dir_all(&cfg.out).map_err(|e| CliError {
                code: 2,
                msg: format!("cannot create {}: {e}", cfg.out.display()),
            })?;
            let (train, test) = cfg.load_data()?;
            let mut log = MetricsLog::default();
            let m = train_dense(cfg.model.clone(), &train, Some(&test), &cfg.pipeline, &mut log)?;
            save_checkpoint(&m, &dir.dense())?;
            write(&dir.metrics("dense"), log.to_jsonl())?;
            println!("dense top-1 {:.2}%", top1(&m, &test)?);
        }
        Command::Prune => {
            require(&dir.dense(), "train-dense")?;
            let dense = load_model(&dir.dense(), &cfg)?;
            let (train, test) = cfg.load_data()?;
            let mut log = MetricsLog::default();
            let out = prune_workflow(&dense, &train, Some(&test), &cfg.pipeline, &mut log)?;
            save_checkpoint(&out.model, &dir.sparse(fmt))?;
            let summary = PruneSummary {
                stages: cfg.pipeline.stages.indices(cfg.model.stages.len()),
                stage_losses: out.stage_losses.clone(),
            };
            write(
                &dir.prune_summary(fmt),
                serde_json::to_string_pretty(&summary).expect("summary serializes"),
            )?;
            write(&dir.metrics(&format!("prune-{}", fmt_tag(fmt))), log.to_jsonl())?;
            println!("sparse ({}) top-1 {:.2}%", fmt_tag(fmt), top1(&out.model, &test)?);
        }
        Command::Qat => {
            require(&dir.sparse(fmt), &format!("prune --fmt {}", fmt_tag(fmt)))?;
            require(&dir.prune_summary(fmt), &format!("prune --fmt {}", fmt_tag(fmt)))?;
            let sparse = load_model(&dir.sparse(fmt), &cfg)?;
            let text = std::fs::read_to_string(dir.prune_summary(fmt))?;
            let summary: PruneSummary = serde_json::from_str(&text).map_err(|e| CliError {
                code: 2,
                msg: format!("{}: {e}", dir.prune_summary(fmt).display()),
            })?;
            if summary.stages != cfg.pipeline.stages.indices(cfg.model.stages.len()) {
                return Err(CliError::usage(
                    "stage selection differs from the one used for pruning; prune again",
                ));
            }
            let (train, test) = cfg.load_data()?;
            let mut log = MetricsLog::default();
            let out = qat_workflow(&sparse, &summary.stage_losses, &train, Some(&test), &cfg.pipeline, &mut log)?;
            save_checkpoint(&out.model, &dir.qat(fmt))?;
            let packs = dir.packs(fmt);
            std::fs::create_dir_all(&packs)?;
            for (name, p) in out.model.pack_layers(ElementFormat::from_bit_width(fmt))? {
                write(&packs.join(format!("{name}.spqz")), p.to_bytes())?;
            }
            write(&dir.metrics(&format!("qat-{}", fmt_tag(fmt))), log.to_jsonl())?;
            println!(
                "{} top-1 {:.2}% (stage factors {:?})",
                fmt_tag(fmt),
                top1(&out.model, &test)?,
                out.factors.factors
            );
        }
        Command::Eval { checkpoint } => {
            let (_, test) = cfg.load_data()?;
            let paths: Vec<PathBuf> = match checkpoint {
                Some(p) => {
                    require(p, "train-dense, prune or qat")?;
                    vec![p.clone()]
                }
                None => {
                    let mut all = vec![dir.dense()];
                    for b in [BitWidth::Int8, BitWidth::Int4] {
                        all.push(dir.sparse(b));
                        all.push(dir.qat(b));
                    }
                    all.retain(|p| p.is_file());
                    if all.is_empty() {
                        return Err(CliError::usage(format!(
                            "no checkpoints in {}; run `sparseq train-dense` first",
                            cfg.out.display()
                        )));
                    }
                    all
                }
            };
            for p in paths {
                let m = load_model(&p, &cfg)?;
                let acc = evaluate(&m, &test, 256)?;
                println!("{}\ttop1 {:.2}\ttop5 {:.2}", p.display(), acc.top1, acc.top5);
            }
        }
        Command::Report { format } => {
            let mut arts = CompressionArtifacts::cost_only(cfg.model.clone());
            let any = dir.dense().is_file()
                || [BitWidth::Int8, BitWidth::Int4]
                    .iter()
                    .any(|&b| dir.sparse(b).is_file() || dir.qat(b).is_file());
            if any {
                let (_, test) = cfg.load_data()?;
                let acc = |p: PathBuf| -> Result<Option<(ViTModel, f64)>, CliError> {
                    if !p.is_file() {
                        return Ok(None);
                    }
                    let m = load_model(&p, &cfg)?;
                    let t = top1(&m, &test)?;
                    Ok(Some((m, t)))
                };
                arts.dense_top1 = acc(dir.dense())?.map(|x| x.1);
                arts.sparse_top1 = acc(dir.sparse(BitWidth::Int8))?.map(|x| x.1);
                arts.quantized = Vec::new();
                for b in [BitWidth::Int8, BitWidth::Int4] {
                    let got = acc(dir.qat(b))?;
                    arts.quantized.push(QuantArtifact {
                        bits: b,
                        top1: got.as_ref().map(|x| x.1),
                        model: got.map(|x| x.0),
                    });
                }
            }
            let r = compression_report(&arts)?;
            match format {
                ReportFormat::Tsv => print!("{}", r.to_tsv()),
                ReportFormat::Text => print!("{}", r.to_text()),
            }
        }
        Command::InspectPack { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn inspect_pack(file: &Path) -> Result<(), CliError> {
    if !file.is_file() {
        return Err(CliError::usage(format!("{} does not exist", file.display())));
    }
    let bytes = std::fs::read(file)?;
    let p = PackedSparseMatrix::from_bytes(&bytes)?;
    let fmt = p.format();
    println!("file      {}", file.display());
    println!("format    {fmt}");
    println!("pattern   {:?}", p.pattern());
    println!("shape     {} x {}", p.rows(), p.cols());
    println!("nnz       {}", p.nnz());
    println!("values    {} bytes", p.values().len());
    println!("metadata  {} bytes", p.metadata().len());
    match p.quant() {
        Some(q) => println!("scales    {} ({} bits)", q.scales.len(), q.bits.bits()),
        None => println!("scales    none"),
    }
    let report = validate_mask(&p.mask()?);
    if report.is_legal() {
        println!("pattern check: valid");
    } else {
        println!("pattern check: {} violating groups", report.violations.len());
    }
    let s = storage_saving(p.rows() as u64, p.cols() as u64, fmt);
    println!("saving {:.2}%", 100.0 * ratio_f64(s));
    if report.is_legal() {
        Ok(())
    } else {
        Err(CliError {
            code: 2,
            msg: "pack violates its sparsity pattern".into(),
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPARSEQ_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
