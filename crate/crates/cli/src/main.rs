use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segcompress::checkpoint::Checkpoint;
use segcompress::data::{class_names, write_dataset};
use segcompress::model::{evaluate, train, write_trace_csv, TinySegNet};
use segcompress::pipeline::{loss_sweep, prepare_data, run_pipeline, PipelineConfig};
use segcompress::prune::{apply_mask, generate_mask, pruned_size_mb};
use segcompress::quant::{ptq_checkpoint, LayerFilter};
use segcompress::{Error, Result};

/// Train, prune and quantize a small segmentation model under a size budget.
#[derive(Parser)]
#[command(name = "segcompress", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed applied to data, initialisation, training and random pruning.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as PPM/PGM files with a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a baseline model; writes baseline.csgc and trace.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the configured validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Prune a checkpoint with the configured method and amount.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured amount.
        #[arg(long)]
        amount: Option<f64>,
    },
    /// Quantize the weights of a checkpoint to uint8.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write the report.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare losses over several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// Returns whether the size budget was exceeded.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let data = prepare_data(&cfg)?;
            let all: Vec<_> = data.train.into_iter().chain(data.val).collect();
            let manifest = write_dataset(&out, &all)?;
            println!("wrote {} scenes, manifest {}", all.len(), manifest.display());
        }
        Command::Train { common, out } => {
            let cfg = common.load()?;
            let data = prepare_data(&cfg)?;
            let mut net = TinySegNet::<f32>::new(cfg.features, cfg.data.synth.classes, cfg.train.seed)?;
            let trace = train(&mut net, &data.train, &data.val, &cfg.train, &cfg.loss)?;
            write(&out.join("trace.csv"), write_trace_csv(&trace, cfg.data.synth.classes).as_bytes())?;
            let ckpt = net.to_checkpoint();
            write(&out.join("baseline.csgc"), &ckpt.encode())?;
            if let Some(last) = trace.last() {
                println!("epoch {}: mIoU {:.3}", last.epoch, last.miou);
            }
            println!("{} parameters, {:.6} MB", ckpt.count_params(), ckpt.size_mb());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let net = TinySegNet::from_checkpoint(&ckpt)?;
            let data = prepare_data(&cfg)?;
            let cm = evaluate(&net, &data.val, cfg.train.batch_size)?;
            for (name, iou) in class_names(net.classes()).iter().zip(cm.iou_per_class()) {
                match iou {
                    Some(v) => println!("{name:<12} {v:.3}"),
                    None => println!("{name:<12} -"),
                }
            }
            println!("mIoU         {:.3}", cm.miou(cfg.train.include_background)?);
            println!("size         {:.6} MB", ckpt.size_mb());
            return Ok(ckpt.size_mb() > cfg.max_mb);
        }
        Command::Prune {
            common,
            checkpoint,
            out,
            amount,
        } => {
            let cfg = common.load()?;
            let mut spec = cfg
                .prune
                .ok_or_else(|| Error::InvalidArgument("pruning is disabled in the configuration".into()))?
                .spec;
            if let Some(a) = amount {
                spec.amount = a;
            }
            let ckpt = Checkpoint::load(&checkpoint)?;
            let pruned = apply_mask(&ckpt, &generate_mask(&ckpt, &spec)?)?;
            write(&out, &pruned.encode())?;
            let mb = pruned_size_mb(ckpt.size_mb(), spec.amount);
            println!("{} at {}: {:.6} MB", spec.method, spec.amount, mb);
            return Ok(mb > cfg.max_mb);
        }
        Command::Quantize { common, checkpoint, out } => {
            let cfg = common.load()?;
            let filter = cfg.quant.unwrap_or_else(LayerFilter::all);
            let q = ptq_checkpoint(&Checkpoint::load(&checkpoint)?, &filter)?;
            write(&out, &q.encode())?;
            println!("{:.6} MB", q.size_mb());
            return Ok(q.size_mb() > cfg.max_mb);
        }
        Command::Pipeline { common, out } => {
            let outcome = run_pipeline(&common.load()?, &out)?;
            print!("{}", outcome.report);
            return Ok(outcome.budget_exceeded);
        }
        Command::Sweep { common, out } => {
            let cfg = common.load()?;
            let report = loss_sweep(&cfg, &cfg.sweep.losses, &cfg.sweep.seeds)?;
            write(&out.join("sweep.txt"), report.to_text().as_bytes())?;
            write(&out.join("sweep.csv"), report.to_csv().as_bytes())?;
            print!("{}", report.to_text());
        }
    }
    Ok(false)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("size budget exceeded");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
