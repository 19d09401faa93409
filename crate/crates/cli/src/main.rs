use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use tqsel::config::ExperimentConfig;
use tqsel::corpus::{make_toy_corpus, Corpus};
use tqsel::evaluate::evaluate;
use tqsel::export::export_trajectory;
use tqsel::synth::{synthesize_dataset, SynthRequest};
use tqsel::train::train;

#[derive(Parser)]
#[command(name = "tqsel", about = "Text-queried sound event localization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the built-in 8-class toy corpus
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        clips_per_class: usize,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 16_000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render spatial scenes from a corpus split into a dataset directory
    Synth {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 16_000)]
        sample_rate: u32,
    },
    /// Train a model from a config file and two manifests
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest and write a JSON report
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Export ground-truth vs predicted azimuths for one moving example
    ExportTraj {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        example: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck,
}

fn main() -> Result<()> {
    tqsel::init_threads();
    let cli = Cli::parse();
    match cli.command {
        Command::MakeCorpus { out, clips_per_class, duration, sample_rate, seed } => {
            let corpus = make_toy_corpus(&out, clips_per_class, duration, sample_rate, seed)?;
            println!("wrote {} clips to {}", corpus.entries.len(), out.display());
        }
        Command::Synth { corpus, protocol, count, seed, out, split, duration, sample_rate } => {
            let corpus = Corpus::load(&corpus)?;
            let req = SynthRequest {
                duration_s: duration,
                ..SynthRequest::new(
                    tqsel_core::room::Protocol::parse(&protocol)?,
                    count,
                    seed,
                    &split,
                )
            };
            let records = synthesize_dataset(&corpus, &req, sample_rate, &out)?;
            println!("wrote {} examples to {}", records.len(), out.display());
        }
        Command::Train { config, train: train_m, eval: eval_m, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = train(&cfg, &train_m, &eval_m, &out)?;
            println!(
                "trained {} epochs, best eval MAE {:.2} deg at epoch {}, checkpoint {}",
                outcome.epochs_run,
                outcome.best_eval_mae,
                outcome.best_epoch,
                outcome.ckpt_path.display()
            );
        }
        Command::Eval { ckpt, manifest, report } => {
            let r = evaluate(&ckpt, &manifest, Some(&report))?;
            println!(
                "MAE {:.2} deg over {} examples, report {}",
                r.mae_deg,
                r.num_examples,
                report.display()
            );
        }
        Command::ExportTraj { ckpt, manifest, example, out } => {
            let rows = export_trajectory(&ckpt, &manifest, &example, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Command::Gradcheck => {
            print!("{}", tqsel::gradcheck::run_and_report()?);
        }
    }
    Ok(())
}
