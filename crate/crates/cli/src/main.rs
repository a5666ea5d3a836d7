use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imlx::config::{Profile, RunConfig, SynthSettings};
use imlx::pipeline::{self, RunLayout};
use imlx::taxonomy::ViewKind;
use imlx::trainer::thread_cap_from_env;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Multi-label chest-film classification with a five-member CNN ensemble.
#[derive(Parser)]
#[command(name = "imlx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground-truth boxes.
    Synth(SynthArgs),
    /// Clean lung masks, crop and resize every image.
    Preprocess(RunArgs),
    /// Filter rare labels and split patients into train/val/test.
    Split(RunArgs),
    /// Train the five ensemble members.
    Train(RunArgs),
    /// Write per-member test probabilities.
    Predict(RunArgs),
    /// Aggregate member predictions (CTP, PTC-lw, PTC-mode).
    Ensemble(RunArgs),
    /// Per-label AUC and F1 tables for members and ensembles.
    Evaluate(RunArgs),
    /// Grad-CAM heat maps and overlays for test images.
    Explain(RunArgs),
    /// Every stage in order.
    Pipeline(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 128)]
    side: usize,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    view: Option<ViewKind>,
    /// Binarization threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Run directory; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> imlx::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(PathBuf::from("."), Profile::Desk),
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(v) = self.view {
            cfg.view = v;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if let Some(o) = &self.out {
            let abs = std::path::absolute(o).map_err(|e| imlx::Error::Invalid(e.to_string()))?;
            cfg.output = Some(abs.display().to_string());
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> imlx::Result<()> {
    let threads = thread_cap_from_env()?;
    let (cfg, stage) = match &cli.command {
        Command::Synth(a) => {
            let mut cfg = RunConfig::new(PathBuf::from("."), Profile::Desk);
            cfg.seed = Some(a.seed);
            cfg.synth = Some(SynthSettings {
                count: a.count,
                side: a.side,
            });
            cfg.output = Some(a.out.display().to_string());
            let corpus = imlx::dataset::synth_generate(
                &imlx::dataset::SynthConfig::imbalanced(a.count, a.side, a.seed),
                &a.out,
            )?;
            println!("wrote {} images to {}", corpus.records.len(), a.out.display());
            pipeline::write_record(&cfg, &RunLayout::new(&a.out), "synth")?;
            return Ok(());
        }
        Command::Preprocess(a) => (a.config()?, "preprocess"),
        Command::Split(a) => (a.config()?, "split"),
        Command::Train(a) => (a.config()?, "train"),
        Command::Predict(a) => (a.config()?, "predict"),
        Command::Ensemble(a) => (a.config()?, "ensemble"),
        Command::Evaluate(a) => (a.config()?, "evaluate"),
        Command::Explain(a) => (a.config()?, "explain"),
        Command::Pipeline(a) => (a.config()?, "pipeline"),
    };
    let layout = RunLayout::new(cfg.output_dir()?);
    match stage {
        "preprocess" => {
            let rows = pipeline::stage_preprocess(&cfg, &layout, threads)?;
            let warned = rows.iter().filter(|r| !r.warnings.is_empty()).count();
            println!("preprocessed {} images ({warned} with warnings)", rows.len());
        }
        "split" => {
            cfg.seed()?;
            let data = pipeline::stage_split(&cfg, &layout)?;
            println!(
                "{} samples, {} labels: {}",
                data.records.len(),
                data.labels().len(),
                data.labels().join(", ")
            );
        }
        "train" => {
            cfg.seed()?;
            for ck in pipeline::stage_train(&cfg, &layout, threads)? {
                println!(
                    "{}: best epoch {} of {}, val loss {:.4}",
                    ck.member.name(),
                    ck.best_epoch,
                    ck.epochs_run(),
                    ck.best_val_loss
                );
            }
        }
        "predict" => {
            let m = pipeline::stage_predict(&cfg, &layout)?;
            println!("wrote predictions of {} members", m.len());
        }
        "ensemble" => {
            pipeline::stage_ensemble(&cfg, &layout)?;
            println!("wrote {}", layout.root().join("ensemble").display());
        }
        "evaluate" => print_table(&pipeline::stage_evaluate(&cfg, &layout)?),
        "explain" => {
            let reports = pipeline::stage_explain(&cfg, &layout)?;
            println!("wrote {} reports to {}", reports.len(), layout.explain_dir().display());
        }
        _ => {
            let summary = pipeline::run_pipeline(&cfg, threads)?;
            print_table(&summary.table);
            if let Some(loc) = summary.localization {
                println!("localization: {}/{} true positives", loc.hits(), loc.cases.len());
            }
            return Ok(());
        }
    }
    pipeline::write_record(&cfg, &layout, stage)?;
    Ok(())
}

fn print_table(table: &imlx::metrics::ResultTable) {
    for s in &table.systems {
        println!(
            "{:<10} global AUC {:.4}  global F1 {:.4}  Hamming {:.4}",
            s.name, s.global_auc, s.global_f1, s.hamming_loss
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
