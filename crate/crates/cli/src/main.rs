use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use medembed::linear::SvmLoss;
use medembed::kernel::KernelSpec;
use medembed::model::TrainedModel;
use medembed::pipeline::{self, Config, Overrides};
use medembed::select::{CellConfig, Family};
use medembed::{Error, Result};

#[derive(Parser)]
#[command(name = "medembed", version, about = "Classify medical images from frozen encoder embeddings")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preprocessing preset, replacing the one in the config.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Encoder id or path to an .onnx graph.
    #[arg(long, global = true)]
    encoder: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Leave timings and cache counters out of run_record.json.
    #[arg(long, global = true)]
    canonical: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Load the manifest, impute absent labels and split.
    Ingest,
    /// Compute (or reuse cached) embeddings for both splits.
    Embed,
    /// Fit a single configuration on the training split.
    Train(TrainArgs),
    /// Cross-validated grid search and refit of the winner.
    Gridsearch,
    /// Score the saved model on the test split.
    Evaluate {
        /// Model file (default: <out>/model.bin).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Build run_record.json from stage artifacts.
    Report,
    /// All stages end to end.
    Run,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    c: f64,
    /// Classifier family (default: the configured one).
    #[arg(long)]
    family: Option<String>,
    /// hinge or squared-hinge (linear SVM).
    #[arg(long)]
    loss: Option<String>,
    /// linear, rbf-scale, rbf-auto or rbf-<gamma> (kernel SVM).
    #[arg(long)]
    kernel: Option<String>,
}

fn cell_from(args: &TrainArgs, cfg: &Config) -> Result<CellConfig> {
    let family = match &args.family {
        Some(f) => f.parse::<Family>()?,
        None => cfg.family,
    };
    let c = args.c;
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("C must be positive, got {c}")));
    }
    Ok(match family {
        Family::Logreg => CellConfig::Logreg { c },
        Family::LinearSvm => {
            let loss = match &args.loss {
                Some(l) => l.parse::<SvmLoss>()?,
                None => SvmLoss::SquaredHinge,
            };
            CellConfig::LinearSvm { c, loss }
        }
        Family::KernelSvm => {
            let kernel = match &args.kernel {
                Some(k) => k.parse::<KernelSpec>()?,
                None => KernelSpec::rbf(medembed::kernel::GammaMode::Scale),
            };
            CellConfig::KernelSvm { c, kernel }
        }
    })
}

fn execute(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let overrides = Overrides {
        preset: common.preset.clone(),
        encoder: common.encoder.clone(),
        seed: common.seed,
        cache_dir: common.cache_dir.clone(),
        out_dir: common.out.clone(),
    };
    let cfg = Config::load_with(path, &overrides)?;

    pipeline::with_pool(&cfg, || -> Result<()> {
        match &cli.command {
            Command::Ingest => {
                let p = pipeline::stage_ingest(&cfg)?;
                println!("{}: {} train / {} test, {} labels imputed", cfg.dataset, p.train.len(), p.test.len(), p.imputed);
            }
            Command::Embed => {
                let p = pipeline::stage_ingest(&cfg)?;
                let e = pipeline::stage_embed(&cfg, &p)?;
                println!(
                    "{} embeddings of width {} ({} cached, {} computed, {} encoder invocations) -> {}",
                    e.matrix.rows,
                    e.matrix.dim,
                    e.stats.cache_hits,
                    e.stats.computed,
                    e.stats.encoder_invocations,
                    cfg.cache_path().display()
                );
            }
            Command::Train(args) => {
                let cell = cell_from(args, &cfg)?;
                let p = pipeline::stage_ingest(&cfg)?;
                let e = pipeline::stage_embed(&cfg, &p)?;
                pipeline::stage_train(&cfg, &p, &e, &cell)?;
                println!("trained {} {} -> {}", cell.family().name(), cell.label(), cfg.artifact("model.bin").display());
            }
            Command::Gridsearch => {
                let p = pipeline::stage_ingest(&cfg)?;
                let e = pipeline::stage_embed(&cfg, &p)?;
                let (cv, _) = pipeline::stage_gridsearch(&cfg, &p, &e)?;
                let w = cv.winner_cell();
                println!("winner {} {}: mean CV AUC {:.4} ± {:.4}", cv.family.name(), w.config.label(), w.mean, w.std);
            }
            Command::Evaluate { model } => {
                let model_path = model.clone().unwrap_or_else(|| cfg.artifact("model.bin"));
                let m = TrainedModel::load(&model_path).map_err(|e| e.in_stage("evaluate"))?;
                let p = pipeline::stage_ingest(&cfg)?;
                let e = pipeline::stage_embed(&cfg, &p)?;
                let r = pipeline::stage_evaluate(&cfg, &p, &e, &m)?;
                println!(
                    "test AUC {:.4}, accuracy {:.4}, F1 {:.4} on {} samples",
                    r.auc, r.accuracy, r.f1, r.n
                );
            }
            Command::Report => {
                let p = pipeline::stage_ingest(&cfg)?;
                let r = pipeline::report_from_artifacts(&cfg, &p, common.canonical)?;
                print_record(&r);
            }
            Command::Run => {
                let r = pipeline::run_pipeline(&cfg, common.canonical)?;
                print_record(&r);
            }
        }
        Ok(())
    })?
}

fn print_record(r: &medembed::report::RunRecord) {
    println!(
        "{} / {} / {} {}: test AUC {:.4}",
        r.dataset, r.encoder_id, r.family, r.winning_label, r.metrics.auc
    );
    if let Some(b) = &r.benchmark {
        println!("benchmark {:.3}, delta {:+.4}", b.benchmark, b.delta);
    }
    if let Some(rt) = &r.runtime {
        println!(
            "encoder invocations {}, cached {}, computed {}",
            rt.encoder_invocations, rt.cache_hits, rt.embeddings_computed
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
