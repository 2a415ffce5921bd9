use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kt::pairs::{GenOptions, SeedRange};
use kt::runner::{self, RunConfig};
use kt::trainer::RunOptions;
use kt::translators::Preset;
use kt::KtError;

/// Knowledge-translation workbench.
#[derive(Parser)]
#[command(name = "kt", version)]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a parameter-pair dataset.
    Generate {
        #[arg(long)]
        seeds: Option<SeedRange>,
        /// Dataset directory (default: generation.output).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Train a translator.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preset: small, base, large or wide.
        #[arg(long)]
        model: Option<Preset>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: bool,
    },
    /// Score translation and baselines on the evaluation hosts.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        translator: Option<PathBuf>,
        /// Comma-separated: translation, random-init, random-replacement, greedy, distilled, all.
        #[arg(long, default_value = "all")]
        method: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hosts: Option<usize>,
    },
    /// Studies beyond the main evaluation.
    #[command(subcommand)]
    Study(Study),
    /// Re-render plots and print a summary of a run directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct StudyIo {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Study {
    /// FLOPs-matched MLP, convolution and attention pilots.
    Pilot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[command(flatten)]
        io: StudyIo,
    },
    /// Hosts trained on a fraction of the images.
    IncompleteData {
        #[arg(long)]
        translator: PathBuf,
        #[command(flatten)]
        io: StudyIo,
    },
    /// Hosts retrained on USPS around frozen MNIST blocks.
    Usps {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        translator: PathBuf,
        #[command(flatten)]
        io: StudyIo,
    },
    /// Translation into MLP or attention target blocks.
    CrossArch {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        io: StudyIo,
    },
}

fn run(cli: Cli) -> kt::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .map_err(|e| KtError::Config(format!("thread pool: {e}")))?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.generation.jobs = cli.jobs.max(1);
    match cli.cmd {
        Command::Generate { seeds, out, channels } => {
            if let Some(s) = seeds {
                cfg.generation.seeds = s;
            }
            if let Some(o) = out {
                cfg.generation.output = o;
            }
            if let Some(c) = channels {
                cfg.generation.channels = c;
            }
            let data = runner::load_mnist()?;
            let ds = runner::cmd_generate(&cfg, &data, &GenOptions::default())?;
            println!("{} records in {} (digest {})", ds.len(), ds.dir.display(), ds.index.content_digest());
        }
        Command::Train { data, out, model, dropout, epochs, resume } => {
            if let Some(m) = model {
                cfg.translator.preset = m;
                cfg.translator.model = None;
            }
            if let Some(d) = dropout {
                cfg.training.dropout = d;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            let mnist = runner::load_mnist()?;
            let opts = RunOptions { resume, stop_after: None };
            let r = runner::cmd_train(&cfg, &data, &out, &mnist.test, opts)?;
            match (r.best_acc, r.best_epoch) {
                (Some(a), Some(e)) => println!("best eval accuracy {:.2}% at epoch {e}", 100.0 * a),
                _ => println!("no evaluation points recorded"),
            }
            println!("run directory {}", out.display());
        }
        Command::Eval { data, translator, method, out, hosts } => {
            if let Some(h) = hosts {
                cfg.evaluation.hosts = h;
            }
            let methods = runner::parse_methods(&method)?;
            let mnist = runner::load_mnist()?;
            for r in runner::cmd_eval(&cfg, &data, translator.as_deref(), &methods, &out, &mnist.test)? {
                println!("{:<20} mean {:6.2}%  best {:6.2}%", r.method.name(), 100.0 * r.mean, 100.0 * r.best);
            }
        }
        Command::Study(s) => study(&cfg, s)?,
        Command::Report { dir } => print!("{}", runner::cmd_report(&dir)?),
    }
    Ok(())
}

fn study(cfg: &RunConfig, s: Study) -> kt::Result<()> {
    match s {
        Study::Pilot { data, repeats, io } => {
            let r = runner::cmd_study_pilot(cfg, &data, repeats, &io.out)?;
            for run in &r.runs {
                let finals: Vec<String> =
                    run.curves.iter().map(|c| format!("{} {:.4e}", c.kind, c.losses.last().copied().unwrap_or(f64::NAN))).collect();
                println!("seed {}: {}", run.seed, finals.join(", "));
            }
            println!("mlp below attention in {} of {} seeds", r.mlp_below_attention, r.runs.len());
        }
        Study::IncompleteData { translator, io } => {
            let mnist = runner::load_mnist()?;
            let r = runner::cmd_study_incomplete(cfg, &translator, &mnist, &io.out)?;
            for p in r.points {
                println!("{:>5}%: translated {:.2}% random {:.2}% delta {:+.2}", p.percent, 100.0 * p.translated_mean, 100.0 * p.random_init_mean, 100.0 * p.delta);
            }
        }
        Study::Usps { data, translator, io } => {
            let mnist = runner::load_mnist()?;
            let r = runner::cmd_study_usps(cfg, &data, &translator, &mnist, &io.out)?;
            println!(
                "{} hosts: translated {:.2}% random {:.2}% improvement {:+.2}{}",
                r.hosts,
                100.0 * r.translated_mean,
                100.0 * r.random_init_mean,
                100.0 * r.improvement,
                if r.stand_in { " (stand-in images)" } else { "" }
            );
        }
        Study::CrossArch { data, io } => {
            let mnist = runner::load_mnist()?;
            let r = runner::cmd_study_cross_arch(cfg, &data, &mnist.test, &io.out)?;
            println!("{}: translation best {:.2}% random init {:.2}%", r.variant.name(), 100.0 * r.translation_best, 100.0 * r.random_init_mean);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
