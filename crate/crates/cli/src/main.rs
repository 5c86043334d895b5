use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protocurate::pipeline::{self, CurateOutputs, RunMode};
use protocurate::{EngineConfig, Error, MixtureSpec, ProjectionHead, Result};

#[derive(Parser)]
#[command(name = "protocurate", version, about = "Prototype-driven curation of paired embedding corpora")]
struct Cli {
    /// Log progress to stderr
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; absent keys keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<EngineConfig> {
        let mut config = match &self.config {
            Some(p) => EngineConfig::load(p)?,
            None => EngineConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.set("seed", &seed.to_string())?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic long-tailed corpus, its manifest and prompts
    Generate {
        /// Mixture spec as JSON (the manifest format); defaults otherwise
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sample_seed: Option<u64>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prompts_out: Option<PathBuf>,
    },
    /// Curate one pass over a corpus
    Curate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Selection CSV
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        proto_out: PathBuf,
        /// Per-iteration statistics as JSON
        #[arg(long)]
        stats_out: Option<PathBuf>,
        #[arg(long, default_value = "frozen")]
        mode: RunMode,
        /// Starting head for joint mode (seeded random otherwise)
        #[arg(long)]
        head: Option<PathBuf>,
        /// Trained head after a joint pass
        #[arg(long)]
        head_out: Option<PathBuf>,
        #[arg(long)]
        target_size: Option<usize>,
    },
    /// Train a projection head; joint curation first when no selection is given
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        selection: Option<PathBuf>,
        /// Head checkpoint
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_out: Option<PathBuf>,
        /// Selection made by the joint pass
        #[arg(long)]
        selection_out: Option<PathBuf>,
        #[arg(long)]
        target_size: Option<usize>,
    },
    /// Zero-shot classification and retrieval metrics
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        /// Metric report JSON
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class_out: Option<PathBuf>,
    },
    /// Density and label-distribution analysis bundle
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        selection: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

fn with_target(mut config: EngineConfig, target: Option<usize>) -> Result<EngineConfig> {
    if let Some(t) = target {
        config.set("target_subset_size", &t.to_string())?;
        config.validate()?;
    }
    Ok(config)
}

fn load_spec(path: &Path) -> Result<MixtureSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    MixtureSpec::from_json(&text)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, seed, sample_seed, n_samples, out, prompts_out } => {
            let mut spec = match spec {
                Some(p) => load_spec(&p)?,
                None => MixtureSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if sample_seed.is_some() {
                spec.sample_seed = sample_seed;
            }
            if let Some(n) = n_samples {
                spec.n_samples = n;
            }
            pipeline::generate(&spec, &out, prompts_out.as_deref())
        }
        Command::Curate { common, corpus, out, proto_out, stats_out, mode, head, head_out, target_size } => {
            let config = with_target(common.load()?, target_size)?;
            let init = head.as_deref().map(ProjectionHead::load).transpose()?;
            let outputs = CurateOutputs {
                selection: Some(&out),
                prototypes: Some(&proto_out),
                stats: stats_out.as_deref(),
                head: head_out.as_deref(),
            };
            let outcome = pipeline::curate(&config, &corpus, mode, init, &outputs)?;
            log::info!("selected {} samples", outcome.selection.len());
            Ok(())
        }
        Command::Train { common, corpus, selection, out, loss_out, selection_out, target_size } => {
            let config = with_target(common.load()?, target_size)?;
            let result = pipeline::train(
                &config,
                &corpus,
                selection.as_deref(),
                &out,
                loss_out.as_deref(),
                selection_out.as_deref(),
            )?;
            log::info!("trained {} steps, final tau {}", result.curve.len(), result.head.tau());
            Ok(())
        }
        Command::Eval { common, corpus, head, prompts, out, per_class_out } => {
            let config = common.load()?;
            let report = pipeline::eval(&config, &corpus, &head, &prompts, &out, per_class_out.as_deref())?;
            log::info!("macro AUROC {:?}", report.macro_auroc);
            Ok(())
        }
        Command::Analyze { common, corpus, selection, out } => {
            let config = common.load()?;
            pipeline::analyze(&config, &corpus, selection.as_deref(), &out)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
