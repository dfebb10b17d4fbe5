use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brittle::commands::{self, HypothesisFile, PairInput};
use brittle::{parallel, Error, ExperimentConfig};
use clap::{Parser, Subcommand};

/// Learned perturbation proposals for brittle simulators.
#[derive(Parser)]
#[command(name = "brittle", version)]
struct Cli {
    /// Experiment configuration (TOML). Missing fields take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `paths.out_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic datasets.
    Generate,
    /// Train the flow proposal on accepted perturbations.
    Train {
        /// Training pairs (CSV); collected from baseline rollouts when absent.
        #[arg(long, conflicts_with = "fresh")]
        pairs: Option<PathBuf>,
        /// Draw every minibatch from fresh rollouts.
        #[arg(long)]
        fresh: bool,
        /// Where to write the trained model.
        #[arg(long)]
        out_model: Option<PathBuf>,
        /// Overrides `train.iterations`.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Single-call rejection rate of the baseline or a trained model.
    EvalRejection {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Number of trials; defaults to `eval.n_trials`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Independent SMC sweeps on one dataset.
    Sweep {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_sweeps: usize,
    },
    /// Evidence-variance study of the baseline against a trained model.
    Study {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n_datasets: Option<usize>,
        #[arg(long, default_value_t = 50)]
        n_sweeps: usize,
    },
    /// Select among hypotheses by SMC evidence.
    Select {
        /// TOML file with `[[hypothesis]]` entries (`name`, optional `model`,
        /// optional `config` overrides).
        #[arg(long)]
        hypotheses: PathBuf,
        /// Trained models, one per hypothesis in file order.
        #[arg(long)]
        model: Vec<PathBuf>,
        /// Observations; dataset 0 of the configuration when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        n_sweeps: usize,
    },
}

fn run(cli: Cli) -> Result<String, Error> {
    parallel::init_threads().map_err(Error::Config)?;
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    match cli.command {
        Command::Generate => commands::generate(&cfg, &out),
        Command::Train {
            pairs,
            fresh,
            out_model,
            iterations,
        } => {
            cfg.train.fresh |= fresh;
            if let Some(k) = iterations {
                cfg.train.iterations = k;
            }
            cfg.validate()?;
            let input = pairs.map_or(PairInput::Collect, PairInput::File);
            let model_path = out_model.unwrap_or_else(|| out.join("model.json"));
            commands::train(&cfg, &input, &out, &model_path).map(|o| o.text)
        }
        Command::EvalRejection { model, n } => {
            commands::eval_rejection(&cfg, model.as_deref(), n, &out).map(|o| o.text)
        }
        Command::Sweep {
            model,
            dataset,
            n_sweeps,
        } => commands::sweep(&cfg, model.as_deref(), &dataset, n_sweeps, &out),
        Command::Study {
            model,
            n_datasets,
            n_sweeps,
        } => commands::study(&cfg, &model, n_datasets.unwrap_or(cfg.data.n_datasets), n_sweeps, &out),
        Command::Select {
            hypotheses,
            model,
            dataset,
            n_sweeps,
        } => {
            let hs = HypothesisFile::load(&hypotheses)?;
            commands::select(&cfg, &hs, &model, dataset.as_deref().map(Path::new), n_sweeps, &out).map(|o| o.text)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
