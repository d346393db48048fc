use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use trapkit::config::{RunConfig, SeedRange};
use trapkit::stages::{self, EvalInputs};
use trapkit_core::noise::{Intensity, NoiseFamily, NoiseSpec};

#[derive(Parser)]
#[command(name = "trapkit", version, about = "Learned-reward trajectory anomaly detection")]
struct Cli {
    /// Run configuration (JSON). Defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mix {
    Expert,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate trajectories for a seed range.
    Simulate {
        #[arg(long)]
        seeds: SeedRange,
        #[arg(long, value_enum, default_value = "expert")]
        mix: Mix,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach rule-based anomaly labels.
    Label {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturb lidar readings.
    Noise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        family: NoiseFamily,
        #[arg(long, default_value = "med")]
        intensity: Intensity,
        /// Optional per-trajectory displacement CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Learn a reward from epsilon-ranked rollouts.
    TrainReward {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-step rewards into trajectories.
    Annotate {
        #[arg(long)]
        reward: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clip and expand annotated trajectories into a training set.
    BuildDataset {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sequence classifier.
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        /// Re-annotate the dataset with this reward before training.
        #[arg(long)]
        reward: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trajectories with a trained classifier.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reward: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compute metrics, baseline, lead time and the noise sweep.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        /// Labeled test trajectories.
        #[arg(long = "in")]
        input: PathBuf,
        /// Labeled, annotated training trajectories for the baseline.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        no_sweep: bool,
    },
    /// Run every stage in order.
    Pipeline {
        /// Use the small quickstart defaults when no config is given.
        #[arg(long)]
        quickstart: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let mut cfg = match (&cli.config, &cli.command) {
        (None, Command::Pipeline { quickstart: true, .. }) => RunConfig::quickstart(),
        (path, _) => RunConfig::load_or_default(path.as_deref())?,
    };
    let msg = match cli.command {
        Command::Simulate { seeds, mix, out } => {
            let mix = match mix {
                Mix::Expert => &cfg.data.expert_mix,
                Mix::Test => &cfg.data.test_mix,
            };
            stages::simulate(seeds, &cfg.scenario, mix, &out)?
        }
        Command::Label { input, out } => stages::label(&input, &out, &cfg.labeler)?,
        Command::Noise {
            input,
            out,
            family,
            intensity,
            report,
        } => {
            let spec = NoiseSpec {
                params: cfg.noise.params.clone(),
                ..NoiseSpec::new(family, intensity, cfg.noise_seed())
            };
            stages::noise(&input, &out, &spec, report.as_deref())?
        }
        Command::TrainReward { demos, out } => {
            stages::train_reward_stage(&demos, &out, &cfg.reward_config(), cfg.data.reward_clean_only)?
        }
        Command::Annotate { reward, input, out } => stages::annotate(&reward, &input, &out)?,
        Command::BuildDataset { input, out } => stages::build_dataset_stage(&input, &out, &cfg.sampler_config())?,
        Command::TrainClassifier { data, reward, out } => stages::train_classifier_stage(
            &data,
            reward.as_deref(),
            &out,
            &cfg.classifier_config(),
            cfg.sampler.val_fraction,
        )?,
        Command::Score {
            model,
            reward,
            input,
            out,
            threshold,
        } => stages::score(
            &model,
            reward.as_deref(),
            &input,
            &out,
            cfg.evaluation.trim,
            threshold.unwrap_or(cfg.evaluation.threshold),
        )?,
        Command::Evaluate {
            model,
            reward,
            input,
            train,
            out_dir,
            threshold,
            no_sweep,
        } => {
            if let Some(t) = threshold {
                cfg.evaluation.threshold = t;
            }
            if no_sweep {
                cfg.evaluation.noise_sweep = false;
            }
            cfg.validate()?;
            let inputs = EvalInputs {
                model: &model,
                reward: &reward,
                test: &input,
                train: train.as_deref(),
            };
            stages::evaluation_summary(&stages::evaluate(&inputs, &cfg, &out_dir)?)
        }
        Command::Pipeline { out_dir, .. } => {
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            stages::evaluation_summary(&stages::pipeline(&cfg)?)
        }
    };
    println!("{msg}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRAPKIT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
