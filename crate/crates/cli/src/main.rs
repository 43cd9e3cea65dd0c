use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use promptrec::data::dataset_stats;
use promptrec::eval::{render_table, ExperimentReport};
use promptrec::experiment::{run_experiment, Experiment, ExperimentConfig};

/// Cold-start recommendation experiments driven by TOML configs.
#[derive(Parser)]
#[command(name = "promptrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config file.
    #[arg(short, long)]
    config: PathBuf,
    /// Comma-separated seeds replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Ignore the configured score cache.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest and binarize the dataset and write one split per seed.
    PrepareData(ConfigArgs),
    /// Build the probe set and select the top-K corpus documents.
    RefineCorpus(ConfigArgs),
    /// Further pre-train the scorer on the refined corpus.
    Pretrain(ConfigArgs),
    /// Train the task prompts of the configured grid on the source datasets.
    TrainPrompt(ConfigArgs),
    /// Score the test split of every seed.
    Score(ConfigArgs),
    /// Compute GAUC from existing score files and write the report.
    Evaluate(ConfigArgs),
    /// Every stage in order, reusing artifacts of earlier runs.
    Run(ConfigArgs),
    /// Run every config in a directory and print one table.
    BenchmarkAll {
        /// Directory of experiment configs.
        #[arg(long, default_value = "configs/experiments")]
        configs: PathBuf,
        /// Comma-separated seeds replacing each configured list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        no_cache: bool,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config problems exit with 1, failing stages with 2.
struct Failure {
    validation: bool,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let validation = matches!(
            error.downcast_ref::<promptrec::Error>(),
            Some(promptrec::Error::Config(_))
        );
        Failure { validation, error }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::from_toml_file(&args.config).map_err(|e| Failure {
        validation: true,
        error: anyhow::Error::new(e).context(format!("loading {}", args.config.display())),
    })?;
    if !args.seeds.is_empty() {
        config.seeds = args.seeds.clone();
    }
    if args.no_cache {
        config.cache_dir = None;
    }
    config.validate()?;
    Ok(config)
}

fn print_report(report: &ExperimentReport, config: &ExperimentConfig) {
    print!("{}", render_table(std::slice::from_ref(report)));
    println!("report: {}", config.output_dir.join("report.json").display());
}

fn base_model(exp: &Experiment) -> Result<promptrec::lm::TransformerLm> {
    exp.load_scorer(&[])?.context("model.scorer is required for this stage")
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::PrepareData(args) => {
            let config = load_config(&args)?;
            let exp = Experiment::prepare(&config)?;
            let s = dataset_stats(&exp.target.dataset);
            println!(
                "{}: {} users, {} items, {} interactions, density {:.4}%, positive rate {}",
                exp.target.dataset.name(),
                s.users,
                s.items,
                s.interactions,
                100.0 * s.density,
                s.positive_rate.map_or("n/a".into(), |p| format!("{:.2}%", 100.0 * p)),
            );
            for (seed, split) in &exp.splits {
                println!(
                    "seed {seed}: train {} valid {} test {}",
                    split.train.len(),
                    split.valid.len(),
                    split.test.len()
                );
            }
        }
        Command::RefineCorpus(args) => {
            let config = load_config(&args)?;
            let mut exp = Experiment::prepare(&config)?;
            let model = base_model(&exp)?;
            let r = exp.refine(&model)?;
            println!(
                "kept {} of {} documents in {}",
                r.refined.documents.len(),
                r.refined.scored,
                exp.rcmp_dir().display()
            );
        }
        Command::Pretrain(args) => {
            let config = load_config(&args)?;
            let mut exp = Experiment::prepare(&config)?;
            if !exp.rcmp_dir().join("refined.jsonl").exists() {
                return Err(Failure {
                    validation: false,
                    error: anyhow!(
                        "no refined corpus in {}; run refine-corpus first",
                        exp.rcmp_dir().display()
                    ),
                });
            }
            let model = base_model(&exp)?;
            let outcome = exp.pretrain(&model)?;
            let last = outcome.log.last().map_or(f64::NAN, |l| l.loss);
            println!(
                "{} steps, final loss {last:.4}, model in {}",
                outcome.log.len(),
                exp.rcmp_dir().join("model").display()
            );
        }
        Command::TrainPrompt(args) => {
            let config = load_config(&args)?;
            let mut exp = Experiment::prepare(&config)?;
            let n = exp.train_prompts()?;
            println!("{n} task prompts in {}", config.output_dir.join("tppt").display());
        }
        Command::Score(args) => {
            let config = load_config(&args)?;
            let mut exp = Experiment::prepare(&config)?;
            for v in exp.score()? {
                println!("scored {} with {} for seeds {:?}", v.name, v.model, config.seeds);
            }
        }
        Command::Evaluate(args) => {
            let config = load_config(&args)?;
            let mut exp = Experiment::prepare(&config)?;
            let report = exp.evaluate()?;
            print_report(&report, &config);
        }
        Command::Run(args) => {
            let config = load_config(&args)?;
            let report = run_experiment(&config)?;
            print_report(&report, &config);
        }
        Command::BenchmarkAll {
            configs,
            seeds,
            no_cache,
            out,
        } => benchmark_all(&configs, seeds, no_cache, out.as_deref())?,
    }
    Ok(())
}

fn benchmark_all(dir: &Path, seeds: Vec<u64>, no_cache: bool, out: Option<&Path>) -> Result<(), Failure> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure {
            validation: true,
            error: anyhow!("no configs in {}", dir.display()),
        });
    }
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for path in paths {
        let args = ConfigArgs {
            config: path.clone(),
            seeds: seeds.clone(),
            no_cache,
        };
        let result = load_config(&args).and_then(|c| run_experiment(&c).map_err(Failure::from));
        match result {
            Ok(r) => reports.push(r),
            Err(f) => {
                log::error!("{}: {:#}", path.display(), f.error);
                failed.push(path);
            }
        }
    }
    let table = render_table(&reports);
    print!("{table}");
    if let Some(out) = out {
        std::fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    if !failed.is_empty() {
        let names: Vec<String> = failed.iter().map(|p| p.display().to_string()).collect();
        return Err(Failure {
            validation: false,
            error: anyhow!(
                "{} of {} configs failed: {}",
                failed.len(),
                failed.len() + reports.len(),
                names.join(", ")
            ),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(if f.validation { 1 } else { 2 })
        }
    }
}
