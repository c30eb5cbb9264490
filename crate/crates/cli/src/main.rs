use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use pushid::active::StrategyKind;
use pushid::dualfilter::FilterMode;
use pushid::eval::{
    convergence_svg, evaluate, nrmse_by_push, read_ablation_csv, run_ablation, summarize, write_ablation_csv, EvalConfig, NrmseReport,
    Variant,
};
use pushid::geometry::{default_library, load_library};
use pushid::nets::Models;
use pushid::pushsim::{generate_population, load_population, save_population, ParameterRanges};
use pushid::study::{run_study, StudyConfig, TrainingKind};
use pushid::training::{save_run, train, TrainConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "pushid", version, about = "Infer object parameters from planar pushes with a dual differentiable filter")]
struct Cli {
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample objects from the parameter grid and shape library.
    GenPopulation {
        #[arg(long, default_value_t = 120)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shape library JSON (defaults to the built-in library).
        #[arg(long)]
        shapes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the filter networks on a population.
    Train {
        #[arg(long)]
        population: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Pushes recorded per training object.
        #[arg(long)]
        pushes: Option<usize>,
    },
    /// Run multi-push inference on objects with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        population: PathBuf,
        /// Indices of the objects to infer (all when omitted).
        #[arg(long, value_delimiter = ',')]
        objects: Vec<usize>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pushes: Option<usize>,
    },
    /// Evaluate filter variants on held-out objects, one checkpoint per training kind.
    Ablate {
        #[arg(long)]
        population: PathBuf,
        /// Directory holding `<training>/checkpoint.json` for dual-active, dual-uniform,
        /// vision-only and joint.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Variants to evaluate (all when omitted).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pushes: Option<usize>,
    },
    /// Print the NRMSE table of an ablation CSV.
    Report {
        #[arg(long)]
        ablation: PathBuf,
    },
    /// Train and evaluate every variant over several seeds.
    Study {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated seeds (overrides the config).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Filter variant: vt-addf, vt-ddf-uniform, vt-ddf-random, v-ddf or vt-jdf. Sets the filter
    /// mode and the push strategy; `--strategy` overrides the latter.
    #[arg(long)]
    mode: Option<String>,
    /// active, uniform or random.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    lookahead_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Candidate pushes per selection.
    #[arg(long)]
    affordances: Option<usize>,
}

/// A configuration problem detected by the CLI itself.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?,
        _ => toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?,
    };
    Ok(parsed)
}

fn parse_mode(s: &str) -> Result<(FilterMode, StrategyKind)> {
    let v: Variant = s.parse().map_err(|_| config_err(format!("unknown mode '{s}'")))?;
    Ok((v.mode(), v.strategy()))
}

fn parse_strategy(s: &str) -> Result<StrategyKind> {
    s.parse().map_err(|_| config_err(format!("unknown strategy '{s}'")))
}

fn train_config(c: &Common, epochs: Option<usize>, pushes: Option<usize>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_config(c.config.as_deref())?;
    if let Some(m) = &c.mode {
        (cfg.mode, cfg.strategy) = parse_mode(m)?;
    }
    if let Some(s) = &c.strategy {
        cfg.strategy = parse_strategy(s)?;
    }
    if let Some(f) = c.lookahead_frac {
        cfg.lookahead_frac = f;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = c.affordances {
        cfg.protocol.affordances = a;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(p) = pushes {
        cfg.pushes_per_object = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn eval_config(c: &Common, pushes: Option<usize>) -> Result<EvalConfig> {
    let mut cfg: EvalConfig = read_config(c.config.as_deref())?;
    if let Some(m) = &c.mode {
        (cfg.mode, cfg.strategy) = parse_mode(m)?;
    }
    if let Some(s) = &c.strategy {
        cfg.strategy = parse_strategy(s)?;
    }
    if let Some(f) = c.lookahead_frac {
        cfg.lookahead_frac = f;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = c.affordances {
        cfg.protocol.affordances = a;
    }
    if let Some(p) = pushes {
        cfg.pushes = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPopulation { count, seed, shapes, out } => {
            let library = match shapes {
                Some(p) => load_library(&p)?,
                None => default_library(),
            };
            let pop = generate_population(&ParameterRanges::table_one(), &library, count, seed)?;
            save_population(&out, &pop)?;
            println!("wrote {} objects to {}", pop.len(), out.display());
        }
        Command::Train { population, common, epochs, pushes } => {
            let cfg = train_config(&common, epochs, pushes)?;
            let pop = load_population(&population)?;
            let (models, report) = match train(&pop, &cfg) {
                Ok(r) => r,
                Err(pushid::Error::TrainingDiverged { epoch, last_good }) => {
                    std::fs::create_dir_all(&common.out_dir)?;
                    last_good.save(&common.out_dir.join("last_good.json"))?;
                    return Err(pushid::Error::TrainingDiverged { epoch, last_good }.into());
                }
                Err(e) => return Err(e.into()),
            };
            save_run(&common.out_dir, &models, &report)?;
            std::fs::write(common.out_dir.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
            if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
                println!("validation loss {:.4} -> {:.4} over {} pushes", first.val.total, last.val.total, last.pushes);
            }
        }
        Command::Infer { checkpoint, population, objects, common, pushes } => {
            let cfg = eval_config(&common, pushes)?;
            let models = Models::load(&checkpoint)?;
            let pop = load_population(&population)?;
            let picked = if objects.is_empty() {
                pop
            } else {
                objects
                    .iter()
                    .map(|&i| pop.get(i).cloned().ok_or_else(|| config_err(format!("object index {i} out of range"))))
                    .collect::<Result<Vec<_>>>()?
            };
            let results = evaluate(&models, &picked, &cfg)?;
            std::fs::create_dir_all(&common.out_dir)?;
            for (i, r) in results.iter().enumerate() {
                std::fs::write(common.out_dir.join(format!("object-{i:03}.json")), serde_json::to_string_pretty(r)?)?;
                std::fs::write(common.out_dir.join(format!("object-{i:03}.svg")), convergence_svg(&r.shape, r))?;
            }
            let report = NrmseReport::from_results("inference", &cfg, &results, None)?;
            std::fs::write(common.out_dir.join("nrmse.json"), serde_json::to_string_pretty(&report)?)?;
            println!("overall NRMSE {:.4} over {} objects; by push {:?}", report.overall, results.len(), nrmse_by_push(&cfg, &results)?);
        }
        Command::Ablate { population, checkpoints, variants, common, pushes } => {
            let cfg = eval_config(&common, pushes)?;
            let pop = load_population(&population)?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse::<Variant>()).collect::<pushid::Result<Vec<_>>>()?
            };
            let rows = run_ablation(&variants, &pop, &cfg, |v| {
                let path = checkpoints.join(TrainingKind::for_variant(v).name()).join("checkpoint.json");
                if !path.exists() {
                    return Err(pushid::Error::MissingCheckpoint(path.display().to_string()));
                }
                Models::load(&path)
            })?;
            std::fs::create_dir_all(&common.out_dir)?;
            let reports: Vec<NrmseReport> = rows.iter().map(|r| r.report.clone()).collect();
            let path = common.out_dir.join("ablation.csv");
            write_ablation_csv(&reports, std::fs::File::create(&path)?)?;
            print!("{}", summarize(&read_ablation_csv(&path)?));
        }
        Command::Report { ablation } => {
            print!("{}", summarize(&read_ablation_csv(&ablation)?));
        }
        Command::Study { config, out_dir, seeds, epochs } => {
            let mut cfg: StudyConfig = read_config(config.as_deref())?;
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let report = run_study(&cfg, Some(&out_dir))?;
            print!("{}", std::fs::read_to_string(out_dir.join("summary.md"))?);
            println!("held-out objects: {}", report.held_out);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<pushid::Error>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        Some(pushid::Error::Config(_) | pushid::Error::MissingCheckpoint(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
