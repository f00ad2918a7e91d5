//! `dmin`: train, evaluate and inspect few-shot routing models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmin_core::encoder::EncoderConfig;
use dmin_core::episodes::{
    gen_synthetic, load_jsonl_vectors, load_tsv, save_jsonl_vectors, Dataset,
};
use dmin_core::harness::{
    ablation_csv, checkpoint, evaluate_with, iteration_effect, meta_train, pretrain,
    run_ablation_suite, separation_report, Ablation, EvalOptions, Model, SeparationOptions,
    TrainConfig,
};
use dmin_core::Error;

#[derive(Parser)]
#[command(
    name = "dmin",
    version,
    about = "Few-shot classification with dynamic memory routing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: supervised training on base classes.
    Pretrain {
        #[command(flatten)]
        train: TrainFlags,
        /// Base-class data (`.tsv` text or `.jsonl` vectors).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: episodic training starting from a checkpoint.
    Metatrain {
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy over sampled test episodes, written as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the checkpoint's ablation (full, no_dmm, no_qim, no_dmm_no_qim).
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate Gaussian-cluster vectors as JSONL.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long = "per-class")]
        per_class: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the five ablation variants; writes a CSV table.
    Ablate {
        #[command(flatten)]
        train: TrainFlags,
        /// Full dataset; split into base and novel classes per the configuration.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Silhouette of support vectors before and after memory adaptation.
    Separation {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "out-csv")]
        out_csv: PathBuf,
        #[arg(long, default_value_t = 10)]
        way: usize,
        #[arg(long, default_value_t = 5)]
        shot: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Configuration file plus flag overrides.
#[derive(Args)]
struct TrainFlags {
    /// JSON configuration with the full set of keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long = "lr1")]
    stage1_lr: Option<f64>,
    #[arg(long = "lr2")]
    stage2_lr: Option<f64>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown ablation `{s}`; expected full, no_dmm, no_qim or no_dmm_no_qim")
    })
}

impl TrainFlags {
    /// The configuration file, or defaults fitted to `data`, with flag overrides applied.
    fn resolve(&self, data: &Dataset) -> Result<TrainConfig, Error> {
        let cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => {
                let encoder = match data.vector_dim() {
                    Some(d) => EncoderConfig::precomputed(d),
                    None => EncoderConfig::feature_hash(1024, 64),
                };
                TrainConfig {
                    encoder,
                    ..TrainConfig::default()
                }
            }
        };
        self.apply(cfg)
    }

    fn apply(&self, mut cfg: TrainConfig) -> Result<TrainConfig, Error> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.stage1.steps = v;
        }
        if let Some(v) = self.episodes {
            cfg.stage2.episodes = v;
        }
        if let Some(v) = self.stage1_lr {
            cfg.stage1.learning_rate = v;
        }
        if let Some(v) = self.stage2_lr {
            cfg.stage2.learning_rate = v;
        }
        if let Some(v) = self.ablation {
            cfg.ablation = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Names the file in I/O errors, which otherwise carry only the OS message.
fn at(path: &Path, err: Error) -> Error {
    match err {
        Error::Io(e) => Error::Data(format!("{}: {e}", path.display())),
        other => other,
    }
}

fn load_model(path: &Path) -> Result<Model, Error> {
    checkpoint::load(path).map_err(|e| at(path, e))
}

fn load_data(path: &Path) -> Result<Dataset, Error> {
    read_data(path).map_err(|e| at(path, e))
}

fn read_data(path: &Path) -> Result<Dataset, Error> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("txt") => load_tsv(path),
        Some("jsonl") | Some("json") => load_jsonl_vectors(path),
        _ => {
            let text = std::fs::read_to_string(path)?;
            if text.trim_start().starts_with('{') {
                load_jsonl_vectors(path)
            } else {
                load_tsv(path)
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain { train, data, out } => {
            let ds = load_data(&data)?;
            let cfg = train.resolve(&ds)?;
            let (model, report) = pretrain(&ds, &cfg)?;
            checkpoint::save(&model, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "steps": report.losses.len(),
                    "final_loss": report.losses.last(),
                    "train_accuracy": report.train_accuracy,
                })
            );
        }
        Command::Metatrain {
            train,
            model,
            data,
            out,
        } => {
            let mut m = load_model(&model)?;
            let ds = load_data(&data)?;
            let base = match &train.config {
                Some(path) => TrainConfig::load(path)?,
                None => m.config.clone(),
            };
            let cfg = train.apply(base)?;
            if cfg.encoder != m.config.encoder || cfg.routing != m.config.routing {
                return Err(Error::Config(
                    "encoder and routing settings must match the checkpoint".into(),
                ));
            }
            m.config = cfg;
            let report = meta_train(&mut m, &ds)?;
            checkpoint::save(&m, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "episodes": report.losses.len(),
                    "first_loss": report.losses.first(),
                    "final_loss": report.losses.last(),
                })
            );
        }
        Command::Eval {
            model,
            data,
            episodes,
            way,
            shot,
            queries,
            seed,
            ablation,
            out,
        } => {
            let m = load_model(&model)?;
            let ds = load_data(&data)?;
            let mut opts = EvalOptions::from_config(&m.config);
            opts.episodes = episodes.unwrap_or(opts.episodes);
            opts.way = way.unwrap_or(opts.way);
            opts.shot = shot.unwrap_or(opts.shot);
            opts.queries = queries.unwrap_or(opts.queries);
            opts.seed = seed.unwrap_or(opts.seed);
            let report = evaluate_with(&m, &ds, &opts, ablation.unwrap_or(m.config.ablation))?;
            let json = report.to_json();
            match out {
                Some(path) => std::fs::write(path, json + "\n")?,
                None => println!("{json}"),
            }
            eprintln!(
                "mean accuracy {:.4} ± {:.4} over {} episodes",
                report.mean_accuracy, report.std_accuracy, report.episodes
            );
        }
        Command::Synth {
            classes,
            per_class,
            dim,
            separation,
            sigma,
            seed,
            out,
        } => {
            let ds = gen_synthetic(classes, per_class, dim, separation, sigma, seed)?;
            save_jsonl_vectors(&ds, &out)?;
        }
        Command::Ablate { train, data, out } => {
            let ds = load_data(&data)?;
            let cfg = train.resolve(&ds)?;
            let rows = run_ablation_suite(&ds, &cfg)?;
            let csv = ablation_csv(&rows);
            std::fs::write(&out, &csv)?;
            print!("{csv}");
            if let Some((one, five)) = iteration_effect(&rows) {
                eprintln!(
                    "iterations 1 -> 3: {one:+.2} points (1-shot), {five:+.2} points (5-shot)"
                );
            }
        }
        Command::Separation {
            model,
            data,
            out_csv,
            way,
            shot,
            seed,
        } => {
            let m = load_model(&model)?;
            let ds = load_data(&data)?;
            let report = separation_report(&m, &ds, &SeparationOptions { way, shot, seed })?;
            report.write_csv(&out_csv)?;
            println!(
                "{}",
                serde_json::json!({
                    "silhouette_before": report.silhouette_before,
                    "silhouette_after": report.silhouette_after,
                })
            );
        }
    }
    Ok(())
}

/// 1 usage, 2 data, 3 numeric.
fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        3
    } else if matches!(err, Error::Config(_) | Error::InvalidArgument(_)) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
            ExitCode::from(exit_code(&e))
        }
    }
}
