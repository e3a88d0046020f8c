use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use stylecomp::ablation::{ablation_csv, run_ablation_suite, Variant};
use stylecomp::artifacts::{
    evaluate_checkpoint, Checkpoint, EvalSplit, RunManifest, ABLATION_FILE, CHECKPOINT_FILE,
    MANIFEST_FILE, MEMORY_FILE, METRICS_FILE,
};
use stylecomp::training::{metrics_csv, run, TrainConfig};
use stylecomp::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CORRUPT: u8 = 4;

#[derive(Parser)]
#[command(name = "stylecomp", version, about = "Discrepancy-memory style compensation on synthetic compound domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics, checkpoint, memory and manifest.
    Train {
        /// Flat JSON config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a test split and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "target")]
        split: String,
        /// Also write the per-scene predicted label grids as JSON.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train every variant for every seed and write ablation_results.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated variant names; all variants when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => EXIT_CONFIG,
            Error::Diverged { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
            Error::Corrupt { .. } => EXIT_CORRUPT,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_failure(message: String) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message,
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let cfg: TrainConfig = match path {
        None => TrainConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| config_failure(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| config_failure(format!("invalid config {}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: format!("cannot create {}: {e}", out.display()),
    })
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Error::from(e).into())
}

fn cmd_train(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    create_dir(out)?;
    let mut manifest = RunManifest::new("train", &cfg);
    manifest.save(&out.join(MANIFEST_FILE))?;

    let started = Instant::now();
    let outcome = run(&cfg, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  miou_target {:.4}  domain_gap {:.4}",
            m.epoch, m.total, m.miou_target, m.domain_gap
        )
    })?;
    manifest
        .timings_seconds
        .insert("train".into(), started.elapsed().as_secs_f64());

    write(&out.join(METRICS_FILE), &metrics_csv(&outcome.history))?;
    Checkpoint::from_outcome(&cfg, &outcome).save(&out.join(CHECKPOINT_FILE))?;
    manifest.outputs.insert("metrics".into(), METRICS_FILE.into());
    manifest.outputs.insert("checkpoint".into(), CHECKPOINT_FILE.into());
    if let Some(mem) = &outcome.memory {
        write(&out.join(MEMORY_FILE), &mem.to_json()?)?;
        manifest.outputs.insert("memory".into(), MEMORY_FILE.into());
    }
    manifest.save(&out.join(MANIFEST_FILE))?;

    let summary = serde_json::json!({
        "seed": cfg.seed,
        "variant": cfg.variant,
        "target": outcome.target,
        "open": outcome.open,
    });
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(())
}

fn cmd_eval(checkpoint: &Path, split: &str, predictions: Option<&Path>) -> Result<(), Failure> {
    let split: EvalSplit = split.parse()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (eval, preds) = evaluate_checkpoint(&ckpt, split)?;
    if let Some(path) = predictions {
        write(path, &serde_json::to_string(&preds).map_err(Error::from)?)?;
    }
    println!("{}", serde_json::to_string_pretty(&eval).map_err(Error::from)?);
    Ok(())
}

fn cmd_ablate(config: Option<&Path>, variants: &[String], seeds: &[u64], out: &Path) -> Result<(), Failure> {
    let variants: Vec<Variant> = if variants.is_empty() {
        Variant::registry().to_vec()
    } else {
        variants
            .iter()
            .map(|v| v.trim().parse::<Variant>())
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(config_failure("--seeds must list at least one seed".into()));
    }
    let cfg = load_config(config)?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("ablate", &cfg);
    manifest.save(&out.join(MANIFEST_FILE))?;

    let started = Instant::now();
    let rows = run_ablation_suite(&cfg, &variants, seeds, |row| {
        eprintln!(
            "{:<26} seed {:>3}  miou_target {:.4}  miou_open {:.4}  {:.1}s",
            row.variant.name(),
            row.seed,
            row.miou_target,
            row.miou_open,
            row.seconds
        )
    })?;
    manifest
        .timings_seconds
        .insert("ablate".into(), started.elapsed().as_secs_f64());
    write(&out.join(ABLATION_FILE), &ablation_csv(&rows))?;
    manifest.outputs.insert("ablation".into(), ABLATION_FILE.into());
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, seed, out } => cmd_train(config.as_deref(), *seed, out),
        Command::Eval {
            checkpoint,
            split,
            predictions,
        } => cmd_eval(checkpoint, split, predictions.as_deref()),
        Command::Ablate {
            config,
            variants,
            seeds,
            out,
        } => cmd_ablate(config.as_deref(), variants, seeds, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
