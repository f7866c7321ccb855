use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use murmur_core::config::{RunConfig, Settings, ENV_PREFIX, KEYS};
use murmur_core::dataio::{load_manifest, DatasetManifest, Split};
use murmur_core::model::load_checkpoint;
use murmur_core::pipeline::{self, CalibrationOutcome, Temperatures};
use murmur_core::training::write_json;

#[derive(Parser)]
#[command(name = "murmur", version, about = "Heart-murmur detection pipeline")]
#[command(after_long_help = keys_help())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable, rightmost wins
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Root seed for every random stream
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Extract log-Mel features for every recording
    Featurize {
        /// Directory holding manifest.csv
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split, selecting on validation loss
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// MC-dropout predictions for every segment of the chosen splits
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "validation,test")]
        splits: Vec<Split>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the temperature on validation predictions
    Calibrate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics before and after calibration at every level
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// temperature.json from `calibrate`; identity when omitted
        #[arg(long)]
        temperature: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reliability and confidence-histogram CSVs
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        temperature: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

fn keys_help() -> String {
    let mut s =
        format!("Settings (config file, {ENV_PREFIX}<KEY> environment variables, then --set):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<26} {d}\n"));
    }
    s
}

fn resolve(global: &Global, extra: &[String]) -> murmur_core::Result<RunConfig> {
    let mut s = Settings::default();
    if let Some(path) = &global.config {
        s.merge_file(path)?;
    }
    s.merge_env(std::env::vars())?;
    s.merge_pairs(global.set.iter().map(String::as_str))?;
    s.merge_pairs(extra.iter().map(String::as_str))?;
    if let Some(seed) = global.seed {
        s.set("seed", &seed.to_string())?;
    }
    s.resolve()
}

fn manifest(data: &Path) -> murmur_core::Result<DatasetManifest> {
    load_manifest(&data.join("manifest.csv"))
}

fn temperatures(path: Option<&Path>) -> murmur_core::Result<Temperatures> {
    path.map_or(Ok(Temperatures::identity()), pipeline::read_json)
}

fn run(cli: Cli) -> murmur_core::Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::Synth { out, patients } => {
            let extra: Vec<String> = patients
                .map(|n| format!("synth_patients={n}"))
                .into_iter()
                .collect();
            let cfg = resolve(&cli.global, &extra)?;
            let m = pipeline::run_synth(&cfg, &out)?;
            let c = m.counts();
            println!(
                "synth: {} recordings, patients train/validation/test = {}/{}/{} → {}",
                m.entries().len(),
                c.patients_in(Split::Train),
                c.patients_in(Split::Validation),
                c.patients_in(Split::Test),
                out.display()
            );
        }
        Command::Featurize { data, out } => {
            let cfg = resolve(&cli.global, &[])?;
            let set = pipeline::run_featurize(&manifest(&data)?, &cfg, &out)?;
            println!(
                "featurize: {} segments → {}",
                set.segment_count(),
                out.display()
            );
        }
        Command::Train {
            data,
            features,
            out,
        } => {
            let cfg = resolve(&cli.global, &[])?;
            let set = pipeline::load_features(&manifest(&data)?, &features)?;
            let outcome = pipeline::run_train(&cfg, &set, Some(&out))?;
            for e in &outcome.log {
                println!(
                    "epoch {:>3} step {:>6} lr {:.2e} train_loss {:.5} val_loss {:.5} train_acc {:.3}{}",
                    e.epoch,
                    e.steps,
                    e.lr,
                    e.train_loss,
                    e.val_loss,
                    e.train_accuracy,
                    if e.is_best { " *" } else { "" }
                );
            }
            let s = &outcome.summary;
            println!(
                "train: best epoch {} val_loss {:.5}, train accuracy {:.3} → {}",
                s.best_epoch,
                s.best_val_loss,
                s.final_train_accuracy,
                out.display()
            );
        }
        Command::Predict {
            data,
            features,
            checkpoint,
            splits,
            out,
        } => {
            let cfg = resolve(&cli.global, &[])?;
            let model = load_checkpoint(&checkpoint)?;
            pipeline::check_model_config(&model.config, &cfg.model)?;
            let set = pipeline::load_features(&manifest(&data)?, &features)?;
            let preds = pipeline::run_predict(&model, &set, &splits, cfg.mc_passes, cfg.seed)?;
            pipeline::write_predictions(&out, &preds)?;
            cfg.write_to_dir(&out)?;
            println!(
                "predict: {} segments × {} passes → {}",
                preds.len(),
                cfg.mc_passes,
                out.display()
            );
        }
        Command::Calibrate { predictions, out } => {
            let cfg = resolve(&cli.global, &[])?;
            let preds = pipeline::read_predictions(&predictions)?;
            let c: CalibrationOutcome = pipeline::run_calibrate(&preds, cfg.calib_refit_patient)?;
            std::fs::create_dir_all(&out).map_err(|e| murmur_core::Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write_json(&out.join("temperature.json"), &c.temperatures)?;
            write_json(&out.join("calibration.json"), &c)?;
            cfg.write_to_dir(&out)?;
            println!(
                "calibrate: T = {:.4} (patient {:.4}); validation ECE segment {:.4} → {:.4}, patient {:.4} → {:.4}",
                c.temperatures.segment.temperature,
                c.temperatures.patient,
                c.segment.ece_before,
                c.segment.ece_after,
                c.patient.ece_before,
                c.patient.ece_after
            );
        }
        Command::Evaluate {
            predictions,
            temperature,
            split,
            out,
        } => {
            let preds = pipeline::read_predictions(&predictions)?;
            let temps = temperatures(temperature.as_deref())?;
            let (report, decisions) = pipeline::run_evaluate(&preds, &temps, split)?;
            std::fs::create_dir_all(&out).map_err(|e| murmur_core::Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write_json(&out.join("metrics.json"), &report)?;
            pipeline::write_patient_decisions(&out.join("patient_decisions.csv"), &decisions)?;
            let (b, a) = (&report.before.patient, &report.after.patient);
            println!(
                "evaluate ({split}): patient weighted accuracy {:.4} → {:.4}, macro-F1 {:.4} → {:.4}, ECE {:.4} → {:.4}",
                b.weighted_accuracy, a.weighted_accuracy, b.macro_f1, a.macro_f1, report.ece_patient.0, report.ece_patient.1
            );
        }
        Command::Report {
            predictions,
            temperature,
            split,
            out,
        } => {
            let preds = pipeline::read_predictions(&predictions)?;
            let temps = temperatures(temperature.as_deref())?;
            let files = pipeline::run_report(&preds, &temps, split, &out)?;
            println!("report: {} files → {}", files.len(), out.display());
        }
    }
    eprintln!("done in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
