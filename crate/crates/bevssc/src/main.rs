use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use bevssc::config::RunConfig;
use bevssc::metrics::desk_range_bands;
use bevssc::train::{
    ablate, build_dataset, evaluate, evaluate_predictions, gradcheck_suite, render_ablation,
    render_gradcheck, train_student, train_student_baseline, train_teacher, AblationAxis,
    Checkpoint, StepLog, TrainOutcome, EVAL_SEED_OFFSET,
};
use bevssc::world::{read_dataset, write_dataset, SceneSample};
use bevssc::{Error, Result};

#[derive(Parser)]
#[command(name = "bevssc", about = "BEV semantic scene completion with cross-modal distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. `--set optim.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset path (default `<output_dir>/train.lcr1`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the held-out seed range instead of the training one.
        #[arg(long)]
        eval: bool,
    },
    /// Train the lidar+camera teacher.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file; generated on the fly when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the radar(-camera) student against a frozen teacher.
    TrainStudent {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Train the same architecture without a teacher (KD baseline).
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a (generated or loaded) dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also dump prediction grids to this path.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Sweep one ablation axis with everything else fixed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `stages`, `kd_components`, or `kl_direction`.
        #[arg(long)]
        axis: String,
    },
    /// Verify every differentiable op against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled per input tensor.
        #[arg(long, default_value_t = 24)]
        samples: usize,
        /// Include the deliberately-corrupted negative control.
        #[arg(long)]
        negative_control: bool,
    },
    /// Rebuild evaluation tables from dumped predictions.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() {
    let code = match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn load_or_generate(
    data: &Option<PathBuf>,
    cfg: &RunConfig,
    eval_split: bool,
) -> Result<Vec<SceneSample>> {
    match data {
        Some(path) => read_dataset(path),
        None => {
            let (seed, count) = if eval_split {
                (
                    cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
                    cfg.num_eval_scenes.max(1),
                )
            } else {
                (cfg.seed, cfg.num_train_scenes)
            };
            build_dataset(&cfg.world, seed, count)
        }
    }
}

fn write_log_csv(log: &[StepLog], path: &Path) -> Result<()> {
    let mut out = String::from("step,lr,total");
    if let Some(first) = log.first() {
        for (name, _) in &first.components {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push('\n');
    for l in log {
        out.push_str(&format!("{},{:.8e},{:.8e}", l.step, l.lr, l.total));
        for (_, v) in &l.components {
            out.push_str(&format!(",{v:.8e}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn finish_training(outcome: TrainOutcome, cfg: &RunConfig, stem: &str) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let ck_path = cfg.output_dir.join(format!("{stem}.lcr1"));
    outcome.checkpoint.save(&ck_path)?;
    let log_path = cfg.output_dir.join(format!("{stem}_log.csv"));
    write_log_csv(&outcome.log, &log_path)?;
    if let Some(last) = outcome.log.last() {
        println!("final step {}: total loss {:.6}", last.step, last.total);
    }
    println!("checkpoint: {}", ck_path.display());
    println!("loss log:   {}", log_path.display());
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { cfg, out, eval } => {
            let cfg = cfg.load()?;
            let samples = load_or_generate(&None, &cfg, eval)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = out.unwrap_or_else(|| {
                cfg.output_dir
                    .join(if eval { "eval.lcr1" } else { "train.lcr1" })
            });
            write_dataset(&samples, &path)?;
            println!("wrote {} scenes to {}", samples.len(), path.display());
            Ok(())
        }
        Command::TrainTeacher { cfg, data, resume } => {
            let cfg = cfg.load()?;
            let dataset = load_or_generate(&data, &cfg, false)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = train_teacher(&dataset, &cfg, resume)?;
            finish_training(outcome, &cfg, "teacher")
        }
        Command::TrainStudent {
            cfg,
            teacher,
            baseline,
            data,
            resume,
        } => {
            let cfg = cfg.load()?;
            let dataset = load_or_generate(&data, &cfg, false)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = if baseline {
                train_student_baseline(&dataset, &cfg, resume)?
            } else {
                let path = teacher.ok_or_else(|| {
                    Error::config("--teacher is required unless --baseline is set")
                })?;
                let teacher = Checkpoint::load(&path)?;
                train_student(&dataset, &teacher, &cfg, resume)?
            };
            finish_training(outcome, &cfg, if baseline { "student_baseline" } else { "student" })
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            dump,
        } => {
            let cfg = cfg.load()?;
            let dataset = load_or_generate(&data, &cfg, true)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let report = evaluate(&ck.params, &dataset, &cfg.model, &desk_range_bands())?;
            print!("{}", report.render_markdown());
            std::fs::create_dir_all(&cfg.output_dir)?;
            let csv = cfg.output_dir.join("eval.csv");
            std::fs::write(&csv, report.render_csv())?;
            println!("tables: {}", csv.display());
            if let Some(path) = dump {
                bevssc::train::write_predictions(&report.predictions, &path)?;
                println!("predictions: {}", path.display());
            }
            Ok(())
        }
        Command::Ablate { cfg, axis } => {
            let cfg = cfg.load()?;
            let ax = AblationAxis::parse(&axis)?;
            let rows = ablate(&cfg, ax)?;
            let table = render_ablation(&axis, &rows);
            print!("{table}");
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join(format!("ablate_{axis}.md"));
            std::fs::write(&path, table)?;
            println!("table: {}", path.display());
            Ok(())
        }
        Command::Gradcheck {
            seed,
            samples,
            negative_control,
        } => {
            let reports = gradcheck_suite(seed, samples, negative_control);
            print!("{}", render_gradcheck(&reports));
            let failed: Vec<&str> = reports
                .iter()
                .filter(|r| !r.passed() && r.name != "negative_control")
                .map(|r| r.name.as_str())
                .collect();
            let negative_ok = reports
                .iter()
                .filter(|r| r.name == "negative_control")
                .all(|r| !r.passed());
            if !failed.is_empty() {
                return Err(Error::Verification(format!(
                    "gradient check failed for: {}",
                    failed.join(", ")
                )));
            }
            if !negative_ok {
                return Err(Error::Verification(
                    "negative control was not detected".into(),
                ));
            }
            Ok(())
        }
        Command::Report {
            cfg,
            predictions,
            data,
        } => {
            let cfg = cfg.load()?;
            let dataset = load_or_generate(&data, &cfg, true)?;
            let preds = bevssc::train::read_predictions(&predictions)?;
            let report = evaluate_predictions(preds, &dataset, &desk_range_bands())?;
            print!("{}", report.render_markdown());
            Ok(())
        }
    }
}
