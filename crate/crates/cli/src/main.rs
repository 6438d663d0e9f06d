use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use relkd_core::data;
use relkd_core::run::{
    ablate, analyze, evaluate_checkpoint, grad_check_suite, load_splits, obtain_teacher,
    run_distill, run_id, write_teacher_metrics, RunConfig, RunManifest,
};
use relkd_core::trainer::{train_teacher, Checkpoint};
use relkd_core::Error;

/// Largest relative gradient error `grad-check` accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "relkd",
    version,
    about = "Relational knowledge distillation for dual encoders"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; beats RELKD_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split a synthetic dataset.
    GenData,
    /// Train a teacher with the contrastive task loss.
    TrainTeacher,
    /// Distill a student from a frozen teacher.
    Distill {
        /// Teacher checkpoint, instead of training one.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run KD, KD+XRD, KD+VRD and RD over several seeds.
    Ablate {
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Score a student checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to teacher.json next to the checkpoint.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Similarity histograms and statistics of a student checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Compare analytic and numerical gradients of every loss.
    GradCheck {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

enum Failure {
    Usage(String),
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Data(_) => Failure::Usage(e.to_string()),
            other => Failure::Invariant(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn teacher_next_to(checkpoint: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| checkpoint.with_file_name("teacher.json"))
}

fn load_checkpoints(
    checkpoint: &Path,
    teacher: Option<PathBuf>,
) -> CliResult<(Checkpoint, Checkpoint)> {
    let student = Checkpoint::load(checkpoint)?;
    let teacher = Checkpoint::load(&teacher_next_to(checkpoint, teacher))?;
    Ok((student, teacher))
}

fn finish(
    command: &str,
    cfg: &RunConfig,
    dir: &Path,
    artifacts: Vec<PathBuf>,
    started: Instant,
) -> CliResult<()> {
    let path = RunManifest::new(command, cfg, artifacts, started).write(dir)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let started = Instant::now();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    let dir = cfg.out_root(cli.out.as_deref());
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    let seed = cfg.seed();

    match cli.command {
        Command::GenData => {
            let ds = data::assign_splits(&data::generate(&cfg.synthetic)?, cfg.split, seed)?;
            let path = dir.join("dataset.jsonl");
            data::save(&ds, &path)?;
            println!("{} pairs → {}", ds.len(), path.display());
            finish("gen-data", &cfg, &dir, vec![path], started)
        }
        Command::TrainTeacher => {
            let splits = load_splits(&cfg)?;
            let run = train_teacher(&cfg.train, &cfg.model, &splits.train)?;
            let ckpt = dir.join("teacher.json");
            Checkpoint::new(&run.teacher, seed, run.temperatures).save(&ckpt)?;
            let metrics = dir.join("metrics.csv");
            write_teacher_metrics(&metrics, &run_id("TEACHER", seed), seed, &run.epoch_losses)?;
            for (e, l) in run.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}  loss_task {l:.6}", e + 1);
            }
            finish("train-teacher", &cfg, &dir, vec![ckpt, metrics], started)
        }
        Command::Distill { teacher } => {
            if teacher.is_some() {
                cfg.teacher = teacher;
            }
            let splits = load_splits(&cfg)?;
            let t = obtain_teacher(&cfg, &splits.train)?;
            let outcome = run_distill(&cfg, &splits, t, &dir)?;
            for r in &outcome.run.records {
                let e = &r.eval;
                println!(
                    "epoch {:>3}  loss {:.6}  i2t@1 {:.4}  t2i@1 {:.4}  gap {:.4}",
                    r.epoch, r.losses.total, e.retrieval.i2t_r1, e.retrieval.t2i_r1, e.gap
                );
            }
            let artifacts = vec![
                outcome.teacher_path,
                outcome.student_path,
                outcome.metrics_path,
            ];
            finish("distill", &cfg, &dir, artifacts, started)
        }
        Command::Ablate { seeds } => {
            let table = ablate(&cfg, &seeds, &dir)?;
            let path = dir.join("ablation.csv");
            table.write_csv(&path)?;
            print!("{}", table.render());
            finish("ablate", &cfg, &dir, vec![path], started)
        }
        Command::Eval {
            checkpoint,
            teacher,
        } => {
            let (s, t) = load_checkpoints(&checkpoint, teacher)?;
            let splits = load_splits(&cfg)?;
            let m = evaluate_checkpoint(&cfg, &splits, &s, &t)?;
            let rows = [
                ("val_i2t_r1", m.retrieval.i2t_r1),
                ("val_t2i_r1", m.retrieval.t2i_r1),
                ("val_i2t_r5", m.retrieval.i2t_r5),
                ("val_t2i_r5", m.retrieval.t2i_r5),
                ("zs_acc", m.zs_acc),
                ("pos_mean", m.pos_mean),
                ("neg_mean", m.neg_mean),
                ("gap", m.gap),
                ("mi_bound_image", m.mi_bound_image),
                ("mi_bound_text", m.mi_bound_text),
            ];
            for (k, v) in rows {
                println!("{k:<15} {v}");
            }
            Ok(())
        }
        Command::Analyze {
            checkpoint,
            teacher,
        } => {
            let (s, t) = load_checkpoints(&checkpoint, teacher)?;
            let splits = load_splits(&cfg)?;
            let a = analyze(&cfg, &splits, &s, &t)?;
            let (hist, stats) = a.write(&dir)?;
            println!(
                "pos_mean {:.4}  neg_mean {:.4}  gap {:.4}",
                a.pos_mean, a.neg_mean, a.gap
            );
            println!("{}\n{}", hist.display(), stats.display());
            Ok(())
        }
        Command::GradCheck { seeds } => {
            let entries = grad_check_suite(&seeds)?;
            let mut failed = Vec::new();
            for e in &entries {
                let ok = e.max_error < GRAD_TOLERANCE;
                println!(
                    "{:<9} max_rel_error {:.3e}  coords {:>5}  {}",
                    e.loss,
                    e.max_error,
                    e.coordinates,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(e.loss);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Invariant(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
