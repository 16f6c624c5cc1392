//! `sena`: train, extend and evaluate branch-per-task models, and run whole
//! experiment plans.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sena_core::checkpoint;
use sena_core::experiment::{
    aggregate, phase_rng, read_metrics, render_table, run_plan, summary_csv, train_new_task, DataCatalog,
    ExperimentPlan, Strategy,
};
use sena_core::training::{evaluate, train_task};
use sena_core::{MultiTaskModel, Result, SenaError};

#[derive(Parser, Debug)]
#[command(name = "sena", version, about = "Continual learning with frozen trunks and per-task branches")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a fresh single-task model and save it as a checkpoint.
    TrainIsolated {
        #[command(flatten)]
        common: Common,
        /// Dataset to train on (defaults to the first task of the plan).
        #[arg(long)]
        task: Option<String>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a task to a saved model under a strategy and save the result.
    AddTask {
        #[command(flatten)]
        common: Common,
        /// Checkpoint holding the current model.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset name of the new task.
        #[arg(long)]
        task: String,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every seed and phase of a plan, writing metrics and checkpoints.
    RunPlan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Output directory (overrides the plan's `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize one or more metrics files as mean and sample std per cell.
    Aggregate {
        /// metrics.csv files produced by run-plan.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also write the summary as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report test accuracy of a saved model on its tasks.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate only this task.
        #[arg(long)]
        task: Option<String>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Plan file (JSON); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; replaces the plan's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs; overrides `sgd.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn plan(&self) -> Result<ExperimentPlan> {
        let mut plan = match &self.config {
            Some(path) => ExperimentPlan::load(path)?,
            None => ExperimentPlan::default(),
        };
        if let Some(seed) = self.seed {
            plan.seeds = vec![seed];
        }
        if let Some(epochs) = self.epochs {
            plan.sgd.epochs = epochs;
        }
        plan.validate()?;
        Ok(plan)
    }
}

fn print_accuracies(plan: &ExperimentPlan, model: &MultiTaskModel, seed: u64, only: Option<&str>) -> Result<()> {
    let mut catalog = DataCatalog::new();
    println!("task_id,accuracy");
    for task in model.task_ids() {
        if only.is_some_and(|t| t != task) {
            continue;
        }
        let data = catalog.task_data(plan, task, seed)?;
        let acc = evaluate(model, task, &data.test, plan.eval_batch_size)?;
        println!("{task},{acc:.6}");
    }
    Ok(())
}

fn train_isolated(common: &Common, task: Option<&str>, out: &Path) -> Result<()> {
    let plan = common.plan()?;
    let seed = plan.seeds[0];
    let task = task.unwrap_or(&plan.task_sequence[0]).to_string();
    let data = DataCatalog::new().task_data(&plan, &task, seed)?;
    let mut rng = phase_rng(seed, 1);
    let mut model = MultiTaskModel::build_isolated(plan.architecture.clone(), &task, data.n_classes(), &mut rng)?;
    train_task(&mut model, &task, &data.train, Some(&data.validation), &plan.sgd, &mut rng)?;
    checkpoint::save(&model, out)?;
    print_accuracies(&plan, &model, seed, None)
}

fn add_task(common: &Common, ckpt: &Path, task: &str, strategy: Option<Strategy>, out: &Path) -> Result<()> {
    let plan = common.plan()?;
    let strategy = strategy.unwrap_or(plan.strategy);
    let seed = plan.seeds[0];
    let mut model = checkpoint::load(ckpt)?;
    if model.architecture() != &plan.architecture {
        return Err(SenaError::Conflict(
            "checkpoint architecture differs from the plan's architecture".into(),
        ));
    }
    let data = DataCatalog::new().task_data(&plan, task, seed)?;
    let mut rng = phase_rng(seed, model.task_count() + 1);
    train_new_task(&plan, strategy, &mut model, task, &data, &mut rng)?;
    checkpoint::save(&model, out)?;
    print_accuracies(&plan, &model, seed, None)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainIsolated { common, task, out } => train_isolated(&common, task.as_deref(), &out),
        Command::AddTask {
            common,
            checkpoint,
            task,
            strategy,
            out,
        } => add_task(&common, &checkpoint, &task, strategy, &out),
        Command::RunPlan { common, strategy, out } => {
            let mut plan = common.plan()?;
            if let Some(s) = strategy {
                plan.strategy = s;
            }
            if let Some(out) = out {
                plan.output_dir = out;
            }
            let result = run_plan(&plan)?;
            print!("{}", render_table(&aggregate(&result.records)));
            println!("wrote {}", result.output_dir.display());
            Ok(())
        }
        Command::Aggregate { files, out } => {
            let mut records = Vec::new();
            for f in &files {
                records.extend(read_metrics(f)?);
            }
            let cells = aggregate(&records);
            if let Some(out) = out {
                std::fs::write(&out, summary_csv(&cells)).map_err(|e| SenaError::io(&out, e))?;
            }
            print!("{}", render_table(&cells));
            Ok(())
        }
        Command::Evaluate {
            common,
            checkpoint,
            task,
        } => {
            let plan = common.plan()?;
            let model = checkpoint::load(&checkpoint)?;
            if let Some(t) = &task {
                model.branch(t)?;
            }
            print_accuracies(&plan, &model, plan.seeds[0], task.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
