//! `ckge`: build growing datasets, train, evaluate and run experiment plans.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ckge_core::checkpoint::{load_store, save_snapshot};
use ckge_core::dataset::read_triples_file;
use ckge_core::synthetic::{generate, SyntheticSpec};
use ckge_core::trainer::{plan_for_snapshot, run_continual_with};
use ckge_core::{
    build_growing_dataset, evaluate, load_snapshots, run_plan, write_dataset, DatasetSpec, ExperimentPlan,
    RankSetting, ScoreFunction, TrainingConfig, TrainingMode,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "ckge", version, about = "Continual knowledge graph embedding with incremental low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create snapshot datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train every snapshot of a dataset in order.
    Train(TrainArgs),
    /// Evaluate a trained run after one of its snapshots.
    Eval(EvalArgs),
    /// Run an experiment plan and write the comparison table.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Split a `head<TAB>relation<TAB>tail` file into growing snapshots.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        snapshots: usize,
        /// Fraction of triples in the first snapshot; the rest is split evenly.
        #[arg(long, default_value_t = 0.6)]
        initial: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic lattice graph used by the tests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        snapshots: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scorer: Option<ScoreFunction>,
    #[arg(long)]
    mode: Option<TrainingMode>,
    #[arg(long)]
    r_base: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ranking setting of the per-snapshot reports.
    #[arg(long)]
    setting: Option<RankSetting>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    snapshot: usize,
    #[arg(long, default_value = "raw")]
    setting: RankSetting,
    /// Dataset to evaluate on; defaults to the one the run was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Overrides the plan's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `config.json` of a run directory.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    data: PathBuf,
    training: TrainingConfig,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn dataset(cmd: DatasetCommand) -> Result<()> {
    let (kg, out) = match cmd {
        DatasetCommand::Build {
            input,
            out,
            snapshots,
            initial,
            seed,
        } => {
            let (triples, entities, relations) = read_triples_file(&input)?;
            let built = build_growing_dataset(&triples, &DatasetSpec::with_initial(snapshots, initial, seed))?;
            for w in &built.warnings {
                log::warn!("{w}");
            }
            (built.into_kg(&entities, &relations)?, out)
        }
        DatasetCommand::Synth { out, seed, snapshots } => {
            let spec = SyntheticSpec {
                seed,
                num_snapshots: snapshots,
                ..SyntheticSpec::default()
            };
            (generate(&spec)?, out)
        }
    };
    write_dataset(&kg, &out)?;
    println!("{}", serde_json::to_string_pretty(&kg.stats())?);
    Ok(())
}

fn training_config(args: &TrainArgs) -> Result<TrainingConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainingConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { cfg.$field = v; })*
        };
    }
    set!(scorer => scorer, mode => mode, r_base => r_base, layers => num_layers, dim => dim,
         margin => margin, lr => learning_rate, batch => batch_size, epochs => max_epochs,
         patience => early_stop_patience, seed => seed, setting => eval_setting);
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = training_config(&args)?;
    let kg = load_snapshots(&args.data)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(
        &args.out.join("config.json"),
        &RunManifest {
            data: args.data.clone(),
            training: cfg.clone(),
        },
    )?;
    let checkpoints = args.out.join("checkpoints");
    let (report, _) = run_continual_with(&kg, &cfg, |trainer, snap| {
        let i = snap.train.snapshot;
        save_snapshot(&checkpoints, trainer.store(), i, cfg.seed)?;
        if i > 0 && cfg.mode != TrainingMode::NoIncLora {
            plan_for_snapshot(&kg, i, &cfg)?.dump(&args.out, i)?;
        }
        Ok(())
    })?;
    write_json(&args.out.join("run_report.json"), &report)?;
    for s in &report.snapshots {
        println!(
            "snapshot {}: {} epochs, {:.2}s, {} trainable params, avg MRR {:.4}",
            s.train.snapshot, s.train.epochs, s.train.train_seconds, s.train.trainable_params, s.eval.average.mrr
        );
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let path = args.run.join("config.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let kg = load_snapshots(args.data.as_ref().unwrap_or(&manifest.data))?;
    if args.snapshot >= kg.len() {
        bail!("snapshot {} requested, the dataset has {}", args.snapshot, kg.len());
    }
    let store = load_store(&args.run.join("checkpoints"), args.snapshot)?;
    let report = evaluate(&store.view()?, &kg, args.snapshot, manifest.training.scorer, args.setting)?;
    write_json(&args.run.join(format!("eval_{}.json", args.snapshot)), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let mut plan = ExperimentPlan::from_file(&args.plan)?;
    if let Some(out) = args.out {
        plan.output_dir = out;
    }
    let table = run_plan(&plan)?;
    print!("{}", table.to_csv());
    for f in &table.failures {
        log::warn!("{} {} seed {}: {}", f.dataset, f.mode, f.seed, f.error);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Dataset(cmd) => dataset(cmd),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Bench(args) => bench(args),
    }
}
