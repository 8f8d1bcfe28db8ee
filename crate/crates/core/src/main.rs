use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use multiexit::anytime::{run_anytime, select_exit, BudgetPolicy, Interrupt, WallClockAdapter};
use multiexit::branches::BranchArchitecture;
use multiexit::data::checkpoint::{load_checkpoint, save_checkpoint, TrainingMetadata};
use multiexit::data::export::{emit_plot_script, export_profiles, import_profiles};
use multiexit::data::idx::load_fashion_mnist;
use multiexit::data::synthetic::gen_count_regression;
use multiexit::data::{LabeledImageSet, Split};
use multiexit::profile::{exit_flops, mark_practical, profile_exits, ExitProfile, FlopCount, PracticalMode};
use multiexit::train::{
    argmax, evaluate_exits, evaluate_final, train_backbone, train_classifier_wise, train_end_to_end, train_layer_wise,
    ExitId, LossWeights, MultiExitModel, TaskKind, TrainConfig, TrainStrategy,
};
use multiexit::vit::ViTConfig;
use multiexit::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Multi-exit Vision Transformers: training, profiling and anytime inference")]
struct Cli {
    /// Directory holding the Fashion-MNIST IDX files.
    #[arg(long, global = true, env = "MULTIEXIT_DATA_DIR", default_value = "data/fashion-mnist")]
    data_dir: PathBuf,
    /// Seed for initialisation, shuffling, dropout and synthetic data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    /// Fashion-MNIST classification.
    FashionMnist,
    /// Synthetic blob counting (regression).
    Count,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Training images (before the 10% validation hold-out).
    #[arg(long, default_value_t = 6000)]
    train_size: usize,
    #[arg(long, default_value_t = 1000)]
    test_size: usize,
}

#[derive(Args, Clone)]
struct OptimArgs {
    /// Learning rates to sweep; the run with the lowest validation loss is kept.
    #[arg(long = "lr", value_delimiter = ',', default_values_t = vec![1e-3])]
    lrs: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone alone and save a checkpoint.
    TrainBackbone {
        #[arg(long, value_enum, default_value_t = TaskArg::FashionMnist)]
        task: TaskArg,
        #[arg(long, default_value_t = 6)]
        depth: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Attach and train early exits on a checkpoint.
    TrainExits {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// classifier-wise, end-to-end or layer-wise.
        #[arg(long)]
        strategy: String,
        /// Architecture name or `all`.
        #[arg(long, default_value = "all")]
        arch: String,
        /// Comma-separated 1-based locations or `all`.
        #[arg(long, default_value = "all")]
        locations: String,
        /// End-to-end only: weight the final exit twice as much as each early exit.
        #[arg(long)]
        lambda_final_double: bool,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Evaluate every exit on the test split and write the profile CSV.
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Judge practicality within each architecture instead of across all of them.
        #[arg(long)]
        per_architecture: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Anytime prediction for one test image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "interrupt_after_ms", required_unless_present = "interrupt_after_ms")]
        budget_flops: Option<u64>,
        /// Wall-clock budget, converted to FLOPs with measured throughput.
        #[arg(long)]
        interrupt_after_ms: Option<u64>,
        /// Test image index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write a matplotlib script that plots a profile CSV.
    ExportPlot {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Splits {
    train: LabeledImageSet,
    val: LabeledImageSet,
    test: LabeledImageSet,
}

fn load_data(cli: &Cli, task: TaskKind, data: &DataArgs) -> Result<Splits> {
    let (full, test) = match task {
        TaskKind::Classification { .. } => {
            let (train, test) = load_fashion_mnist(&cli.data_dir)?;
            let take = |set: &LabeledImageSet, n: usize, split| set.subset(&(0..n.min(set.len())).collect::<Vec<_>>(), split);
            (take(&train, data.train_size, Split::Train)?, take(&test, data.test_size, Split::Test)?)
        }
        TaskKind::Regression => {
            let size = 28;
            let train = gen_count_regression(data.train_size, size, cli.seed)?;
            let mut test = gen_count_regression(data.test_size, size, cli.seed.wrapping_add(1))?;
            test.split = Split::Test;
            (train, test)
        }
    };
    let (train, val) = full.split_validation(0.1, cli.seed)?;
    info!("data: {} train, {} validation, {} test", train.len(), val.len(), test.len());
    Ok(Splits { train, val, test })
}

fn train_config(cli: &Cli, optim: &OptimArgs, lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        max_epochs: optim.epochs,
        batch_size: optim.batch_size,
        seed: cli.seed,
        ..TrainConfig::default()
    }
}

fn parse_archs(s: &str) -> Result<Vec<BranchArchitecture>> {
    if s == "all" {
        return Ok(BranchArchitecture::ALL.to_vec());
    }
    s.split(',').map(|a| a.trim().parse()).collect()
}

fn parse_locations(s: &str, depth: usize) -> Result<Vec<usize>> {
    if s == "all" {
        return Ok((1..=depth).collect());
    }
    s.split(',')
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad location {l:?}")))
        })
        .collect()
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    info!("seed {}", cli.seed);
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainBackbone {
            task,
            depth,
            dim,
            out,
            data,
            optim,
        } => {
            let task = match task {
                TaskArg::FashionMnist => TaskKind::Classification { classes: 10 },
                TaskArg::Count => TaskKind::Regression,
            };
            let config = ViTConfig {
                depth: *depth,
                dim: *dim,
                outputs: task.outputs(),
                ..ViTConfig::default()
            };
            let splits = load_data(cli, task, data)?;
            let mut best: Option<(f64, MultiExitModel, usize)> = None;
            for &lr in &optim.lrs {
                let mut model = MultiExitModel::new(config.clone(), task, cli.seed)?;
                let report = train_backbone(&mut model, &splits.train, &splits.val, &train_config(cli, optim, lr))?;
                info!("lr {lr:e}: best val loss {:.5} at epoch {}", report.best_val_loss, report.best_epoch);
                if best.as_ref().is_none_or(|(loss, _, _)| report.best_val_loss < *loss) {
                    best = Some((report.best_val_loss, model, report.epochs.len()));
                }
            }
            let (_, model, epochs) = best.expect("at least one learning rate");
            let test = evaluate_final(&model, &splits.test, 200)?;
            println!("test {}: {:.4}", model.task.metric_kind().name(), test.metric);
            let meta = TrainingMetadata {
                strategy: None,
                seed: cli.seed,
                epochs,
            };
            save_checkpoint(out, &model, &meta)?;
            info!("saved {}", out.display());
        }
        Command::TrainExits {
            checkpoint,
            out,
            strategy,
            arch,
            locations,
            lambda_final_double,
            data,
            optim,
        } => {
            let mut strategy: TrainStrategy = strategy.parse()?;
            if *lambda_final_double {
                match &mut strategy {
                    TrainStrategy::EndToEnd(w) => *w = LossWeights::final_double(),
                    _ => return Err(Error::InvalidConfig("--lambda-final-double applies to end-to-end only".into())),
                }
            }
            let base = load_checkpoint(checkpoint, None)?.model;
            let archs = parse_archs(arch)?;
            let locations = parse_locations(locations, base.depth())?;
            let splits = load_data(cli, base.task, data)?;
            let mut best: Option<(f64, MultiExitModel, usize)> = None;
            for &lr in &optim.lrs {
                let mut model = base.clone();
                let keys: Vec<(usize, BranchArchitecture)> = locations
                    .iter()
                    .flat_map(|&l| archs.iter().map(move |&a| (l, a)))
                    .collect();
                for &(l, a) in &keys {
                    model.add_branch(l, a)?;
                }
                let config = train_config(cli, optim, lr);
                let (score, epochs) = match strategy {
                    TrainStrategy::ClassifierWise => {
                        let reports = train_classifier_wise(&mut model, &splits.train, &splits.val, &config, Some(&keys))?;
                        for r in &reports {
                            info!(
                                "{} @ {}: val {} {:.4}",
                                r.arch,
                                r.location,
                                model.task.metric_kind().name(),
                                r.fit.best_val_metric
                            );
                        }
                        let total: f64 = reports.iter().map(|r| r.fit.best_val_loss).sum();
                        (total, reports.iter().map(|r| r.fit.epochs.len()).max().unwrap_or(0))
                    }
                    TrainStrategy::EndToEnd(weights) => {
                        let report = train_end_to_end(&mut model, &splits.train, &splits.val, &config, weights)?;
                        (report.fit.best_val_loss, report.fit.epochs.len())
                    }
                    TrainStrategy::LayerWise => {
                        if archs.len() != 1 {
                            return Err(Error::InvalidConfig("layer-wise training takes exactly one architecture".into()));
                        }
                        let reports = train_layer_wise(&mut model, &splits.train, &splits.val, &config, &keys)?;
                        for r in &reports {
                            info!(
                                "stage {} (layers {:?}): val {} {:.4}",
                                r.stage,
                                r.layers,
                                model.task.metric_kind().name(),
                                r.val.metric
                            );
                        }
                        let last = reports.last().expect("layer-wise always has a final stage");
                        (last.fit.best_val_loss, reports.iter().map(|r| r.fit.epochs.len()).sum())
                    }
                };
                info!("lr {lr:e}: validation loss {score:.5}");
                if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                    best = Some((score, model, epochs));
                }
            }
            let (_, model, epochs) = best.expect("at least one learning rate");
            for (exit, score) in evaluate_exits(&model, &splits.test, 200)? {
                println!("{}: test {} {:.4}", exit_label(exit), model.task.metric_kind().name(), score.metric);
            }
            let meta = TrainingMetadata {
                strategy: Some(strategy.name().to_string()),
                seed: cli.seed,
                epochs,
            };
            save_checkpoint(out, &model, &meta)?;
            info!("saved {}", out.display());
        }
        Command::Profile {
            checkpoint,
            out,
            per_architecture,
            data,
        } => {
            let model = load_checkpoint(checkpoint, None)?.model;
            let splits = load_data(cli, model.task, data)?;
            let mut profiles = profile_exits(&model, &splits.test, 200)?;
            if *per_architecture {
                mark_practical(&mut profiles, PracticalMode::PerArchitecture)?;
            }
            export_profiles(&profiles, out)?;
            let practical = profiles.iter().filter(|p| p.practical).count();
            println!("wrote {} profiles ({practical} practical) to {}", profiles.len(), out.display());
        }
        Command::Infer {
            checkpoint,
            budget_flops,
            interrupt_after_ms,
            index,
            data,
        } => {
            let model = load_checkpoint(checkpoint, None)?.model;
            let splits = load_data(cli, model.task, data)?;
            if *index >= splits.test.len() {
                return Err(Error::InvalidConfig(format!("test index {index} out of range")));
            }
            let image = splits.test.gather_images(&[*index]);
            let budget = match (budget_flops, interrupt_after_ms) {
                (Some(b), _) => FlopCount(*b),
                (None, Some(ms)) => {
                    let adapter = WallClockAdapter::calibrate(&model, &image, 5)?;
                    let b = adapter.budget_for(Duration::from_millis(*ms));
                    info!("{:.3e} FLOP/s measured, {ms} ms ≈ {b} FLOPs", adapter.flops_per_second);
                    b
                }
                (None, None) => unreachable!("clap requires one budget"),
            };
            let mut costs: Vec<ExitProfile> = Vec::new();
            for exit in model.exits() {
                costs.push(ExitProfile {
                    location: match exit {
                        ExitId::Branch(l, _) => l,
                        ExitId::Final => model.depth(),
                    },
                    arch: match exit {
                        ExitId::Branch(_, a) => multiexit::profile::ExitKind::Branch(a),
                        ExitId::Final => multiexit::profile::ExitKind::Final,
                    },
                    metric_kind: model.task.metric_kind(),
                    metric_value: 0.0,
                    cumulative_flops: exit_flops(&model, exit)?,
                    practical: false,
                });
            }
            if let Some(p) = select_exit(&costs, budget)? {
                info!("planned exit: {} at location {} ({} FLOPs)", p.arch, p.location, p.cumulative_flops);
            }
            let result = run_anytime(&model, &image, BudgetPolicy::Flops(budget), &Interrupt::new())?;
            let answer = match model.task {
                TaskKind::Classification { .. } => format!("class {}", argmax(&result.prediction)),
                TaskKind::Regression => format!("count {:.2}", result.prediction[0]),
            };
            println!(
                "{answer} from {} ({} FLOPs, {} exits evaluated)",
                exit_label(result.exit),
                result.flops,
                result.exits_evaluated
            );
        }
        Command::ExportPlot { profiles, out } => {
            let rows = import_profiles(profiles)?;
            emit_plot_script(&rows, profiles, out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn exit_label(exit: ExitId) -> String {
    match exit {
        ExitId::Branch(l, a) => format!("{a} @ {l}"),
        ExitId::Final => "final".to_string(),
    }
}
