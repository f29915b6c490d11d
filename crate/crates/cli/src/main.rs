use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use msdnet::cost::{classifier_costs, write_classifier_csv, write_node_csv};
use msdnet::graph::summary::GraphSummary;
use msdnet::harness::{
    default_budget_grid, results_dir, run_ablation_suite, run_anytime_curve, run_budgeted_curve, write_ablation_csv,
    write_anytime_csv, write_budgeted_csv, Variant,
};
use msdnet::runtime::{average_flops, trace_accuracy, write_traces_csv, Evaluator};
use msdnet::trainer::{load_checkpoint, save_checkpoint, train, write_metrics_csv, Dataset, Split};
use msdnet::{ExitPlan, ExperimentConfig, NetworkGraph};

#[derive(Parser)]
#[command(name = "msdnet", version, about = "Multi-scale dense networks with early exits")]
struct Cli {
    /// Output format for results printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    /// Directory for results; each config gets a subdirectory named by its hash.
    #[arg(long, global = true, env = "MSDNET_OUT_DIR", default_value = "results")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Build the network and print its structure and cost table.
    Build(ConfigArgs),
    /// Generate the synthetic easy/hard mixture dataset.
    GenData(GenDataArgs),
    /// Train a network and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Fit an exit plan for a per-sample budget on the validation split.
    Calibrate(CalibrateArgs),
    /// Budgeted batch classification: replay a plan or sweep budgets.
    EvalBudget(EvalBudgetArgs),
    /// Anytime prediction accuracy over a grid of budgets.
    EvalAnytime(EvalAnytimeArgs),
    /// Train width-matched ablation variants and compare accuracies.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory; generated from the config's `data` section when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Reads the `data` section; defaults apply without it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write `images.bin` and `labels.csv`.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint path to write; defaults to `model.ckpt` in the results directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Average FLOPs per sample; the total budget is this times the batch size.
    #[arg(long)]
    budget: f64,
    /// Samples sharing the budget; defaults to the test split size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Where to write the plan; defaults to `plan.json` in the results directory.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalBudgetArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Replay this plan instead of sweeping budgets.
    #[arg(long, conflicts_with_all = ["budget", "budget_grid"])]
    plan: Option<PathBuf>,
    /// Split evaluated when replaying a plan.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Single per-sample budget to sweep.
    #[arg(long)]
    budget: Option<f64>,
    /// Comma-separated per-sample budgets; defaults to 20 points over [C_1, 1.2 C_K].
    #[arg(long, value_delimiter = ',')]
    budget_grid: Option<Vec<f64>>,
}

#[derive(Args)]
struct EvalAnytimeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated per-sample FLOP budgets.
    #[arg(long, value_delimiter = ',')]
    budget_grid: Option<Vec<u64>>,
    #[arg(long, conflicts_with = "budget_grid")]
    budget: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Build(a) => cmd_build(cli, a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Calibrate(a) => cmd_calibrate(cli, a),
        Command::EvalBudget(a) => cmd_eval_budget(cli, a),
        Command::EvalAnytime(a) => cmd_eval_anytime(cli, a),
        Command::Ablate(a) => cmd_ablate(cli, a),
    }
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    Ok(match a.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_data(cfg: &ExperimentConfig, a: &DataArgs) -> Result<Dataset> {
    let data = match &a.dataset {
        Some(dir) => Dataset::load(dir, cfg.network.num_classes).with_context(|| format!("loading {}", dir.display()))?,
        None => cfg.data.generate()?,
    };
    Ok(data)
}

fn load_model(m: &ModelArgs) -> Result<(ExperimentConfig, NetworkGraph, Dataset)> {
    let cfg = load_config(&m.config)?;
    let mut graph = NetworkGraph::build(&cfg.network)?;
    load_checkpoint(&mut graph, &m.checkpoint).with_context(|| format!("loading {}", m.checkpoint.display()))?;
    let data = load_data(&cfg, &m.data)?;
    Ok((cfg, graph, data))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Writes CSV produced by `f` to `path` and, in CSV mode, to stdout too.
fn emit_csv(cli: &Cli, path: &Path, f: impl Fn(&mut dyn Write) -> msdnet::Result<()>) -> Result<()> {
    let mut file = create(path)?;
    f(&mut file)?;
    file.flush()?;
    if cli.format == Format::Csv {
        f(&mut io::stdout().lock())?;
    }
    Ok(())
}

fn cmd_build(cli: &Cli, a: &ConfigArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let graph = NetworkGraph::build(&cfg.network)?;
    let costs = classifier_costs(&graph);
    let dir = results_dir(&cli.out_dir, &cfg.hash())?;
    let summary = GraphSummary::new(&graph, &costs);
    write_node_csv(&graph, &costs, create(&dir.join("nodes.csv"))?)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    emit_csv(cli, &dir.join("costs.csv"), |w| write_classifier_csv(&graph, &costs, w))?;
    if cli.format == Format::Text {
        print!("{}", summary.to_text());
    }
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let mut data_cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.data,
        None => Default::default(),
    };
    if let Some(s) = a.seed {
        data_cfg.seed = s;
    }
    let data = data_cfg.generate()?;
    data.save(&a.dataset)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        data.len(),
        data_cfg.train,
        data_cfg.val,
        data_cfg.test,
        a.dataset.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let data = load_data(&cfg, &a.data)?;
    let mut graph = NetworkGraph::build(&cfg.network)?;
    let metrics = train(&mut graph, &data, &cfg.train)?;
    let dir = results_dir(&cli.out_dir, &cfg.hash())?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| dir.join("model.ckpt"));
    save_checkpoint(&graph, &ckpt)?;
    let k = graph.num_classifiers();
    emit_csv(cli, &dir.join("metrics.csv"), |w| write_metrics_csv(&metrics, k, w))?;
    if cli.format == Format::Text {
        if let Some(last) = metrics.last() {
            println!("trained {} epochs, final loss {:.5}", last.epoch, last.train_loss);
            println!("validation accuracy per classifier: {:?}", last.val_accuracy);
        }
        println!("checkpoint {}", ckpt.display());
    }
    Ok(())
}

fn cmd_calibrate(cli: &Cli, a: &CalibrateArgs) -> Result<()> {
    let (cfg, graph, data) = load_model(&a.model)?;
    let ev = Evaluator::new(&graph);
    let val = data.subset(Split::Val).context("calibration needs a validation split")?;
    let profile = ev.confidence_profile(&val.images, &val.labels)?;
    let m = match a.batch_size {
        Some(m) => m,
        None => data.indices(Split::Test).len().max(1),
    };
    let plan = ExitPlan::fit(cfg.hash(), ev.costs(), m, a.budget * m as f64, &profile)?;
    let dir = results_dir(&cli.out_dir, &cfg.hash())?;
    let path = a.plan.clone().unwrap_or_else(|| dir.join("plan.json"));
    plan.save(&path)?;
    profile.write_csv(create(&dir.join("val_profile.csv"))?)?;
    match cli.format {
        Format::Text => {
            println!("q = {}  clamp = {:?}", plan.q, plan.clamp);
            for k in 0..plan.num_classifiers() {
                println!(
                    "  k={:<3} C_k = {:>12}  q_k = {:.6}  threshold = {:.6}  n_k = {}",
                    k + 1,
                    plan.costs[k],
                    plan.q_k[k],
                    plan.thresholds[k],
                    plan.target_counts[k]
                );
            }
            println!("plan {}", path.display());
        }
        Format::Csv => println!("{}", serde_json::to_string(&plan)?),
    }
    Ok(())
}

fn cmd_eval_budget(cli: &Cli, a: &EvalBudgetArgs) -> Result<()> {
    let (cfg, graph, data) = load_model(&a.model)?;
    let dir = results_dir(&cli.out_dir, &cfg.hash())?;
    if let Some(path) = &a.plan {
        let plan = ExitPlan::load(path)?;
        if plan.config_hash != cfg.hash() {
            bail!("plan was fitted for config {}, not {}", plan.config_hash, cfg.hash());
        }
        let split = data.subset(a.split.into())?;
        let traces = Evaluator::new(&graph).evaluate_budgeted(&split.images, &plan)?;
        emit_csv(cli, &dir.join("budgeted_traces.csv"), |w| write_traces_csv(&traces, &split.labels, w))?;
        if cli.format == Format::Text {
            let mut exits = vec![0usize; plan.num_classifiers()];
            for t in &traces {
                exits[t.exit - 1] += 1;
            }
            println!("accuracy {:.4}", trace_accuracy(&traces, &split.labels));
            println!("average FLOPs {:.1}", average_flops(&traces));
            println!("exits per classifier {exits:?}");
        }
        return Ok(());
    }
    let val = data.subset(Split::Val).context("budgeted evaluation needs a validation split")?;
    let test = data.subset(Split::Test).context("budgeted evaluation needs a test split")?;
    let grid = match (&a.budget, &a.budget_grid) {
        (Some(b), _) => vec![*b],
        (None, Some(g)) => g.clone(),
        (None, None) => default_budget_grid(Evaluator::new(&graph).costs()),
    };
    let rows = run_budgeted_curve(&graph, &val, &test, &grid)?;
    emit_csv(cli, &dir.join("budgeted.csv"), |w| write_budgeted_csv(&rows, w))?;
    if cli.format == Format::Text {
        println!("{:>14} {:>10} {:>14} {:>9}  exits", "budget", "q", "avg flops", "accuracy");
        for r in &rows {
            println!("{:>14.1} {:>10.6} {:>14.1} {:>9.4}  {:?}", r.budget, r.q, r.avg_flops, r.accuracy, r.exits);
        }
    }
    Ok(())
}

fn cmd_eval_anytime(cli: &Cli, a: &EvalAnytimeArgs) -> Result<()> {
    let (cfg, graph, data) = load_model(&a.model)?;
    let test = data.subset(Split::Test).context("anytime evaluation needs a test split")?;
    let grid: Vec<u64> = match (&a.budget, &a.budget_grid) {
        (Some(b), _) => vec![*b],
        (None, Some(g)) => g.clone(),
        (None, None) => default_budget_grid(Evaluator::new(&graph).costs()).iter().map(|b| b.round() as u64).collect(),
    };
    let rows = run_anytime_curve(&graph, &test.images, &test.labels, &grid)?;
    let dir = results_dir(&cli.out_dir, &cfg.hash())?;
    emit_csv(cli, &dir.join("anytime.csv"), |w| write_anytime_csv(&rows, w))?;
    if cli.format == Format::Text {
        println!("{:>14} {:>9} {:>10}", "budget", "accuracy", "classifier");
        for r in &rows {
            match (r.accuracy, r.classifier) {
                (Some(acc), Some(k)) => println!("{:>14} {:>9.4} {:>10}", r.budget, acc, k),
                _ => println!("{:>14} {:>9} {:>10}", r.budget, "-", "none"),
            }
        }
    }
    Ok(())
}

fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let rows = run_ablation_suite(&cfg, &Variant::ALL, &a.seeds)?;
    let dir = results_dir(&cli.out_dir, &cfg.hash())?;
    emit_csv(cli, &dir.join("ablation.csv"), |w| write_ablation_csv(&rows, w))?;
    if cli.format == Format::Text {
        println!("{:<16} {:>5} {:>3} {:>6} {:>12} {:>9}", "variant", "seed", "k", "layer", "C_k", "accuracy");
        for r in &rows {
            println!(
                "{:<16} {:>5} {:>3} {:>6} {:>12} {:>9.4}",
                r.variant.name(),
                r.seed,
                r.classifier,
                r.layer,
                r.cost,
                r.accuracy
            );
        }
    }
    Ok(())
}
