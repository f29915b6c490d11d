//! Experiment orchestration: accuracy-vs-budget curves for both inference
//! regimes and the architecture ablation table, written as CSV.
//!
//! Outputs for one configuration live under `<out>/<config hash>/`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::classifier_costs;
use crate::error::{config_err, Error, Result};
use crate::exit_policy::{Clamp, ExitPlan};
use crate::graph::{Ablation, NetworkConfig, NetworkGraph, CONFIG_VERSION};
use crate::runtime::{average_flops, trace_accuracy, Evaluator};
use crate::trainer::{train, Dataset, EpochMetrics, MixtureConfig, Split, TrainConfig};

/// Everything one experiment needs; the on-disk config file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: MixtureConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(config_err(format!(
                "version: expected {CONFIG_VERSION}, got {}",
                self.version
            )));
        }
        self.network.validate()
    }

    /// Uses `seed` for initialisation, shuffling and data generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.network.seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn hash(&self) -> String {
        self.network.arch_hash()
    }
}

/// `<out>/<config hash>`, created if missing.
pub fn results_dir(out: &Path, config_hash: &str) -> Result<PathBuf> {
    let dir = out.join(config_hash);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// A trained network and its training log.
pub struct TrainedModel {
    pub graph: NetworkGraph,
    pub metrics: Vec<EpochMetrics>,
}

/// Builds, then trains on the training split of `data`.
pub fn train_model(network: &NetworkConfig, train_cfg: &TrainConfig, data: &Dataset) -> Result<TrainedModel> {
    let mut graph = NetworkGraph::build(network)?;
    let metrics = train(&mut graph, data, train_cfg)?;
    Ok(TrainedModel { graph, metrics })
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
        }
    }
}

pub const DEFAULT_GRID_POINTS: usize = 20;

/// Default per-sample budgets: 20 log-spaced points over `[C_1, 1.2 C_K]`.
pub fn default_budget_grid(costs: &[u64]) -> Vec<f64> {
    let lo = costs[0] as f64;
    let hi = 1.2 * *costs.last().expect("at least one classifier") as f64;
    log_grid(lo, hi, DEFAULT_GRID_POINTS)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnytimeRow {
    pub budget: u64,
    /// `None` when the budget does not cover the first classifier.
    pub accuracy: Option<f64>,
    /// 1-based classifier used.
    pub classifier: Option<usize>,
}

/// Anytime accuracy of `images` at each per-sample FLOP budget.
pub fn run_anytime_curve(graph: &NetworkGraph, images: &crate::Tensor, labels: &[usize], budgets: &[u64]) -> Result<Vec<AnytimeRow>> {
    let ev = Evaluator::new(graph);
    budgets
        .iter()
        .map(|&budget| match ev.evaluate_anytime(images, budget) {
            Ok(traces) => Ok(AnytimeRow {
                budget,
                accuracy: Some(trace_accuracy(&traces, labels)),
                classifier: Some(traces[0].exit),
            }),
            Err(Error::BudgetTooSmall { .. }) => Ok(AnytimeRow { budget, accuracy: None, classifier: None }),
            Err(e) => Err(e),
        })
        .collect()
}

pub const NO_PREDICTION: &str = "no-prediction";

pub fn write_anytime_csv<W: Write>(rows: &[AnytimeRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["budget", "accuracy", "classifier"])?;
    for r in rows {
        w.write_record([
            r.budget.to_string(),
            r.accuracy.map_or_else(|| NO_PREDICTION.to_string(), |a| a.to_string()),
            r.classifier.map_or_else(|| NO_PREDICTION.to_string(), |k| k.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetedRow {
    /// Average per-sample budget `B / M`.
    pub budget: f64,
    pub total_budget: f64,
    pub q: f64,
    pub clamp: Option<Clamp>,
    pub avg_flops: f64,
    pub accuracy: f64,
    /// Test samples exiting at each classifier.
    pub exits: Vec<usize>,
}

/// Solves, calibrates and evaluates one budget. `budget` is per sample;
/// the batch is the whole test set.
pub fn budgeted_point(
    graph: &NetworkGraph,
    val: &Dataset,
    test: &Dataset,
    budget: f64,
) -> Result<(BudgetedRow, ExitPlan)> {
    let ev = Evaluator::new(graph);
    let profile = ev.confidence_profile(&val.images, &val.labels)?;
    budgeted_point_with(&ev, &profile, test, budget)
}

fn budgeted_point_with(
    ev: &Evaluator<'_>,
    profile: &crate::ConfidenceProfile,
    test: &Dataset,
    budget: f64,
) -> Result<(BudgetedRow, ExitPlan)> {
    let m = test.len();
    let total = budget * m as f64;
    let plan = ExitPlan::fit(ev.graph().config().arch_hash(), ev.costs(), m, total, profile)?;
    let traces = ev.evaluate_budgeted(&test.images, &plan)?;
    let mut exits = vec![0; ev.costs().len()];
    for t in &traces {
        exits[t.exit - 1] += 1;
    }
    let row = BudgetedRow {
        budget,
        total_budget: total,
        q: plan.q,
        clamp: plan.clamp,
        avg_flops: average_flops(&traces),
        accuracy: trace_accuracy(&traces, &test.labels),
        exits,
    };
    Ok((row, plan))
}

/// Budgeted batch classification over a grid of per-sample budgets.
/// Thresholds come from `val`; accuracy and cost are measured on `test`.
pub fn run_budgeted_curve(graph: &NetworkGraph, val: &Dataset, test: &Dataset, budgets: &[f64]) -> Result<Vec<BudgetedRow>> {
    let ev = Evaluator::new(graph);
    let profile = ev.confidence_profile(&val.images, &val.labels)?;
    budgets.iter().map(|&b| Ok(budgeted_point_with(&ev, &profile, test, b)?.0)).collect()
}

fn clamp_name(c: Option<Clamp>) -> &'static str {
    match c {
        None => "none",
        Some(Clamp::AllExitFirst) => "all-exit-first",
        Some(Clamp::MaxDepth) => "max-depth",
    }
}

pub fn write_budgeted_csv<W: Write>(rows: &[BudgetedRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = rows.first().map_or(0, |r| r.exits.len());
    let mut header: Vec<String> =
        ["budget", "total_budget", "q", "clamp", "avg_flops", "accuracy"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=k).map(|i| format!("exits_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.budget.to_string(),
            r.total_budget.to_string(),
            r.q.to_string(),
            clamp_name(r.clamp).to_string(),
            r.avg_flops.to_string(),
            r.accuracy.to_string(),
        ];
        rec.extend(r.exits.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoDense,
    NoMultiscale,
    NoIntermediate,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoDense, Variant::NoMultiscale, Variant::NoIntermediate];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDense => "no-dense",
            Variant::NoMultiscale => "no-multiscale",
            Variant::NoIntermediate => "no-intermediate",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoDense => a.dense_connectivity = false,
            Variant::NoMultiscale => a.multi_scale = false,
            Variant::NoIntermediate => a.intermediate_classifiers = false,
        }
        a
    }
}

/// Relative tolerance on `C_K` when matching variant widths.
pub const WIDTH_MATCH_TOLERANCE: f64 = 0.10;

/// Widens or narrows `base` with `variant`'s ablation applied so that its
/// final classifier cost is as close as possible to `target`. Searches
/// growth-rate multipliers (keeping rates even) and head widths. Returns the
/// chosen config and its `C_K / target` ratio.
pub fn match_width(base: &NetworkConfig, variant: Variant, target: u64) -> Result<(NetworkConfig, f64)> {
    let mut best: Option<(NetworkConfig, f64)> = None;
    let head_options = {
        let h = base.head_channels as f64;
        let mut v: Vec<usize> = [0.5, 0.75, 1.0, 1.5, 2.0].iter().map(|f| ((h * f).round() as usize).max(1)).collect();
        v.dedup();
        v
    };
    for step in 2..=32 {
        let factor = step as f64 / 8.0;
        let growth: Vec<usize> = base
            .growth_rates
            .iter()
            .map(|&g| ((g as f64 * factor / 2.0).round() as usize * 2).max(2))
            .collect();
        for &head in &head_options {
            let mut cfg = base.clone();
            cfg.ablation = variant.ablation();
            cfg.growth_rates = growth.clone();
            cfg.head_channels = head;
            let Ok(graph) = NetworkGraph::build(&cfg) else { continue };
            let ratio = classifier_costs(&graph).total() as f64 / target as f64;
            let better = best.as_ref().is_none_or(|(_, r)| (ratio - 1.0).abs() < (r - 1.0).abs());
            if better {
                best = Some((cfg, ratio));
            }
        }
    }
    let (cfg, ratio) = best.ok_or_else(|| config_err(format!("no buildable width for variant {}", variant.name())))?;
    if (ratio - 1.0).abs() > WIDTH_MATCH_TOLERANCE {
        log::warn!("variant {} matched C_K only to ratio {ratio:.3}", variant.name());
    }
    Ok((cfg, ratio))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// 1-based classifier index.
    pub classifier: usize,
    pub layer: usize,
    pub cost: u64,
    pub accuracy: f64,
}

/// Per-classifier test accuracy of a trained graph, as ablation rows.
pub fn ablation_rows(graph: &NetworkGraph, variant: Variant, seed: u64, test: &Dataset) -> Result<Vec<AblationRow>> {
    let ev = Evaluator::new(graph);
    let acc = ev.accuracies(&test.images, &test.labels)?;
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(k, accuracy)| AblationRow {
            variant,
            seed,
            classifier: k + 1,
            layer: graph.classifier_layers()[k],
            cost: ev.costs()[k],
            accuracy,
        })
        .collect())
}

/// Trains every variant (width-matched to the full model's `C_K`) for
/// every seed on the mixture described by `exp.data`.
pub fn run_ablation_suite(exp: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let full_cost = classifier_costs(&NetworkGraph::build(&exp.network)?).total();
    let mut matched = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = if v == Variant::Full {
            exp.network.clone()
        } else {
            let (cfg, ratio) = match_width(&exp.network, v, full_cost)?;
            log::info!("variant {}: growth {:?}, head {}, C_K ratio {ratio:.3}", v.name(), cfg.growth_rates, cfg.head_channels);
            cfg
        };
        matched.push((v, cfg));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let seeded = exp.clone().with_seed(seed);
        let data = seeded.data.generate()?;
        let test = data.subset(Split::Test)?;
        for (v, cfg) in &matched {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let model = train_model(&cfg, &seeded.train, &data)?;
            rows.extend(ablation_rows(&model.graph, *v, seed, &test)?);
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "seed", "classifier", "layer", "cost", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.variant.name().to_string(),
            r.seed.to_string(),
            r.classifier.to_string(),
            r.layer.to_string(),
            r.cost.to_string(),
            r.accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
