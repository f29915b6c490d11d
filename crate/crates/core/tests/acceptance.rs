mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use msdnet::cost::classifier_costs;
use msdnet::exit_policy::{
    calibrate_thresholds, exit_distribution, replay_exits, solve_budget, Clamp, DEFAULT_TOLERANCE, Q_MIN,
};
use msdnet::graph::{InputShape, NodeKind, Placement};
use msdnet::harness::{
    budgeted_point, match_width, run_anytime_curve, run_budgeted_curve, train_model, write_anytime_csv,
    write_budgeted_csv, Variant, WIDTH_MATCH_TOLERANCE,
};
use msdnet::runtime::write_traces_csv;
use msdnet::trainer::{write_metrics_csv, Split};
use msdnet::{Evaluator, ExitPlan, ExperimentConfig, NetworkConfig, NetworkGraph};
use rand::Rng;

const DESK: &str = r#"
version = 1

[network]
input = { channels = 1, height = 16, width = 16 }
num_classes = 2
num_scales = 2
num_layers = 6
growth_rates = [2, 4]
head_channels = 8
classifiers = { kind = "budgeted", count = 3 }

[train]
epochs = 30

[data]
train = 2000
val = 500
test = 500
size = 16
hard_fraction = 0.4
"#;

const SEEDS: [u64; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
const MIN_ACCURACY: f64 = 0.85;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn from_result(r: Result<String, String>) -> Outcome {
    match r {
        Ok(d) => outcome(true, d),
        Err(d) => outcome(false, d),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let ops = op_gradient_errors();
    let (worst_name, worst_op) = ops.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    let net = network_gradient_error(2, vec![2, 4]);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_op <= OP_TOL && net <= NET_TOL && secs < 60.0,
        format!("{} ops, worst {worst_op:.1e} ({worst_name}); 2-scale 4-layer net {net:.1e}; {secs:.1}s", ops.len()),
    )
}

fn cifar_like(layers: usize, classifiers: Placement) -> NetworkConfig {
    let mut cfg = small_config(3, layers, vec![6, 12, 24], 32);
    cfg.input = InputShape { channels: 3, height: 32, width: 32 };
    cfg.classifiers = classifiers;
    cfg
}

fn structure() -> Result<String, String> {
    let anytime = NetworkGraph::build(&cifar_like(24, Placement::Anytime)).map_err(|e| e.to_string())?;
    let want: Vec<usize> = (4..=24).step_by(2).collect();
    if anytime.classifier_layers() != want {
        return Err(format!("anytime L=24 heads at {:?}", anytime.classifier_layers()));
    }
    let budgeted = NetworkGraph::build(&cifar_like(10, Placement::Budgeted { count: None })).map_err(|e| e.to_string())?;
    if budgeted.classifier_layers() != [1, 3, 6, 10] {
        return Err(format!("budgeted L=10 heads at {:?}", budgeted.classifier_layers()));
    }

    let mut cfg = cifar_like(9, Placement::Budgeted { count: None });
    cfg.reduction = true;
    let g = NetworkGraph::build(&cfg).map_err(|e| e.to_string())?;
    for layer in 1..=9 {
        let block = (layer - 1) / 3 + 1;
        let alive: Vec<usize> = (1..=3).filter(|&s| g.feature_node(layer, s).is_some()).collect();
        let want: Vec<usize> = (block..=3).collect();
        if alive != want {
            return Err(format!("layer {layer} keeps scales {alive:?}, expected {want:?}"));
        }
    }
    let mut transitions = 0;
    for node in g.nodes().iter().filter(|n| n.kind == NodeKind::Transition) {
        let cin = g.node(node.inputs[0]).shape.channels();
        if node.shape.channels() * 2 != cin {
            return Err(format!("transition {:?}: {cin} -> {}", node.id, node.shape.channels()));
        }
        transitions += 1;
    }
    if transitions == 0 {
        return Err("reduction config has no transitions".into());
    }

    let mut r = rng(77);
    for case in 0..20 {
        let scales = r.random_range(1..=4);
        let layers = r.random_range(1..=8);
        let growth: Vec<usize> = (0..scales).map(|_| 2 * r.random_range(1..=8)).collect();
        let mut cfg = small_config(scales, layers, growth.clone(), 32);
        cfg.seed_multiplier = r.random_range(1..=4);
        cfg.classifiers = Placement::Explicit { layers: vec![layers] };
        let g = NetworkGraph::build(&cfg).map_err(|e| format!("case {case}: {e}"))?;
        for l in 1..=layers {
            for s in 1..=scales {
                let want = (cfg.seed_multiplier + l - 1) * growth[s - 1];
                if g.channels_at(l, s) != Some(want) {
                    return Err(format!("case {case}: layer {l} scale {s} has {:?}, expected {want}", g.channels_at(l, s)));
                }
            }
        }
    }
    Ok("heads {4,6,..,24} and {1,3,6,10}; reduction keeps S-i+1 scales; transitions halve; 20 channel formulas".into())
}

fn exit_math() -> Result<String, String> {
    let err = three_way_distribution_error();
    if err > 1e-9 {
        return Err(format!("q=0.5, K=3 off by {err:e}"));
    }
    solve_budget_against_grid(50, 31)?;
    let costs = [10.0, 20.0, 60.0];
    let low = solve_budget(&costs, 4, 40.0, DEFAULT_TOLERANCE).map_err(|e| e.to_string())?;
    let high = solve_budget(&costs, 4, 120.0, DEFAULT_TOLERANCE).map_err(|e| e.to_string())?;
    if (low.q, low.clamp) != (1.0, Some(Clamp::AllExitFirst)) || (high.q, high.clamp) != (Q_MIN, Some(Clamp::MaxDepth)) {
        return Err(format!("clamps: {low:?} / {high:?}"));
    }
    Ok(format!("q_k error {err:.1e}; 50 random budgets within 1e-6 and inside the oracle grid cell; both clamps"))
}

fn calibration_replay() -> Result<String, String> {
    let n = 1000;
    for (seed, q) in [(1, 0.3), (2, 0.05), (3, 0.7)] {
        let profile = synthetic_profile(n, 4, seed, None);
        let qk = exit_distribution(q, 4).map_err(|e| e.to_string())?;
        let cal = calibrate_thresholds(&profile, &qk, n).map_err(|e| e.to_string())?;
        let replay = exit_counts(&replay_exits(&profile, &cal.thresholds), 4);
        if replay != cal.target_counts {
            return Err(format!("q={q}: replay {replay:?} vs n_k {:?}", cal.target_counts));
        }
    }
    let tied = synthetic_profile(n, 3, 9, Some(20.0));
    let cal = calibrate_thresholds(&tied, &exit_distribution(0.4, 3).unwrap(), n).map_err(|e| e.to_string())?;
    let replay = exit_counts(&replay_exits(&tied, &cal.thresholds), 3);
    if replay != cal.exit_counts {
        return Err(format!("tied profile: replay {replay:?} vs calibration {:?}", cal.exit_counts));
    }
    Ok("1000-sample profiles replay n_k exactly; tied profile replays its calibration".into())
}

fn lazy_eager() -> Result<String, String> {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for case in 0..10 {
        let graph = random_graph(&mut r);
        let gap = lazy_eager_gap(&graph, &mut r).map_err(|e| format!("case {case}: {e}"))?;
        if gap > LOGIT_TOL {
            return Err(format!("case {case}: logits differ by {gap:e}"));
        }
        worst = worst.max(gap);
        anytime_within_budget(&graph, &mut r).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(format!("10 configs, worst logit gap {worst:.1e}; metered FLOPs equal C_k; anytime within budget"))
}

fn cost_golden() -> Result<String, String> {
    for (name, nodes, costs) in MICRO_CONFIGS {
        check_golden(name, nodes, costs)?;
    }
    Ok("3 micro configs match node by node".into())
}

struct SeedRun {
    accuracies: Vec<f64>,
    dynamic: f64,
    best_affordable: f64,
    full_final: f64,
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(DESK).expect("desk config parses")
}

fn desk_seed(exp: &ExperimentConfig, seed: u64) -> SeedRun {
    let exp = exp.clone().with_seed(seed);
    let data = exp.data.generate().unwrap();
    let model = train_model(&exp.network, &exp.train, &data).unwrap();
    let val = data.subset(Split::Val).unwrap();
    let test = data.subset(Split::Test).unwrap();
    let ev = Evaluator::new(&model.graph);
    let accuracies = ev.accuracies(&test.images, &test.labels).unwrap();
    let costs = ev.costs();
    let b = (costs[0] + costs[costs.len() - 1]) as f64 / 2.0;
    let best_affordable = costs
        .iter()
        .zip(&accuracies)
        .filter(|(&c, _)| c as f64 <= b)
        .map(|(_, &a)| a)
        .fold(0.0, f64::max);
    let (row, _) = budgeted_point(&model.graph, &val, &test, b).unwrap();
    SeedRun { full_final: *accuracies.last().unwrap(), accuracies, dynamic: row.accuracy, best_affordable }
}

fn desk_behaviour(runs: &[SeedRun], secs: f64) -> Outcome {
    let mut good = 0;
    for (seed, r) in SEEDS.iter().zip(runs) {
        let floor = r.accuracies.iter().all(|&a| a >= MIN_ACCURACY);
        let gain = r.dynamic >= r.best_affordable;
        println!(
            "    seed {seed:>2}: test acc {:?}  dynamic {:.3} vs best affordable {:.3}  {}",
            r.accuracies,
            r.dynamic,
            r.best_affordable,
            if floor && gain { "ok" } else { "miss" }
        );
        good += usize::from(floor && gain);
    }
    outcome(good >= 8, format!("{good}/10 seeds meet the floor and the dynamic gain (need 8); {secs:.0}s"))
}

fn ablation(exp: &ExperimentConfig, runs: &[SeedRun]) -> Outcome {
    let full_cost = classifier_costs(&NetworkGraph::build(&exp.network).unwrap()).total();
    let (cfg, ratio) = match_width(&exp.network, Variant::NoDense, full_cost).unwrap();
    if (ratio - 1.0).abs() > WIDTH_MATCH_TOLERANCE {
        return outcome(false, format!("no-dense C_K ratio {ratio:.3} outside tolerance"));
    }
    let mut good = 0;
    for (&seed, run) in SEEDS.iter().zip(runs) {
        let seeded = exp.clone().with_seed(seed);
        let data = seeded.data.generate().unwrap();
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let model = train_model(&cfg, &seeded.train, &data).unwrap();
        let test = data.subset(Split::Test).unwrap();
        let acc = *Evaluator::new(&model.graph).accuracies(&test.images, &test.labels).unwrap().last().unwrap();
        println!("    seed {seed:>2}: full {:.3}  no-dense {acc:.3}", run.full_final);
        good += usize::from(acc <= run.full_final);
    }
    outcome(
        good >= 7,
        format!("no-dense (growth {:?}, C_K ratio {ratio:.3}) at or below full in {good}/10 seeds (need 7)", cfg.growth_rates),
    )
}

const TINY: &str = r#"
version = 1

[network]
input = { channels = 1, height = 8, width = 8 }
num_classes = 2
num_scales = 2
num_layers = 4
growth_rates = [2, 2]
head_channels = 4
classifiers = { kind = "budgeted" }

[train]
epochs = 3
batch_size = 16

[data]
train = 64
val = 32
test = 32
size = 8
hard_fraction = 0.4
seed = 5
"#;

/// Train, calibrate and evaluate from scratch, returning every CSV.
fn pipeline_csvs() -> Vec<Vec<u8>> {
    let exp = ExperimentConfig::from_toml(TINY).unwrap().with_seed(5);
    let data = exp.data.generate().unwrap();
    let model = train_model(&exp.network, &exp.train, &data).unwrap();
    let (val, test) = (data.subset(Split::Val).unwrap(), data.subset(Split::Test).unwrap());
    let ev = Evaluator::new(&model.graph);
    let costs = ev.costs().to_vec();
    let mut out = vec![Vec::new(); 5];
    write_metrics_csv(&model.metrics, costs.len(), &mut out[0]).unwrap();
    let mid = (costs[0] + costs[costs.len() - 1]) as f64 / 2.0;
    let rows = run_budgeted_curve(&model.graph, &val, &test, &[costs[0] as f64, mid]).unwrap();
    write_budgeted_csv(&rows, &mut out[1]).unwrap();
    let rows = run_anytime_curve(&model.graph, &test.images, &test.labels, &costs).unwrap();
    write_anytime_csv(&rows, &mut out[2]).unwrap();
    let profile = ev.confidence_profile(&val.images, &val.labels).unwrap();
    profile.write_csv(&mut out[3]).unwrap();
    let plan = ExitPlan::fit(exp.hash(), &costs, test.len(), mid * test.len() as f64, &profile).unwrap();
    let traces = ev.evaluate_budgeted(&test.images, &plan).unwrap();
    write_traces_csv(&traces, &test.labels, &mut out[4]).unwrap();
    out
}

fn determinism() -> Result<String, String> {
    let a = pipeline_csvs();
    let b = pipeline_csvs();
    let names = ["metrics", "budgeted", "anytime", "profile", "traces"];
    for ((x, y), name) in a.iter().zip(&b).zip(names) {
        if x.is_empty() || x != y {
            return Err(format!("{name}.csv differs between runs"));
        }
    }
    Ok(format!("{} CSVs byte-identical across two runs", names.len()))
}

fn main() -> ExitCode {
    // honour `cargo test -- <filter>` the way the default harness would
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "structure", from_result(structure()));
    report(3, "exit math", from_result(exit_math()));
    report(4, "calibration replay", from_result(calibration_replay()));
    report(5, "lazy/eager equivalence", from_result(lazy_eager()));
    report(6, "cost golden files", from_result(cost_golden()));

    let exp = desk_config();
    let start = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| desk_seed(&exp, s)).collect();
    let secs = start.elapsed().as_secs_f64();
    report(7, "desk-scale dynamic evaluation", desk_behaviour(&runs, secs));
    report(8, "dense-connectivity ablation", ablation(&exp, &runs));
    report(9, "determinism", from_result(determinism()));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
