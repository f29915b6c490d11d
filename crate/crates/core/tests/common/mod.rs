#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use msdnet::cost::{classifier_costs, write_classifier_csv, write_node_csv};
use msdnet::exit_policy::{exit_distribution, solve_budget, DEFAULT_TOLERANCE, Q_MIN};
use msdnet::graph::{Ablation, InputShape, NetworkConfig, Placement};
use msdnet::tensor::ops::ConvGeometry;
use msdnet::tensor::{BnMode, RunningStats, BN_MOMENTUM};
use msdnet::trainer::loss_and_grads;
use msdnet::{ConfidenceProfile, Evaluator, NetworkGraph, NodeId, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const OP_TOL: f64 = 1e-4;
pub const NET_TOL: f64 = 1e-3;
pub const LOGIT_TOL: f64 = 1e-10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Relative error with a floor so tiny gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn small_config(scales: usize, layers: usize, growth: Vec<usize>, size: usize) -> NetworkConfig {
    NetworkConfig {
        input: InputShape { channels: 1, height: size, width: size },
        num_classes: 3,
        num_scales: scales,
        num_layers: layers,
        growth_rates: growth,
        seed_multiplier: 2,
        bottleneck_factor: 4,
        classifiers: Placement::Budgeted { count: None },
        head_channels: 4,
        head_matches_input: false,
        reduction: false,
        ablation: Ablation::default(),
        densenet_star: false,
        seed: 0,
    }
}

// ---- gradients ----

/// Compares reverse-mode gradients of `f` against central differences.
/// `f` builds a scalar loss from the input vars on a fresh tape. At most
/// `coords` evenly spaced coordinates per input are probed. Returns the
/// worst relative error.
pub fn check_gradients<F>(inputs: &[Tensor], coords: usize, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let n = inputs[i].len();
        for j in (0..n).step_by(n.div_ceil(coords.max(1)).max(1)) {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(grad[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Flatten, a fixed random linear map and cross-entropy: turns any op
/// output into a scalar whose gradient reaches every element.
pub fn readout(tape: &mut Tape, x: Var) -> Var {
    let x = if tape.value(x).shape().len() == 4 { tape.flatten(x).unwrap() } else { x };
    let [n, f] = tape.value(x).dims2().unwrap();
    let mut r = rng(99);
    let w = tape.leaf(random_tensor(&[3, f], &mut r));
    let b = tape.leaf(random_tensor(&[3], &mut r));
    let y = tape.linear(x, w, b).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    tape.cross_entropy(y, &labels).unwrap()
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

fn op_cases() -> Vec<OpCase> {
    let mut r = rng(1);
    let mut t = |shape: &[usize]| random_tensor(shape, &mut r);
    let mut bn_stats = RunningStats::new(3);
    bn_stats.mean = vec![0.3, -0.2, 0.1];
    bn_stats.var = vec![0.5, 1.5, 2.0];
    let odd = ConvGeometry::new(5, 5, 3, 3, 2, 1, false).unwrap();
    vec![
        ("conv 3x3", vec![t(&[2, 3, 5, 5]), t(&[4, 3, 3, 3])], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1).unwrap();
            readout(t, y)
        })),
        ("conv 1x1", vec![t(&[2, 4, 4, 4]), t(&[3, 4, 1, 1])], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 1, 0).unwrap();
            readout(t, y)
        })),
        ("conv stride 2", vec![t(&[2, 4, 5, 5]), t(&[2, 4, 3, 3])], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1).unwrap();
            readout(t, y)
        })),
        ("downsample conv", vec![t(&[2, 2, 6, 6]), t(&[3, 2, 3, 3])], Box::new(|t, v| {
            let y = t.downsample_conv(v[0], v[1]).unwrap();
            readout(t, y)
        })),
        ("conv ceil geometry", vec![t(&[2, 2, 5, 5]), t(&[3, 2, 3, 3])], Box::new(move |t, v| {
            let y = t.conv2d_with(v[0], v[1], &odd).unwrap();
            readout(t, y)
        })),
        ("batch norm (train)", vec![t(&[4, 3, 3, 3]), t(&[3]), t(&[3])], Box::new(|t, v| {
            let mut stats = RunningStats::new(3);
            let y = t.batch_norm(v[0], v[1], v[2], BnMode::Train { stats: &mut stats, momentum: BN_MOMENTUM }).unwrap();
            readout(t, y)
        })),
        ("batch norm (eval)", vec![t(&[4, 3, 3, 3]), t(&[3]), t(&[3])], Box::new(move |t, v| {
            let y = t.batch_norm(v[0], v[1], v[2], BnMode::Eval(&bn_stats)).unwrap();
            readout(t, y)
        })),
        ("relu", vec![t(&[2, 3, 4, 6])], Box::new(|t, v| {
            let y = t.relu(v[0]);
            readout(t, y)
        })),
        ("avg pool", vec![t(&[2, 3, 4, 6])], Box::new(|t, v| {
            let y = t.avg_pool(v[0], 2, 3).unwrap();
            readout(t, y)
        })),
        ("flatten", vec![t(&[2, 3, 2, 2])], Box::new(|t, v| {
            let y = t.flatten(v[0]).unwrap();
            readout(t, y)
        })),
        ("linear", vec![t(&[4, 5]), t(&[3, 5]), t(&[3])], Box::new(|t, v| {
            let y = t.linear(v[0], v[1], v[2]).unwrap();
            readout(t, y)
        })),
        ("softmax", vec![t(&[4, 5])], Box::new(|t, v| {
            let y = t.softmax(v[0]).unwrap();
            readout(t, y)
        })),
        ("cross entropy", vec![t(&[4, 5])], Box::new(|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap())),
        ("concat", vec![t(&[2, 2, 3, 3]), t(&[2, 3, 3, 3])], Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]]).unwrap();
            readout(t, y)
        })),
        ("add, scale, sum", vec![t(&[2, 2, 3, 3]), t(&[2, 2, 3, 3])], Box::new(|t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            let l = readout(t, y);
            let s = t.sum(v[0]);
            let s = t.scale(s, 0.3);
            t.add(l, s).unwrap()
        })),
    ]
}

/// Worst finite-difference error of every differentiable op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    op_cases().into_iter().map(|(name, inputs, f)| (name, check_gradients(&inputs, 64, f))).collect()
}

/// Finite-difference check of the cumulative loss of a 4-layer network
/// with classifiers at layers 2 and 4, probing three coordinates of every
/// parameter tensor.
pub fn network_gradient_error(scales: usize, growth: Vec<usize>) -> f64 {
    let mut cfg = small_config(scales, 4, growth, 8);
    cfg.seed = 11;
    cfg.classifiers = Placement::Explicit { layers: vec![2, 4] };
    let mut graph = NetworkGraph::build(&cfg).unwrap();
    let mut r = rng(12);
    let images = random_tensor(&[4, 1, 8, 8], &mut r);
    let labels = [0, 1, 2, 1];
    let weights = vec![1.0, 0.5];
    let (_, grads) = loss_and_grads(&mut graph, &images, &labels, &weights).unwrap();

    let mut worst: f64 = 0.0;
    for p in 0..graph.params().len() {
        let n = graph.params()[p].len();
        for j in (0..n).step_by(n.div_ceil(3)) {
            let orig = graph.params()[p].data()[j];
            let mut at = |v: f64| {
                graph.params_mut()[p].data_mut()[j] = v;
                loss_and_grads(&mut graph, &images, &labels, &weights).unwrap().0
            };
            let numeric = (at(orig + FD_STEP) - at(orig - FD_STEP)) / (2.0 * FD_STEP);
            graph.params_mut()[p].data_mut()[j] = orig;
            worst = worst.max(rel_err(grads[p][j], numeric));
        }
    }
    worst
}

// ---- exit policy ----

/// Expected batch cost computed directly from unnormalised geometric
/// weights.
pub fn oracle_cost(q: f64, costs: &[f64], batch: usize) -> f64 {
    let w: Vec<f64> = (0..costs.len()).map(|k| (1.0 - q).powi(k as i32) * q).collect();
    let z: f64 = w.iter().sum();
    batch as f64 * w.iter().zip(costs).map(|(w, c)| w * c).sum::<f64>() / z
}

pub fn random_costs(r: &mut impl Rng, k: usize) -> Vec<f64> {
    let mut c = 0.0;
    (0..k)
        .map(|_| {
            c += r.random_range(1e3..1e6);
            c
        })
        .collect()
}

/// Solves `cases` random in-range budgets and checks each against the
/// direct cost formula (relative 1e-6) and a 20,000-cell grid bracket.
pub fn solve_budget_against_grid(cases: usize, seed: u64) -> Result<(), String> {
    const GRID: usize = 20_000;
    let mut r = rng(seed);
    for case in 0..cases {
        let k = r.random_range(2..8);
        let costs = random_costs(&mut r, k);
        let batch = r.random_range(1..500);
        let mean = costs.iter().sum::<f64>() / k as f64;
        let budget = batch as f64 * r.random_range(costs[0] * 1.001..mean * 0.999);
        let sol = solve_budget(&costs, batch, budget, DEFAULT_TOLERANCE).map_err(|e| format!("case {case}: {e}"))?;
        if sol.clamp.is_some() {
            return Err(format!("case {case}: unexpected clamp {:?}", sol.clamp));
        }
        let got = oracle_cost(sol.q, &costs, batch);
        if (got - budget).abs() > 1e-6 * budget {
            return Err(format!("case {case}: cost {got} vs budget {budget}"));
        }
        // expected cost falls as q grows; find the grid cell bracketing B
        let grid: Vec<f64> = (0..=GRID).map(|i| Q_MIN + (1.0 - Q_MIN) * i as f64 / GRID as f64).collect();
        let cell = grid
            .windows(2)
            .position(|w| oracle_cost(w[0], &costs, batch) >= budget && oracle_cost(w[1], &costs, batch) <= budget)
            .ok_or_else(|| format!("case {case}: budget not bracketed"))?;
        let slack = 1e-9;
        if !(grid[cell] - slack <= sol.q && sol.q <= grid[cell + 1] + slack) {
            return Err(format!("case {case}: q {} outside oracle cell [{}, {}]", sol.q, grid[cell], grid[cell + 1]));
        }
    }
    Ok(())
}

/// Random confidences rising with depth; `levels` quantises them to
/// create ties.
pub fn synthetic_profile(n: usize, k: usize, seed: u64, levels: Option<f64>) -> ConfidenceProfile {
    let mut r = rng(seed);
    let mut conf = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..k)
            .map(|j| {
                let c: f64 = (0.5 + 0.1 * j as f64 + r.random_range(0.0..0.5)).min(1.0);
                match levels {
                    Some(l) => (c * l).round() / l,
                    None => c,
                }
            })
            .collect();
        correct.push(row.iter().map(|&c| r.random_bool(c)).collect());
        conf.push(row);
    }
    ConfidenceProfile::new(conf, correct).unwrap()
}

pub fn exit_counts(exits: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &e in exits {
        c[e] += 1;
    }
    c
}

pub fn three_way_distribution_error() -> f64 {
    let qk = exit_distribution(0.5, 3).unwrap();
    qk.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

// ---- lazy evaluation ----

pub fn random_graph(r: &mut ChaCha8Rng) -> NetworkGraph {
    loop {
        let scales = r.random_range(1..=3);
        let layers = r.random_range(2..=7);
        let growth = (0..scales).map(|_| 2 * r.random_range(1..=3)).collect();
        let size = [8, 12, 16][r.random_range(0..3)];
        let mut cfg = small_config(scales, layers, growth, size);
        cfg.input.channels = r.random_range(1..=3);
        cfg.reduction = r.random_bool(0.5);
        cfg.densenet_star = r.random_bool(0.3);
        cfg.head_matches_input = r.random_bool(0.3);
        cfg.ablation.dense_connectivity = r.random_bool(0.8);
        cfg.classifiers = match r.random_range(0..3) {
            0 => Placement::Budgeted { count: None },
            1 => Placement::Explicit { layers: (1..=layers).collect() },
            _ => Placement::Explicit { layers: vec![1, layers] },
        };
        cfg.seed = r.random();
        let Ok(mut graph) = NetworkGraph::build(&cfg) else { continue };
        // non-trivial running statistics so eval-mode batch norm matters
        for s in graph.stats_mut() {
            for m in &mut s.mean {
                *m = r.random_range(-0.5..0.5);
            }
            for v in &mut s.var {
                *v = r.random_range(0.5..2.0);
            }
        }
        return graph;
    }
}

pub fn ancestor_union(graph: &NetworkGraph, upto: usize) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<NodeId> = graph.classifiers()[..upto].to_vec();
    while let Some(n) = stack.pop() {
        if seen.insert(n) {
            stack.extend(graph.node(n).inputs.iter().copied());
        }
    }
    seen.remove(&graph.input_node());
    seen
}

/// Runs every lazy prefix against the eager pass on random input. Returns
/// the largest logit difference, or an error naming a FLOP mismatch.
pub fn lazy_eager_gap(graph: &NetworkGraph, r: &mut ChaCha8Rng) -> Result<f64, String> {
    let ev = Evaluator::new(graph);
    let [c, h, w] = graph.input_dims();
    let batch = random_tensor(&[3, c, h, w], r);
    let full = ev.forward_full(&batch).unwrap();
    let table = classifier_costs(graph);
    let mut worst: f64 = 0.0;
    for k in 1..=graph.num_classifiers() {
        let (lazy, flops) = ev.forward_lazy(&batch, k).unwrap();
        if flops != table.classifier_costs[k - 1] {
            return Err(format!("classifier {k}: metered {flops}, C_k {}", table.classifier_costs[k - 1]));
        }
        for (a, b) in lazy.iter().zip(&full) {
            if a.shape() != b.shape() {
                return Err(format!("classifier {k}: shape mismatch"));
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(worst)
}

/// Anytime evaluation at random budgets; errors if any trace overspends.
pub fn anytime_within_budget(graph: &NetworkGraph, r: &mut ChaCha8Rng) -> Result<(), String> {
    let ev = Evaluator::new(graph);
    let [c, h, w] = graph.input_dims();
    let batch = random_tensor(&[4, c, h, w], r);
    let costs = ev.costs().to_vec();
    let total = *costs.last().unwrap();
    if ev.evaluate_anytime(&batch, costs[0] - 1).is_ok() {
        return Err("budget below C_1 produced a prediction".into());
    }
    for _ in 0..8 {
        let budget = r.random_range(costs[0]..=total + total / 5);
        let k = ev.anytime_classifier(budget).unwrap();
        for t in ev.evaluate_anytime(&batch, budget).unwrap() {
            if t.flops > budget || t.exit != k + 1 || t.flops != costs[k] {
                return Err(format!("budget {budget}: exit {} spent {}", t.exit, t.flops));
            }
        }
    }
    Ok(())
}

// ---- cost golden files ----

/// Hand-derived per-node FLOPs and `C_k` for the micro configs in
/// `tests/golden`.
pub const MICRO_CONFIGS: [(&str, &[u64], &[u64]); 3] = [
    // one scale
    ("micro_a", &[0, 5888, 6192, 13_184, 0, 8496], &[12_080, 33_760]),
    // two scales; the last finest-scale transform feeds no classifier
    ("micro_b", &[0, 5888, 4928, 1560, 13_184, 0, 2064, 4560, 0, 2136], &[12_376, 21_136]),
    // two scales with transitions before a coarse-only block
    ("micro_c", &[0, 5888, 4928, 1560, 1664, 416, 944, 1808, 0, 1560], &[12_376, 18_768]),
];

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares a micro config against its hand-derived numbers and its golden
/// CSV tables. `MSDNET_BLESS` rewrites the tables first.
pub fn check_golden(name: &str, nodes: &[u64], costs: &[u64]) -> Result<(), String> {
    let text = fs::read_to_string(golden_path(&format!("{name}.toml"))).map_err(|e| e.to_string())?;
    let cfg: NetworkConfig = toml::from_str(&text).map_err(|e| e.to_string())?;
    let graph = NetworkGraph::build(&cfg).map_err(|e| e.to_string())?;
    let table = classifier_costs(&graph);
    if table.node_flops != nodes {
        return Err(format!("{name}: node FLOPs {:?}", table.node_flops));
    }
    if table.classifier_costs != costs {
        return Err(format!("{name}: C_k {:?}", table.classifier_costs));
    }
    let mut node_csv = Vec::new();
    write_node_csv(&graph, &table, &mut node_csv).unwrap();
    let mut cost_csv = Vec::new();
    write_classifier_csv(&graph, &table, &mut cost_csv).unwrap();
    for (ext, got) in [("nodes", node_csv), ("costs", cost_csv)] {
        let path = golden_path(&format!("{name}.{ext}.csv"));
        if std::env::var_os("MSDNET_BLESS").is_some() {
            fs::write(&path, &got).unwrap();
        }
        let want = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if got != want {
            return Err(format!("{name}: {ext} table differs from {}", path.display()));
        }
    }
    Ok(())
}
