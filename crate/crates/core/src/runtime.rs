//! Inference: eager full forward, lazy per-classifier evaluation, anytime
//! prediction under a FLOP budget and budgeted batches with early exits.
//!
//! Everything here runs batch norm in evaluation mode, so a sample's
//! outputs never depend on which other samples share its batch.

use std::collections::BTreeSet;
use std::io::Write;

use serde::Serialize;

use crate::error::{input_err, Error, Result};
use crate::exit_policy::{ConfidenceProfile, ExitPlan};
use crate::graph::{apply_eval, NetworkGraph, NodeId};
use crate::tensor::{ops, Tensor};

/// Node ids to execute before each classifier, in topological order.
/// `batch_k` holds the ancestors of classifier `k` (and the classifier
/// itself) not already needed by an earlier classifier.
pub fn lazy_closures(graph: &NetworkGraph) -> Vec<Vec<NodeId>> {
    let mut done: BTreeSet<NodeId> = BTreeSet::new();
    let mut batches = Vec::with_capacity(graph.num_classifiers());
    for &clf in graph.classifiers() {
        let batch: Vec<NodeId> = graph.ancestors(clf).into_iter().filter(|n| !done.contains(n)).collect();
        done.extend(batch.iter().copied());
        batches.push(batch);
    }
    batches
}

/// What happened to one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalTrace {
    pub sample: usize,
    /// 1-based classifier index.
    pub exit: usize,
    pub confidence: f64,
    pub prediction: usize,
    pub flops: u64,
    #[serde(skip)]
    pub logits: Option<Vec<Vec<f64>>>,
}

/// Writes `sample,exit,confidence,prediction,label,flops`.
pub fn write_traces_csv<W: Write>(traces: &[EvalTrace], labels: &[usize], out: W) -> Result<()> {
    if traces.len() != labels.len() {
        return Err(input_err("one label per trace is required"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample", "exit", "confidence", "prediction", "label", "flops"])?;
    for (t, label) in traces.iter().zip(labels) {
        w.write_record([
            t.sample.to_string(),
            t.exit.to_string(),
            format!("{:e}", t.confidence),
            t.prediction.to_string(),
            label.to_string(),
            t.flops.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Max softmax probability and argmax of each row of `logits`.
pub fn confidences(logits: &Tensor) -> Result<Vec<(f64, usize)>> {
    let probs = ops::softmax(logits)?;
    let [_, c] = probs.dims2()?;
    Ok(probs
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            (row[best], best)
        })
        .collect())
}

/// Read-only evaluator over a built graph with precomputed lazy batches.
pub struct Evaluator<'g> {
    graph: &'g NetworkGraph,
    batches: Vec<Vec<NodeId>>,
    batch_flops: Vec<u64>,
    costs: Vec<u64>,
}

/// Node outputs computed so far for a set of samples.
struct Cache {
    values: Vec<Option<Tensor>>,
}

impl Cache {
    fn new(graph: &NetworkGraph, input: Tensor) -> Self {
        let mut values = vec![None; graph.nodes().len()];
        values[graph.input_node().0] = Some(input);
        Self { values }
    }

    fn select(&self, rows: &[usize]) -> Result<Self> {
        let values = self
            .values
            .iter()
            .map(|v| v.as_ref().map(|t| t.select_batch(rows)).transpose())
            .collect::<Result<_>>()?;
        Ok(Self { values })
    }
}

impl<'g> Evaluator<'g> {
    pub fn new(graph: &'g NetworkGraph) -> Self {
        let batches = lazy_closures(graph);
        let batch_flops: Vec<u64> =
            batches.iter().map(|b| b.iter().map(|n| graph.node_flops()[n.0]).sum()).collect();
        let costs = batch_flops
            .iter()
            .scan(0u64, |acc, f| {
                *acc += f;
                Some(*acc)
            })
            .collect();
        Self { graph, batches, batch_flops, costs }
    }

    pub fn graph(&self) -> &NetworkGraph {
        self.graph
    }

    pub fn batches(&self) -> &[Vec<NodeId>] {
        &self.batches
    }

    /// Cumulative cost of running lazy batches `1..=k`, per sample.
    pub fn costs(&self) -> &[u64] {
        &self.costs
    }

    fn run(&self, cache: &mut Cache, nodes: &[NodeId]) -> Result<()> {
        for &id in nodes {
            let node = self.graph.node(id);
            let out = {
                let inputs: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|i| cache.values[i.0].as_ref().expect("lazy batches are topological"))
                    .collect();
                apply_eval(self.graph, node, &inputs)?
            };
            if !out.is_finite() {
                return Err(Error::NonFinite { op: node.kind.as_str() });
            }
            cache.values[id.0] = Some(out);
        }
        Ok(())
    }

    fn logits(&self, cache: &Cache, k: usize) -> Tensor {
        cache.values[self.graph.classifiers()[k].0].clone().expect("classifier evaluated")
    }

    /// Eager reference: every node once, in topological order. Returns
    /// one logits tensor per classifier.
    pub fn forward_full(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.graph.check_batch(batch)?;
        let mut cache = Cache::new(self.graph, batch.clone());
        let all: Vec<NodeId> = self.graph.nodes().iter().skip(1).map(|n| n.id).collect();
        self.run(&mut cache, &all)?;
        Ok((0..self.graph.num_classifiers()).map(|k| self.logits(&cache, k)).collect())
    }

    /// Runs lazy batches `1..=k` in turn, returning the logits of every
    /// classifier and the FLOPs metered per sample.
    pub fn forward_lazy(&self, batch: &Tensor, up_to: usize) -> Result<(Vec<Tensor>, u64)> {
        self.graph.check_batch(batch)?;
        if up_to == 0 || up_to > self.batches.len() {
            return Err(input_err(format!("classifier {up_to} does not exist")));
        }
        let mut cache = Cache::new(self.graph, batch.clone());
        let mut logits = Vec::with_capacity(up_to);
        let mut flops = 0;
        for k in 0..up_to {
            self.run(&mut cache, &self.batches[k])?;
            flops += self.metered(&self.batches[k]);
            logits.push(self.logits(&cache, k));
        }
        Ok((logits, flops))
    }

    fn metered(&self, nodes: &[NodeId]) -> u64 {
        nodes.iter().map(|n| self.graph.node_flops()[n.0]).sum()
    }

    /// Deepest classifier whose cumulative cost fits in `budget`, 0-based.
    pub fn anytime_classifier(&self, budget: u64) -> Result<usize> {
        match self.costs.iter().rposition(|&c| c <= budget) {
            Some(k) => Ok(k),
            None => Err(Error::BudgetTooSmall { budget, required: self.costs[0] }),
        }
    }

    /// Runs whole lazy batches while the next one still fits in `budget`
    /// and reports the most recent prediction for each sample.
    pub fn evaluate_anytime(&self, batch: &Tensor, budget: u64) -> Result<Vec<EvalTrace>> {
        self.graph.check_batch(batch)?;
        let mut cache = Cache::new(self.graph, batch.clone());
        let mut spent = 0u64;
        let mut last = None;
        for (k, nodes) in self.batches.iter().enumerate() {
            if spent + self.batch_flops[k] > budget {
                break;
            }
            self.run(&mut cache, nodes)?;
            spent += self.metered(nodes);
            last = Some(k);
        }
        let k = last.ok_or(Error::BudgetTooSmall { budget, required: self.costs[0] })?;
        let conf = confidences(&self.logits(&cache, k))?;
        Ok(conf
            .into_iter()
            .enumerate()
            .map(|(i, (confidence, prediction))| EvalTrace {
                sample: i,
                exit: k + 1,
                confidence,
                prediction,
                flops: spent,
                logits: None,
            })
            .collect())
    }

    /// Budgeted dynamic evaluation: samples leave at the first classifier
    /// whose max softmax probability reaches its threshold; the last
    /// classifier always emits. Samples that exit are dropped from the
    /// cached activations before the next lazy batch runs.
    pub fn evaluate_budgeted(&self, batch: &Tensor, plan: &ExitPlan) -> Result<Vec<EvalTrace>> {
        self.graph.check_batch(batch)?;
        let k_total = self.batches.len();
        if plan.num_classifiers() != k_total {
            return Err(Error::Config(format!(
                "exit plan has {} classifiers, network has {k_total}",
                plan.num_classifiers()
            )));
        }
        let n = batch.batch_size();
        let mut out: Vec<Option<EvalTrace>> = vec![None; n];
        let mut alive: Vec<usize> = (0..n).collect();
        let mut cache = Cache::new(self.graph, batch.clone());
        let mut spent = 0u64;
        for k in 0..k_total {
            self.run(&mut cache, &self.batches[k])?;
            spent += self.metered(&self.batches[k]);
            let conf = confidences(&self.logits(&cache, k))?;
            let mut keep = Vec::with_capacity(alive.len());
            let mut still = Vec::with_capacity(alive.len());
            for (row, &(c, pred)) in conf.iter().enumerate() {
                let sample = alive[row];
                if k + 1 == k_total || c >= plan.thresholds[k] {
                    out[sample] = Some(EvalTrace {
                        sample,
                        exit: k + 1,
                        confidence: c,
                        prediction: pred,
                        flops: spent,
                        logits: None,
                    });
                } else {
                    keep.push(row);
                    still.push(sample);
                }
            }
            if still.is_empty() {
                break;
            }
            if still.len() != alive.len() {
                cache = cache.select(&keep)?;
            }
            alive = still;
        }
        Ok(out.into_iter().map(|t| t.expect("every sample exits")).collect())
    }

    /// Max-softmax confidence and correctness of every classifier on every
    /// sample, computed along the lazy path.
    pub fn confidence_profile(&self, batch: &Tensor, labels: &[usize]) -> Result<ConfidenceProfile> {
        if labels.len() != batch.batch_size() {
            return Err(input_err("one label per sample is required"));
        }
        let (logits, _) = self.forward_lazy(batch, self.batches.len())?;
        let per_k: Vec<Vec<(f64, usize)>> = logits.iter().map(confidences).collect::<Result<_>>()?;
        let conf = (0..labels.len()).map(|i| per_k.iter().map(|c| c[i].0).collect()).collect();
        let correct = (0..labels.len()).map(|i| per_k.iter().map(|c| c[i].1 == labels[i]).collect()).collect();
        ConfidenceProfile::new(conf, correct)
    }

    /// Per-classifier accuracy on a labelled batch.
    pub fn accuracies(&self, batch: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let profile = self.confidence_profile(batch, labels)?;
        Ok((0..profile.num_classifiers()).map(|k| profile.accuracy(k)).collect())
    }
}

/// Average FLOPs per sample of a set of traces.
pub fn average_flops(traces: &[EvalTrace]) -> f64 {
    traces.iter().map(|t| t.flops as f64).sum::<f64>() / traces.len() as f64
}

/// Fraction of traces whose prediction equals the label.
pub fn trace_accuracy(traces: &[EvalTrace], labels: &[usize]) -> f64 {
    traces.iter().zip(labels).filter(|(t, &l)| t.prediction == l).count() as f64 / traces.len() as f64
}
