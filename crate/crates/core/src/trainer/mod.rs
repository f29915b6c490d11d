//! Training: weighted cumulative loss over every classifier, minibatch SGD
//! with Nesterov momentum, per-epoch validation metrics.

mod checkpoint;
mod data;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{generate_mixture_dataset, Dataset, MixtureConfig, Split, IMAGES_FILE, LABELS_FILE};
pub use optim::{default_drops, lr_schedule, sgd_nesterov_step, SgdParams, SgdState};

use crate::error::{config_err, Error, Result};
use crate::graph::{apply_tape, NetworkGraph, TapeParams};
use crate::runtime::{lazy_closures, Evaluator};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by
    /// `lr_factor`. Defaults to one half and three quarters of `epochs`.
    #[serde(default)]
    pub lr_drops: Option<Vec<usize>>,
    #[serde(default = "defaults::lr_factor")]
    pub lr_factor: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    /// One weight per classifier; all ones when absent.
    #[serde(default)]
    pub loss_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f64 {
        0.1
    }
    pub fn lr_factor() -> f64 {
        0.1
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            lr_drops: None,
            lr_factor: defaults::lr_factor(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            loss_weights: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classifiers: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err(format!("train.learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err(format!("train.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(config_err("train.batch_size must be positive"));
        }
        if let Some(drops) = &self.lr_drops {
            if drops.windows(2).any(|w| w[0] > w[1]) {
                return Err(config_err("train.lr_drops must be sorted"));
            }
        }
        let w = self.weights(num_classifiers);
        if w.len() != num_classifiers {
            return Err(config_err(format!(
                "train.loss_weights has {} entries, network has {num_classifiers} classifiers",
                w.len()
            )));
        }
        if w.iter().any(|&x| !(x >= 0.0)) {
            return Err(config_err("train.loss_weights must be non-negative"));
        }
        Ok(())
    }

    pub fn weights(&self, num_classifiers: usize) -> Vec<f64> {
        self.loss_weights.clone().unwrap_or_else(|| vec![1.0; num_classifiers])
    }

    pub fn drops(&self) -> Vec<usize> {
        self.lr_drops.clone().unwrap_or_else(|| default_drops(self.epochs))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.learning_rate, &self.drops(), self.lr_factor)
    }
}

/// Records the whole network on `tape` and returns each classifier's
/// logits. Only nodes some classifier depends on are recorded.
pub fn record_forward(
    tape: &mut Tape,
    graph: &NetworkGraph,
    params: &TapeParams,
    stats: &mut [crate::tensor::RunningStats],
    input: Var,
    train: bool,
) -> Result<Vec<Var>> {
    let mut vars: Vec<Option<Var>> = vec![None; graph.nodes().len()];
    vars[graph.input_node().0] = Some(input);
    for id in lazy_closures(graph).into_iter().flatten() {
        let node = graph.node(id);
        let inputs: Vec<Var> = node.inputs.iter().map(|i| vars[i.0].expect("topological order")).collect();
        vars[id.0] = Some(apply_tape(tape, node, &inputs, params, stats, train)?);
    }
    Ok(graph.classifiers().iter().map(|c| vars[c.0].expect("classifier recorded")).collect())
}

/// `Σ_k w_k · CE_k`, each cross-entropy averaged over the batch.
pub fn cumulative_loss(tape: &mut Tape, logits: &[Var], labels: &[usize], weights: &[f64]) -> Result<Var> {
    if weights.len() != logits.len() || logits.is_empty() {
        return Err(config_err(format!("{} loss weights for {} classifiers", weights.len(), logits.len())));
    }
    let mut total: Option<Var> = None;
    for (&l, &w) in logits.iter().zip(weights) {
        let ce = tape.cross_entropy(l, labels)?;
        let term = tape.scale(ce, w);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("at least one classifier"))
}

/// Loss and parameter gradients for one minibatch, in train mode. Running
/// statistics in `graph` are updated.
pub fn loss_and_grads(graph: &mut NetworkGraph, images: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, graph);
    let x = tape.leaf(images.clone());
    let mut stats = graph.stats().to_vec();
    let logits = record_forward(&mut tape, graph, &params, &mut stats, x, true)?;
    let loss = cumulative_loss(&mut tape, &logits, labels, weights)?;
    let value = tape.value(loss).item();
    graph.stats_mut().clone_from_slice(&stats);
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = params.vars().iter().map(|&v| tape.grad(v).expect("parameter gradient").to_vec()).collect();
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean cumulative loss over the epoch's samples.
    pub train_loss: f64,
    /// Per-classifier validation accuracy (empty without a validation split).
    pub val_accuracy: Vec<f64>,
}

/// Trains `graph` on the training split of `data`, evaluating the
/// validation split after every epoch.
pub fn train(graph: &mut NetworkGraph, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    cfg.validate(graph.num_classifiers())?;
    if data.num_classes != graph.config().num_classes {
        return Err(config_err(format!(
            "dataset has {} classes, network has {}",
            data.num_classes,
            graph.config().num_classes
        )));
    }
    if data.indices(Split::Train).is_empty() {
        return Err(Error::Input("dataset has no training samples".into()));
    }
    let train_set = data.subset(Split::Train)?;
    let val_set = if data.indices(Split::Val).is_empty() { None } else { Some(data.subset(Split::Val)?) };
    graph.check_batch(&train_set.images)?;
    let weights = cfg.weights(graph.num_classifiers());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::new(graph.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let hp = SgdParams { lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let images = train_set.images.select_batch(rows)?;
            let labels: Vec<usize> = rows.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, grads) = loss_and_grads(graph, &images, &labels, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, step, loss });
            }
            let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            sgd_nesterov_step(graph.params_mut(), &grads, &mut state, hp);
            loss_sum += loss * rows.len() as f64;
            step += 1;
        }
        let val_accuracy = match &val_set {
            Some(v) => Evaluator::new(graph).accuracies(&v.images, &v.labels)?,
            None => Vec::new(),
        };
        let m = EpochMetrics { epoch: epoch + 1, lr, train_loss: loss_sum / train_set.len() as f64, val_accuracy };
        log::info!("epoch {:>3}  lr {:.4}  loss {:.5}  val {:?}", m.epoch, m.lr, m.train_loss, m.val_accuracy);
        metrics.push(m);
    }
    Ok(metrics)
}

/// Writes `epoch,lr,train_loss,val_acc_1..val_acc_K`.
pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], num_classifiers: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epoch".to_string(), "lr".into(), "train_loss".into()];
    header.extend((1..=num_classifiers).map(|k| format!("val_acc_{k}")));
    w.write_record(&header)?;
    for m in metrics {
        let mut row = vec![m.epoch.to_string(), m.lr.to_string(), m.train_loss.to_string()];
        row.extend((0..num_classifiers).map(|k| m.val_accuracy.get(k).map(f64::to_string).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
