//! The multi-scale dense network as an explicit DAG.
//!
//! Each [`GraphNode`] is one composite layer operation (a seed conv, a
//! horizontal `h` or diagonal `h̃` transform, a channel concatenation, a
//! transition or a classifier head) expressed as a list of [`Primitive`]s.
//! Nodes are stored in a topological order, so evaluating them in index
//! order is always valid.

mod builder;
pub mod config;
mod exec;
pub mod placement;
pub mod summary;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

pub use config::{Ablation, InputShape, NetworkConfig, Placement, CONFIG_VERSION};
pub use exec::{apply_eval, apply_tape, TapeParams};
pub use placement::{classifier_placement, PlacementKind};

use crate::error::{input_err, Result};
use crate::tensor::ops::ConvGeometry;
use crate::tensor::{RunningStats, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Input,
    SeedConv,
    /// Regular (same-scale) transform `h`.
    Horizontal,
    /// Strided (finer-to-coarser) transform `h̃`.
    Diagonal,
    Concat,
    Transition,
    ClassifierHead,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::SeedConv => "seed-conv",
            NodeKind::Horizontal => "h-transform",
            NodeKind::Diagonal => "h~-transform",
            NodeKind::Concat => "concat",
            NodeKind::Transition => "transition",
            NodeKind::ClassifierHead => "classifier-head",
        }
    }
}

/// A single kernel invocation inside a node, with its shapes resolved.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Conv { weight: ParamId, cin: usize, cout: usize, geometry: ConvGeometry },
    BatchNorm { gamma: ParamId, beta: ParamId, stats: StatsId, channels: usize, h: usize, w: usize },
    Relu { channels: usize, h: usize, w: usize },
    AvgPool { channels: usize, kh: usize, kw: usize, in_h: usize, in_w: usize },
    Flatten { features: usize },
    Linear { weight: ParamId, bias: ParamId, fin: usize, fout: usize },
}

/// Per-sample output shape of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum NodeShape {
    Map { channels: usize, h: usize, w: usize },
    Logits { classes: usize },
}

impl NodeShape {
    pub fn channels(&self) -> usize {
        match *self {
            NodeShape::Map { channels, .. } => channels,
            NodeShape::Logits { classes } => classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: NodeId,
    pub kind: NodeKind,
    /// 1-based scale (1 = finest). 0 for the input node.
    pub scale: usize,
    /// 1-based layer. 0 for the input node.
    pub layer: usize,
    /// Nodes whose outputs are concatenated (in order) to form this node's input.
    pub inputs: Vec<NodeId>,
    pub primitives: Vec<Primitive>,
    pub shape: NodeShape,
}

/// The built network: structure, parameters and batch-norm statistics.
#[derive(Clone, Debug)]
pub struct NetworkGraph {
    config: NetworkConfig,
    nodes: Vec<GraphNode>,
    classifiers: Vec<NodeId>,
    classifier_layers: Vec<usize>,
    history: BTreeMap<(usize, usize), NodeId>,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    stats: Vec<RunningStats>,
    node_flops: Vec<u64>,
}

impl NetworkGraph {
    /// Builds and initialises the network described by `config`.
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        builder::build(config)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn input_node(&self) -> NodeId {
        NodeId(0)
    }

    /// Classifier heads in layer order.
    pub fn classifiers(&self) -> &[NodeId] {
        &self.classifiers
    }

    pub fn num_classifiers(&self) -> usize {
        self.classifiers.len()
    }

    pub fn classifier_layers(&self) -> &[usize] {
        &self.classifier_layers
    }

    /// Node holding the feature map a layer exposes at a scale (the dense
    /// history, or just the new features when dense connectivity is off).
    pub fn feature_node(&self, layer: usize, scale: usize) -> Option<NodeId> {
        self.history.get(&(layer, scale)).copied()
    }

    /// All `(layer, scale)` positions that produce a feature map.
    pub fn feature_positions(&self) -> Vec<(usize, usize)> {
        self.history.keys().copied().collect()
    }

    pub fn channels_at(&self, layer: usize, scale: usize) -> Option<usize> {
        self.feature_node(layer, scale).map(|id| self.node(id).shape.channels())
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    /// Per-sample FLOPs of each node, indexed by node id.
    pub fn node_flops(&self) -> &[u64] {
        &self.node_flops
    }

    /// Mutable access to parameters and statistics at once.
    pub fn state_mut(&mut self) -> (&mut [Tensor], &mut [RunningStats]) {
        (&mut self.params, &mut self.stats)
    }

    /// Replaces parameters and statistics, checking shapes.
    pub fn load_state(&mut self, params: Vec<Tensor>, stats: Vec<RunningStats>) -> Result<()> {
        if params.len() != self.params.len() || stats.len() != self.stats.len() {
            return Err(input_err(format!(
                "state has {} tensors / {} stats, network needs {} / {}",
                params.len(),
                stats.len(),
                self.params.len(),
                self.stats.len()
            )));
        }
        for (i, (new, old)) in params.iter().zip(&self.params).enumerate() {
            if new.shape() != old.shape() {
                return Err(input_err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.param_names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        for (new, old) in stats.iter().zip(&self.stats) {
            if new.channels() != old.channels() || new.var.len() != old.var.len() {
                return Err(input_err("running statistics channel mismatch"));
            }
        }
        self.params = params;
        self.stats = stats;
        Ok(())
    }

    /// Every node `id` transitively depends on, including itself but
    /// excluding the input node.
    pub fn ancestors(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if n == self.input_node() || !seen.insert(n) {
                continue;
            }
            stack.extend(self.nodes[n.0].inputs.iter().copied());
        }
        seen
    }

    /// Per-sample input shape `[C, H, W]`.
    pub fn input_dims(&self) -> [usize; 3] {
        let i = self.config.input;
        [i.channels, i.height, i.width]
    }

    /// Checks a batch tensor against the configured input shape.
    pub fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [_, c, h, w] = batch.dims4()?;
        if [c, h, w] != self.input_dims() {
            return Err(input_err(format!(
                "batch has per-sample shape [{c}, {h}, {w}], network expects {:?}",
                self.input_dims()
            )));
        }
        Ok(())
    }
}
